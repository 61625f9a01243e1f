#include <cmath>
#include <cstring>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "qatforge/model.hpp"
#include "qatforge/rng.hpp"

using namespace qatforge;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0;
}

ConformerBlockConfig toy_block(int dim, int heads, int exp = 4, int conv = 0,
                               bool causal = false) {
  ConformerBlockConfig b;
  b.model_dim = dim;
  b.num_heads = heads;
  b.ffn_expansion = exp;
  b.conv_kernel = conv;
  b.causal = causal;
  return b;
}

// closed-form parameter count of one block
int64_t block_param_formula(const ConformerBlockConfig& c) {
  const int64_t d = c.model_dim, e = int64_t(c.ffn_expansion) * d;
  int64_t n = 0;
  n += 2 * (d * e + e + e * d + d);              // two FFNs
  if (c.num_heads > 0) n += 4 * (d * d + d);     // q,k,v,o with biases
  int64_t lns = 3;                               // ffn_pre, ffn_post, final
  if (c.num_heads > 0) lns += 1;
  if (c.conv_kernel > 0) {
    lns += 1;
    n += int64_t(c.conv_kernel) * d + d;         // kernel + bias
  }
  n += lns * 2 * d;
  return n;
}

Tensor random_input(Rng& rng, Shape shape) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(-1.0f, 1.0f);
  return t;
}

}  // namespace

TEST_CASE("encoder parameter count matches the closed form") {
  auto blk = toy_block(16, 2);
  Model m = build_encoder(single_pass(2, blk), 1);
  CHECK(m.param_count() == 2 * block_param_formula(blk));

  auto blk_conv = toy_block(16, 2, 4, 3);
  Model mc = build_encoder(single_pass(2, blk_conv), 1);
  CHECK(mc.param_count() == 2 * block_param_formula(blk_conv));

  auto no_attn = toy_block(16, 0);
  Model mn = build_encoder(single_pass(1, no_attn), 1);
  CHECK(mn.param_count() == block_param_formula(no_attn));
}

TEST_CASE("same seed yields bit-identical weights") {
  auto cfg = single_pass(2, toy_block(16, 2));
  Model a = build_encoder(cfg, 42);
  Model b = build_encoder(cfg, 42);
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(bit_equal(pa[i]->value, pb[i]->value));
  Model c = build_encoder(cfg, 43);
  bool any_diff = false;
  auto pc = c.parameters();
  for (size_t i = 0; i < pa.size() && !any_diff; ++i)
    any_diff = !bit_equal(pa[i]->value, pc[i]->value);
  CHECK(any_diff);
}

TEST_CASE("invalid configurations are rejected") {
  CHECK_THROWS_AS(build_encoder(single_pass(1, toy_block(16, 3)), 1),
                  std::invalid_argument);  // heads do not divide dim
  CHECK_THROWS_AS(build_encoder(single_pass(1, toy_block(16, 2, 4, 4)), 1),
                  std::invalid_argument);  // even conv kernel
  CHECK_THROWS_AS(build_encoder(single_pass(0, toy_block(16, 2)), 1),
                  std::invalid_argument);
  EncoderConfig bad = two_pass_cascade(2, 2, toy_block(16, 2), toy_block(16, 2));
  bad.blocks[3].causal = true;  // second pass must be non-causal
  CHECK_THROWS_AS(build_encoder(bad, 1), std::invalid_argument);
}

TEST_CASE("causal blocks ignore future frames bit-exactly") {
  Rng rng(7);
  for (int conv : {0, 3}) {
    auto cfg = single_pass(2, toy_block(16, 2, 2, conv, /*causal=*/true));
    Model m = build_encoder(cfg, 9);
    const int64_t T = 6, D = 16, t_cut = 2;
    Tensor x = random_input(rng, {1, T, D});
    Tensor x_noise = x;
    for (int64_t ti = t_cut + 1; ti < T; ++ti)
      for (int64_t di = 0; di < D; ++di)
        x_noise.at(ti * D + di) = rng.uniform(-5.0f, 5.0f);
    Tape ta;
    Tensor ya = ta.value(m.encode(ta, ta.input(x)));
    Tape tb;
    Tensor yb = tb.value(m.encode(tb, tb.input(x_noise)));
    for (int64_t ti = 0; ti <= t_cut; ++ti)
      for (int64_t di = 0; di < D; ++di)
        REQUIRE(ya.at(ti * D + di) == yb.at(ti * D + di));
  }
}

TEST_CASE("non-causal blocks do see future frames") {
  Rng rng(8);
  auto cfg = single_pass(1, toy_block(16, 2));
  Model m = build_encoder(cfg, 9);
  Tensor x = random_input(rng, {1, 4, 16});
  Tensor x2 = x;
  x2.at(3 * 16 + 5) += 1.0f;  // change the last frame
  Tape ta, tb;
  Tensor ya = ta.value(m.encode(ta, ta.input(x)));
  Tensor yb = tb.value(m.encode(tb, tb.input(x2)));
  bool differs = false;
  for (int64_t di = 0; di < 16 && !differs; ++di)
    differs = ya.at(di) != yb.at(di);  // frame 0 output
  CHECK(differs);
}

TEST_CASE("plan_uniform lists exactly the quantizable weights") {
  Model m = build_task_model(single_pass(2, toy_block(16, 2)),
                             TaskHeadConfig{8, 4}, 3);
  auto plan = plan_uniform(m, QuantSpec::i4w());
  CHECK(plan.entries().size() == 2 * 8);  // 4 attention + 4 FFN per block
  std::set<std::string> ids;
  for (const auto& [id, spec] : plan.entries()) {
    ids.insert(id);
    CHECK(spec == QuantSpec::i4w());
  }
  CHECK(ids.size() == plan.entries().size());
  CHECK(ids.count("pass1.block0.attn.wq") == 1);
  CHECK(ids.count("pass1.block1.ffn_post.w2") == 1);
  // float plan marks every layer float
  auto fplan = plan_uniform(m, QuantSpec::make_float());
  for (const auto& [id, spec] : fplan.entries()) CHECK(spec.is_float());
  // I8WA assigns both widths
  auto wa = plan_uniform(m, QuantSpec::i8wa());
  for (const auto& [id, spec] : wa.entries()) {
    CHECK(spec.weight_bits == 8);
    CHECK(spec.activation_bits == 8);
  }
}

TEST_CASE("plan coverage: every quantizable layer exactly once") {
  Model m = build_encoder(default_two_pass_toy(), 5);
  auto plan = plan_uniform(m, QuantSpec::i8w());
  auto ids = m.quantizable_layer_ids();
  CHECK(plan.entries().size() == ids.size());
  for (const auto& id : ids) CHECK(plan.lists(id));
  CHECK_NOTHROW(validate_plan(m, plan));
}

TEST_CASE("plan_first_k boundaries and structure") {
  Model m = build_encoder(
      two_pass_cascade(7, 6, toy_block(8, 2, 2, 0, true), toy_block(8, 2, 2)),
      11);
  auto i4 = QuantSpec::i4w(), i8 = QuantSpec::i8w();

  auto k0 = plan_first_k(m, 0, i4, i8);
  for (const auto& [id, spec] : k0.entries()) CHECK(spec == i8);

  auto kall = plan_first_k(m, 7, i4, i8);
  for (const auto& [id, spec] : kall.entries()) CHECK(spec == i4);

  auto k3 = plan_first_k(m, 3, i4, i8);
  for (const auto& [id, spec] : k3.entries()) {
    auto blockpos = id.find(".block");
    int blk = std::stoi(id.substr(blockpos + 6, 1));
    CHECK(spec == (blk < 3 ? i4 : i8));
  }

  CHECK_THROWS_AS(plan_first_k(m, -1, i4, i8), std::invalid_argument);
  CHECK_THROWS_AS(plan_first_k(m, 8, i4, i8), std::invalid_argument);
}

TEST_CASE("plan_exclude_first_last keeps the edges at the default") {
  auto i4 = QuantSpec::i4w(), i8 = QuantSpec::i8w();
  {
    Model m = build_encoder(single_pass(3, toy_block(8, 2, 2)), 1);
    auto plan = plan_exclude_first_last(m, i4, i8);
    for (const auto& [id, spec] : plan.entries()) {
      bool middle = id.find("block1.") != std::string::npos;
      CHECK(spec == (middle ? i4 : i8));
    }
  }
  {
    Model m = build_encoder(
        single_pass(7, toy_block(8, 2, 2, 0, /*causal=*/true)), 1);
    auto plan = plan_exclude_first_last(m, i4, i8);
    int n_int4_blocks = 0;
    std::set<int> int4_blocks;
    for (const auto& [id, spec] : plan.entries())
      if (spec == i4) {
        auto p = id.find(".block");
        int4_blocks.insert(std::stoi(id.substr(p + 6, 1)));
        ++n_int4_blocks;
      }
    CHECK(int4_blocks == std::set<int>{1, 2, 3, 4, 5});
    CHECK(n_int4_blocks == 5 * 8);
  }
  Model small = build_encoder(single_pass(2, toy_block(8, 2, 2)), 1);
  CHECK_THROWS_AS(plan_exclude_first_last(small, i4, i8),
                  std::invalid_argument);
}

TEST_CASE("plan_exclude_self_attention splits attention from FFN") {
  auto i4 = QuantSpec::i4w(), i8 = QuantSpec::i8w();
  Model m = build_encoder(single_pass(1, toy_block(8, 2, 2)), 1);
  auto plan = plan_exclude_self_attention(m, i4, i8);
  int ffn4 = 0, attn8 = 0;
  for (const auto& [id, spec] : plan.entries()) {
    if (id.find(".attn.") != std::string::npos) {
      CHECK(spec == i8);
      ++attn8;
    } else {
      CHECK(spec == i4);
      ++ffn4;
    }
  }
  CHECK(ffn4 == 4);
  CHECK(attn8 == 4);

  // FFN-only ablation: exclusion is vacuous
  Model mn = build_encoder(single_pass(2, toy_block(8, 0, 2)), 1);
  auto pe = plan_exclude_self_attention(mn, i4, i8);
  auto pu = plan_uniform(mn, i4);
  REQUIRE(pe.entries().size() == pu.entries().size());
  for (size_t i = 0; i < pe.entries().size(); ++i) {
    CHECK(pe.entries()[i].first == pu.entries()[i].first);
    CHECK(pe.entries()[i].second == pu.entries()[i].second);
  }
}

TEST_CASE("plan_per_pass targets one pass only") {
  auto i4 = QuantSpec::i4w(), i8 = QuantSpec::i8w();
  Model m = build_encoder(default_two_pass_toy(), 2);
  auto p1 = plan_per_pass(m, 1, i4, i8);
  for (const auto& [id, spec] : p1.entries())
    CHECK(spec == (id.rfind("pass1.", 0) == 0 ? i4 : i8));
  auto p2 = plan_per_pass(m, 2, i4, i8);
  for (const auto& [id, spec] : p2.entries())
    CHECK(spec == (id.rfind("pass2.", 0) == 0 ? i4 : i8));

  Model sp = build_encoder(single_pass(3, toy_block(8, 2, 2)), 1);
  CHECK_THROWS_AS(plan_per_pass(sp, 1, i4, i8), std::invalid_argument);
  CHECK_THROWS_AS(plan_per_pass(m, 3, i4, i8), std::invalid_argument);
}

TEST_CASE("validate_plan rejects bad entries") {
  Model m = build_encoder(single_pass(1, toy_block(8, 2, 2, 3)), 1);
  LayerQuantPlan bad;
  bad.set("pass1.block9.attn.wq", QuantSpec::i8w());
  CHECK_THROWS_AS(validate_plan(m, bad), std::invalid_argument);

  LayerQuantPlan bias_entry;
  bias_entry.set("pass1.block0.attn.bq", QuantSpec::i8w());
  CHECK_THROWS_AS(validate_plan(m, bias_entry), std::invalid_argument);

  LayerQuantPlan conv4;
  conv4.set("pass1.block0.conv.kernel", QuantSpec::i4w());
  CHECK_THROWS_AS(validate_plan(m, conv4), std::invalid_argument);

  LayerQuantPlan conv8;
  conv8.set("pass1.block0.conv.kernel", QuantSpec::i8w());
  CHECK_NOTHROW(validate_plan(m, conv8));
}

TEST_CASE("apply_plan keeps frontend, head, and norms in float") {
  Model m = build_task_model(single_pass(1, toy_block(8, 2, 2)),
                             TaskHeadConfig{8, 4}, 1);
  auto plan = plan_uniform(m, QuantSpec::i4wa());
  plan.default_spec = QuantSpec::i8w();  // must not leak to non-weights
  apply_plan(m, plan);
  CHECK(m.find("embed.table")->quant.is_float());
  CHECK(m.find("head.w")->quant.is_float());
  CHECK(m.find("pass1.block0.attn.bq")->quant.is_float());
  CHECK(m.find("pass1.block0.ln_final.gamma")->quant.is_float());
  CHECK(m.find("pass1.block0.attn.wq")->quant == QuantSpec::i4wa());
}

TEST_CASE("quantized forward stays finite under every plan") {
  Rng rng(21);
  Model m = build_task_model(single_pass(2, toy_block(16, 2, 2, 3)),
                             TaskHeadConfig{12, 4}, 13);
  std::vector<int32_t> tokens;
  for (int i = 0; i < 2 * 5; ++i)
    tokens.push_back(static_cast<int32_t>(rng.next_index(12)));
  for (auto spec : {QuantSpec::make_float(), QuantSpec::i8w(),
                    QuantSpec::i4w(), QuantSpec::i8wa(), QuantSpec::i4wi8a(),
                    QuantSpec::i4wa(), QuantSpec::fake_i4w()}) {
    apply_plan(m, plan_uniform(m, spec));
    Tape t;
    NodeId out = m.logits(t, tokens, 2, 5);
    CHECK(t.value(out).all_finite());
  }
}

TEST_CASE("two-pass encoder consumes first-pass output") {
  Rng rng(3);
  Model m = build_encoder(default_two_pass_toy(), 77);
  Tensor x = random_input(rng, {1, 4, 32});
  Tape t;
  NodeId y = m.encode(t, t.input(x));
  CHECK(t.value(y).shape() == Shape{1, 4, 32});
  CHECK(t.value(y).all_finite());
  CHECK(m.encoder_cfg.blocks_in_pass(1) == 4);
  CHECK(m.encoder_cfg.blocks_in_pass(2) == 3);
}
