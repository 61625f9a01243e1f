#include "qatforge/model.hpp"

#include <cmath>
#include <stdexcept>

#include "qatforge/rng.hpp"

namespace qatforge {

void ConformerBlockConfig::validate() const {
  if (model_dim <= 0)
    throw std::invalid_argument("block config: model_dim must be positive");
  if (num_heads < 0 || (num_heads > 0 && model_dim % num_heads != 0))
    throw std::invalid_argument(
        "block config: num_heads must be 0 or divide model_dim");
  if (ffn_expansion <= 0)
    throw std::invalid_argument("block config: ffn_expansion must be positive");
  if (conv_kernel < 0 || (conv_kernel > 0 && conv_kernel % 2 == 0))
    throw std::invalid_argument(
        "block config: conv_kernel must be 0 (disabled) or odd");
}

void EncoderConfig::validate() const {
  if (blocks.empty())
    throw std::invalid_argument("encoder config: at least one block");
  if (passes != 1 && passes != 2)
    throw std::invalid_argument("encoder config: passes must be 1 or 2");
  for (const auto& b : blocks) b.validate();
  for (const auto& b : blocks)
    if (b.model_dim != blocks.front().model_dim)
      throw std::invalid_argument(
          "encoder config: all blocks must share model_dim");
  if (passes == 2) {
    if (first_pass_blocks <= 0 ||
        first_pass_blocks >= static_cast<int>(blocks.size()))
      throw std::invalid_argument(
          "encoder config: first_pass_blocks must split the block list");
    for (size_t i = static_cast<size_t>(first_pass_blocks); i < blocks.size();
         ++i)
      if (blocks[i].causal)
        throw std::invalid_argument(
            "encoder config: second-pass blocks must be non-causal");
  }
}

int EncoderConfig::blocks_in_pass(int pass) const {
  if (passes == 1) {
    if (pass != 1) throw std::invalid_argument("single-pass model");
    return static_cast<int>(blocks.size());
  }
  if (pass == 1) return first_pass_blocks;
  if (pass == 2) return static_cast<int>(blocks.size()) - first_pass_blocks;
  throw std::invalid_argument("pass index must be 1 or 2");
}

int Model::pass_of_block(int block_index) const {
  if (encoder_cfg.passes == 1) return 1;
  return block_index < encoder_cfg.first_pass_blocks ? 1 : 2;
}

namespace {

std::string block_prefix(const Model& m, int block_index) {
  int pass = m.pass_of_block(block_index);
  int local = block_index;
  if (pass == 2) local -= m.encoder_cfg.first_pass_blocks;
  return "pass" + std::to_string(pass) + ".block" + std::to_string(local) +
         ".";
}

void collect_block_params(BlockParams& b, std::vector<Parameter*>& out) {
  out.push_back(&b.ln_ffn_pre_g);
  out.push_back(&b.ln_ffn_pre_b);
  out.push_back(&b.ffn_pre_w1);
  out.push_back(&b.ffn_pre_b1);
  out.push_back(&b.ffn_pre_w2);
  out.push_back(&b.ffn_pre_b2);
  if (b.cfg.num_heads > 0) {
    out.push_back(&b.ln_attn_g);
    out.push_back(&b.ln_attn_b);
    out.push_back(&b.wq);
    out.push_back(&b.bq);
    out.push_back(&b.wk);
    out.push_back(&b.bk);
    out.push_back(&b.wv);
    out.push_back(&b.bv);
    out.push_back(&b.wo);
    out.push_back(&b.bo);
  }
  if (b.cfg.conv_kernel > 0) {
    out.push_back(&b.ln_conv_g);
    out.push_back(&b.ln_conv_b);
    out.push_back(&b.conv_kernel);
    out.push_back(&b.conv_bias);
  }
  out.push_back(&b.ln_ffn_post_g);
  out.push_back(&b.ln_ffn_post_b);
  out.push_back(&b.ffn_post_w1);
  out.push_back(&b.ffn_post_b1);
  out.push_back(&b.ffn_post_w2);
  out.push_back(&b.ffn_post_b2);
  out.push_back(&b.ln_final_g);
  out.push_back(&b.ln_final_b);
}

}  // namespace

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  if (head_cfg) out.push_back(&embed);
  for (auto& b : blocks) collect_block_params(b, out);
  if (head_cfg) {
    out.push_back(&head_w);
    out.push_back(&head_b);
  }
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  auto mut = const_cast<Model*>(this)->parameters();
  out.assign(mut.begin(), mut.end());
  return out;
}

Parameter* Model::find(const std::string& name) {
  for (Parameter* p : parameters())
    if (p->name == name) return p;
  return nullptr;
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.numel();
  return n;
}

std::vector<std::string> Model::quantizable_layer_ids() const {
  std::vector<std::string> out;
  for (size_t i = 0; i < blocks.size(); ++i) {
    std::string pre = block_prefix(*this, static_cast<int>(i));
    out.push_back(pre + "ffn_pre.w1");
    out.push_back(pre + "ffn_pre.w2");
    if (blocks[i].cfg.num_heads > 0) {
      out.push_back(pre + "attn.wq");
      out.push_back(pre + "attn.wk");
      out.push_back(pre + "attn.wv");
      out.push_back(pre + "attn.wo");
    }
    out.push_back(pre + "ffn_post.w1");
    out.push_back(pre + "ffn_post.w2");
  }
  return out;
}

std::vector<std::string> Model::conv_kernel_ids() const {
  std::vector<std::string> out;
  for (size_t i = 0; i < blocks.size(); ++i)
    if (blocks[i].cfg.conv_kernel > 0)
      out.push_back(block_prefix(*this, static_cast<int>(i)) + "conv.kernel");
  return out;
}

namespace {

NodeId quantized_weight_matmul(Tape& t, NodeId x, Parameter& w) {
  const QuantizedTensor* frozen = w.frozen ? &*w.frozen : nullptr;
  return t.quantized_linear(x, t.param(w), w.quant, frozen);
}

NodeId ffn_forward(Tape& t, NodeId xn, Parameter& w1, Parameter& b1,
                   Parameter& w2, Parameter& b2) {
  NodeId h = t.add_bias(quantized_weight_matmul(t, xn, w1), t.param(b1));
  h = t.swish(h);
  return t.add_bias(quantized_weight_matmul(t, h, w2), t.param(b2));
}

NodeId block_forward(Tape& t, BlockParams& b, NodeId x) {
  const auto& cfg = b.cfg;
  // half-step FFN
  NodeId xn = t.layer_norm(x, t.param(b.ln_ffn_pre_g), t.param(b.ln_ffn_pre_b));
  NodeId h = t.add(x, t.scale(ffn_forward(t, xn, b.ffn_pre_w1, b.ffn_pre_b1,
                                          b.ffn_pre_w2, b.ffn_pre_b2),
                              0.5f));
  // multi-head self-attention
  if (cfg.num_heads > 0) {
    NodeId an = t.layer_norm(h, t.param(b.ln_attn_g), t.param(b.ln_attn_b));
    NodeId q = t.add_bias(quantized_weight_matmul(t, an, b.wq), t.param(b.bq));
    NodeId k = t.add_bias(quantized_weight_matmul(t, an, b.wk), t.param(b.bk));
    NodeId v = t.add_bias(quantized_weight_matmul(t, an, b.wv), t.param(b.bv));
    NodeId qh = t.split_heads(q, cfg.num_heads);
    NodeId kh = t.split_heads(k, cfg.num_heads);
    NodeId vh = t.split_heads(v, cfg.num_heads);
    const float inv_sqrt_dh =
        1.0f / std::sqrt(static_cast<float>(cfg.model_dim / cfg.num_heads));
    NodeId scores = t.scale(t.bmm(qh, t.transpose_last2(kh)), inv_sqrt_dh);
    NodeId probs = t.softmax_last(scores, cfg.causal);
    NodeId ctx = t.merge_heads(t.bmm(probs, vh));
    NodeId out = t.add_bias(quantized_weight_matmul(t, ctx, b.wo),
                            t.param(b.bo));
    h = t.add(h, out);
  }
  // depthwise convolution
  if (cfg.conv_kernel > 0) {
    NodeId cn = t.layer_norm(h, t.param(b.ln_conv_g), t.param(b.ln_conv_b));
    NodeId kn = t.param(b.conv_kernel);
    if (b.conv_kernel.quant.weight_bits)
      kn = t.fake_quant_ste(kn, 1, *b.conv_kernel.quant.weight_bits,
                            b.conv_kernel.quant.rounding);
    NodeId cv = t.depthwise_conv1d(cn, kn, cfg.causal);
    cv = t.swish(t.add_bias(cv, t.param(b.conv_bias)));
    h = t.add(h, cv);
  }
  // half-step FFN
  NodeId pn = t.layer_norm(h, t.param(b.ln_ffn_post_g),
                           t.param(b.ln_ffn_post_b));
  h = t.add(h, t.scale(ffn_forward(t, pn, b.ffn_post_w1, b.ffn_post_b1,
                                   b.ffn_post_w2, b.ffn_post_b2),
                       0.5f));
  return t.layer_norm(h, t.param(b.ln_final_g), t.param(b.ln_final_b));
}

}  // namespace

NodeId Model::encode(Tape& t, NodeId x) {
  NodeId h = x;
  for (auto& b : blocks) h = block_forward(t, b, h);
  return h;
}

NodeId Model::logits(Tape& t, const std::vector<int32_t>& tokens,
                     int64_t batch, int64_t time) {
  if (!head_cfg)
    throw std::runtime_error("logits: model has no task head");
  NodeId x = t.embedding(t.param(embed), tokens, batch, time);
  NodeId enc = encode(t, x);
  NodeId pooled = t.mean_axis1(enc);
  return t.add_bias(t.quantized_linear(pooled, t.param(head_w), head_w.quant),
                    t.param(head_b));
}

namespace {

struct Initializer {
  Rng rng;
  explicit Initializer(uint64_t seed) : rng(mix_seed(seed, 0x1217)) {}

  void weight(Parameter& p, const std::string& name, Shape shape) {
    p = Parameter(name, Tensor(shape));
    const float bound =
        1.0f / std::sqrt(static_cast<float>(shape[0]));
    for (int64_t i = 0; i < p.value.numel(); ++i)
      p.value.at(i) = rng.uniform(-bound, bound);
  }
  void zeros(Parameter& p, const std::string& name, Shape shape) {
    p = Parameter(name, Tensor(std::move(shape), 0.0f));
  }
  void ones(Parameter& p, const std::string& name, Shape shape) {
    p = Parameter(name, Tensor(std::move(shape), 1.0f));
  }
};

void init_block(Initializer& init, BlockParams& b,
                const ConformerBlockConfig& cfg, const std::string& pre) {
  b.cfg = cfg;
  const int64_t d = cfg.model_dim;
  const int64_t e = d * cfg.ffn_expansion;
  init.ones(b.ln_ffn_pre_g, pre + "ln_ffn_pre.gamma", {d});
  init.zeros(b.ln_ffn_pre_b, pre + "ln_ffn_pre.beta", {d});
  init.weight(b.ffn_pre_w1, pre + "ffn_pre.w1", {d, e});
  init.zeros(b.ffn_pre_b1, pre + "ffn_pre.b1", {e});
  init.weight(b.ffn_pre_w2, pre + "ffn_pre.w2", {e, d});
  init.zeros(b.ffn_pre_b2, pre + "ffn_pre.b2", {d});
  if (cfg.num_heads > 0) {
    init.ones(b.ln_attn_g, pre + "ln_attn.gamma", {d});
    init.zeros(b.ln_attn_b, pre + "ln_attn.beta", {d});
    init.weight(b.wq, pre + "attn.wq", {d, d});
    init.zeros(b.bq, pre + "attn.bq", {d});
    init.weight(b.wk, pre + "attn.wk", {d, d});
    init.zeros(b.bk, pre + "attn.bk", {d});
    init.weight(b.wv, pre + "attn.wv", {d, d});
    init.zeros(b.bv, pre + "attn.bv", {d});
    init.weight(b.wo, pre + "attn.wo", {d, d});
    init.zeros(b.bo, pre + "attn.bo", {d});
  }
  if (cfg.conv_kernel > 0) {
    init.ones(b.ln_conv_g, pre + "ln_conv.gamma", {d});
    init.zeros(b.ln_conv_b, pre + "ln_conv.beta", {d});
    init.weight(b.conv_kernel, pre + "conv.kernel", {cfg.conv_kernel, d});
    init.zeros(b.conv_bias, pre + "conv.bias", {d});
  }
  init.ones(b.ln_ffn_post_g, pre + "ln_ffn_post.gamma", {d});
  init.zeros(b.ln_ffn_post_b, pre + "ln_ffn_post.beta", {d});
  init.weight(b.ffn_post_w1, pre + "ffn_post.w1", {d, e});
  init.zeros(b.ffn_post_b1, pre + "ffn_post.b1", {e});
  init.weight(b.ffn_post_w2, pre + "ffn_post.w2", {e, d});
  init.zeros(b.ffn_post_b2, pre + "ffn_post.b2", {d});
  init.ones(b.ln_final_g, pre + "ln_final.gamma", {d});
  init.zeros(b.ln_final_b, pre + "ln_final.beta", {d});
}

Model build_impl(const EncoderConfig& cfg,
                 const std::optional<TaskHeadConfig>& head, uint64_t seed) {
  cfg.validate();
  Model m;
  m.encoder_cfg = cfg;
  m.head_cfg = head;
  Initializer init(seed);
  const int64_t d = cfg.blocks.front().model_dim;
  if (head) {
    if (head->vocab_size <= 0 || head->num_classes <= 0)
      throw std::invalid_argument("task head: positive vocab and classes");
    init.weight(m.embed, "embed.table", {head->vocab_size, d});
  }
  m.blocks.resize(cfg.blocks.size());
  for (size_t i = 0; i < cfg.blocks.size(); ++i)
    init_block(init, m.blocks[i], cfg.blocks[i],
               block_prefix(m, static_cast<int>(i)));
  if (head) {
    init.weight(m.head_w, "head.w", {d, head->num_classes});
    init.zeros(m.head_b, "head.b", {head->num_classes});
  }
  return m;
}

}  // namespace

Model build_encoder(const EncoderConfig& cfg, uint64_t seed) {
  return build_impl(cfg, std::nullopt, seed);
}

Model build_task_model(const EncoderConfig& cfg, const TaskHeadConfig& head,
                       uint64_t seed) {
  return build_impl(cfg, head, seed);
}

void apply_plan(Model& m, const LayerQuantPlan& plan) {
  validate_plan(m, plan);
  for (Parameter* p : m.parameters()) p->quant = QuantSpec::make_float();
  for (const std::string& id : m.quantizable_layer_ids())
    m.find(id)->quant = plan.spec_for(id);
  for (const std::string& id : m.conv_kernel_ids())
    if (plan.lists(id)) m.find(id)->quant = plan.spec_for(id);
}

EncoderConfig single_pass(int num_blocks, ConformerBlockConfig blk) {
  EncoderConfig cfg;
  cfg.blocks.assign(static_cast<size_t>(num_blocks), blk);
  cfg.passes = 1;
  return cfg;
}

EncoderConfig two_pass_cascade(int pass1_blocks, int pass2_blocks,
                               ConformerBlockConfig causal_blk,
                               ConformerBlockConfig noncausal_blk) {
  causal_blk.causal = true;
  noncausal_blk.causal = false;
  EncoderConfig cfg;
  cfg.passes = 2;
  cfg.first_pass_blocks = pass1_blocks;
  cfg.blocks.assign(static_cast<size_t>(pass1_blocks), causal_blk);
  cfg.blocks.insert(cfg.blocks.end(), static_cast<size_t>(pass2_blocks),
                    noncausal_blk);
  return cfg;
}

EncoderConfig default_two_pass_toy() {
  ConformerBlockConfig blk;
  blk.model_dim = 32;
  blk.num_heads = 4;
  blk.ffn_expansion = 4;
  blk.conv_kernel = 0;
  return two_pass_cascade(4, 3, blk, blk);
}

}  // namespace qatforge
