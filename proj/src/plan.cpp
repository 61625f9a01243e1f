#include "qatforge/plan.hpp"

#include <algorithm>
#include <stdexcept>

#include "qatforge/model.hpp"

namespace qatforge {

void LayerQuantPlan::set(const std::string& layer, const QuantSpec& spec) {
  for (auto& [name, s] : entries_)
    if (name == layer) {
      s = spec;
      return;
    }
  entries_.emplace_back(layer, spec);
}

const QuantSpec& LayerQuantPlan::spec_for(const std::string& layer) const {
  for (const auto& [name, s] : entries_)
    if (name == layer) return s;
  return default_spec;
}

bool LayerQuantPlan::lists(const std::string& layer) const {
  for (const auto& [name, s] : entries_)
    if (name == layer) return true;
  return false;
}

namespace {

bool is_attention_layer(const std::string& id) {
  return id.find(".attn.") != std::string::npos;
}

int pass_of_layer(const std::string& id) {
  return id.rfind("pass2.", 0) == 0 ? 2 : 1;
}

int block_of_layer(const std::string& id) {
  auto b = id.find(".block");
  auto dot = id.find('.', b + 1);
  return std::stoi(id.substr(b + 6, dot - b - 6));
}

}  // namespace

LayerQuantPlan plan_uniform(const Model& m, const QuantSpec& spec) {
  spec.validate();
  LayerQuantPlan plan;
  for (const std::string& id : m.quantizable_layer_ids()) plan.set(id, spec);
  return plan;
}

LayerQuantPlan plan_first_k(const Model& m, int k, const QuantSpec& spec4,
                            const QuantSpec& spec_default) {
  spec4.validate();
  spec_default.validate();
  int deepest = m.encoder_cfg.blocks_in_pass(1);
  if (m.two_pass()) deepest = std::max(deepest, m.encoder_cfg.blocks_in_pass(2));
  if (k < 0 || k > deepest)
    throw std::invalid_argument("plan_first_k: k=" + std::to_string(k) +
                                " outside [0, " + std::to_string(deepest) +
                                "]");
  LayerQuantPlan plan;
  plan.name = "first_k=" + std::to_string(k);
  for (const std::string& id : m.quantizable_layer_ids())
    plan.set(id, block_of_layer(id) < k ? spec4 : spec_default);
  return plan;
}

LayerQuantPlan plan_exclude_first_last(const Model& m, const QuantSpec& spec4,
                                       const QuantSpec& spec_default) {
  spec4.validate();
  spec_default.validate();
  for (int pass = 1; pass <= m.encoder_cfg.passes; ++pass)
    if (m.encoder_cfg.blocks_in_pass(pass) < 3)
      throw std::invalid_argument(
          "plan_exclude_first_last: needs at least 3 blocks per pass");
  LayerQuantPlan plan;
  plan.name = "exclude_first_last";
  for (const std::string& id : m.quantizable_layer_ids()) {
    int pass = pass_of_layer(id);
    int blk = block_of_layer(id);
    bool edge = blk == 0 || blk == m.encoder_cfg.blocks_in_pass(pass) - 1;
    plan.set(id, edge ? spec_default : spec4);
  }
  return plan;
}

LayerQuantPlan plan_exclude_self_attention(const Model& m,
                                           const QuantSpec& spec4,
                                           const QuantSpec& spec_default) {
  spec4.validate();
  spec_default.validate();
  LayerQuantPlan plan;
  plan.name = "exclude_self_attention";
  for (const std::string& id : m.quantizable_layer_ids())
    plan.set(id, is_attention_layer(id) ? spec_default : spec4);
  return plan;
}

LayerQuantPlan plan_per_pass(const Model& m, int pass_index,
                             const QuantSpec& spec4,
                             const QuantSpec& spec_default) {
  spec4.validate();
  spec_default.validate();
  if (!m.two_pass())
    throw std::invalid_argument("plan_per_pass: requires a two-pass model");
  if (pass_index != 1 && pass_index != 2)
    throw std::invalid_argument("plan_per_pass: pass index must be 1 or 2");
  LayerQuantPlan plan;
  plan.name = "per_pass=" + std::to_string(pass_index);
  for (const std::string& id : m.quantizable_layer_ids())
    plan.set(id, pass_of_layer(id) == pass_index ? spec4 : spec_default);
  return plan;
}

void validate_plan(const Model& m, const LayerQuantPlan& plan) {
  plan.default_spec.validate();
  auto quantizable = const_cast<Model&>(m).quantizable_layer_ids();
  auto convs = m.conv_kernel_ids();
  for (const auto& [id, spec] : plan.entries()) {
    spec.validate();
    bool is_conv =
        std::find(convs.begin(), convs.end(), id) != convs.end();
    bool is_weight = std::find(quantizable.begin(), quantizable.end(), id) !=
                     quantizable.end();
    if (!is_conv && !is_weight)
      throw std::invalid_argument("plan references nonexistent layer " + id);
    if (is_conv && spec.weight_bits && *spec.weight_bits == 4)
      throw std::invalid_argument(
          "plan assigns int4 weights to convolution kernel " + id);
  }
}

}  // namespace qatforge
