#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qatforge/quant.hpp"

namespace qatforge {

class Model;

// Ordered map layer-id -> QuantSpec with a default for unlisted layers.
// Plans produced by the strategy constructors list exactly the quantizable
// matmul weights (attention projections and FFN matrices) and leave
// everything else on the float default.
class LayerQuantPlan {
 public:
  void set(const std::string& layer, const QuantSpec& spec);
  const QuantSpec& spec_for(const std::string& layer) const;
  bool lists(const std::string& layer) const;
  const std::vector<std::pair<std::string, QuantSpec>>& entries() const {
    return entries_;
  }

  QuantSpec default_spec = QuantSpec::make_float();
  std::string name = "custom";

 private:
  std::vector<std::pair<std::string, QuantSpec>> entries_;
};

// Every quantizable layer gets `spec`.
LayerQuantPlan plan_uniform(const Model& m, const QuantSpec& spec);

// Blocks 1..k (counted from the bottom) of every pass get `spec4`; the
// remaining quantizable layers get `spec_default`. k may reach the deeper
// pass; shallower passes are capped at their own depth.
LayerQuantPlan plan_first_k(const Model& m, int k, const QuantSpec& spec4,
                            const QuantSpec& spec_default);

// First and last block of each pass stay at `spec_default`, all other
// blocks get `spec4`. Requires at least 3 blocks per pass.
LayerQuantPlan plan_exclude_first_last(const Model& m, const QuantSpec& spec4,
                                       const QuantSpec& spec_default);

// Attention projections stay at `spec_default`; FFN weights get `spec4`.
LayerQuantPlan plan_exclude_self_attention(const Model& m,
                                           const QuantSpec& spec4,
                                           const QuantSpec& spec_default);

// All quantizable layers of the chosen pass (1 or 2) get `spec4`, the
// other pass gets `spec_default`. Requires a two-pass model.
LayerQuantPlan plan_per_pass(const Model& m, int pass_index,
                             const QuantSpec& spec4,
                             const QuantSpec& spec_default);

// Rejects entries naming nonexistent layers, entries for layers that are
// not quantizable, and int4 assignments to convolution kernels.
void validate_plan(const Model& m, const LayerQuantPlan& plan);

}  // namespace qatforge
