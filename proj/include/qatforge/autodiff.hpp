#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qatforge/quant.hpp"
#include "qatforge/tensor.hpp"

namespace qatforge {

// Trainable tensor with gradient storage. `quant` tells
// Tape::quantized_linear how to treat the weight at forward time; `frozen`
// holds codes loaded from a checkpoint so that inference runs from stored
// integers instead of requantizing.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  QuantSpec quant;
  std::optional<QuantizedTensor> frozen;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0f) {}

  void zero_grad() {
    std::fill(grad.values().begin(), grad.values().end(), 0.0f);
  }
};

using NodeId = int32_t;

// Reverse-mode tape. Ops execute eagerly and record a backward closure;
// backward() replays the closures in exact reverse execution order and
// accumulates gradients additively at fan-out. One tape per training step,
// confined to a single thread.
class Tape {
 public:
  NodeId input(Tensor value);
  NodeId param(Parameter& p);

  NodeId add(NodeId a, NodeId b);                 // same shape
  NodeId add_bias(NodeId x, NodeId bias);         // bias over the last axis
  NodeId scale(NodeId x, float c);
  NodeId linear(NodeId x, NodeId w);              // [...,K] x [K,N]
  NodeId quantized_linear(NodeId x, NodeId w, const QuantSpec& spec,
                          const QuantizedTensor* frozen_w = nullptr);
  NodeId fake_quant_ste(NodeId x, int axis, int bits,
                        Rounding rounding = Rounding::nearest);
  NodeId swish(NodeId x);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, float eps = 1e-5f);
  // softmax over the last axis; causal=true masks out j > i on [...,T,T]
  NodeId softmax_last(NodeId x, bool causal = false);
  NodeId bmm(NodeId a, NodeId b);                 // [...,M,K] x [...,K,N]
  NodeId transpose_last2(NodeId x);
  NodeId split_heads(NodeId x, int heads);        // [B,T,D] -> [B,H,T,D/H]
  NodeId merge_heads(NodeId x);                   // [B,H,T,E] -> [B,T,H*E]
  NodeId mean_axis1(NodeId x);                    // [B,T,D] -> [B,D]
  NodeId embedding(NodeId table, std::vector<int32_t> ids, int64_t batch,
                   int64_t time);
  NodeId depthwise_conv1d(NodeId x, NodeId kernel, bool causal);
  NodeId sum(NodeId x);                           // scalar
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int32_t> labels);

  // Runs reverse-mode accumulation from a scalar root. Parameter leaves
  // add into Parameter::grad. Throws if the tape is empty or the root is
  // not a scalar.
  void backward(NodeId root);

  const Tensor& value(NodeId id) const;
  const Tensor& grad(NodeId id) const;
  // Scalar nodes (sum, cross-entropy) keep a double-precision copy of
  // their value for the finite-difference oracle.
  double scalar_value(NodeId id) const;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<NodeId> inputs;
    std::function<void(Tape&, Node&)> backward_fn;
    Parameter* bound = nullptr;
    double scalar_hi = 0.0;
    bool has_scalar_hi = false;
  };

  Node& node(NodeId id);
  const Node& node(NodeId id) const;
  NodeId push(Node n);
  Tensor& grad_buf(NodeId id);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;

  friend struct TapeOps;
};

// v <- momentum*v + g; w <- w - lr*v. Throws on non-finite gradients,
// naming the parameter.
class SgdMomentum {
 public:
  SgdMomentum(float lr, float momentum) : lr_(lr), momentum_(momentum) {}
  void step(const std::vector<Parameter*>& params);

 private:
  float lr_;
  float momentum_;
  std::vector<std::pair<Parameter*, Tensor>> velocity_;
};

struct GradCheckReport {
  struct Entry {
    std::string name;
    float rel_err;  // max |analytic - fd| over the max gradient magnitude
  };
  std::vector<Entry> per_param;
  float max_rel_err = 0.0f;
  bool pass(float tol) const { return max_rel_err < tol; }
};

// Central-difference gradient check. `run(true)` must execute a taped
// forward+backward (gradients accumulate into the parameters) and return
// the loss; `run(false)` must return the loss only. The relative error of
// each parameter is measured against its largest gradient magnitude.
GradCheckReport grad_check(const std::function<double(bool)>& run,
                           const std::vector<Parameter*>& params,
                           double h = 1e-3);

}  // namespace qatforge
