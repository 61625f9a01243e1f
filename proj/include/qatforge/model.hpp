#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qatforge/autodiff.hpp"
#include "qatforge/plan.hpp"

namespace qatforge {

struct ConformerBlockConfig {
  int model_dim = 32;
  int num_heads = 4;    // 0 disables the self-attention sublayer
  int ffn_expansion = 4;
  int conv_kernel = 0;  // 0 disables the conv sublayer; otherwise odd
  bool causal = false;
  void validate() const;
};

struct EncoderConfig {
  std::vector<ConformerBlockConfig> blocks;
  int passes = 1;
  int first_pass_blocks = 0;  // blocks in pass 1 when passes == 2
  void validate() const;
  int blocks_in_pass(int pass) const;  // pass is 1 or 2
};

struct TaskHeadConfig {
  int vocab_size = 16;
  int num_classes = 4;
};

// Parameters of one conformer block:
//   x += 0.5*FFN(LN(x)); x += MHSA(LN(x)); x += Conv(LN(x));
//   x += 0.5*FFN(LN(x)); x = LN(x)
struct BlockParams {
  ConformerBlockConfig cfg;
  Parameter ln_ffn_pre_g, ln_ffn_pre_b;
  Parameter ffn_pre_w1, ffn_pre_b1, ffn_pre_w2, ffn_pre_b2;
  Parameter ln_attn_g, ln_attn_b;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln_conv_g, ln_conv_b, conv_kernel, conv_bias;
  Parameter ln_ffn_post_g, ln_ffn_post_b;
  Parameter ffn_post_w1, ffn_post_b1, ffn_post_w2, ffn_post_b2;
  Parameter ln_final_g, ln_final_b;
};

// Encoder stack, optionally fronted by a token embedding and topped by a
// mean-pool classifier head for the synthetic sequence-labeling task.
class Model {
 public:
  EncoderConfig encoder_cfg;
  std::optional<TaskHeadConfig> head_cfg;

  Parameter embed;  // [V, D], only with head_cfg
  std::vector<BlockParams> blocks;
  Parameter head_w, head_b;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter* find(const std::string& name);
  int64_t param_count() const;

  // Weight-matmul layer ids eligible for quantization, in forward order.
  std::vector<std::string> quantizable_layer_ids() const;
  // Convolution kernel ids (quantizable only by explicit int8 entries).
  std::vector<std::string> conv_kernel_ids() const;
  bool two_pass() const { return encoder_cfg.passes == 2; }
  // pass (1-based) of the given block index
  int pass_of_block(int block_index) const;

  // Runs the encoder stack over [B,T,D] input.
  NodeId encode(Tape& t, NodeId x);
  // Embedding -> encoder -> mean pool -> classifier logits [B,C].
  NodeId logits(Tape& t, const std::vector<int32_t>& tokens, int64_t batch,
                int64_t time);
};

Model build_encoder(const EncoderConfig& cfg, uint64_t seed);
Model build_task_model(const EncoderConfig& cfg, const TaskHeadConfig& head,
                       uint64_t seed);

// Stamps per-parameter QuantSpecs from the plan: quantizable weights get
// plan.spec_for(id); conv kernels only honor explicit entries; biases,
// layernorm parameters, the embedding, and the classifier always stay
// float. Validates the plan first.
void apply_plan(Model& m, const LayerQuantPlan& plan);

// 4+3-block toy cascade (causal pass 1, non-causal pass 2).
EncoderConfig default_two_pass_toy();
// Parametric cascade used by mixed-precision sizing tests.
EncoderConfig two_pass_cascade(int pass1_blocks, int pass2_blocks,
                               ConformerBlockConfig causal_blk,
                               ConformerBlockConfig noncausal_blk);
EncoderConfig single_pass(int num_blocks, ConformerBlockConfig blk);

}  // namespace qatforge
