#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace qatforge {

struct TaskParams {
  int vocab_size = 16;
  int seq_len = 16;
  int num_classes = 4;
  int train_examples = 1024;
  int eval_examples = 256;
  // sequences whose top-two teacher logits are closer than this are
  // rejected, keeping the decision boundary away from the data
  float margin = 0.5f;
};

// Fixed random labeling function: mean token feature -> small tanh MLP ->
// argmax. Nonlinear in the token histogram, so the label is not readable
// from pooled embeddings alone and the encoder has to do real work.
class TeacherFn {
 public:
  TeacherFn(const TaskParams& params, uint64_t seed);

  int label(std::span<const int32_t> seq) const;
  float margin(std::span<const int32_t> seq) const;

  static constexpr int kFeatDim = 8;
  static constexpr int kHidden = 16;

 private:
  void logits(std::span<const int32_t> seq, float* out) const;
  int vocab_;
  int classes_;
  std::vector<float> token_feat_;  // [V, kFeatDim]
  std::vector<float> w1_;         // [kFeatDim, kHidden]
  std::vector<float> w2_;         // [kHidden, classes]
};

// Balanced, seeded sequence-classification dataset with a fixed
// train/eval split. Token rows are stored contiguously, train split first.
struct Dataset {
  TaskParams params;
  std::vector<int32_t> tokens;  // [(train+eval) * seq_len]
  std::vector<int32_t> labels;
  int64_t train_count = 0;
  int64_t eval_count = 0;

  std::span<const int32_t> sequence(int64_t i) const {
    return {tokens.data() + i * params.seq_len,
            static_cast<size_t>(params.seq_len)};
  }
  int64_t total() const { return train_count + eval_count; }
};

Dataset gen_synthetic(const TaskParams& params, uint64_t seed);

}  // namespace qatforge
