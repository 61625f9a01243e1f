#include "qatforge/data.hpp"

#include <cmath>
#include <stdexcept>

#include "qatforge/rng.hpp"

namespace qatforge {

TeacherFn::TeacherFn(const TaskParams& params, uint64_t seed)
    : vocab_(params.vocab_size), classes_(params.num_classes) {
  if (vocab_ <= 0 || classes_ <= 1 || params.seq_len <= 0)
    throw std::invalid_argument("task params: need vocab, classes > 1, length");
  Rng rng(mix_seed(seed, 0x7eac));
  token_feat_.resize(static_cast<size_t>(vocab_) * kFeatDim);
  for (auto& v : token_feat_) v = rng.normal();
  // pre-activation std of roughly 2.5 keeps the tanh well outside its
  // linear regime, which is what makes the task nonlinear in the histogram
  const float w1_sd = 2.5f * std::sqrt(static_cast<float>(params.seq_len)) /
                      std::sqrt(static_cast<float>(kFeatDim));
  w1_.resize(kFeatDim * kHidden);
  for (auto& v : w1_) v = rng.normal() * w1_sd;
  w2_.resize(static_cast<size_t>(kHidden) * classes_);
  for (auto& v : w2_) v = rng.normal() / std::sqrt(float(kHidden));
}

void TeacherFn::logits(std::span<const int32_t> seq, float* out) const {
  float mean[kFeatDim] = {0};
  for (int32_t tok : seq) {
    if (tok < 0 || tok >= vocab_)
      throw std::invalid_argument("teacher: token outside vocabulary");
    for (int j = 0; j < kFeatDim; ++j)
      mean[j] += token_feat_[static_cast<size_t>(tok) * kFeatDim + j];
  }
  for (int j = 0; j < kFeatDim; ++j)
    mean[j] /= static_cast<float>(seq.size());
  float hidden[kHidden];
  for (int h = 0; h < kHidden; ++h) {
    float acc = 0.0f;
    for (int j = 0; j < kFeatDim; ++j)
      acc += mean[j] * w1_[static_cast<size_t>(j) * kHidden + h];
    hidden[h] = std::tanh(acc);
  }
  for (int c = 0; c < classes_; ++c) {
    float acc = 0.0f;
    for (int h = 0; h < kHidden; ++h)
      acc += hidden[h] * w2_[static_cast<size_t>(h) * classes_ + c];
    out[c] = acc;
  }
}

int TeacherFn::label(std::span<const int32_t> seq) const {
  std::vector<float> z(static_cast<size_t>(classes_));
  logits(seq, z.data());
  int best = 0;
  for (int c = 1; c < classes_; ++c)
    if (z[static_cast<size_t>(c)] > z[static_cast<size_t>(best)]) best = c;
  return best;
}

float TeacherFn::margin(std::span<const int32_t> seq) const {
  std::vector<float> z(static_cast<size_t>(classes_));
  logits(seq, z.data());
  float top = -1e30f, second = -1e30f;
  for (int c = 0; c < classes_; ++c) {
    float v = z[static_cast<size_t>(c)];
    if (v > top) {
      second = top;
      top = v;
    } else if (v > second) {
      second = v;
    }
  }
  return top - second;
}

Dataset gen_synthetic(const TaskParams& params, uint64_t seed) {
  TeacherFn teacher(params, seed);
  Dataset ds;
  ds.params = params;
  ds.train_count = params.train_examples;
  ds.eval_count = params.eval_examples;

  Rng rng(mix_seed(seed, 0xda7a));
  const int64_t T = params.seq_len;
  const int C = params.num_classes;

  // fill class quotas split-by-split so both splits stay balanced
  auto fill_split = [&](int64_t count) {
    std::vector<int64_t> quota(static_cast<size_t>(C), count / C);
    for (int64_t r = 0; r < count % C; ++r) ++quota[static_cast<size_t>(r)];
    int64_t remaining = count;
    std::vector<int32_t> seq(static_cast<size_t>(T));
    int64_t guard = 0;
    const int64_t guard_limit = count * 10000;
    while (remaining > 0) {
      if (++guard > guard_limit)
        throw std::runtime_error(
            "gen_synthetic: rejection sampling stalled; margin too strict");
      for (auto& tok : seq)
        tok = static_cast<int32_t>(rng.next_index(params.vocab_size));
      if (teacher.margin(seq) < params.margin) continue;
      int y = teacher.label(seq);
      if (quota[static_cast<size_t>(y)] == 0) continue;
      --quota[static_cast<size_t>(y)];
      --remaining;
      ds.tokens.insert(ds.tokens.end(), seq.begin(), seq.end());
      ds.labels.push_back(y);
    }
  };
  fill_split(ds.train_count);
  fill_split(ds.eval_count);
  return ds;
}

}  // namespace qatforge
