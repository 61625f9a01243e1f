#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qatforge/checkpoint.hpp"
#include "qatforge/data.hpp"
#include "qatforge/model.hpp"
#include "qatforge/plan.hpp"

namespace qatforge {

// The seven named configurations: Float, I8W, I4W, I8WA, I4WI8A, I4WA,
// FakeI4W. Throws on anything else.
QuantSpec spec_from_label(const std::string& label);
const std::vector<std::string>& config_labels();

struct TrainParams {
  int steps = 300;
  int batch_size = 16;
  float lr = 0.15f;
  float momentum = 0.9f;
  uint64_t seed = 1;
};

struct PlanConfig {
  std::string strategy = "uniform";  // uniform | first_k |
                                     // exclude_first_last |
                                     // exclude_self_attention | per_pass
  std::string spec = "Float";        // uniform strategy
  std::string spec4 = "I4W";         // mixed strategies
  std::string spec_default = "I8W";
  int k = 0;
  int pass = 1;
};

struct ExperimentConfig {
  EncoderConfig model;
  TaskParams task;
  TrainParams train;
  PlanConfig plan;
  std::string label;  // row label; derived from the plan when empty
  std::string checkpoint_path;
  std::string results_csv;

  static ExperimentConfig from_json_file(const std::string& path);
};

LayerQuantPlan make_plan(const Model& m, const PlanConfig& pc);

struct ResultRow {
  std::string model_label = "model";  // "large"/"small" in sweeps
  std::string label;                  // configuration label
  uint64_t seed = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double eval_accuracy = 0.0;
  int64_t model_bytes = 0;
  double ms_per_step = 0.0;
  std::string error;  // nonempty marks a failed run

  static std::string csv_header();
  std::string csv_row() const;
};

struct TrainedExperiment {
  ResultRow row;
  Model model;
  LayerQuantPlan plan;
};

// Trains from scratch under the plan (quantization active from step 0),
// evaluates, optionally saves a checkpoint, returns the row plus the
// trained model. A non-finite loss aborts into an error row.
TrainedExperiment run_experiment_full(const ExperimentConfig& cfg);
ResultRow run_experiment(const ExperimentConfig& cfg);

struct SweepConfig {
  ExperimentConfig base;      // shared task/train settings
  EncoderConfig large_model;
  EncoderConfig small_model;
  std::vector<uint64_t> seeds{1, 2, 3};

  static SweepConfig from_json_file(const std::string& path);
};

// Runs the seven configurations on the large and small toy models for
// every seed. Parallelism across experiments is capped by the
// QATFORGE_THREADS environment variable; each experiment stays
// single-threaded and deterministic. Failures land as error rows.
std::vector<ResultRow> sweep(const SweepConfig& cfg);

std::string results_csv(const std::vector<ResultRow>& rows);
std::string results_table(const std::vector<ResultRow>& rows);

struct BenchRow {
  std::string path;  // float | native | fake
  double median_ms = 0.0;
  double ratio_vs_float = 0.0;
};

// Median wall-clock per training step for the three execution paths on an
// identical config. Reports ratios only; makes no assertion about them.
std::vector<BenchRow> bench_timing(const ExperimentConfig& cfg, int steps);
std::string bench_csv(const std::vector<BenchRow>& rows);

// Mean cross-entropy over a split ("train"/"eval") in fixed batches.
double dataset_loss(Model& m, const Dataset& ds, bool eval_split);
// Fraction of correctly classified eval sequences.
double eval_accuracy(Model& m, const Dataset& ds);

}  // namespace qatforge
