#include "qatforge/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "qatforge/autodiff.hpp"
#include "qatforge/json_io.hpp"

namespace qatforge {

QuantSpec spec_from_label(const std::string& label) {
  if (label == "Float") return QuantSpec::make_float();
  if (label == "I8W") return QuantSpec::i8w();
  if (label == "I4W") return QuantSpec::i4w();
  if (label == "I8WA") return QuantSpec::i8wa();
  if (label == "I4WI8A") return QuantSpec::i4wi8a();
  if (label == "I4WA") return QuantSpec::i4wa();
  if (label == "FakeI4W") return QuantSpec::fake_i4w();
  throw std::invalid_argument("unknown configuration label '" + label + "'");
}

const std::vector<std::string>& config_labels() {
  static const std::vector<std::string> labels{
      "Float", "I8W", "I4W", "I8WA", "I4WI8A", "I4WA", "FakeI4W"};
  return labels;
}

LayerQuantPlan make_plan(const Model& m, const PlanConfig& pc) {
  LayerQuantPlan plan;
  if (pc.strategy == "uniform") {
    plan = plan_uniform(m, spec_from_label(pc.spec));
    plan.name = pc.spec;
  } else if (pc.strategy == "first_k") {
    plan = plan_first_k(m, pc.k, spec_from_label(pc.spec4),
                        spec_from_label(pc.spec_default));
  } else if (pc.strategy == "exclude_first_last") {
    plan = plan_exclude_first_last(m, spec_from_label(pc.spec4),
                                   spec_from_label(pc.spec_default));
  } else if (pc.strategy == "exclude_self_attention") {
    plan = plan_exclude_self_attention(m, spec_from_label(pc.spec4),
                                       spec_from_label(pc.spec_default));
  } else if (pc.strategy == "per_pass") {
    plan = plan_per_pass(m, pc.pass, spec_from_label(pc.spec4),
                         spec_from_label(pc.spec_default));
  } else {
    throw std::invalid_argument("unknown plan strategy '" + pc.strategy + "'");
  }
  return plan;
}

namespace {

using nlohmann::json;

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  json j;
  f >> j;
  return j;
}

EncoderConfig model_from_json(const json& j) {
  // shorthand: "blocks" as a count with shared block settings
  if (j.contains("blocks") && j["blocks"].is_number()) {
    ConformerBlockConfig b;
    b.model_dim = j.value("model_dim", 32);
    b.num_heads = j.value("num_heads", 4);
    b.ffn_expansion = j.value("ffn_expansion", 4);
    b.conv_kernel = j.value("conv_kernel", 0);
    b.causal = j.value("causal", false);
    EncoderConfig cfg = single_pass(j["blocks"].get<int>(), b);
    cfg.validate();
    return cfg;
  }
  return encoder_config_from_json(j);
}

TaskParams task_from_json(const json& j) {
  TaskParams t;
  t.vocab_size = j.value("vocab_size", t.vocab_size);
  t.seq_len = j.value("seq_len", t.seq_len);
  t.num_classes = j.value("num_classes", t.num_classes);
  t.train_examples = j.value("train_examples", t.train_examples);
  t.eval_examples = j.value("eval_examples", t.eval_examples);
  t.margin = j.value("margin", t.margin);
  return t;
}

TrainParams train_from_json(const json& j) {
  TrainParams t;
  t.steps = j.value("steps", t.steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.momentum = j.value("momentum", t.momentum);
  t.seed = j.value("seed", t.seed);
  return t;
}

PlanConfig plan_config_from_json(const json& j) {
  PlanConfig p;
  p.strategy = j.value("strategy", p.strategy);
  p.spec = j.value("spec", p.spec);
  p.spec4 = j.value("spec4", p.spec4);
  p.spec_default = j.value("default", p.spec_default);
  p.k = j.value("k", p.k);
  p.pass = j.value("pass", p.pass);
  return p;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig cfg;
  if (j.contains("model")) cfg.model = model_from_json(j["model"]);
  if (j.contains("task")) cfg.task = task_from_json(j["task"]);
  if (j.contains("train")) cfg.train = train_from_json(j["train"]);
  if (j.contains("plan")) cfg.plan = plan_config_from_json(j["plan"]);
  cfg.label = j.value("label", std::string());
  if (j.contains("output")) {
    cfg.checkpoint_path = j["output"].value("checkpoint", std::string());
    cfg.results_csv = j["output"].value("results_csv", std::string());
  }
  return cfg;
}

struct Batch {
  std::vector<int32_t> tokens;
  std::vector<int32_t> labels;
  int64_t rows = 0;
};

Batch slice_batch(const Dataset& ds, int64_t offset, int64_t count,
                  bool eval_split) {
  const int64_t base = eval_split ? ds.train_count : 0;
  const int64_t limit = eval_split ? ds.eval_count : ds.train_count;
  const int64_t T = ds.params.seq_len;
  Batch b;
  b.rows = count;
  for (int64_t r = 0; r < count; ++r) {
    int64_t idx = base + (offset + r) % limit;
    auto seq = ds.sequence(idx);
    b.tokens.insert(b.tokens.end(), seq.begin(), seq.end());
    b.labels.push_back(ds.labels[static_cast<size_t>(idx)]);
  }
  (void)T;
  return b;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  return experiment_from_json(load_json_file(path));
}

SweepConfig SweepConfig::from_json_file(const std::string& path) {
  json j = load_json_file(path);
  SweepConfig cfg;
  cfg.base = experiment_from_json(j);
  if (!j.contains("large_model") || !j.contains("small_model"))
    throw std::invalid_argument(
        "sweep config requires large_model and small_model");
  cfg.large_model = model_from_json(j["large_model"]);
  cfg.small_model = model_from_json(j["small_model"]);
  if (j.contains("seeds")) {
    cfg.seeds.clear();
    for (const auto& s : j["seeds"]) cfg.seeds.push_back(s.get<uint64_t>());
  }
  return cfg;
}

double dataset_loss(Model& m, const Dataset& ds, bool eval_split) {
  const int64_t total = eval_split ? ds.eval_count : ds.train_count;
  const int64_t T = ds.params.seq_len;
  const int64_t kBatch = 64;
  double acc = 0.0;
  for (int64_t off = 0; off < total; off += kBatch) {
    int64_t rows = std::min(kBatch, total - off);
    Batch b = slice_batch(ds, off, rows, eval_split);
    Tape t;
    NodeId logits = m.logits(t, b.tokens, rows, T);
    NodeId loss = t.softmax_cross_entropy(logits, b.labels);
    acc += t.scalar_value(loss) * static_cast<double>(rows);
  }
  return acc / static_cast<double>(total);
}

double eval_accuracy(Model& m, const Dataset& ds) {
  const int64_t T = ds.params.seq_len;
  const int64_t C = ds.params.num_classes;
  const int64_t kBatch = 64;
  int64_t correct = 0;
  for (int64_t off = 0; off < ds.eval_count; off += kBatch) {
    int64_t rows = std::min(kBatch, ds.eval_count - off);
    Batch b = slice_batch(ds, off, rows, /*eval=*/true);
    Tape t;
    NodeId logits = m.logits(t, b.tokens, rows, T);
    const Tensor& z = t.value(logits);
    for (int64_t r = 0; r < rows; ++r) {
      int best = 0;
      for (int64_t c = 1; c < C; ++c)
        if (z.at(r * C + c) > z.at(r * C + best)) best = static_cast<int>(c);
      if (best == b.labels[static_cast<size_t>(r)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.eval_count);
}

TrainedExperiment run_experiment_full(const ExperimentConfig& cfg) {
  TrainedExperiment out;
  ResultRow& row = out.row;
  row.seed = cfg.train.seed;

  Dataset ds = gen_synthetic(cfg.task, cfg.train.seed);
  TaskHeadConfig head{cfg.task.vocab_size, cfg.task.num_classes};
  out.model = build_task_model(cfg.model, head, cfg.train.seed);
  out.plan = make_plan(out.model, cfg.plan);
  row.label = cfg.label.empty() ? out.plan.name : cfg.label;
  apply_plan(out.model, out.plan);

  Model& m = out.model;
  row.initial_train_loss = dataset_loss(m, ds, /*eval=*/false);

  auto params = m.parameters();
  SgdMomentum opt(cfg.train.lr, cfg.train.momentum);
  const int64_t T = cfg.task.seq_len;
  std::vector<double> step_ms;
  step_ms.reserve(static_cast<size_t>(cfg.train.steps));
  for (int step = 0; step < cfg.train.steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    Batch b = slice_batch(ds, int64_t(step) * cfg.train.batch_size,
                          cfg.train.batch_size, /*eval=*/false);
    Tape t;
    NodeId logits = m.logits(t, b.tokens, b.rows, T);
    NodeId loss = t.softmax_cross_entropy(logits, b.labels);
    const double lv = t.scalar_value(loss);
    if (!std::isfinite(lv)) {
      row.error = "divergence: non-finite loss at step " +
                  std::to_string(step);
      return out;
    }
    for (Parameter* p : params) p->zero_grad();
    t.backward(loss);
    opt.step(params);
    auto t1 = std::chrono::steady_clock::now();
    step_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  if (!step_ms.empty()) {
    std::sort(step_ms.begin(), step_ms.end());
    row.ms_per_step = step_ms[step_ms.size() / 2];
  }

  row.final_train_loss = dataset_loss(m, ds, /*eval=*/false);
  row.eval_accuracy = eval_accuracy(m, ds);

  if (!cfg.checkpoint_path.empty()) {
    SizeLedger ledger = save_checkpoint(m, out.plan, cfg.checkpoint_path);
    row.model_bytes = ledger.total_bytes();
  } else {
    row.model_bytes = size_report(census_of(m), out.plan).total_bytes();
  }
  return out;
}

ResultRow run_experiment(const ExperimentConfig& cfg) {
  return run_experiment_full(cfg).row;
}

std::vector<ResultRow> sweep(const SweepConfig& cfg) {
  struct Item {
    ExperimentConfig cfg;
    std::string model_label;
  };
  std::vector<Item> items;
  for (const auto& [model_label, enc] :
       {std::pair<std::string, const EncoderConfig*>{"large",
                                                     &cfg.large_model},
        std::pair<std::string, const EncoderConfig*>{"small",
                                                     &cfg.small_model}}) {
    for (const std::string& label : config_labels()) {
      for (uint64_t seed : cfg.seeds) {
        Item it;
        it.cfg = cfg.base;
        it.cfg.model = *enc;
        it.cfg.plan.strategy = "uniform";
        it.cfg.plan.spec = label;
        it.cfg.label = label;
        it.cfg.train.seed = seed;
        it.cfg.checkpoint_path.clear();
        it.model_label = model_label;
        items.push_back(std::move(it));
      }
    }
  }

  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("QATFORGE_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) threads = static_cast<unsigned>(v);
  }
  threads = std::min<unsigned>(threads, static_cast<unsigned>(items.size()));

  std::vector<ResultRow> rows(items.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      ResultRow row;
      try {
        row = run_experiment(items[i].cfg);
      } catch (const std::exception& e) {
        row.label = items[i].cfg.label;
        row.seed = items[i].cfg.train.seed;
        row.error = e.what();
      }
      row.model_label = items[i].model_label;
      rows[i] = std::move(row);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned i = 0; i + 1 < threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return rows;
}

std::string ResultRow::csv_header() {
  return "model,config,seed,initial_train_loss,final_train_loss,"
         "eval_accuracy,model_bytes,ms_per_step,error";
}

std::string ResultRow::csv_row() const {
  std::ostringstream os;
  os << model_label << "," << label << "," << seed << "," << std::setprecision(8)
     << initial_train_loss << "," << final_train_loss << "," << eval_accuracy
     << "," << model_bytes << "," << ms_per_step << "," << error;
  return os.str();
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << ResultRow::csv_header() << "\n";
  for (const auto& r : rows) os << r.csv_row() << "\n";
  return os.str();
}

std::string results_table(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(7) << "model" << std::setw(9) << "config"
     << std::setw(6) << "seed" << std::right << std::setw(11) << "loss0"
     << std::setw(11) << "loss" << std::setw(9) << "acc" << std::setw(12)
     << "bytes" << std::setw(10) << "ms/step"
     << "  error\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(7) << r.model_label << std::setw(9) << r.label
       << std::setw(6) << r.seed << std::right << std::fixed
       << std::setprecision(4) << std::setw(11) << r.initial_train_loss
       << std::setw(11) << r.final_train_loss << std::setw(9)
       << r.eval_accuracy << std::setw(12) << r.model_bytes
       << std::setprecision(2) << std::setw(10) << r.ms_per_step << "  "
       << r.error << "\n";
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

std::vector<BenchRow> bench_timing(const ExperimentConfig& cfg, int steps) {
  const int kWarmup = 3;
  std::vector<BenchRow> rows;
  double float_ms = 0.0;
  for (const char* path : {"float", "native", "fake"}) {
    ExperimentConfig c = cfg;
    c.plan.strategy = "uniform";
    c.plan.spec = std::string(path) == "float"
                      ? "Float"
                      : (std::string(path) == "native" ? "I4W" : "FakeI4W");
    c.checkpoint_path.clear();
    Dataset ds = gen_synthetic(c.task, c.train.seed);
    TaskHeadConfig head{c.task.vocab_size, c.task.num_classes};
    Model m = build_task_model(c.model, head, c.train.seed);
    LayerQuantPlan plan = make_plan(m, c.plan);
    apply_plan(m, plan);
    auto params = m.parameters();
    SgdMomentum opt(c.train.lr, c.train.momentum);
    std::vector<double> ms;
    for (int step = 0; step < steps + kWarmup; ++step) {
      auto t0 = std::chrono::steady_clock::now();
      Batch b = slice_batch(ds, int64_t(step) * c.train.batch_size,
                            c.train.batch_size, false);
      Tape t;
      NodeId loss = t.softmax_cross_entropy(
          m.logits(t, b.tokens, b.rows, c.task.seq_len), b.labels);
      for (Parameter* p : params) p->zero_grad();
      t.backward(loss);
      opt.step(params);
      auto t1 = std::chrono::steady_clock::now();
      if (step >= kWarmup)
        ms.push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    BenchRow row;
    row.path = path;
    row.median_ms = ms.empty() ? 0.0 : ms[ms.size() / 2];
    if (row.path == "float") float_ms = row.median_ms;
    row.ratio_vs_float = float_ms > 0.0 ? row.median_ms / float_ms : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "path,median_ms,ratio_vs_float\n";
  for (const auto& r : rows)
    os << r.path << "," << std::setprecision(6) << r.median_ms << ","
       << r.ratio_vs_float << "\n";
  return os.str();
}

}  // namespace qatforge
