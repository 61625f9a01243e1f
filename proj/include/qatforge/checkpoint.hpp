#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qatforge/model.hpp"
#include "qatforge/plan.hpp"

namespace qatforge {

struct LayerSizeEntry {
  std::string name;
  int64_t params = 0;
  int bits = 32;             // stored weight width: 32, 8, or 4
  int64_t payload_bytes = 0; // packed codes or raw float32
  int64_t scale_bytes = 0;   // 4 bytes per stored scale
};

// Byte accounting for a serialized model. Reports both the code-only
// ("naive") figure and the scale-inclusive total; 1 MB = 10^6 bytes
// everywhere.
struct SizeLedger {
  std::vector<LayerSizeEntry> layers;
  int64_t header_bytes = 0;
  int64_t float_baseline_bytes = 0;  // sum of params*4 over all layers

  int64_t payload_bytes() const;
  int64_t scale_bytes() const;
  int64_t total_bytes() const;  // payload + scales + header
  double naive_mb() const { return double(payload_bytes()) / 1e6; }
  double total_mb() const { return double(total_bytes()) / 1e6; }
  double ratio_naive() const;  // float baseline over code bytes
  double ratio_total() const;  // float baseline over the full total
  std::string to_csv() const;
};

// Binary checkpoint: "QATFORGE" magic, u16 version, config blob (encoder,
// head, plan as JSON), layer records (name, kind, bits, axis, shape,
// scales, payload), and a per-layer byte ledger footer. Little-endian.
// Weights under int4/int8 specs are quantized once at save time with
// static per-output-channel scales; int4 payloads are nibble-packed.
SizeLedger save_checkpoint(const Model& model, const LayerQuantPlan& plan,
                           const std::string& path);

struct LoadedCheckpoint {
  Model model;
  LayerQuantPlan plan;
  SizeLedger ledger;
};

// Rebuilds the model from the stored config; quantized layers carry their
// stored codes (Parameter::frozen), so inference reruns from integers
// without requantization and reproduces the pre-save forward bit-exactly.
LoadedCheckpoint load_checkpoint(const std::string& path);

struct LayerCensusEntry {
  std::string name;
  int64_t params = 0;
  int64_t channels = 1;  // per-channel scale count if the layer quantizes
};

std::vector<LayerCensusEntry> census_of(const Model& m);

// Pure byte arithmetic on a parameter census under a plan; no file I/O.
SizeLedger size_report(const std::vector<LayerCensusEntry>& census,
                       const LayerQuantPlan& plan);

}  // namespace qatforge
