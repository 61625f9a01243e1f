#include "qatforge/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "qatforge/json_io.hpp"

namespace qatforge {

namespace {

constexpr char kMagic[8] = {'Q', 'A', 'T', 'F', 'O', 'R', 'G', 'E'};
constexpr uint16_t kVersion = 1;

enum class PayloadKind : uint8_t { float32 = 0, int8 = 1, packed_int4 = 2 };

void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(v);
  for (size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
  put_bytes(os, buf, sizeof(T));
}

void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_le<uint32_t>(os, u);
}

void read_exact(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw std::runtime_error(std::string("truncated checkpoint while reading ") +
                             what);
}

template <typename T>
T get_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(T)];
  read_exact(is, buf, sizeof(T), what);
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (size_t i = 0; i < sizeof(T); ++i)
    u |= static_cast<U>(buf[i]) << (8 * i);
  return static_cast<T>(u);
}

float get_f32(std::istream& is, const char* what) {
  uint32_t u = get_le<uint32_t>(is, what);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

int bits_of(const QuantSpec& spec) {
  return spec.weight_bits ? *spec.weight_bits : 32;
}

// storage spec for a parameter under a plan: only quantizable weights and
// explicitly listed conv kernels quantize; everything else stays float
QuantSpec storage_spec(const Model& m, const LayerQuantPlan& plan,
                       const std::string& name) {
  auto q = m.quantizable_layer_ids();
  if (std::find(q.begin(), q.end(), name) != q.end())
    return plan.spec_for(name);
  auto c = m.conv_kernel_ids();
  if (std::find(c.begin(), c.end(), name) != c.end() && plan.lists(name))
    return plan.spec_for(name);
  return QuantSpec::make_float();
}

}  // namespace

int64_t SizeLedger::payload_bytes() const {
  int64_t n = 0;
  for (const auto& l : layers) n += l.payload_bytes;
  return n;
}

int64_t SizeLedger::scale_bytes() const {
  int64_t n = 0;
  for (const auto& l : layers) n += l.scale_bytes;
  return n;
}

int64_t SizeLedger::total_bytes() const {
  return payload_bytes() + scale_bytes() + header_bytes;
}

double SizeLedger::ratio_naive() const {
  return double(float_baseline_bytes) / double(payload_bytes());
}

double SizeLedger::ratio_total() const {
  return double(float_baseline_bytes) / double(total_bytes());
}

std::string SizeLedger::to_csv() const {
  std::ostringstream os;
  os << "layer,params,bits,payload_bytes,scale_bytes,total_bytes\n";
  for (const auto& l : layers)
    os << l.name << "," << l.params << "," << l.bits << ","
       << l.payload_bytes << "," << l.scale_bytes << ","
       << (l.payload_bytes + l.scale_bytes) << "\n";
  os << "HEADER,,," << header_bytes << ",0," << header_bytes << "\n";
  os << "TOTAL," << [this] {
    int64_t p = 0;
    for (const auto& l : layers) p += l.params;
    return p;
  }() << ",," << payload_bytes() << "," << scale_bytes() << ","
     << total_bytes() << "\n";
  return os.str();
}

SizeLedger save_checkpoint(const Model& model, const LayerQuantPlan& plan,
                           const std::string& path) {
  validate_plan(model, plan);
  nlohmann::json cfg;
  cfg["encoder"] = encoder_config_to_json(model.encoder_cfg);
  if (model.head_cfg)
    cfg["head"] = {{"vocab_size", model.head_cfg->vocab_size},
                   {"num_classes", model.head_cfg->num_classes}};
  else
    cfg["head"] = nullptr;
  cfg["plan"] = plan_to_json(plan);
  const std::string cfg_str = cfg.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint file " + path);
  put_bytes(f, kMagic, 8);
  put_le<uint16_t>(f, kVersion);
  put_le<uint32_t>(f, static_cast<uint32_t>(cfg_str.size()));
  put_bytes(f, cfg_str.data(), cfg_str.size());

  auto params = model.parameters();
  put_le<uint32_t>(f, static_cast<uint32_t>(params.size()));

  SizeLedger ledger;
  ledger.header_bytes =
      8 + 2 + 4 + static_cast<int64_t>(cfg_str.size()) + 4;

  for (const Parameter* p : params) {
    const QuantSpec spec = storage_spec(model, plan, p->name);
    LayerSizeEntry entry;
    entry.name = p->name;
    entry.params = p->value.numel();
    entry.bits = bits_of(spec);
    ledger.float_baseline_bytes += p->value.numel() * 4;

    put_le<uint32_t>(f, static_cast<uint32_t>(p->name.size()));
    put_bytes(f, p->name.data(), p->name.size());

    PayloadKind kind = PayloadKind::float32;
    std::vector<uint8_t> payload;
    std::vector<float> scales;
    int8_t axis = -1;
    if (spec.weight_bits) {
      QuantizedTensor q = quantize_dynamic(p->value, 1, *spec.weight_bits,
                                           spec.rounding);
      scales = q.scales();
      axis = 1;
      if (*spec.weight_bits == 4) {
        kind = PayloadKind::packed_int4;
        payload = pack_int4(q.codes());
      } else {
        kind = PayloadKind::int8;
        payload.resize(q.codes().size());
        std::memcpy(payload.data(), q.codes().data(), q.codes().size());
      }
    } else {
      payload.resize(static_cast<size_t>(p->value.numel()) * 4);
      std::memcpy(payload.data(), p->value.data(), payload.size());
    }

    put_le<uint8_t>(f, static_cast<uint8_t>(kind));
    put_le<uint8_t>(f, static_cast<uint8_t>(entry.bits));
    put_le<int8_t>(f, axis);
    put_le<uint8_t>(f, static_cast<uint8_t>(p->value.rank()));
    for (int64_t d : p->value.shape())
      put_le<uint32_t>(f, static_cast<uint32_t>(d));
    put_le<uint32_t>(f, static_cast<uint32_t>(scales.size()));
    for (float s : scales) put_f32(f, s);
    put_le<uint64_t>(f, payload.size());
    put_bytes(f, payload.data(), payload.size());

    entry.payload_bytes = static_cast<int64_t>(payload.size());
    entry.scale_bytes = static_cast<int64_t>(scales.size()) * 4;
    ledger.layers.push_back(std::move(entry));
  }

  // footer: per-layer payload byte ledger
  put_le<uint32_t>(f, static_cast<uint32_t>(ledger.layers.size()));
  uint64_t total = 0;
  for (const auto& l : ledger.layers) {
    put_le<uint64_t>(f, static_cast<uint64_t>(l.payload_bytes));
    total += static_cast<uint64_t>(l.payload_bytes);
  }
  put_le<uint64_t>(f, total);
  if (!f) throw std::runtime_error("write failure on checkpoint " + path);
  return ledger;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint file " + path);
  char magic[8];
  read_exact(f, magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path);
  uint16_t version = get_le<uint16_t>(f, "version");
  if (version != kVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " unsupported (this build reads version " +
                             std::to_string(kVersion) + ")");
  uint32_t cfg_len = get_le<uint32_t>(f, "config length");
  std::string cfg_str(cfg_len, '\0');
  read_exact(f, cfg_str.data(), cfg_len, "config blob");
  nlohmann::json cfg = nlohmann::json::parse(cfg_str);
  EncoderConfig enc = encoder_config_from_json(cfg.at("encoder"));
  LayerQuantPlan plan = plan_from_json(cfg.at("plan"));

  LoadedCheckpoint out;
  if (!cfg.at("head").is_null()) {
    TaskHeadConfig head;
    head.vocab_size = cfg["head"].value("vocab_size", 0);
    head.num_classes = cfg["head"].value("num_classes", 0);
    out.model = build_task_model(enc, head, 0);
  } else {
    out.model = build_encoder(enc, 0);
  }
  out.plan = plan;

  uint32_t count = get_le<uint32_t>(f, "layer count");
  auto params = out.model.parameters();
  if (count != params.size())
    throw std::runtime_error(
        "checkpoint holds " + std::to_string(count) + " layers but the " +
        "stored config builds " + std::to_string(params.size()));

  out.ledger.header_bytes = 8 + 2 + 4 + static_cast<int64_t>(cfg_len) + 4;
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_le<uint32_t>(f, "layer name length");
    std::string name(name_len, '\0');
    read_exact(f, name.data(), name_len, "layer name");
    auto kind = static_cast<PayloadKind>(get_le<uint8_t>(f, "payload kind"));
    int bits = get_le<uint8_t>(f, "bits");
    int8_t axis = get_le<int8_t>(f, "quant axis");
    uint8_t rank = get_le<uint8_t>(f, "rank");
    Shape shape;
    for (uint8_t d = 0; d < rank; ++d)
      shape.push_back(get_le<uint32_t>(f, "dim"));
    uint32_t nscales = get_le<uint32_t>(f, "scale count");
    std::vector<float> scales(nscales);
    for (auto& s : scales) s = get_f32(f, "scale");
    uint64_t payload_len = get_le<uint64_t>(f, "payload length");
    std::vector<uint8_t> payload(payload_len);
    read_exact(f, payload.data(), payload_len, "payload");

    Parameter* p = out.model.find(name);
    if (!p)
      throw std::runtime_error("checkpoint layer " + name +
                               " does not exist in the stored config");
    if (!seen.insert(name).second)
      throw std::runtime_error("duplicate checkpoint layer " + name);
    if (p->value.shape() != shape)
      throw std::runtime_error("checkpoint layer " + name +
                               " has shape " + shape_str(shape) +
                               " but the model expects " +
                               shape_str(p->value.shape()));

    const int64_t numel = shape_numel(shape);
    if (kind == PayloadKind::float32) {
      if (payload_len != static_cast<uint64_t>(numel) * 4)
        throw std::runtime_error("payload size mismatch for " + name);
      std::memcpy(p->value.data(), payload.data(), payload.size());
      p->frozen.reset();
    } else {
      std::vector<int8_t> codes;
      if (kind == PayloadKind::packed_int4) {
        codes = unpack_int4(payload, numel);
      } else {
        if (payload_len != static_cast<uint64_t>(numel))
          throw std::runtime_error("payload size mismatch for " + name);
        codes.resize(payload.size());
        std::memcpy(codes.data(), payload.data(), payload.size());
      }
      QuantizedTensor q(shape, std::move(codes), scales, axis, bits);
      p->value = dequantize(q);
      p->frozen = std::move(q);
    }
    LayerSizeEntry entry;
    entry.name = name;
    entry.params = numel;
    entry.bits = kind == PayloadKind::float32 ? 32 : bits;
    entry.payload_bytes = static_cast<int64_t>(payload_len);
    entry.scale_bytes = static_cast<int64_t>(nscales) * 4;
    out.ledger.layers.push_back(std::move(entry));
    out.ledger.float_baseline_bytes += numel * 4;
  }

  // footer must agree with the payload bytes actually read
  uint32_t footer_count = get_le<uint32_t>(f, "footer count");
  if (footer_count != count)
    throw std::runtime_error("footer layer count mismatch");
  uint64_t total = 0;
  for (uint32_t i = 0; i < footer_count; ++i) {
    uint64_t b = get_le<uint64_t>(f, "footer entry");
    if (b != static_cast<uint64_t>(out.ledger.layers[i].payload_bytes))
      throw std::runtime_error("footer ledger disagrees for layer " +
                               out.ledger.layers[i].name);
    total += b;
  }
  uint64_t footer_total = get_le<uint64_t>(f, "footer total");
  if (footer_total != total)
    throw std::runtime_error("footer total does not match payload bytes");

  apply_plan(out.model, out.plan);
  return out;
}

std::vector<LayerCensusEntry> census_of(const Model& m) {
  std::vector<LayerCensusEntry> out;
  for (const Parameter* p : m.parameters()) {
    LayerCensusEntry e;
    e.name = p->name;
    e.params = p->value.numel();
    e.channels = p->value.rank() >= 2 ? p->value.dim(p->value.rank() - 1) : 1;
    out.push_back(std::move(e));
  }
  return out;
}

SizeLedger size_report(const std::vector<LayerCensusEntry>& census,
                       const LayerQuantPlan& plan) {
  SizeLedger ledger;
  ledger.header_bytes = 8 + 2 + 4 + 4;  // bare header, no config blob
  for (const auto& c : census) {
    const QuantSpec spec = plan.spec_for(c.name);
    LayerSizeEntry e;
    e.name = c.name;
    e.params = c.params;
    e.bits = bits_of(spec);
    if (e.bits == 32) {
      e.payload_bytes = c.params * 4;
      e.scale_bytes = 0;
    } else if (e.bits == 8) {
      e.payload_bytes = c.params;
      e.scale_bytes = 4 * c.channels;
    } else {
      e.payload_bytes = (c.params + 1) / 2;
      e.scale_bytes = 4 * c.channels;
    }
    ledger.float_baseline_bytes += c.params * 4;
    ledger.layers.push_back(std::move(e));
  }
  return ledger;
}

}  // namespace qatforge
