#include "qatforge/json_io.hpp"

#include <stdexcept>

namespace qatforge {

using nlohmann::json;

json spec_to_json(const QuantSpec& s) {
  json j;
  j["weight_bits"] = s.weight_bits ? json(*s.weight_bits) : json(nullptr);
  j["activation_bits"] =
      s.activation_bits ? json(*s.activation_bits) : json(nullptr);
  switch (s.path) {
    case ExecPath::native: j["path"] = "native"; break;
    case ExecPath::fake: j["path"] = "fake"; break;
    case ExecPath::float32: j["path"] = "float"; break;
  }
  j["rounding"] = s.rounding == Rounding::nearest ? "nearest" : "truncate";
  j["activation_axis"] = s.activation_axis;
  return j;
}

QuantSpec spec_from_json(const json& j) {
  QuantSpec s;
  if (j.contains("weight_bits") && !j["weight_bits"].is_null())
    s.weight_bits = j["weight_bits"].get<int>();
  if (j.contains("activation_bits") && !j["activation_bits"].is_null())
    s.activation_bits = j["activation_bits"].get<int>();
  std::string path = j.value("path", "float");
  if (path == "native")
    s.path = ExecPath::native;
  else if (path == "fake")
    s.path = ExecPath::fake;
  else if (path == "float")
    s.path = ExecPath::float32;
  else
    throw std::invalid_argument("unknown exec path '" + path + "'");
  std::string r = j.value("rounding", "nearest");
  if (r == "nearest")
    s.rounding = Rounding::nearest;
  else if (r == "truncate")
    s.rounding = Rounding::truncate;
  else
    throw std::invalid_argument("unknown rounding mode '" + r + "'");
  s.activation_axis = j.value("activation_axis", kPerTensor);
  s.validate();
  return s;
}

json encoder_config_to_json(const EncoderConfig& c) {
  json blocks = json::array();
  for (const auto& b : c.blocks) {
    blocks.push_back({{"model_dim", b.model_dim},
                      {"num_heads", b.num_heads},
                      {"ffn_expansion", b.ffn_expansion},
                      {"conv_kernel", b.conv_kernel},
                      {"causal", b.causal}});
  }
  return json{{"passes", c.passes},
              {"first_pass_blocks", c.first_pass_blocks},
              {"blocks", blocks}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.passes = j.value("passes", 1);
  c.first_pass_blocks = j.value("first_pass_blocks", 0);
  for (const auto& jb : j.at("blocks")) {
    ConformerBlockConfig b;
    b.model_dim = jb.value("model_dim", 32);
    b.num_heads = jb.value("num_heads", 4);
    b.ffn_expansion = jb.value("ffn_expansion", 4);
    b.conv_kernel = jb.value("conv_kernel", 0);
    b.causal = jb.value("causal", false);
    c.blocks.push_back(b);
  }
  c.validate();
  return c;
}

json plan_to_json(const LayerQuantPlan& p) {
  json entries = json::array();
  for (const auto& [id, spec] : p.entries())
    entries.push_back({{"layer", id}, {"spec", spec_to_json(spec)}});
  return json{{"name", p.name},
              {"default", spec_to_json(p.default_spec)},
              {"entries", entries}};
}

LayerQuantPlan plan_from_json(const json& j) {
  LayerQuantPlan p;
  p.name = j.value("name", "custom");
  if (j.contains("default")) p.default_spec = spec_from_json(j["default"]);
  if (j.contains("entries"))
    for (const auto& je : j["entries"])
      p.set(je.at("layer").get<std::string>(), spec_from_json(je.at("spec")));
  return p;
}

}  // namespace qatforge
