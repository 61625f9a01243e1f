#pragma once

#include "json.hpp"
#include "qatforge/model.hpp"
#include "qatforge/plan.hpp"
#include "qatforge/quant.hpp"

namespace qatforge {

nlohmann::json spec_to_json(const QuantSpec& s);
QuantSpec spec_from_json(const nlohmann::json& j);

nlohmann::json encoder_config_to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

nlohmann::json plan_to_json(const LayerQuantPlan& p);
LayerQuantPlan plan_from_json(const nlohmann::json& j);

}  // namespace qatforge
