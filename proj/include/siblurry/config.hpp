#pragma once

// JSON mapping of the configuration structs. Unknown keys are rejected;
// missing keys keep their defaults.

#include <nlohmann/json.hpp>

#include "siblurry/backbone.hpp"
#include "siblurry/datasets.hpp"
#include "siblurry/engine.hpp"
#include "siblurry/scenario.hpp"

namespace siblurry {

void to_json(nlohmann::json& j, const ScenarioConfig& c);
void from_json(const nlohmann::json& j, ScenarioConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const SyntheticSpec& c);
void from_json(const nlohmann::json& j, SyntheticSpec& c);
void to_json(nlohmann::json& j, const BackboneSpec& c);
void from_json(const nlohmann::json& j, BackboneSpec& c);

}  // namespace siblurry
