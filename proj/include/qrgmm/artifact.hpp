#pragma once

#include "qrgmm/quantile_model.hpp"
#include "qrgmm/schema.hpp"

#include <json.hpp>

#include <memory>
#include <string>

namespace qrgmm {

inline constexpr const char* kArtifactFormat = "qrgmm-model";
inline constexpr int kArtifactVersion = 1;

// Versioned JSON container shared by every model kind:
//   {"format": "qrgmm-model", "version": 1, "kind": ..., "schema": ..., "m": ..., "model": {...}, "meta": {...}}
// Doubles are written in shortest round-trip form, so load(save(model)) is
// bit-exact. "meta" is free-form and excluded from the model id.
nlohmann::json schema_to_json(const FieldSchema& schema);
FieldSchema schema_from_json(const nlohmann::json& j);

nlohmann::json model_to_json(const QuantileModel& model, const nlohmann::json& meta = nlohmann::json::object());
std::unique_ptr<QuantileModel> model_from_json(const nlohmann::json& j);

// Content hash of everything but "meta".
std::string model_id(const nlohmann::json& artifact);
std::string model_id(const QuantileModel& model);

void save_model(const QuantileModel& model, const std::string& path,
                const nlohmann::json& meta = nlohmann::json::object());
std::unique_ptr<QuantileModel> load_model(const std::string& path);

}  // namespace qrgmm
