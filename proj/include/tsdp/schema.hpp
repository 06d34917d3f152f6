#pragma once

#include <string>
#include <vector>

#include "json.hpp"

// Validator for the JSON Schema subset used by the experiment config:
// type, properties, required, additionalProperties (bool), items, enum,
// minimum, maximum, exclusiveMinimum, minItems, uniqueItems.
namespace tsdp::schema {

// Empty when valid; otherwise one "<json pointer>: <reason>" per violation.
std::vector<std::string> validate(const nlohmann::json& schema, const nlohmann::json& instance);

}  // namespace tsdp::schema
