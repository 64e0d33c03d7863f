#pragma once

#include <string>

#include "segkey/segnet.hpp"

namespace segkey {

// Binary checkpoint:
//   "SGCK" | u32 version | u32 n | n bytes of ModelConfig JSON
//   | u32 count | count x (u32 name length, name, SGT1 tensor)
//   | u32 CRC-32 of every preceding byte.
// Parameters come first in model order, then batch-norm running statistics
// as "<bn>.running_mean" / "<bn>.running_var". Keys are never stored.
std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace segkey
