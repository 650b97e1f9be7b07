#pragma once

// Merged command-line configuration: a JSON document with sections "model",
// "train", "mask" and "scene", plus dotted overrides such as train.lr=1e-3.

#include "dms2f/data.hpp"
#include "dms2f/training.hpp"

#include <string>
#include <vector>

namespace dms2f {

struct RunConfig {
  ModelConfig model;  // model.bands = 0 means "take it from the cube"
  TrainConfig train;  // train.mask is the "mask" section
  SceneSpec scene;
};

/// Starts from the defaults, applies `json_text` (may be empty) and then each
/// "section.field[.sub]=value" override; values parse as JSON, falling back to
/// a plain string. Unknown sections or fields and wrongly typed values throw
/// std::invalid_argument naming the field.
RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides = {});

/// Validates every section; a zero model.bands is checked as if it were
/// scene.bands. Throws std::invalid_argument with the failing section.
void validate(const RunConfig& config);

/// All four sections as pretty-printed JSON, keys in declaration order.
std::string run_config_json(const RunConfig& config);

}  // namespace dms2f
