#pragma once

#include <string>

#include "latentlab/model.hpp"

namespace latentlab {

// Versioned binary checkpoint: magic + version + config fields + stage
// markers, then named tensors (name length, name bytes, rows, cols, raw
// little-endian doubles). Save/load round-trips bit-exactly.
void save_checkpoint(const ModelState &state, const std::string &path);
ModelState load_checkpoint(const std::string &path);

}  // namespace latentlab
