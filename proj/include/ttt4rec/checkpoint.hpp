#pragma once

#include "ttt4rec/model.hpp"

#include <string>

namespace ttt4rec {

// Digest over the fields that shape the parameter set and the eval-time
// forward arithmetic (architecture, rotation factor, context window, vocab).
// Training-only knobs do not participate, so a model trained with one batch
// size loads fine for evaluation under another.
std::uint64_t config_digest(const ModelConfig& cfg, Index vocab);

// Binary format, little-endian throughout:
//   8-byte magic "TTT4REC1"
//   one UTF-8 header line: "v1 digest=<16 hex>\n"
//   per tensor: u32 name length, name bytes, u8 dtype (0 = f32), u8 rank,
//               u32 dims..., raw f32 values
// Values are stored in 32-bit precision; a freshly constructed model is
// already quantized to that precision, so save -> load -> forward is bitwise
// identical to the pre-save forward.
void checkpoint_save(const Model& model, const std::string& path);
Model checkpoint_load(const std::string& path, const ModelConfig& cfg, Index vocab);

}  // namespace ttt4rec
