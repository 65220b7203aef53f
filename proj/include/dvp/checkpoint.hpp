// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "dvp/model.hpp"

namespace dvp {

/// Single-file model checkpoint, little-endian:
///   "DVPM", u32 version (1),
///   u32 kind, layers, width, heads, ffn_mult, vocab, text_len, num_classes,
///   u32 visual_width, generator count, adapter width (0 = none),
///   u32 tensor count, then per tensor:
///     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values.
void save_checkpoint(const std::filesystem::path& path, const Model& model);

/// Rebuilds the model and restores every tensor. Adapter models come back
/// under FreezePolicy::adapter_tuning(), others fully trainable. Throws on
/// a bad header, an unknown or missing tensor or a shape mismatch.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace dvp
