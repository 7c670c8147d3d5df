#pragma once

#include <filesystem>

#include "metassm/ssm/model.hpp"

namespace metassm {

/// Single-file checkpoint: a length-prefixed JSON manifest (config, dataset
/// registry, seed) followed by every parameter tensor in store order, each
/// as name length, name bytes, rank, dims and little-endian f64 payload.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace metassm
