#pragma once

#include <string>

#include "mmri/model.hpp"

namespace mmri {

// Single-file weights container: magic "MMRI", u32 format version, config
// block, then named records (u32 name length, name bytes, u32 rank, u32
// extents, little-endian f32 data). Records cover trainable parameters and
// normalization running statistics, so save/load round-trips bit-exactly.
void save_checkpoint(const MmriNet<float>& model, const std::string& path);

// reads the config block only
ModelConfig read_checkpoint_config(const std::string& path);

// loads weights into a model built from the stored config
void load_checkpoint(MmriNet<float>& model, const std::string& path);

} // namespace mmri
