#pragma once

// Binary checkpoint:
//   "HYRETCKP" | u64 LE header length | JSON header | float32 LE tensor data
// The header holds {version, dtype, model_config, tensors: [{name, shape, offset, size}]}
// with offsets in bytes from the start of the data section.

#include <filesystem>

#include "hyret/model.hpp"

namespace hyret {

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ChangeDetector<T>& model);

// The model must have the same tensor names and shapes as the file.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ChangeDetector<T>& model);

ModelConfig read_checkpoint_config(const std::filesystem::path& path);

} // namespace hyret
