#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "compprobe/model.hpp"

namespace compprobe::model {

inline constexpr char kCheckpointMagic[4] = {'C', 'P', 'K', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Dtype : std::uint8_t { float32 = 1, float64 = 2 };

struct StoredTensor {
  std::string name;
  Dtype dtype = Dtype::float32;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // widened to double in memory; written back in `dtype`
};

struct ModelCheckpoint {
  ModelConfig config;
  std::vector<StoredTensor> tensors;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Transformer<T>& model);

// Throws CheckpointError on bad magic, version, truncation or malformed blobs.
ModelCheckpoint read_checkpoint(const std::filesystem::path& path);

// Builds a model from a checkpoint; tensors are converted to T.
template <typename T>
Transformer<T> model_from_checkpoint(const ModelCheckpoint& ckpt);

// Loads parameters into an existing model. Throws ConfigMismatchError when the
// stored config differs, CheckpointError on tensor count, name or shape mismatch.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, Transformer<T>& model);

}  // namespace compprobe::model
