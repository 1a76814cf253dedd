#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/model/language_model.hpp"

namespace crate::model {

/// On-disk layout: <dir>/manifest.json and <dir>/tensors.bin. The manifest
/// holds {format, kind, config, step, seed, tensors: [{name, shape, offset}]};
/// offsets are byte offsets into tensors.bin, which is raw little-endian f32.
struct Checkpoint {
  std::string kind;  // "model" | "sae"
  nlohmann::json config;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(std::string_view name) const;
};

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

template <class T>
void save_model(const LanguageModel<T>& model, const std::filesystem::path& dir,
                std::uint64_t step, std::uint64_t seed);

template <class T>
std::unique_ptr<LanguageModel<T>> load_model(const std::filesystem::path& dir,
                                             Checkpoint* meta = nullptr);

}  // namespace crate::model
