#include "crate/model/checkpoint.hpp"

#include <fstream>

#include "crate/numerics/binary_io.hpp"

namespace crate::model {

namespace fs = std::filesystem;

constexpr const char* kCheckpointFormat = "crate-ckpt-1";

const Tensor<float>& Checkpoint::tensor(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw Error("bad_checkpoint", "checkpoint has no tensor '" + std::string(name) + "'");
}

void write_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"kind", ckpt.kind},
                             {"config", ckpt.config},
                             {"step", ckpt.step},
                             {"seed", ckpt.seed}};
  nlohmann::json index = nlohmann::json::array();
  std::ofstream blob(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(blob), "io_error", "cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    io::put_f32s(blob, t.span());
    offset += t.numel() * sizeof(float);
  }
  require(static_cast<bool>(blob), "io_error", "short write to tensors.bin");
  manifest["tensors"] = std::move(index);
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Checkpoint read_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  require(static_cast<bool>(mf), "io_error", "cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_checkpoint", std::string("manifest is not valid JSON: ") + e.what());
  }
  require(manifest.value("format", "") == kCheckpointFormat, "bad_checkpoint",
          "unsupported checkpoint format in " + dir.string());
  Checkpoint ckpt;
  ckpt.kind = manifest.at("kind").get<std::string>();
  ckpt.config = manifest.at("config");
  ckpt.step = manifest.at("step").get<std::uint64_t>();
  ckpt.seed = manifest.at("seed").get<std::uint64_t>();
  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  require(static_cast<bool>(blob), "io_error", "cannot read " + (dir / "tensors.bin").string());
  for (const auto& entry : manifest.at("tensors")) {
    Tensor<float> t(entry.at("shape").get<Shape>());
    blob.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    require(io::get_f32s(blob, t.span()), "bad_checkpoint",
            "truncated tensor '" + entry.at("name").get<std::string>() + "'");
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

template <class T>
void save_model(const LanguageModel<T>& model, const fs::path& dir, std::uint64_t step,
                std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.kind = "model";
  ckpt.config = model.config();
  ckpt.step = step;
  ckpt.seed = seed;
  for (const auto& p : model.params()) ckpt.tensors.emplace_back(p.name, p.value.template cast<float>());
  write_checkpoint(dir, ckpt);
}

template <class T>
std::unique_ptr<LanguageModel<T>> load_model(const fs::path& dir, Checkpoint* meta) {
  Checkpoint ckpt = read_checkpoint(dir);
  require(ckpt.kind == "model", "bad_checkpoint", "checkpoint kind is " + ckpt.kind);
  ModelConfig config = ckpt.config.get<ModelConfig>();
  Rng scratch(0);
  auto model = make_model<T>(config, scratch);
  require(ckpt.tensors.size() == model->params().size(), "bad_checkpoint",
          "checkpoint tensor count does not match the model");
  for (auto& p : model->params()) {
    const Tensor<float>& t = ckpt.tensor(p.name);
    require(t.shape == p.value.shape, "bad_checkpoint",
            "shape mismatch for '" + p.name + "': " + shape_string(t.shape) + " vs " +
                shape_string(p.value.shape));
    p.value = t.cast<T>();
  }
  if (meta) {
    ckpt.tensors.clear();
    *meta = std::move(ckpt);
  }
  return model;
}

template void save_model<float>(const LanguageModel<float>&, const fs::path&, std::uint64_t,
                                std::uint64_t);
template void save_model<double>(const LanguageModel<double>&, const fs::path&, std::uint64_t,
                                 std::uint64_t);
template std::unique_ptr<LanguageModel<float>> load_model<float>(const fs::path&, Checkpoint*);
template std::unique_ptr<LanguageModel<double>> load_model<double>(const fs::path&, Checkpoint*);

}  // namespace crate::model
