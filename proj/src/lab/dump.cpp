#include "crate/lab/dump.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "crate/numerics/binary_io.hpp"

namespace crate::lab {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'C', 'R', 'T', 'A', 'C', 'T', '0', '1'};
constexpr std::size_t kChunk = 16;  // excerpts per forward pass

}  // namespace

void ActivationDump::validate() const {
  require(arch == "crate" || arch == "gpt", "bad_dump", "unknown arch '" + arch + "'");
  require(hidden > 0 && excerpt_len > 0 && n_excerpts > 0, "bad_dump", "empty dump");
  require(activations.size() == hidden * excerpt_len * n_excerpts, "bad_dump",
          "activation count does not match h x T_e x B_e");
  require(tokens.size() == excerpt_len * n_excerpts, "bad_dump",
          "token count does not match B_e x T_e");
  for (float v : activations) {
    require(std::isfinite(v), "bad_dump", "non-finite activation in dump");
    if (arch == "crate") require(v >= 0.0f, "bad_dump", "negative activation in a crate dump");
  }
}

void write_dump(const fs::path& path, const ActivationDump& dump) {
  dump.validate();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const nlohmann::json header = {{"version", ActivationDump::kVersion},
                                 {"model_id", dump.model_id},
                                 {"arch", dump.arch},
                                 {"layer", dump.layer},
                                 {"h", dump.hidden},
                                 {"T_e", dump.excerpt_len},
                                 {"B_e", dump.n_excerpts}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), "io_error", "cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  io::put_le(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  io::put_f32s(os, dump.activations);
  for (std::uint32_t id : dump.tokens) io::put_le(os, id);
  require(static_cast<bool>(os), "io_error", "short write to " + path.string());
}

ActivationDump read_dump(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "io_error", "cannot read " + path.string());
  char magic[8];
  require(static_cast<bool>(is.read(magic, sizeof magic)) && std::memcmp(magic, kMagic, 8) == 0,
          "bad_dump", path.string() + " is not an activation dump");
  std::uint32_t header_len = 0;
  require(io::get_le(is, header_len), "truncated", "dump header length missing");
  std::string text(header_len, '\0');
  require(static_cast<bool>(is.read(text.data(), header_len)), "truncated", "dump header cut short");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_dump", std::string("dump header is not valid JSON: ") + e.what());
  }
  require(header.value("version", 0) == ActivationDump::kVersion, "bad_dump",
          "unsupported dump version");
  ActivationDump dump;
  dump.model_id = header.at("model_id").get<std::string>();
  dump.arch = header.at("arch").get<std::string>();
  dump.layer = header.at("layer").get<std::size_t>();
  dump.hidden = header.at("h").get<std::size_t>();
  dump.excerpt_len = header.at("T_e").get<std::size_t>();
  dump.n_excerpts = header.at("B_e").get<std::size_t>();
  dump.activations.resize(dump.hidden * dump.excerpt_len * dump.n_excerpts);
  dump.tokens.resize(dump.excerpt_len * dump.n_excerpts);
  require(io::get_f32s(is, dump.activations), "truncated", "dump activations cut short");
  for (auto& id : dump.tokens) require(io::get_le(is, id), "truncated", "dump tokens cut short");
  dump.validate();
  return dump;
}

template <class T>
std::vector<ActivationDump> collect_activations(const model::LanguageModel<T>& model,
                                                const data::TokenStream& stream,
                                                const std::vector<std::size_t>& layers,
                                                std::size_t n_excerpts, std::size_t excerpt_len,
                                                Rng& rng, const std::string& model_id) {
  const auto& cfg = model.config();
  require(!layers.empty(), "bad_argument", "no layers requested");
  for (std::size_t l : layers)
    require(l < cfg.n_layer, "bad_argument", "layer " + std::to_string(l) + " out of range");
  require(n_excerpts > 0 && excerpt_len > 0, "bad_argument", "B_e and T_e must be positive");
  require(excerpt_len <= cfg.context, "context_overflow", "T_e exceeds the model context");

  const auto windows = data::sample_batch(stream, n_excerpts, excerpt_len, rng);
  const std::size_t h = cfg.d_hidden;
  std::vector<ActivationDump> dumps(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& d = dumps[i];
    d.model_id = model_id;
    d.arch = std::string(model::arch_name(cfg.arch));
    d.layer = layers[i];
    d.hidden = h;
    d.excerpt_len = excerpt_len;
    d.n_excerpts = n_excerpts;
    d.activations.resize(h * excerpt_len * n_excerpts);
    d.tokens = windows.inputs;
  }

  for (std::size_t first = 0; first < n_excerpts; first += kChunk) {
    const std::size_t count = std::min(kChunk, n_excerpts - first);
    std::span<const std::uint32_t> toks(windows.inputs.data() + first * excerpt_len,
                                        count * excerpt_len);
    auto hook = [&](std::size_t layer, Mat<T>& a) {
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i] != layer) continue;
        auto& d = dumps[i];
        for (std::size_t b = 0; b < count; ++b)
          for (std::size_t t = 0; t < excerpt_len; ++t)
            for (std::size_t n = 0; n < h; ++n)
              d.activations[(n * excerpt_len + t) * n_excerpts + first + b] =
                  static_cast<float>(a(static_cast<Eigen::Index>(b * excerpt_len + t),
                                       static_cast<Eigen::Index>(n)));
      }
    };
    (void)model.logits(toks, count, excerpt_len, hook);
  }
  for (const auto& d : dumps) d.validate();
  return dumps;
}

fs::path dump_path(const fs::path& dir, std::size_t layer) {
  return dir / ("layer_" + std::to_string(layer) + ".act");
}

template <class T>
std::vector<fs::path> dump_activations(const model::LanguageModel<T>& model,
                                       const data::TokenStream& stream,
                                       const std::vector<std::size_t>& layers,
                                       std::size_t n_excerpts, std::size_t excerpt_len, Rng& rng,
                                       const fs::path& out_dir, const std::string& model_id) {
  auto dumps = collect_activations(model, stream, layers, n_excerpts, excerpt_len, rng, model_id);
  std::vector<fs::path> paths;
  for (const auto& d : dumps) {
    paths.push_back(dump_path(out_dir, d.layer));
    write_dump(paths.back(), d);
  }
  return paths;
}

std::vector<std::size_t> scored_layers(std::size_t n_layer) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l + 1 < n_layer; ++l) out.push_back(l);
  return out;
}

double zero_fraction(std::span<const float> values) {
  if (values.empty()) return 0.0;
  std::size_t zeros = 0;
  for (float v : values) zeros += std::abs(v) <= kZeroThreshold;
  return static_cast<double>(zeros) / static_cast<double>(values.size());
}

double zero_fraction(const ActivationDump& dump) { return zero_fraction(dump.activations); }

std::vector<LayerSparsity> sparsity_report(const std::vector<ActivationDump>& dumps) {
  std::vector<LayerSparsity> rows;
  for (const auto& d : dumps) rows.push_back({d.layer, zero_fraction(d), d.activations.size()});
  return rows;
}

void write_sparsity_csv(const fs::path& path, const std::vector<LayerSparsity>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), "io_error", "cannot write " + path.string());
  os.precision(9);
  os << kSparsityCsvHeader << "\n";
  for (const auto& r : rows) os << r.layer << ',' << r.zero_fraction << ',' << r.entries << "\n";
}

#define CRATE_INSTANTIATE(T)                                                                    \
  template std::vector<ActivationDump> collect_activations<T>(                                 \
      const model::LanguageModel<T>&, const data::TokenStream&, const std::vector<std::size_t>&, \
      std::size_t, std::size_t, Rng&, const std::string&);                                      \
  template std::vector<fs::path> dump_activations<T>(                                          \
      const model::LanguageModel<T>&, const data::TokenStream&, const std::vector<std::size_t>&, \
      std::size_t, std::size_t, Rng&, const fs::path&, const std::string&);

CRATE_INSTANTIATE(float)
CRATE_INSTANTIATE(double)
#undef CRATE_INSTANTIATE

}  // namespace crate::lab
