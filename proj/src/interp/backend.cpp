#include "crate/interp/backend.hpp"

#include "crate/numerics/error.hpp"
#include "crate/numerics/rng.hpp"

namespace crate::interp {

namespace {

class TruthBackend final : public Backend {
 public:
  TruthBackend(TruthLookup truth, double sign) : truth_(std::move(truth)), sign_(sign) {}

  std::string explain(const NeuronRef& n, const std::vector<ExplanationExcerpt>&) override {
    return "oracle for layer " + std::to_string(n.layer) + " neuron " + std::to_string(n.neuron);
  }

  std::vector<double> simulate(const SimulationRequest& req) override {
    auto v = truth_(req.ref);
    for (double& x : v) x *= sign_;
    return v;
  }

 private:
  TruthLookup truth_;
  double sign_;
};

class ConstantBackend final : public Backend {
 public:
  explicit ConstantBackend(double value) : value_(value) {}
  std::string explain(const NeuronRef&, const std::vector<ExplanationExcerpt>&) override {
    return "constant";
  }
  std::vector<double> simulate(const SimulationRequest& req) override {
    return std::vector<double>(req.tokens.size(), value_);
  }

 private:
  double value_;
};

class NoiseBackend final : public Backend {
 public:
  explicit NoiseBackend(std::uint64_t seed) : seed_(seed) {}
  std::string explain(const NeuronRef&, const std::vector<ExplanationExcerpt>&) override {
    return "noise";
  }
  std::vector<double> simulate(const SimulationRequest& req) override {
    const auto& n = req.ref.neuron;
    Rng rng(mix64(seed_ ^ mix64(n.layer * 0x9E3779B97F4A7C15ULL + n.neuron) ^
                  mix64(req.ref.index + 0xA5A5A5A5ULL)));
    std::vector<double> out(req.tokens.size());
    for (double& x : out) x = 10.0 * rng.uniform();
    return out;
  }

 private:
  std::uint64_t seed_;
};

}  // namespace

TruthLookup truth_lookup(const std::vector<lab::ActivationDump>& dumps) {
  return [&dumps](const ExcerptRef& ref) {
    for (const auto& d : dumps) {
      if (d.layer != ref.neuron.layer) continue;
      require(ref.neuron.neuron < d.hidden && ref.source < d.n_excerpts &&
                  ref.offset + ref.length <= d.excerpt_len,
              "bad_argument", "excerpt ref outside the dump");
      std::vector<double> v(ref.length);
      for (std::size_t t = 0; t < ref.length; ++t)
        v[t] = d.at(ref.neuron.neuron, ref.offset + t, ref.source);
      return v;
    }
    throw Error("bad_argument", "no dump for layer " + std::to_string(ref.neuron.layer));
  };
}

std::unique_ptr<Backend> replay_truth_backend(TruthLookup truth) {
  return std::make_unique<TruthBackend>(std::move(truth), 1.0);
}

std::unique_ptr<Backend> negated_backend(TruthLookup truth) {
  return std::make_unique<TruthBackend>(std::move(truth), -1.0);
}

std::unique_ptr<Backend> constant_backend(double value) {
  return std::make_unique<ConstantBackend>(value);
}

std::unique_ptr<Backend> noise_backend(std::uint64_t seed) {
  return std::make_unique<NoiseBackend>(seed);
}

std::unique_ptr<Backend> mock_backend(const std::string& name, std::uint64_t seed,
                                      const std::vector<lab::ActivationDump>& dumps) {
  if (name == "replay") return replay_truth_backend(truth_lookup(dumps));
  if (name == "negated") return negated_backend(truth_lookup(dumps));
  if (name == "constant") return constant_backend(0.0);
  if (name == "noise") return noise_backend(seed);
  throw Error("bad_argument", "unknown mock backend: " + name);
}

}  // namespace crate::interp
