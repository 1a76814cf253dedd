#include "crate/interp/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "crate/numerics/error.hpp"

namespace crate::interp {

namespace fs = std::filesystem;

std::vector<int> normalize_activations(std::span<const float> vals, float max) {
  std::vector<int> out(vals.size(), 0);
  if (!(max > 0.0f)) return out;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double v = std::max(0.0, static_cast<double>(vals[i]));
    out[i] = static_cast<int>(std::lround(std::min(1.0, v / max) * kMaxLevel));
  }
  return out;
}

std::vector<int> normalize_activations(std::span<const float> vals) {
  float max = 0.0f;
  for (float v : vals) max = std::max(max, v);
  return normalize_activations(vals, max);
}

std::optional<double> correlation(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "bad_argument", "correlation of vectors of different lengths");
  require(x.size() >= 2, "bad_argument", "correlation needs at least two pairs");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::string_view status_name(ScoreStatus s) {
  return s == ScoreStatus::kOk ? "ok" : "undefined_correlation";
}

NeuronScore score_neuron(const lab::ActivationDump& dump, std::size_t neuron,
                         const lab::MetricConfig& metric, Backend& backend, Rng& rng) {
  require(neuron < dump.hidden, "bad_argument", "neuron out of range");
  const auto sel = lab::select_excerpts(dump, neuron, metric, rng);

  float global_max = 0.0f;
  const std::size_t per_neuron = dump.excerpt_len * dump.n_excerpts;
  for (std::size_t i = 0; i < per_neuron; ++i)
    global_max = std::max(global_max, dump.activations[neuron * per_neuron + i]);

  NeuronScore s;
  s.layer = dump.layer;
  s.neuron = neuron;
  const NeuronRef ref{dump.model_id, dump.layer, neuron};

  std::vector<ExplanationExcerpt> shown;
  shown.reserve(sel.explain.size());
  for (const auto& e : sel.explain)
    shown.push_back({e.tokens, normalize_activations(e.activations, global_max)});
  s.explanation = backend.explain(ref, shown);

  std::vector<double> all_true, all_sim;
  for (std::size_t i = 0; i < sel.simulate.size(); ++i) {
    const auto& e = sel.simulate[i];
    SimulationRequest req{s.explanation, e.tokens, {ref, i, e.source, e.offset, e.tokens.size()}};
    auto sim = backend.simulate(req);
    require(sim.size() == e.tokens.size(), "backend_error",
            "simulation returned " + std::to_string(sim.size()) + " values for " +
                std::to_string(e.tokens.size()) + " tokens");
    std::vector<double> truth(e.activations.begin(), e.activations.end());
    all_true.insert(all_true.end(), truth.begin(), truth.end());
    all_sim.insert(all_sim.end(), sim.begin(), sim.end());
    s.true_acts.push_back(std::move(truth));
    s.simulated.push_back(std::move(sim));
  }
  for (double v : all_sim) require(std::isfinite(v), "backend_error", "non-finite simulation");

  if (const auto rho = correlation(all_true, all_sim)) {
    s.rho = *rho;
    s.status = ScoreStatus::kOk;
  }
  return s;
}

namespace {

void summarize(LayerScore& ls) {
  ls.n_ok = ls.n_undefined = 0;
  double sum = 0;
  for (const auto& n : ls.neurons) {
    if (n.status == ScoreStatus::kOk) {
      ++ls.n_ok;
      sum += n.rho;
    } else {
      ++ls.n_undefined;
    }
  }
  if (ls.n_ok == 0) return;
  ls.mean_rho = sum / static_cast<double>(ls.n_ok);
  double var = 0;
  for (const auto& n : ls.neurons)
    if (n.status == ScoreStatus::kOk) var += (n.rho - ls.mean_rho) * (n.rho - ls.mean_rho);
  ls.std_rho = std::sqrt(var / static_cast<double>(ls.n_ok));
}

}  // namespace

ModelScore score_model(const std::vector<lab::ActivationDump>& dumps, std::size_t n_layer,
                       const lab::MetricConfig& metric, Backend& backend,
                       const ScoreOptions& options, Rng& rng) {
  require(n_layer >= 2, "bad_argument", "a model needs at least two layers to be scored");
  require(options.hist_bins > 0, "bad_argument", "hist_bins must be positive");
  const std::uint64_t run = rng.next_u64();

  ModelScore out;
  out.metric = metric.name;
  out.hist_bins = options.hist_bins;

  struct Job {
    const lab::ActivationDump* dump;
    std::size_t layer_slot;
    std::size_t neuron;
  };
  std::vector<Job> jobs;
  std::vector<const lab::ActivationDump*> scored;
  for (const auto& d : dumps)
    if (d.layer + 1 < n_layer) scored.push_back(&d);
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto* a, const auto* b) { return a->layer < b->layer; });
  require(!scored.empty(), "bad_argument", "no dump below the last layer");
  for (std::size_t i = 1; i < scored.size(); ++i)
    require(scored[i]->layer != scored[i - 1]->layer, "bad_argument",
            "two dumps for layer " + std::to_string(scored[i]->layer));

  for (std::size_t slot = 0; slot < scored.size(); ++slot) {
    const auto& d = *scored[slot];
    if (out.model_id.empty()) out.model_id = d.model_id;
    LayerScore ls;
    ls.layer = d.layer;
    out.layers.push_back(std::move(ls));

    std::vector<std::size_t> neurons;
    if (options.sample == 0 || options.sample >= d.hidden) {
      neurons.resize(d.hidden);
      for (std::size_t i = 0; i < d.hidden; ++i) neurons[i] = i;
    } else {
      Rng sampler(mix64(run ^ mix64(0x5A3D1E00ULL + d.layer)));
      neurons = sampler.sample_without_replacement(d.hidden, options.sample);
      std::sort(neurons.begin(), neurons.end());
    }
    for (std::size_t n : neurons) jobs.push_back({&d, slot, n});
  }

  std::vector<NeuronScore> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      {
        std::lock_guard lock(failure_mu);
        if (failure) return;
      }
      try {
        const auto& job = jobs[j];
        Rng nrng(mix64(run ^ mix64((static_cast<std::uint64_t>(job.dump->layer) << 32) ^
                                   job.neuron)));
        results[j] = score_neuron(*job.dump, job.neuron, metric, backend, nrng);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(options.workers, jobs.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t j = 0; j < jobs.size(); ++j)
    out.layers[jobs[j].layer_slot].neurons.push_back(std::move(results[j]));
  for (auto& ls : out.layers) {
    summarize(ls);
    require(ls.n_ok > 0, "all_undefined",
            "every scored neuron of layer " + std::to_string(ls.layer) +
                " has an undefined correlation");
  }
  return out;
}

std::vector<std::size_t> rho_histogram(const LayerScore& layer, std::size_t bins) {
  require(bins > 0, "bad_argument", "bins must be positive");
  std::vector<std::size_t> counts(bins, 0);
  for (const auto& n : layer.neurons) {
    if (n.status != ScoreStatus::kOk) continue;
    const double u = (n.rho + 1.0) / 2.0 * static_cast<double>(bins);
    const auto b = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(u))));
    ++counts[b];
  }
  return counts;
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), "io_error", "cannot write " + path.string());
  return os;
}

}  // namespace

void write_score_csv(const fs::path& path, const ModelScore& score) {
  auto os = open_out(path);
  os.precision(17);
  os << kScoreCsvHeader << "\n";
  for (const auto& l : score.layers)
    os << l.layer << ',' << l.mean_rho << ',' << l.n_ok << ',' << l.n_undefined << "\n";
}

nlohmann::json histogram_json(const ModelScore& score) {
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t i = 0; i <= score.hist_bins; ++i)
    edges.push_back(-1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(score.hist_bins));
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : score.layers) {
    layers.push_back({{"layer", l.layer},
                      {"counts", rho_histogram(l, score.hist_bins)},
                      {"n_ok", l.n_ok},
                      {"n_undefined", l.n_undefined},
                      {"mean_rho", l.mean_rho},
                      {"std_rho", l.std_rho}});
  }
  return {{"model_id", score.model_id},
          {"metric", score.metric},
          {"bins", score.hist_bins},
          {"edges", edges},
          {"layers", layers}};
}

void write_histogram_json(const fs::path& path, const ModelScore& score) {
  auto os = open_out(path);
  os << histogram_json(score).dump(2) << "\n";
}

void write_neuron_jsonl(const fs::path& path, const ModelScore& score) {
  auto os = open_out(path);
  for (const auto& l : score.layers)
    for (const auto& n : l.neurons) {
      nlohmann::json j = {{"layer", n.layer},
                          {"neuron", n.neuron},
                          {"status", status_name(n.status)},
                          {"explanation", n.explanation}};
      j["rho"] = n.status == ScoreStatus::kOk ? nlohmann::json(n.rho) : nlohmann::json(nullptr);
      os << j.dump() << "\n";
    }
}

std::vector<std::string> check_metric_table() {
  struct Row {
    const char* name;
    std::size_t len;
    lab::SelectionCounts explain, simulate;
  };
  const Row table[] = {
      {"openai_tar", 64, {.top = 5}, {.top = 5, .random = 5}},
      {"openai_random", 64, {.top = 5}, {.random = 5}},
      {"anthropic", 8, {.top = 15, .random = 5, .per_bin = 2, .bins = 11},
       {.top = 10, .random = 5, .per_bin = 2, .bins = 11, .ooc = 10}},
  };
  std::vector<std::string> failures;
  auto same = [](const lab::SelectionCounts& a, const lab::SelectionCounts& b) {
    return a.top == b.top && a.random == b.random && a.per_bin == b.per_bin && a.bins == b.bins &&
           a.ooc == b.ooc;
  };

  lab::ActivationDump dump;
  dump.model_id = "selfcheck";
  dump.arch = "crate";
  dump.hidden = 1;
  dump.excerpt_len = 64;
  dump.n_excerpts = 128;
  Rng data_rng(0x7AB1E);
  dump.activations.resize(dump.excerpt_len * dump.n_excerpts);
  for (auto& a : dump.activations)
    a = data_rng.uniform() < 0.3 ? static_cast<float>(data_rng.uniform()) : 0.0f;
  dump.tokens.resize(dump.activations.size());
  for (auto& t : dump.tokens) t = static_cast<std::uint32_t>(data_rng.uniform_int(256));

  auto count = [](const std::vector<lab::Excerpt>& xs, lab::ExcerptKind k) {
    return static_cast<std::size_t>(
        std::count_if(xs.begin(), xs.end(), [k](const lab::Excerpt& e) { return e.kind == k; }));
  };
  auto observed_ok = [&](const std::vector<lab::Excerpt>& xs, const lab::SelectionCounts& c,
                         std::size_t len, std::size_t ooc_len) {
    if (count(xs, lab::ExcerptKind::kTop) != c.top) return false;
    if (count(xs, lab::ExcerptKind::kRandom) != c.random) return false;
    if (count(xs, lab::ExcerptKind::kQuantile) != c.quantile()) return false;
    if (count(xs, lab::ExcerptKind::kOoc) != c.ooc) return false;
    for (std::size_t b = 0; b < c.bins; ++b) {
      const auto in_bin = std::count_if(xs.begin(), xs.end(), [b](const lab::Excerpt& e) {
        return e.kind == lab::ExcerptKind::kQuantile && e.target_bin == static_cast<int>(b);
      });
      if (static_cast<std::size_t>(in_bin) != c.per_bin) return false;
    }
    for (const auto& e : xs)
      if (e.tokens.size() != (e.kind == lab::ExcerptKind::kOoc ? ooc_len : len)) return false;
    return true;
  };

  for (const auto& row : table) {
    const auto m = lab::MetricConfig::named(row.name);
    const std::string tag = row.name;
    if (m.excerpt_len != row.len) failures.push_back(tag + ": excerpt length");
    if (m.ooc_len != 3) failures.push_back(tag + ": ooc length");
    if (!same(m.explain, row.explain)) failures.push_back(tag + ": explanation counts");
    if (!same(m.simulate, row.simulate)) failures.push_back(tag + ": simulation counts");
    Rng rng(1);
    const auto sel = lab::select_excerpts(dump, 0, m, rng);
    if (!observed_ok(sel.explain, row.explain, row.len, 3))
      failures.push_back(tag + ": selected explanation excerpts");
    if (!observed_ok(sel.simulate, row.simulate, row.len, 3))
      failures.push_back(tag + ": selected simulation excerpts");
  }
  return failures;
}

}  // namespace crate::interp
