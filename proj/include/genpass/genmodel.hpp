#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "genpass/encoder.hpp"
#include "genpass/errors.hpp"
#include "genpass/hierarchy.hpp"
#include "genpass/ntf.hpp"
#include "genpass/observation.hpp"
#include "genpass/rng.hpp"
#include "genpass/tensor.hpp"

namespace genpass {

// The hidden choice made at one layer's generative step: which filter of the
// mixture, and the rigid offset applied to the generated map. One choice is
// shared by every element of the layer.
struct HiddenLayerAssign {
  int gamma = 0;
  int dy = 0;
  int dx = 0;

  bool operator==(const HiddenLayerAssign&) const = default;
};

struct HiddenAssignment {
  int category = 0;
  std::vector<HiddenLayerAssign> layers;  // index l: generator of layer l

  bool operator==(const HiddenAssignment&) const = default;
};

// Dirichlet-smoothed n-gram over filter choices: the distribution of gamma
// at layer l conditions on the gammas of up to `order` layers directly
// above, nearest first. Unseen prefixes fall back to the uniform smoothing
// mass. Counts live in doubles but hold integers.
struct NGramPrior {
  int order = 1;
  double alpha = 1.0;
  std::vector<std::map<std::vector<int>, std::vector<double>>> tables;

  // Smoothed P(gamma = k | prefix) with k out of `choices`.
  double prob(int layer, const std::vector<int>& prefix, int k,
              int choices) const {
    if (k < 0 || k >= choices) throw InputError("NGramPrior: k out of range");
    double total = 0.0;
    const std::vector<double>* counts = nullptr;
    if (layer < static_cast<int>(tables.size())) {
      const auto it = tables[layer].find(prefix);
      if (it != tables[layer].end()) {
        counts = &it->second;
        if (static_cast<int>(counts->size()) != choices)
          throw ShapeError("NGramPrior: table width mismatch");
        for (double c : *counts) total += c;
      }
    }
    const double num = (counts ? (*counts)[k] : 0.0) + alpha;
    return num / (total + alpha * choices);
  }

  double log_prob(int layer, const std::vector<int>& prefix, int k,
                  int choices) const {
    return std::log(prob(layer, prefix, k, choices));
  }
};

struct CategoryPrior {
  double alpha = 1.0;
  std::vector<double> counts;

  double prob(int c) const {
    if (c < 0 || c >= static_cast<int>(counts.size()))
      throw InputError("CategoryPrior: category out of range");
    double total = 0.0;
    for (double v : counts) total += v;
    return (counts[c] + alpha) / (total + alpha * counts.size());
  }
  double log_prob(int c) const { return std::log(prob(c)); }
};

// Per-layer generator: a mixture of transposed-convolution filters plus the
// isotropic generation noise scale for the produced map.
struct TopDownLayerParams {
  std::vector<FilterBank> components;
  double sigma0 = 0.25;
};

struct GenerativeModel {
  HierarchySpec spec;
  std::vector<TopDownLayerParams> td;  // index l: produces layer l from l+1
  NGramPrior ngram;
  CategoryPrior categories;
  ObservationParams observation;
};

// Gamma indices of the layers above `layer`, nearest first, truncated to the
// n-gram order (and at the top of the hierarchy).
inline std::vector<int> ngram_prefix(const HiddenAssignment& h, int layer,
                                     int order) {
  std::vector<int> prefix;
  const int top = static_cast<int>(h.layers.size());
  for (int u = layer + 1; u < top && static_cast<int>(prefix.size()) < order;
       ++u)
    prefix.push_back(h.layers[u].gamma);
  return prefix;
}

inline void validate_layer_assign(const GenerativeModel& m, int layer,
                                  const HiddenLayerAssign& h) {
  const LayerSpec& s = m.spec.layers[layer];
  if (h.gamma < 0 || h.gamma >= s.mixture_count)
    throw InputError("layer " + std::to_string(layer) + ": gamma " +
                     std::to_string(h.gamma) + " outside mixture of " +
                     std::to_string(s.mixture_count));
  if (std::abs(h.dy) > s.offset_range || std::abs(h.dx) > s.offset_range)
    throw InputError("layer " + std::to_string(layer) + ": offset (" +
                     std::to_string(h.dy) + "," + std::to_string(h.dx) +
                     ") outside range " + std::to_string(s.offset_range));
}

// Mean of the generated map at `layer` given the map above and the layer's
// hidden choice. Non-negative by construction (relu, then zero-fill shift).
inline Tensor topdown_mean(const GenerativeModel& m, int layer,
                           const Tensor& upper, const HiddenLayerAssign& h) {
  if (layer < 0 || layer >= static_cast<int>(m.td.size()))
    throw InputError("topdown_mean: no generator for layer " +
                     std::to_string(layer));
  validate_layer_assign(m, layer, h);
  const LayerSpec& up = m.spec.layers[layer + 1];
  if (upper.channels() != up.channels || upper.height() != up.height ||
      upper.width() != up.width)
    throw ShapeError("topdown_mean: upper map is " + upper.shape_str() +
                     ", layer " + std::to_string(layer + 1) + " wants " +
                     std::to_string(up.channels) + "x" +
                     std::to_string(up.height) + "x" +
                     std::to_string(up.width));
  const Tensor shaped =
      relu(transposed_conv2d(upper, m.td[layer].components[h.gamma]));
  return apply_offset(shaped, h.dy, h.dx);
}

inline double log_gen_density(const Tensor& lower, const Tensor& mean,
                              double sigma0) {
  require_same_shape(lower, mean, "log_gen_density");
  if (!(sigma0 > 0)) throw InputError("log_gen_density: sigma0 must be > 0");
  double total = 0.0;
  for (std::size_t i = 0; i < lower.size(); ++i)
    total += log_normal_pdf(lower.values()[i], mean.values()[i], sigma0);
  return total;
}

// log P(H): category prior, uniform offsets, n-gram filter chain.
inline double log_hidden_prior(const GenerativeModel& m,
                               const HiddenAssignment& h) {
  const int L = m.spec.top();
  if (static_cast<int>(h.layers.size()) != L)
    throw InputError("log_hidden_prior: expected " + std::to_string(L) +
                     " layer assignments");
  double total = m.categories.log_prob(h.category);
  for (int l = L - 1; l >= 0; --l) {
    validate_layer_assign(m, l, h.layers[l]);
    total -= std::log(static_cast<double>(m.spec.offset_choices(l)));
    total += m.ngram.log_prob(l, ngram_prefix(h, l, m.ngram.order),
                              h.layers[l].gamma, m.spec.layers[l].mixture_count);
  }
  return total;
}

inline Tensor onehot_top(const HierarchySpec& spec, int category) {
  if (category < 0 || category >= spec.num_categories())
    throw InputError("onehot_top: category out of range");
  Tensor t(spec.num_categories(), 1, 1);
  t.at(category, 0, 0) = 1.0;
  return t;
}

inline HiddenAssignment sample_hidden(const GenerativeModel& m, int category,
                                      Rng& rng) {
  HiddenAssignment h;
  h.category = category;
  const int L = m.spec.top();
  h.layers.resize(L);
  for (int l = L - 1; l >= 0; --l) {
    const int K = m.spec.layers[l].mixture_count;
    std::vector<double> w(K);
    const std::vector<int> prefix = ngram_prefix(h, l, m.ngram.order);
    for (int k = 0; k < K; ++k) w[k] = m.ngram.prob(l, prefix, k, K);
    const int d = m.spec.layers[l].offset_range;
    h.layers[l].gamma = rng.categorical(w);
    h.layers[l].dy = rng.uniform_int(-d, d);
    h.layers[l].dx = rng.uniform_int(-d, d);
  }
  return h;
}

// Noise-free top-down decode of a full hidden assignment.
inline ActivationStack decode_topdown(const GenerativeModel& m,
                                      const HiddenAssignment& h) {
  const int L = m.spec.top();
  if (static_cast<int>(h.layers.size()) != L)
    throw InputError("decode_topdown: expected " + std::to_string(L) +
                     " layer assignments");
  ActivationStack st;
  st.role = StackRole::top_down;
  st.layers.assign(L + 1, Tensor());
  st.layers[L] = onehot_top(m.spec, h.category);
  for (int l = L - 1; l >= 0; --l)
    st.layers[l] = topdown_mean(m, l, st.layers[l + 1], h.layers[l]);
  return st;
}

// Ancestral sample: hidden choices from the prior, then each map is its
// generated mean plus isotropic noise, clamped at zero to stay in feature
// space (the clamp is a sampling convenience; densities stay Gaussian).
inline std::pair<HiddenAssignment, ActivationStack> sample_prior(
    const GenerativeModel& m, int category, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x73616d70));
  HiddenAssignment h = sample_hidden(m, category, rng);
  const int L = m.spec.top();
  ActivationStack st;
  st.role = StackRole::top_down;
  st.layers.assign(L + 1, Tensor());
  st.layers[L] = onehot_top(m.spec, category);
  for (int l = L - 1; l >= 0; --l) {
    Tensor mean = topdown_mean(m, l, st.layers[l + 1], h.layers[l]);
    const double s0 = m.td[l].sigma0;
    for (double& v : mean.values()) v = std::max(0.0, v + s0 * rng.normal());
    st.layers[l] = std::move(mean);
  }
  return {h, st};
}

// Fresh model with small positive random filters. Biases start at a small
// positive value so no component begins saturated at zero.
inline GenerativeModel init_generative_model(const HierarchySpec& spec,
                                             std::uint64_t seed) {
  spec.validate();
  GenerativeModel m;
  m.spec = spec;
  const int L = spec.top();
  Rng rng(derive_seed(seed, 0x67656e));
  for (int l = 0; l < L; ++l) {
    const LayerSpec& s = spec.layers[l];
    TopDownLayerParams p;
    // Weights start an order of magnitude below the fan-in bound, bias just
    // above zero: the initial decode is faintly positive everywhere, so
    // every element starts relu-active and the first gradient steps grow
    // toward bright targets instead of bulldozing a too-dense map through
    // the inactive region, which is a one-way trip for sparse layers.
    const double bound =
        0.1 / std::sqrt(static_cast<double>(spec.layers[l + 1].channels) *
                        s.td_kernel * s.td_kernel /
                        (s.td_stride * s.td_stride));
    for (int k = 0; k < s.mixture_count; ++k) {
      FilterBank f(s.channels, spec.layers[l + 1].channels, s.td_kernel,
                   s.td_kernel, s.td_stride);
      for (double& v : f.weights) v = rng.uniform(0.0, bound);
      for (double& v : f.bias) v = 0.01;
      p.components.push_back(std::move(f));
    }
    p.sigma0 = 0.25;
    m.td.push_back(std::move(p));
  }
  m.ngram.order = 1;
  m.ngram.alpha = 1.0;
  m.ngram.tables.assign(L, {});
  m.categories.alpha = 1.0;
  m.categories.counts.assign(spec.num_categories(), 0.0);
  for (int l = 0; l < L; ++l) {
    ObservationLayerParams op;
    op.sigma1.assign(spec.layers[l].channels, 0.25);
    op.sigma2 = 0.25;
    m.observation.layers.push_back(std::move(op));
  }
  return m;
}

// --------------------------------------------------------------------------
// Serialization: filter banks in the flat-tensor container, everything else
// in a JSON sidecar.
// --------------------------------------------------------------------------

inline void save_model(const GenerativeModel& m,
                       const std::filesystem::path& json_path,
                       const std::filesystem::path& ntf_path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["weights_file"] = ntf_path.filename().string();

  j["hierarchy"] = nlohmann::json::array();
  for (const LayerSpec& s : m.spec.layers)
    j["hierarchy"].push_back({{"name", s.name},
                              {"channels", s.channels},
                              {"height", s.height},
                              {"width", s.width},
                              {"td_kernel", s.td_kernel},
                              {"td_stride", s.td_stride},
                              {"mixture_count", s.mixture_count},
                              {"offset_range", s.offset_range}});

  j["sigma0"] = nlohmann::json::array();
  for (const TopDownLayerParams& p : m.td) j["sigma0"].push_back(p.sigma0);

  j["ngram"] = {{"order", m.ngram.order},
                {"alpha", m.ngram.alpha},
                {"tables", nlohmann::json::array()}};
  for (std::size_t l = 0; l < m.ngram.tables.size(); ++l) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [prefix, counts] : m.ngram.tables[l])
      entries.push_back({{"prefix", prefix}, {"counts", counts}});
    j["ngram"]["tables"].push_back(
        {{"layer", l}, {"entries", std::move(entries)}});
  }

  j["categories"] = {{"alpha", m.categories.alpha},
                     {"counts", m.categories.counts}};

  j["observation"] = nlohmann::json::array();
  for (const ObservationLayerParams& p : m.observation.layers)
    j["observation"].push_back({{"lambda", p.lambda},
                                {"beta", p.beta},
                                {"sigma2", p.sigma2},
                                {"sigma1", p.sigma1},
                                {"flagged_channels", p.flagged_channels},
                                {"background_flagged", p.background_flagged},
                                {"fit_score", p.fit_score}});

  std::vector<NamedTensor> tensors;
  for (std::size_t l = 0; l < m.td.size(); ++l) {
    for (std::size_t k = 0; k < m.td[l].components.size(); ++k) {
      const FilterBank& f = m.td[l].components[k];
      const std::string base =
          "td.l" + std::to_string(l) + ".k" + std::to_string(k);
      tensors.push_back({base + ".weight",
                         {f.out_channels, f.in_channels, f.kernel_h,
                          f.kernel_w},
                         f.weights});
      tensors.push_back({base + ".bias", {f.out_channels}, f.bias});
    }
  }
  save_ntf(ntf_path, tensors);

  std::ofstream os(json_path);
  if (!os) throw IoError("save_model: cannot open " + json_path.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("save_model: write failed");
}

inline GenerativeModel load_model(const std::filesystem::path& json_path,
                                  const std::filesystem::path& ntf_path) {
  std::ifstream is(json_path);
  if (!is) throw IoError("load_model: cannot open " + json_path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_model: bad json: ") + e.what());
  }
  try {
    if (j.at("schema_version").get<int>() != 1)
      throw IoError("load_model: unsupported schema_version");

    GenerativeModel m;
    for (const auto& e : j.at("hierarchy")) {
      LayerSpec s;
      s.name = e.at("name").get<std::string>();
      s.channels = e.at("channels").get<int>();
      s.height = e.at("height").get<int>();
      s.width = e.at("width").get<int>();
      s.td_kernel = e.at("td_kernel").get<int>();
      s.td_stride = e.at("td_stride").get<int>();
      s.mixture_count = e.at("mixture_count").get<int>();
      s.offset_range = e.at("offset_range").get<int>();
      m.spec.layers.push_back(std::move(s));
    }
    m.spec.validate();
    const int L = m.spec.top();

    const auto sigma0 = j.at("sigma0").get<std::vector<double>>();
    if (static_cast<int>(sigma0.size()) != L)
      throw IoError("load_model: sigma0 length mismatch");

    const std::vector<NamedTensor> tensors = load_ntf(ntf_path);
    for (int l = 0; l < L; ++l) {
      const LayerSpec& s = m.spec.layers[l];
      TopDownLayerParams p;
      p.sigma0 = sigma0[l];
      for (int k = 0; k < s.mixture_count; ++k) {
        const std::string base =
            "td.l" + std::to_string(l) + ".k" + std::to_string(k);
        const NamedTensor& wt = find_tensor(tensors, base + ".weight");
        const NamedTensor& bt = find_tensor(tensors, base + ".bias");
        FilterBank f(s.channels, m.spec.layers[l + 1].channels, s.td_kernel,
                     s.td_kernel, s.td_stride);
        if (wt.dims != std::vector<int>{f.out_channels, f.in_channels,
                                        f.kernel_h, f.kernel_w})
          throw IoError("load_model: " + base + ".weight has wrong dims");
        if (bt.dims != std::vector<int>{f.out_channels})
          throw IoError("load_model: " + base + ".bias has wrong dims");
        f.weights = wt.data;
        f.bias = bt.data;
        p.components.push_back(std::move(f));
      }
      m.td.push_back(std::move(p));
    }

    m.ngram.order = j.at("ngram").at("order").get<int>();
    m.ngram.alpha = j.at("ngram").at("alpha").get<double>();
    m.ngram.tables.assign(L, {});
    for (const auto& t : j.at("ngram").at("tables")) {
      const int layer = t.at("layer").get<int>();
      if (layer < 0 || layer >= L)
        throw IoError("load_model: ngram table layer out of range");
      for (const auto& e : t.at("entries")) {
        auto prefix = e.at("prefix").get<std::vector<int>>();
        auto counts = e.at("counts").get<std::vector<double>>();
        if (static_cast<int>(counts.size()) !=
            m.spec.layers[layer].mixture_count)
          throw IoError("load_model: ngram counts width mismatch");
        m.ngram.tables[layer][std::move(prefix)] = std::move(counts);
      }
    }

    m.categories.alpha = j.at("categories").at("alpha").get<double>();
    m.categories.counts =
        j.at("categories").at("counts").get<std::vector<double>>();
    if (static_cast<int>(m.categories.counts.size()) !=
        m.spec.num_categories())
      throw IoError("load_model: category counts length mismatch");

    for (const auto& e : j.at("observation")) {
      ObservationLayerParams p;
      p.lambda = e.at("lambda").get<double>();
      p.beta = e.at("beta").get<double>();
      p.sigma2 = e.at("sigma2").get<double>();
      p.sigma1 = e.at("sigma1").get<std::vector<double>>();
      p.flagged_channels = e.at("flagged_channels").get<std::vector<int>>();
      p.background_flagged = e.at("background_flagged").get<bool>();
      p.fit_score = e.at("fit_score").get<double>();
      m.observation.layers.push_back(std::move(p));
    }
    if (static_cast<int>(m.observation.layers.size()) != L)
      throw IoError("load_model: observation layer count mismatch");
    for (int l = 0; l < L; ++l)
      if (static_cast<int>(m.observation.layers[l].sigma1.size()) !=
          m.spec.layers[l].channels)
        throw IoError("load_model: sigma1 width mismatch at layer " +
                      std::to_string(l));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_model: malformed model json: ") +
                  e.what());
  }
}

}  // namespace genpass
