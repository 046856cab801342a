#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "genpass/encoder.hpp"
#include "genpass/errors.hpp"
#include "genpass/tensor.hpp"

namespace genpass {

// How a bottom-up feature element relates to its generated counterpart:
// where the generated value f_td clears the threshold lambda, the bottom-up
// value is Gaussian around f_td with a per-channel scale; elsewhere the
// generated value is treated as absent and the bottom-up value is Gaussian
// background noise. At exactly f_td == lambda either branch may claim the
// element, whichever explains it better.
struct ObservationLayerParams {
  double lambda = 0.0;
  double beta = 0.0;    // background mean
  double sigma2 = 1.0;  // background std
  std::vector<double> sigma1;  // per-channel foreground std
  std::vector<int> flagged_channels;  // sigma1 fell back to the pooled value
  bool background_flagged = false;    // no background elements at the fit
  double fit_score = 0.0;             // data log-likelihood at the chosen fit
};

struct ObservationParams {
  std::vector<ObservationLayerParams> layers;  // indexed by layer, bottom up
};

inline double log_normal_pdf(double x, double mean, double stddev) {
  const double z = (x - mean) / stddev;
  return -0.5 * z * z - std::log(stddev) -
         0.5 * std::log(2.0 * std::numbers::pi);
}

inline double elem_loglik(double f_bu, double f_td, int channel,
                          const ObservationLayerParams& p) {
  if (channel < 0 || channel >= static_cast<int>(p.sigma1.size()))
    throw InputError("elem_loglik: channel out of range");
  const double fg = log_normal_pdf(f_bu, f_td, p.sigma1[channel]);
  const double bg = log_normal_pdf(f_bu, p.beta, p.sigma2);
  if (f_td > p.lambda) return fg;
  if (f_td < p.lambda) return bg;
  return std::max(fg, bg);
}

inline double layer_loglik(const Tensor& f_bu, const Tensor& f_td,
                           const ObservationLayerParams& p) {
  require_same_shape(f_bu, f_td, "layer_loglik");
  if (static_cast<int>(p.sigma1.size()) != f_bu.channels())
    throw ShapeError("layer_loglik: sigma1 has " +
                     std::to_string(p.sigma1.size()) + " channels, maps have " +
                     std::to_string(f_bu.channels()));
  double total = 0.0;
  for (int c = 0; c < f_bu.channels(); ++c)
    for (int y = 0; y < f_bu.height(); ++y)
      for (int x = 0; x < f_bu.width(); ++x)
        total += elem_loglik(f_bu.at(c, y, x), f_td.at(c, y, x), c, p);
  return total;
}

// One training pair: the bottom-up stack of a scene and the generated stack
// that is supposed to explain it.
struct StackPair {
  ActivationStack bu;
  ActivationStack td;
};

struct ObservationFitReport {
  std::vector<std::vector<double>> grids;             // per layer
  std::vector<std::vector<double>> candidate_scores;  // per layer, per lambda
};

namespace detail {

constexpr double kVarianceFloor = 1e-6;  // on sigma^2

struct LayerFitStats {
  // foreground, per channel
  std::vector<double> fg_count, fg_ssr;
  // background, pooled
  double bg_count = 0, bg_sum = 0, bg_sumsq = 0;
};

inline ObservationLayerParams fit_layer_at_lambda(
    const std::vector<const Tensor*>& bu, const std::vector<const Tensor*>& td,
    double lambda) {
  const int channels = bu[0]->channels();
  LayerFitStats st;
  st.fg_count.assign(channels, 0.0);
  st.fg_ssr.assign(channels, 0.0);
  for (std::size_t i = 0; i < bu.size(); ++i) {
    const Tensor& b = *bu[i];
    const Tensor& t = *td[i];
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < b.height(); ++y)
        for (int x = 0; x < b.width(); ++x) {
          const double ftd = t.at(c, y, x), fbu = b.at(c, y, x);
          if (ftd > lambda) {
            st.fg_count[c] += 1.0;
            st.fg_ssr[c] += (fbu - ftd) * (fbu - ftd);
          } else {
            st.bg_count += 1.0;
            st.bg_sum += fbu;
            st.bg_sumsq += fbu * fbu;
          }
        }
  }

  ObservationLayerParams p;
  p.lambda = lambda;
  p.sigma1.assign(channels, 0.0);

  double pooled_count = 0, pooled_ssr = 0;
  for (int c = 0; c < channels; ++c) {
    pooled_count += st.fg_count[c];
    pooled_ssr += st.fg_ssr[c];
  }
  const double pooled_var =
      pooled_count > 0
          ? std::max(kVarianceFloor, pooled_ssr / pooled_count)
          : kVarianceFloor;
  for (int c = 0; c < channels; ++c) {
    if (st.fg_count[c] > 0) {
      p.sigma1[c] =
          std::sqrt(std::max(kVarianceFloor, st.fg_ssr[c] / st.fg_count[c]));
    } else {
      p.sigma1[c] = std::sqrt(pooled_var);
      p.flagged_channels.push_back(c);
    }
  }
  if (st.bg_count > 0) {
    p.beta = st.bg_sum / st.bg_count;
    const double var = st.bg_sumsq / st.bg_count - p.beta * p.beta;
    p.sigma2 = std::sqrt(std::max(kVarianceFloor, var));
  } else {
    p.beta = 0.0;
    p.sigma2 = std::sqrt(kVarianceFloor);
    p.background_flagged = true;
  }

  // Data log-likelihood under the fitted (floored) parameters, computed from
  // the sufficient statistics.
  const double l2pi = std::log(2.0 * std::numbers::pi);
  double score = 0.0;
  for (int c = 0; c < channels; ++c)
    if (st.fg_count[c] > 0)
      score += -st.fg_count[c] * (std::log(p.sigma1[c]) + 0.5 * l2pi) -
               st.fg_ssr[c] / (2.0 * p.sigma1[c] * p.sigma1[c]);
  if (st.bg_count > 0) {
    const double ssr = st.bg_sumsq - 2.0 * p.beta * st.bg_sum +
                       st.bg_count * p.beta * p.beta;
    score += -st.bg_count * (std::log(p.sigma2) + 0.5 * l2pi) -
             ssr / (2.0 * p.sigma2 * p.sigma2);
  }
  p.fit_score = score;
  return p;
}

}  // namespace detail

// Ascending threshold candidates from zero to the 99th percentile of the
// generated values at that layer.
inline std::vector<std::vector<double>> default_lambda_grids(
    const std::vector<StackPair>& pairs, int n_layers, int points = 64) {
  if (pairs.empty()) throw InputError("default_lambda_grids: no pairs");
  if (points < 1) throw InputError("default_lambda_grids: empty grid");
  std::vector<std::vector<double>> grids;
  for (int l = 0; l < n_layers; ++l) {
    std::vector<double> vals;
    for (const StackPair& p : pairs)
      for (double v : p.td.layers[l].values()) vals.push_back(v);
    std::sort(vals.begin(), vals.end());
    const double hi =
        vals[static_cast<std::size_t>(0.99 * (vals.size() - 1))];
    std::vector<double> grid;
    if (hi <= 0.0) {
      grid.push_back(0.0);
    } else {
      for (int i = 0; i < points; ++i)
        grid.push_back(hi * static_cast<double>(i) / (points - 1));
    }
    grids.push_back(std::move(grid));
  }
  return grids;
}

// Grid search over lambda per layer; each candidate gets closed-form noise
// parameters, the best-scoring candidate wins. Ties go to the smaller
// lambda. Layers are fitted independently.
inline ObservationParams fit_observation(
    const std::vector<StackPair>& pairs,
    const std::vector<std::vector<double>>& grids,
    ObservationFitReport* report = nullptr) {
  if (pairs.empty()) throw InputError("fit_observation: no pairs");
  const int n_layers = static_cast<int>(grids.size());
  for (const StackPair& p : pairs) {
    if (static_cast<int>(p.bu.layers.size()) < n_layers ||
        static_cast<int>(p.td.layers.size()) < n_layers)
      throw ShapeError("fit_observation: stacks shorter than grid list");
    for (int l = 0; l < n_layers; ++l)
      require_same_shape(p.bu.layers[l], p.td.layers[l], "fit_observation");
  }

  ObservationParams out;
  if (report) {
    report->grids = grids;
    report->candidate_scores.assign(n_layers, {});
  }
  for (int l = 0; l < n_layers; ++l) {
    if (grids[l].empty())
      throw InputError("fit_observation: empty grid for layer " +
                       std::to_string(l));
    std::vector<const Tensor*> bu, td;
    for (const StackPair& p : pairs) {
      bu.push_back(&p.bu.layers[l]);
      td.push_back(&p.td.layers[l]);
    }
    ObservationLayerParams best;
    bool have = false;
    for (double lambda : grids[l]) {
      ObservationLayerParams cand =
          detail::fit_layer_at_lambda(bu, td, lambda);
      if (report) report->candidate_scores[l].push_back(cand.fit_score);
      if (!have || cand.fit_score > best.fit_score) {
        best = cand;
        have = true;
      }
    }
    out.layers.push_back(std::move(best));
  }
  return out;
}

}  // namespace genpass
