#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "genpass/encoder.hpp"
#include "genpass/errors.hpp"
#include "genpass/genmodel.hpp"
#include "genpass/image.hpp"
#include "genpass/observation.hpp"
#include "genpass/parallel.hpp"
#include "genpass/tensor.hpp"

namespace genpass {

// ---------------------------------------------------------------------------
// Element problem. For one feature element with bottom-up evidence f_bu and
// generated mean f_tilde, choose the generated value f_td maximizing
//
//   log N(f_td; f_tilde, sigma0) + obs(f_bu | f_td)
//
// where obs is the thresholded observation term. Both branches are concave
// quadratics in f_td over their half-lines, so each has a closed-form
// constrained optimum and the answer is whichever branch scores higher:
//   above the threshold the optimum is the precision-weighted blend of
//   f_tilde and f_bu, pulled up to lambda if needed;
//   below it the observation term is constant, so the generation term alone
//   pins f_td at f_tilde, pulled down to lambda.
// Exact threshold ties go to the foreground branch.
// ---------------------------------------------------------------------------

struct ElemSolution {
  double f_td = 0.0;
  double objective = 0.0;  // generation + observation terms at the optimum
};

inline ElemSolution solve_elem(double f_bu, double f_tilde, int channel,
                               double sigma0,
                               const ObservationLayerParams& obs) {
  if (!(sigma0 > 0)) throw InputError("solve_elem: sigma0 must be > 0");
  if (channel < 0 || channel >= static_cast<int>(obs.sigma1.size()))
    throw InputError("solve_elem: channel out of range");
  const double s0sq = sigma0 * sigma0;
  const double s1 = obs.sigma1[channel];
  const double s1sq = s1 * s1;

  // Foreground branch: f_td >= lambda.
  const double eta = (s1sq * f_tilde + s0sq * f_bu) / (s0sq + s1sq);
  const double fg_f = std::max(eta, obs.lambda);
  const double fg_val = log_normal_pdf(fg_f, f_tilde, sigma0) +
                        log_normal_pdf(f_bu, fg_f, s1);

  // Background branch: f_td <= lambda.
  const double bg_f = std::min(f_tilde, obs.lambda);
  const double bg_val = log_normal_pdf(bg_f, f_tilde, sigma0) +
                        log_normal_pdf(f_bu, obs.beta, obs.sigma2);

  if (fg_val >= bg_val) return {fg_f, fg_val};
  return {bg_f, bg_val};
}

// ---------------------------------------------------------------------------
// Layer problem: pick the layer's shared (gamma, dy, dx) and the per-element
// generated map jointly, given the map above and the bottom-up evidence for
// this layer. The discrete choice is enumerated; elements separate per
// candidate.
// ---------------------------------------------------------------------------

struct LayerClamp {
  std::optional<int> gamma, dy, dx;
};

struct HiddenClamp {
  std::optional<int> category;
  std::vector<LayerClamp> layers;  // indexed by layer; absent entries free

  const LayerClamp* layer(int l) const {
    if (l < 0 || l >= static_cast<int>(layers.size())) return nullptr;
    return &layers[l];
  }
};

// Clamp that pins every choice of an assignment.
inline HiddenClamp clamp_all(const HiddenAssignment& h) {
  HiddenClamp c;
  c.category = h.category;
  for (const HiddenLayerAssign& a : h.layers)
    c.layers.push_back({a.gamma, a.dy, a.dx});
  return c;
}

struct ScoredAssign {
  HiddenLayerAssign h;
  double score = 0.0;
};

struct LayerSolution {
  HiddenLayerAssign h;
  Tensor f_td;
  double score = 0.0;  // prior terms + summed element objectives
  std::vector<ScoredAssign> ranked;  // all candidates, best first, <= top_m
};

inline LayerSolution solve_layer(const Tensor& f_bu, const Tensor& f_td_upper,
                                 const std::vector<int>& gamma_prefix,
                                 const GenerativeModel& m, int layer,
                                 int top_m = 15,
                                 const LayerClamp* clamp = nullptr,
                                 int threads = 1) {
  if (layer < 0 || layer >= static_cast<int>(m.td.size()))
    throw InputError("solve_layer: no generator for layer " +
                     std::to_string(layer));
  const LayerSpec& s = m.spec.layers[layer];
  if (f_bu.channels() != s.channels || f_bu.height() != s.height ||
      f_bu.width() != s.width)
    throw ShapeError("solve_layer: evidence map is " + f_bu.shape_str() +
                     ", layer wants " + std::to_string(s.channels) + "x" +
                     std::to_string(s.height) + "x" + std::to_string(s.width));
  if (top_m < 1) throw InputError("solve_layer: top_m must be >= 1");
  const ObservationLayerParams& obs = m.observation.layers[layer];
  const double sigma0 = m.td[layer].sigma0;
  const int d = s.offset_range;

  std::vector<int> gammas;
  if (clamp && clamp->gamma) {
    if (*clamp->gamma < 0 || *clamp->gamma >= s.mixture_count)
      throw InputError("solve_layer: clamped gamma out of range");
    gammas.push_back(*clamp->gamma);
  } else {
    for (int g = 0; g < s.mixture_count; ++g) gammas.push_back(g);
  }
  auto offsets_for = [&](const std::optional<int>& pin) {
    std::vector<int> out;
    if (pin) {
      if (std::abs(*pin) > d)
        throw InputError("solve_layer: clamped offset out of range");
      out.push_back(*pin);
    } else {
      for (int v = -d; v <= d; ++v) out.push_back(v);
    }
    return out;
  };
  const std::vector<int> dys = offsets_for(clamp ? clamp->dy : std::nullopt);
  const std::vector<int> dxs = offsets_for(clamp ? clamp->dx : std::nullopt);

  const double offset_logp =
      -std::log(static_cast<double>(m.spec.offset_choices(layer)));

  struct GammaResult {
    std::vector<ScoredAssign> scored;  // in (dy, dx) order
    Tensor best_f_td;
    double best_score = -std::numeric_limits<double>::infinity();
    int best_index = -1;
  };
  std::vector<GammaResult> per_gamma(gammas.size());

  // Workers own disjoint gamma slots; results are merged in gamma order, so
  // the outcome is independent of the thread count.
  parallel_for(static_cast<int>(gammas.size()), threads, [&](int gi) {
    const int g = gammas[gi];
    GammaResult& res = per_gamma[gi];
    const double gamma_logp = m.ngram.log_prob(layer, gamma_prefix, g,
                                               s.mixture_count);
    const Tensor shaped =
        relu(transposed_conv2d(f_td_upper, m.td[layer].components[g]));
    Tensor scratch(s.channels, s.height, s.width);
    for (int dy : dys) {
      for (int dx : dxs) {
        const Tensor mean = apply_offset(shaped, dy, dx);
        double score = gamma_logp + offset_logp;
        for (int c = 0; c < s.channels; ++c)
          for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
              const ElemSolution es = solve_elem(
                  f_bu.at(c, y, x), mean.at(c, y, x), c, sigma0, obs);
              scratch.at(c, y, x) = es.f_td;
              score += es.objective;
            }
        res.scored.push_back({{g, dy, dx}, score});
        if (score > res.best_score) {
          res.best_score = score;
          res.best_index = static_cast<int>(res.scored.size()) - 1;
          res.best_f_td = scratch;
        }
      }
    }
  });

  LayerSolution sol;
  std::vector<ScoredAssign> all;
  bool have = false;
  for (const GammaResult& res : per_gamma) {
    for (const ScoredAssign& sa : res.scored) all.push_back(sa);
    // Strict comparison keeps the lexicographically first candidate on ties
    // (gammas ascend, then dy, then dx).
    if (res.best_index >= 0 &&
        (!have || res.best_score > sol.score)) {
      sol.score = res.best_score;
      sol.h = res.scored[res.best_index].h;
      sol.f_td = res.best_f_td;
      have = true;
    }
  }
  if (!have) throw InputError("solve_layer: empty candidate set");
  std::stable_sort(all.begin(), all.end(),
                   [](const ScoredAssign& a, const ScoredAssign& b) {
                     return a.score > b.score;
                   });
  if (static_cast<int>(all.size()) > top_m) all.resize(top_m);
  sol.ranked = std::move(all);
  return sol;
}

// ---------------------------------------------------------------------------
// Greedy top-down pass: commit the category (it must be clamped), then solve
// each layer given the generated map already fixed above it.
// ---------------------------------------------------------------------------

struct BackwardResult {
  HiddenAssignment h;
  ActivationStack f_td;
  std::vector<LayerSolution> per_layer;  // indexed by layer, 0..L-1
  double log_posterior = 0.0;            // category prior + layer scores
};

inline BackwardResult backward_pass(const ActivationStack& f_bu,
                                    const HiddenClamp& clamp,
                                    const GenerativeModel& m, int top_m = 15,
                                    int threads = 1) {
  const int L = m.spec.top();
  if (static_cast<int>(f_bu.layers.size()) != L + 1)
    throw ShapeError("backward_pass: stack has " +
                     std::to_string(f_bu.layers.size()) + " layers, want " +
                     std::to_string(L + 1));
  if (!clamp.category)
    throw InputError("backward_pass: category must be clamped (callers "
                     "iterate categories when it is open)");

  BackwardResult out;
  out.h.category = *clamp.category;
  out.h.layers.resize(L);
  out.per_layer.resize(L);
  out.f_td.role = StackRole::top_down;
  out.f_td.layers.assign(L + 1, Tensor());
  out.f_td.layers[L] = onehot_top(m.spec, out.h.category);
  out.log_posterior = m.categories.log_prob(out.h.category);

  for (int l = L - 1; l >= 0; --l) {
    const std::vector<int> prefix = ngram_prefix(out.h, l, m.ngram.order);
    LayerSolution sol =
        solve_layer(f_bu.layers[l], out.f_td.layers[l + 1], prefix, m, l,
                    top_m, clamp.layer(l), threads);
    out.h.layers[l] = sol.h;
    out.f_td.layers[l] = sol.f_td;
    out.log_posterior += sol.score;
    out.per_layer[l] = std::move(sol);
  }
  return out;
}

// Removes an explained instance from the evidence: elementwise
// max(evidence - generated, 0) at every layer.
inline ActivationStack subtract_instance(const ActivationStack& f_bu,
                                         const ActivationStack& f_td) {
  if (f_bu.layers.size() != f_td.layers.size())
    throw ShapeError("subtract_instance: stack depth mismatch");
  ActivationStack out;
  out.role = f_bu.role;
  for (std::size_t l = 0; l < f_bu.layers.size(); ++l) {
    require_same_shape(f_bu.layers[l], f_td.layers[l], "subtract_instance");
    Tensor t = f_bu.layers[l];
    for (std::size_t i = 0; i < t.size(); ++i)
      t.values()[i] =
          std::max(t.values()[i] - f_td.layers[l].values()[i], 0.0);
    out.layers.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mode ranking: take the strongest top-layer candidates and complete a full
// greedy descent below each, then order them by the descent's total score.
// local_rank records the candidate's position in the top layer's own
// ordering (0 = the one plain greedy would take).
// ---------------------------------------------------------------------------

struct RankedMode {
  int local_rank = 0;
  BackwardResult descent;
};

inline std::vector<RankedMode> rank_top_modes(const ActivationStack& f_bu,
                                              const HiddenClamp& clamp,
                                              const GenerativeModel& m,
                                              int top_m = 15,
                                              int threads = 1) {
  const int L = m.spec.top();
  if (!clamp.category)
    throw InputError("rank_top_modes: category must be clamped");
  const Tensor top = onehot_top(m.spec, *clamp.category);
  const LayerSolution top_sol =
      solve_layer(f_bu.layers[L - 1], top, {}, m, L - 1, top_m,
                  clamp.layer(L - 1), threads);

  std::vector<RankedMode> modes;
  for (std::size_t i = 0; i < top_sol.ranked.size(); ++i) {
    HiddenClamp sub = clamp;
    if (static_cast<int>(sub.layers.size()) < L) sub.layers.resize(L);
    const HiddenLayerAssign& cand = top_sol.ranked[i].h;
    sub.layers[L - 1] = {cand.gamma, cand.dy, cand.dx};
    RankedMode mode;
    mode.local_rank = static_cast<int>(i);
    mode.descent = backward_pass(f_bu, sub, m, top_m, threads);
    modes.push_back(std::move(mode));
  }
  std::stable_sort(modes.begin(), modes.end(),
                   [](const RankedMode& a, const RankedMode& b) {
                     return a.descent.log_posterior > b.descent.log_posterior;
                   });
  return modes;
}

// ---------------------------------------------------------------------------
// Scene parsing: find instances one at a time, subtracting each one's
// generated stack from the evidence. With beam > 1, sequences of instances
// are kept and each is expanded by the top-layer candidates plain greedy
// ranks highest, so beam = 1 reproduces exact greedy repetition.
// ---------------------------------------------------------------------------

struct ModeRow {
  int category = 0;
  HiddenLayerAssign top_h;
  double log_posterior = 0.0;  // full-descent score
};

struct ParsedInstance {
  HiddenAssignment h;
  double log_score = 0.0;
  ActivationStack f_td;
  int placement_row = -1;  // top-layer grid cell of the reconstruction
  int placement_col = -1;
};

struct ParseResult {
  std::vector<ParsedInstance> instances;
  ActivationStack residual;
  std::vector<std::vector<ModeRow>> step_modes;  // along the best sequence
  double total_log_score = 0.0;
};

// Intensity-weighted centroid of the reconstructed image, reported as a cell
// of the top feature grid.
inline std::pair<int, int> placement_cell(const Tensor& recon_image,
                                          const HierarchySpec& spec) {
  const int grid_h = spec.layers[spec.top() - 1].height;
  const int grid_w = spec.layers[spec.top() - 1].width;
  double cy = 0, cx = 0, mass = 0;
  for (int y = 0; y < recon_image.height(); ++y)
    for (int x = 0; x < recon_image.width(); ++x) {
      const double v = recon_image.at(0, y, x);
      cy += v * y;
      cx += v * x;
      mass += v;
    }
  if (!(mass > 1e-9)) return {-1, -1};
  const int cell_h = recon_image.height() / grid_h;
  const int cell_w = recon_image.width() / grid_w;
  int row = static_cast<int>(cy / mass) / cell_h;
  int col = static_cast<int>(cx / mass) / cell_w;
  row = std::clamp(row, 0, grid_h - 1);
  col = std::clamp(col, 0, grid_w - 1);
  return {row, col};
}

namespace detail {

struct ParseHyp {
  ActivationStack residual;
  std::vector<ParsedInstance> seq;
  std::vector<std::vector<ModeRow>> mode_trace;
  double cum = 0.0;
};

}  // namespace detail

inline ParseResult parse_scene(const Tensor& image, int steps, int beam,
                               const HiddenClamp& clamp,
                               const GenerativeModel& m,
                               const EncoderWeights& enc, int top_m = 15,
                               int threads = 1) {
  if (steps < 1) throw InputError("parse_scene: steps must be >= 1");
  if (beam < 1) throw InputError("parse_scene: beam must be >= 1");
  const int L = m.spec.top();
  const int eff_top_m = std::max(top_m, beam);

  std::vector<int> cats;
  if (clamp.category) {
    cats.push_back(*clamp.category);
  } else {
    for (int c = 0; c < m.spec.num_categories(); ++c) cats.push_back(c);
  }

  std::vector<detail::ParseHyp> hyps(1);
  hyps[0].residual = forward(image, enc, m.spec);

  for (int step = 0; step < steps; ++step) {
    std::vector<detail::ParseHyp> next;
    for (const detail::ParseHyp& hyp : hyps) {
      // Positional clamps steer only the first instance; the category clamp
      // (inside `cats`) applies throughout.
      HiddenClamp step_clamp;
      if (step == 0) step_clamp.layers = clamp.layers;

      std::vector<ModeRow> merged;
      std::vector<std::pair<int, std::vector<RankedMode>>> per_cat;
      for (int cat : cats) {
        HiddenClamp c = step_clamp;
        c.category = cat;
        std::vector<RankedMode> modes =
            rank_top_modes(hyp.residual, c, m, eff_top_m, threads);
        for (const RankedMode& mode : modes)
          merged.push_back({cat, mode.descent.h.layers[L - 1],
                            mode.descent.log_posterior});
        per_cat.emplace_back(cat, std::move(modes));
      }
      std::stable_sort(merged.begin(), merged.end(),
                       [](const ModeRow& a, const ModeRow& b) {
                         return a.log_posterior > b.log_posterior;
                       });
      if (static_cast<int>(merged.size()) > eff_top_m)
        merged.resize(eff_top_m);

      for (const auto& [cat, modes] : per_cat) {
        for (const RankedMode& mode : modes) {
          if (mode.local_rank >= beam) continue;
          detail::ParseHyp h2;
          h2.residual = subtract_instance(hyp.residual, mode.descent.f_td);
          h2.seq = hyp.seq;
          ParsedInstance inst;
          inst.h = mode.descent.h;
          inst.log_score = mode.descent.log_posterior;
          inst.f_td = mode.descent.f_td;
          const auto [row, col] =
              placement_cell(mode.descent.f_td.layers[0], m.spec);
          inst.placement_row = row;
          inst.placement_col = col;
          h2.seq.push_back(std::move(inst));
          h2.mode_trace = hyp.mode_trace;
          h2.mode_trace.push_back(merged);
          h2.cum = hyp.cum + mode.descent.log_posterior;
          next.push_back(std::move(h2));
        }
      }
    }
    std::stable_sort(next.begin(), next.end(),
                     [](const detail::ParseHyp& a, const detail::ParseHyp& b) {
                       return a.cum > b.cum;
                     });
    if (static_cast<int>(next.size()) > beam) next.resize(beam);
    hyps = std::move(next);
  }

  ParseResult out;
  out.instances = hyps[0].seq;
  out.residual = hyps[0].residual;
  out.step_modes = hyps[0].mode_trace;
  out.total_log_score = hyps[0].cum;
  return out;
}

// ---------------------------------------------------------------------------
// Scale search: parse the image resampled at each candidate scale and keep
// the scale whose strongest first instance scores best. Instances half the
// learned size are compensated by scale 2, and so on.
// ---------------------------------------------------------------------------

struct ScanResult {
  double best_scale = 1.0;
  ParseResult parse;                           // full parse at best_scale
  std::vector<std::pair<double, double>> scale_scores;
};

inline ScanResult scan_scales(const Tensor& image,
                              const std::vector<double>& scales, int steps,
                              int beam, const HiddenClamp& clamp,
                              const GenerativeModel& m,
                              const EncoderWeights& enc, int top_m = 15,
                              int threads = 1) {
  if (scales.empty()) throw InputError("scan_scales: no scales");
  ScanResult out;
  double best = -std::numeric_limits<double>::infinity();
  bool have = false;
  for (double s : scales) {
    const Tensor scaled = bilinear_rescale(image, s);
    // One greedy instance is enough to score a scale.
    const ParseResult quick =
        parse_scene(scaled, 1, 1, clamp, m, enc, top_m, threads);
    const double score = quick.instances[0].log_score;
    out.scale_scores.emplace_back(s, score);
    if (!have || score > best) {  // ties keep the earlier scale
      best = score;
      out.best_scale = s;
      have = true;
    }
  }
  out.parse = parse_scene(bilinear_rescale(image, out.best_scale), steps,
                          beam, clamp, m, enc, top_m, threads);
  return out;
}

}  // namespace genpass
