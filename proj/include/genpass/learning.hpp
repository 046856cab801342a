#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "genpass/genmodel.hpp"
#include "genpass/parallel.hpp"
#include "genpass/rng.hpp"
#include "genpass/tensor.hpp"

namespace genpass {

// One training example: the fully observed top-down stack of a masked
// single-instance image, plus its category label.
struct TrainExample {
  ActivationStack f_td;
  int category = 0;
};

// Complete-data log-likelihood of one example under a full assignment.
inline double example_loglik(const GenerativeModel& m, const TrainExample& ex,
                             const HiddenAssignment& h) {
  if (h.category != ex.category)
    throw InputError("example_loglik: assignment category mismatch");
  double total = m.categories.log_prob(h.category);
  for (int l = 0; l < m.spec.top(); ++l) {
    total -= std::log(static_cast<double>(m.spec.offset_choices(l)));
    total += m.ngram.log_prob(l, ngram_prefix(h, l, m.ngram.order),
                              h.layers[l].gamma,
                              m.spec.layers[l].mixture_count);
    const Tensor mean =
        topdown_mean(m, l, ex.f_td.layers[l + 1], h.layers[l]);
    total += log_gen_density(ex.f_td.layers[l], mean, m.td[l].sigma0);
  }
  return total;
}

// Hard E-step for one example: the stack is observed at every layer, so each
// layer's candidates are scored directly against its map; the n-gram prefix
// is committed top-down.
inline HiddenAssignment impute(const GenerativeModel& m,
                               const TrainExample& ex) {
  const int L = m.spec.top();
  if (static_cast<int>(ex.f_td.layers.size()) != L + 1)
    throw ShapeError("impute: bad stack depth");
  HiddenAssignment h;
  h.category = ex.category;
  h.layers.resize(L);
  for (int l = L - 1; l >= 0; --l) {
    const LayerSpec& s = m.spec.layers[l];
    const std::vector<int> prefix = ngram_prefix(h, l, m.ngram.order);
    const int d = s.offset_range;
    double best = -std::numeric_limits<double>::infinity();
    for (int g = 0; g < s.mixture_count; ++g) {
      const double prior = m.ngram.log_prob(l, prefix, g, s.mixture_count);
      const Tensor shaped = relu(
          transposed_conv2d(ex.f_td.layers[l + 1], m.td[l].components[g]));
      for (int dy = -d; dy <= d; ++dy)
        for (int dx = -d; dx <= d; ++dx) {
          const Tensor mean = apply_offset(shaped, dy, dx);
          const double score =
              prior + log_gen_density(ex.f_td.layers[l], mean, m.td[l].sigma0);
          if (score > best) {
            best = score;
            h.layers[l] = {g, dy, dx};
          }
        }
    }
  }
  return h;
}

// Per-layer generative means for an example under a hidden assignment.
// Each layer is decoded from the example's own upper layer, so the stack
// carries the model's one-step decode error instead of compounding errors
// down the chain; the top layer is copied through unchanged. This is the
// generated-side stack the observation fit pairs against composite-scene
// evidence: scoring a parse compares maps decoded from solved upper layers,
// which track the evidence, so the one-step error is the relevant one.
inline ActivationStack imputed_decode(const GenerativeModel& m,
                                      const TrainExample& ex,
                                      const HiddenAssignment& h) {
  const int L = m.spec.top();
  if (static_cast<int>(ex.f_td.layers.size()) != L + 1)
    throw ShapeError("imputed_decode: bad stack depth");
  if (static_cast<int>(h.layers.size()) != L)
    throw InputError("imputed_decode: bad assignment depth");
  ActivationStack st;
  st.role = StackRole::top_down;
  st.layers.assign(L + 1, Tensor());
  st.layers[L] = ex.f_td.layers[L];
  for (int l = 0; l < L; ++l)
    st.layers[l] = topdown_mean(m, l, ex.f_td.layers[l + 1], h.layers[l]);
  return st;
}

struct EmConfig {
  int iterations = 30;
  int filter_epochs = 5;       // full-batch gradient steps per M-step
  double filter_lr = 0.1;
  // Descent directions leak a little gradient through inactive relu
  // elements. Without it a component whose map goes all-nonpositive stops
  // learning for good, and "decode everything to zero" is a strong local
  // optimum for sparse layers; acceptance is still gated on the true
  // residual, so the leak only ever proposes steps.
  double filter_leak = 0.05;
  std::uint64_t seed = 1;
  int threads = 1;
  double sigma0_floor = 1e-4;
  int rescue_after = 3;        // idle iterations before a component reseeds
  double rescue_jitter = 0.01;
  // With the guard on, every E- and M-substep keeps its previous state
  // whenever the proposed update would lower the complete-data
  // log-likelihood, making the full iteration monotone.
  bool improvement_guard = true;
};

struct EmIterRow {
  int iter = 0;
  double complete_data_loglik = 0.0;
  std::vector<double> recon_loss;            // per-layer mean squared residual
  std::vector<std::vector<int>> gamma_hist;  // per-layer component usage
};

struct EmTrace {
  std::vector<EmIterRow> rows;
};

namespace detail {

// Data term of one n-gram cell under a given count vector.
inline double cell_data_term(const std::vector<int>& gammas,
                             const std::vector<double>* counts, double alpha,
                             int K) {
  double total = 0.0;
  if (!counts) {
    total = gammas.size() * std::log(1.0 / K);
  } else {
    double sum = 0;
    for (double c : *counts) sum += c;
    for (int g : gammas)
      total += std::log(((*counts)[g] + alpha) / (sum + alpha * K));
  }
  return total;
}

struct GroupKey {
  int layer, gamma;
  bool operator<(const GroupKey& o) const {
    return layer != o.layer ? layer < o.layer : gamma < o.gamma;
  }
};

}  // namespace detail

// Hard EM over masked-instance stacks. The model is updated in place; the
// returned trace has one row per iteration, recorded after that iteration's
// updates.
inline EmTrace hard_em(const std::vector<TrainExample>& examples,
                       GenerativeModel& m, const EmConfig& cfg) {
  if (examples.empty()) throw InputError("hard_em: no examples");
  if (cfg.iterations < 1) throw InputError("hard_em: iterations must be >= 1");
  const int L = m.spec.top();
  const int n = static_cast<int>(examples.size());
  for (const TrainExample& ex : examples) {
    if (static_cast<int>(ex.f_td.layers.size()) != L + 1)
      throw ShapeError("hard_em: bad stack depth");
    if (ex.category < 0 || ex.category >= m.spec.num_categories())
      throw InputError("hard_em: category out of range");
  }

  EmTrace trace;
  std::vector<HiddenAssignment> assign(n);
  std::vector<char> has_assign(n, 0);
  std::vector<std::vector<int>> idle(L);
  for (int l = 0; l < L; ++l)
    idle[l].assign(m.spec.layers[l].mixture_count, 0);
  Rng rescue_rng(derive_seed(cfg.seed, 0x72657363));

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    // E-step. keep-better: a proposed assignment only replaces the previous
    // one if it does not lower the example's log-likelihood.
    std::vector<HiddenAssignment> proposed(n);
    parallel_for(n, cfg.threads,
                 [&](int i) { proposed[i] = impute(m, examples[i]); });
    for (int i = 0; i < n; ++i) {
      if (cfg.improvement_guard && has_assign[i]) {
        if (example_loglik(m, examples[i], proposed[i]) >=
            example_loglik(m, examples[i], assign[i]))
          assign[i] = proposed[i];
      } else {
        assign[i] = proposed[i];
      }
      has_assign[i] = 1;
    }

    // M-step, categories. The labels are fixed, so this settles after the
    // first iteration; the guard still verifies it.
    {
      CategoryPrior fresh;
      fresh.alpha = m.categories.alpha;
      fresh.counts.assign(m.spec.num_categories(), 0.0);
      for (const TrainExample& ex : examples)
        fresh.counts[ex.category] += 1.0;
      double old_term = 0, new_term = 0;
      for (const TrainExample& ex : examples) {
        old_term += m.categories.log_prob(ex.category);
        new_term += fresh.log_prob(ex.category);
      }
      if (!cfg.improvement_guard || new_term >= old_term)
        m.categories = fresh;
    }

    // M-step, n-gram tables. Cells are independent, so each prefix keeps
    // whichever count vector explains its own assignments better.
    {
      std::vector<std::map<std::vector<int>, std::vector<int>>> used(L);
      for (int i = 0; i < n; ++i)
        for (int l = 0; l < L; ++l)
          used[l][ngram_prefix(assign[i], l, m.ngram.order)].push_back(
              assign[i].layers[l].gamma);
      NGramPrior fresh;
      fresh.order = m.ngram.order;
      fresh.alpha = m.ngram.alpha;
      fresh.tables.resize(L);
      for (int l = 0; l < L; ++l) {
        const int K = m.spec.layers[l].mixture_count;
        for (const auto& [prefix, gammas] : used[l]) {
          std::vector<double> hist(K, 0.0);
          for (int g : gammas) hist[g] += 1.0;
          if (cfg.improvement_guard) {
            const auto it = m.ngram.tables[l].find(prefix);
            const std::vector<double>* old_counts =
                it == m.ngram.tables[l].end() ? nullptr : &it->second;
            const double old_term =
                detail::cell_data_term(gammas, old_counts, m.ngram.alpha, K);
            const double new_term =
                detail::cell_data_term(gammas, &hist, m.ngram.alpha, K);
            if (old_term > new_term) {
              if (old_counts) fresh.tables[l][prefix] = *old_counts;
              continue;
            }
          }
          fresh.tables[l][prefix] = hist;
        }
      }
      m.ngram = fresh;
    }

    // M-step, filters. Full-batch steps per (layer, gamma) group on the
    // squared residual, with a backtracking line search: each epoch's step
    // is halved until the true group residual stops increasing, so a step
    // can never throw a whole group into the inactive region just because
    // the overshoot looked good to the linearization. The direction itself
    // leaks through inactive elements (cfg.filter_leak) so a dead element
    // with a bright target keeps pulling its pre-activation back up.
    std::map<detail::GroupKey, std::vector<int>> groups;
    for (int i = 0; i < n; ++i)
      for (int l = 0; l < L; ++l)
        groups[{l, assign[i].layers[l].gamma}].push_back(i);

    for (const auto& [key, members] : groups) {
      FilterBank& f = m.td[key.layer].components[key.gamma];
      const FilterBank backup = f;

      auto group_ssr = [&]() {
        double ssr = 0;
        for (int i : members) {
          const Tensor mean = topdown_mean(m, key.layer,
                                           examples[i].f_td.layers[key.layer + 1],
                                           assign[i].layers[key.layer]);
          ssr += sum_squared_diff(examples[i].f_td.layers[key.layer], mean);
        }
        return ssr;
      };
      const double before = group_ssr();
      double cur = before;

      const int nm = static_cast<int>(members.size());
      double step = cfg.filter_lr;
      for (int epoch = 0; epoch < cfg.filter_epochs; ++epoch) {
        std::vector<TopdownGrad> grads(nm);
        parallel_for(nm, cfg.threads, [&](int j) {
          const int i = members[j];
          const HiddenLayerAssign& a = assign[i].layers[key.layer];
          const Tensor& upper = examples[i].f_td.layers[key.layer + 1];
          const Tensor mean = topdown_mean(m, key.layer, upper, a);
          Tensor diff = mean;
          for (std::size_t e = 0; e < diff.size(); ++e)
            diff.values()[e] -=
                examples[i].f_td.layers[key.layer].values()[e];
          const Tensor g_out = apply_offset(diff, -a.dy, -a.dx);
          grads[j] = topdown_conv_grad(upper, f, g_out, cfg.filter_leak);
        });
        std::vector<double> gw(f.weights.size(), 0.0);
        std::vector<double> gb(f.bias.size(), 0.0);
        for (int j = 0; j < nm; ++j) {
          for (std::size_t k = 0; k < gw.size(); ++k)
            gw[k] += grads[j].weights[k];
          for (std::size_t k = 0; k < gb.size(); ++k)
            gb[k] += grads[j].bias[k];
        }
        const FilterBank base = f;
        bool accepted = false;
        for (int t = 0; t < 4 && !accepted; ++t) {
          f = base;
          for (std::size_t k = 0; k < gw.size(); ++k)
            f.weights[k] -= step * gw[k] / nm;
          for (std::size_t k = 0; k < gb.size(); ++k)
            f.bias[k] -= step * gb[k] / nm;
          const double ssr = group_ssr();
          if (ssr <= cur) {
            cur = ssr;
            accepted = true;
          } else {
            step *= 0.5;
          }
        }
        if (!accepted) {
          f = base;
          break;
        }
      }

      if (cfg.improvement_guard && cur > before) f = backup;
    }

    // sigma0: constrained maximum-likelihood root-mean-square residual,
    // never below the floor. The previous value is feasible, so this step
    // cannot lose likelihood.
    std::vector<double> layer_ssr(L, 0.0);
    std::vector<double> layer_elems(L, 0.0);
    for (int i = 0; i < n; ++i)
      for (int l = 0; l < L; ++l) {
        const Tensor mean = topdown_mean(m, l, examples[i].f_td.layers[l + 1],
                                         assign[i].layers[l]);
        layer_ssr[l] += sum_squared_diff(examples[i].f_td.layers[l], mean);
        layer_elems[l] += static_cast<double>(mean.size());
      }
    for (int l = 0; l < L; ++l)
      m.td[l].sigma0 = std::max(std::sqrt(layer_ssr[l] / layer_elems[l]),
                                cfg.sigma0_floor);

    EmIterRow row;
    row.iter = iter;
    for (int i = 0; i < n; ++i)
      row.complete_data_loglik += example_loglik(m, examples[i], assign[i]);
    for (int l = 0; l < L; ++l) {
      row.recon_loss.push_back(layer_ssr[l] / layer_elems[l]);
      std::vector<int> hist(m.spec.layers[l].mixture_count, 0);
      for (int i = 0; i < n; ++i) ++hist[assign[i].layers[l].gamma];
      row.gamma_hist.push_back(std::move(hist));
    }
    trace.rows.push_back(std::move(row));

    // Starved components copy the busiest one, perturbed. Nothing references
    // their weights, so the log-likelihood is untouched.
    for (int l = 0; l < L; ++l) {
      const std::vector<int>& hist = trace.rows.back().gamma_hist[l];
      const int busiest = static_cast<int>(
          std::max_element(hist.begin(), hist.end()) - hist.begin());
      for (int g = 0; g < m.spec.layers[l].mixture_count; ++g) {
        if (hist[g] == 0)
          ++idle[l][g];
        else
          idle[l][g] = 0;
        if (idle[l][g] >= cfg.rescue_after && hist[busiest] > 0 &&
            g != busiest) {
          FilterBank& f = m.td[l].components[g];
          const FilterBank& src = m.td[l].components[busiest];
          for (std::size_t k = 0; k < f.weights.size(); ++k)
            f.weights[k] =
                src.weights[k] + rescue_rng.normal(0.0, cfg.rescue_jitter);
          for (std::size_t k = 0; k < f.bias.size(); ++k)
            f.bias[k] = src.bias[k] + rescue_rng.normal(0.0, cfg.rescue_jitter);
          idle[l][g] = 0;
        }
      }
    }
  }
  return trace;
}

}  // namespace genpass
