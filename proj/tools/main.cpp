// genpass: batch pipeline around the generative activation model.
// Subcommands: gen-data, train, sample, parse, probe.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "genpass/dataset.hpp"
#include "genpass/encoder.hpp"
#include "genpass/genmodel.hpp"
#include "genpass/image.hpp"
#include "genpass/inference.hpp"
#include "genpass/learning.hpp"
#include "genpass/observation.hpp"

using namespace genpass;
namespace fs = std::filesystem;

namespace {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "out";
  int threads = 1;

  DatasetConfig dataset;  // seed/out_dir filled per run

  int enc_epochs = 30;
  double enc_lr = 0.05;
  int enc_batch = 16;

  int obs_grid_points = 64;
  int obs_pairs = 48;
  int obs_clutter = 3;

  EmConfig em;

  int sample_count = 9;
  int sample_category = -1;  // -1: draw from the category prior
  bool clamp_top = false;

  int steps = 2;
  int beam = 1;
  int top_m = 15;
  std::vector<double> scales;

  int probe_steps = 12;
};

void reject_unknown(const nlohmann::json& obj,
                    const std::vector<std::string>& allowed,
                    const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown config key '" + it.key() + "' in " + where);
}

template <class T>
void pick(const nlohmann::json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

RunConfig parse_config_file(const std::string& path) {
  RunConfig rc;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
    reject_unknown(j,
                   {"seed", "out", "threads", "dataset", "encoder",
                    "observation", "em", "sample", "parse", "probe"},
                   "config");
    pick(j, "seed", rc.seed);
    pick(j, "out", rc.out);
    pick(j, "threads", rc.threads);
    if (j.contains("dataset")) {
      const nlohmann::json& d = j["dataset"];
      reject_unknown(d,
                     {"n_train", "n_test_scenes", "min_instances",
                      "max_instances", "min_clutter", "max_clutter",
                      "vary_scale", "image_size", "grid"},
                     "dataset");
      pick(d, "n_train", rc.dataset.n_train);
      pick(d, "n_test_scenes", rc.dataset.n_test_scenes);
      pick(d, "min_instances", rc.dataset.min_instances);
      pick(d, "max_instances", rc.dataset.max_instances);
      pick(d, "min_clutter", rc.dataset.min_clutter);
      pick(d, "max_clutter", rc.dataset.max_clutter);
      pick(d, "vary_scale", rc.dataset.vary_scale);
      pick(d, "image_size", rc.dataset.image_size);
      pick(d, "grid", rc.dataset.grid);
    }
    if (j.contains("encoder")) {
      const nlohmann::json& e = j["encoder"];
      reject_unknown(e, {"epochs", "lr", "batch"}, "encoder");
      pick(e, "epochs", rc.enc_epochs);
      pick(e, "lr", rc.enc_lr);
      pick(e, "batch", rc.enc_batch);
    }
    if (j.contains("observation")) {
      const nlohmann::json& o = j["observation"];
      reject_unknown(o, {"grid_points", "pairs", "clutter"}, "observation");
      pick(o, "grid_points", rc.obs_grid_points);
      pick(o, "pairs", rc.obs_pairs);
      pick(o, "clutter", rc.obs_clutter);
    }
    if (j.contains("em")) {
      const nlohmann::json& e = j["em"];
      reject_unknown(e,
                     {"iterations", "filter_epochs", "filter_lr",
                      "sigma0_floor", "rescue_after", "rescue_jitter",
                      "improvement_guard"},
                     "em");
      pick(e, "iterations", rc.em.iterations);
      pick(e, "filter_epochs", rc.em.filter_epochs);
      pick(e, "filter_lr", rc.em.filter_lr);
      pick(e, "sigma0_floor", rc.em.sigma0_floor);
      pick(e, "rescue_after", rc.em.rescue_after);
      pick(e, "rescue_jitter", rc.em.rescue_jitter);
      pick(e, "improvement_guard", rc.em.improvement_guard);
    }
    if (j.contains("sample")) {
      const nlohmann::json& s = j["sample"];
      reject_unknown(s, {"count", "category", "clamp_top"}, "sample");
      pick(s, "count", rc.sample_count);
      pick(s, "category", rc.sample_category);
      pick(s, "clamp_top", rc.clamp_top);
    }
    if (j.contains("parse")) {
      const nlohmann::json& p = j["parse"];
      reject_unknown(p, {"steps", "beam", "top_m", "scales"}, "parse");
      pick(p, "steps", rc.steps);
      pick(p, "beam", rc.beam);
      pick(p, "top_m", rc.top_m);
      pick(p, "scales", rc.scales);
    }
    if (j.contains("probe")) {
      reject_unknown(j["probe"], {"steps"}, "probe");
      pick(j["probe"], "steps", rc.probe_steps);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config file: ") + e.what());
  }
  return rc;
}

nlohmann::json config_json(const RunConfig& rc) {
  nlohmann::json j;
  j["seed"] = rc.seed;
  j["out"] = rc.out;
  j["threads"] = rc.threads;
  j["dataset"] = {{"n_train", rc.dataset.n_train},
                  {"n_test_scenes", rc.dataset.n_test_scenes},
                  {"min_instances", rc.dataset.min_instances},
                  {"max_instances", rc.dataset.max_instances},
                  {"min_clutter", rc.dataset.min_clutter},
                  {"max_clutter", rc.dataset.max_clutter},
                  {"vary_scale", rc.dataset.vary_scale},
                  {"image_size", rc.dataset.image_size},
                  {"grid", rc.dataset.grid}};
  j["encoder"] = {{"epochs", rc.enc_epochs},
                  {"lr", rc.enc_lr},
                  {"batch", rc.enc_batch}};
  j["observation"] = {{"grid_points", rc.obs_grid_points},
                      {"pairs", rc.obs_pairs},
                      {"clutter", rc.obs_clutter}};
  j["em"] = {{"iterations", rc.em.iterations},
             {"filter_epochs", rc.em.filter_epochs},
             {"filter_lr", rc.em.filter_lr},
             {"sigma0_floor", rc.em.sigma0_floor},
             {"rescue_after", rc.em.rescue_after},
             {"rescue_jitter", rc.em.rescue_jitter},
             {"improvement_guard", rc.em.improvement_guard}};
  j["sample"] = {{"count", rc.sample_count},
                 {"category", rc.sample_category},
                 {"clamp_top", rc.clamp_top}};
  j["parse"] = {{"steps", rc.steps},
                {"beam", rc.beam},
                {"top_m", rc.top_m},
                {"scales", rc.scales}};
  j["probe"] = {{"steps", rc.probe_steps}};
  return j;
}

void write_snapshot(const RunConfig& rc, const std::string& command,
                    const nlohmann::json& extras) {
  nlohmann::json j = config_json(rc);
  j["command"] = command;
  for (auto it = extras.begin(); it != extras.end(); ++it)
    j[it.key()] = it.value();
  std::string name = command;
  std::replace(name.begin(), name.end(), '-', '_');
  std::ofstream out(rc.out + "/" + name + "_config.json", std::ios::binary);
  if (!out) throw IoError("cannot write config snapshot in " + rc.out);
  out << j.dump(2) << "\n";
}

std::string num(double v) { return nlohmann::json(v).dump(); }

void ensure_finite_stack(const ActivationStack& st, const std::string& what) {
  for (const Tensor& t : st.layers)
    if (!all_finite(t)) throw NumericError(what + ": non-finite values");
}

// ---- sampling helpers (clamped-group variant of the prior draw) ----

HiddenAssignment sample_hidden_pinned(const GenerativeModel& m, int category,
                                      const std::optional<HiddenLayerAssign>& top,
                                      Rng& rng) {
  HiddenAssignment h;
  h.category = category;
  const int L = m.spec.top();
  h.layers.resize(L);
  for (int l = L - 1; l >= 0; --l) {
    if (l == L - 1 && top) {
      h.layers[l] = *top;
      continue;
    }
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

ActivationStack noisy_stack(const GenerativeModel& m,
                            const HiddenAssignment& h, Rng& rng) {
  const int L = m.spec.top();
  ActivationStack st;
  st.role = StackRole::top_down;
  st.layers.assign(L + 1, Tensor());
  st.layers[L] = onehot_top(m.spec, h.category);
  for (int l = L - 1; l >= 0; --l) {
    Tensor mean = topdown_mean(m, l, st.layers[l + 1], h.layers[l]);
    const double s0 = m.td[l].sigma0;
    for (double& v : mean.values()) v = std::max(0.0, v + s0 * rng.normal());
    st.layers[l] = std::move(mean);
  }
  return st;
}

nlohmann::json assign_json(const HiddenAssignment& h) {
  nlohmann::json layers = nlohmann::json::array();
  for (const HiddenLayerAssign& a : h.layers)
    layers.push_back({{"gamma", a.gamma}, {"dy", a.dy}, {"dx", a.dx}});
  return {{"category", h.category}, {"layers", layers}};
}

// ---- commands ----

int cmd_gen_data(RunConfig rc) {
  rc.dataset.seed = rc.seed;
  rc.dataset.out_dir = rc.out;
  const DatasetIndex idx = generate_dataset(rc.dataset);
  write_snapshot(rc, "gen-data", {});
  std::cout << "wrote " << idx.train.size() << " training items and "
            << idx.scenes.size() << " scenes to " << rc.out << "\n";
  return 0;
}

// Observation pairs: evidence is a training instance composited with a
// partner instance (different placement cell) and clutter; the generated
// side is the trained model's decode of the imputed assignment. Foreground
// residuals then measure decode error, background residuals include the
// bright pixels a single-instance parse must leave unexplained.
ObservationParams fit_observation_pairs(
    const DatasetIndex& idx, const std::vector<LabeledImage>& labeled,
    const std::vector<TrainExample>& examples, const GenerativeModel& m,
    const EncoderWeights& enc, const HierarchySpec& spec, int n_pairs,
    int n_clutter, int grid_points, std::uint64_t seed) {
  std::vector<StackPair> pairs;
  const std::size_t n = labeled.size();
  const std::size_t stride =
      std::max<std::size_t>(1, n / static_cast<std::size_t>(std::max(1, n_pairs)));
  auto cell = [&](std::size_t t) {
    return std::pair(idx.train[t].shape.cell_row, idx.train[t].shape.cell_col);
  };
  for (std::size_t i = 0;
       i < n && pairs.size() < static_cast<std::size_t>(n_pairs); i += stride) {
    Tensor scene = labeled[i].image;
    for (std::size_t j = 1; j < n; ++j) {
      const std::size_t t = (i + j) % n;
      if (cell(t) != cell(i)) {
        compose_max(scene, labeled[t].image);
        break;
      }
    }
    Rng crng(derive_seed(seed, 0x6f627300ULL + i));
    for (int k = 0; k < n_clutter; ++k)
      compose_max(scene, render_clutter(draw_clutter(crng, scene.height()),
                                        scene.height()));
    StackPair p;
    p.bu = forward(scene, enc, spec);
    p.td = decode_topdown(m, impute(m, examples[i]));
    ensure_finite_stack(p.bu, "observation evidence stack");
    pairs.push_back(std::move(p));
  }
  const auto grids = default_lambda_grids(pairs, spec.top(), grid_points);
  return fit_observation(pairs, grids);
}

int cmd_train(RunConfig rc, const std::string& data_dir) {
  fs::create_directories(rc.out);
  const DatasetIndex idx = load_dataset_index(data_dir);
  if (idx.train.empty()) throw InputError("dataset has no training items");
  const HierarchySpec spec = default_hierarchy(kNumShapeCategories);
  if (idx.image_size != spec.layers[0].height)
    throw InputError("dataset image size does not match the hierarchy");
  const int L = spec.top();

  // Encoder on clean single-instance images.
  std::vector<LabeledImage> labeled;
  std::vector<Tensor> masks;
  for (const TrainRecord& r : idx.train) {
    labeled.push_back({load_gray(data_dir, r.file), r.shape.category});
    masks.push_back(load_gray(data_dir, r.mask_file));
  }
  EncoderTrainConfig ec;
  ec.epochs = rc.enc_epochs;
  ec.lr = rc.enc_lr;
  ec.batch = rc.enc_batch;
  ec.seed = rc.seed;
  std::vector<EncoderEpochRow> enc_log;
  const EncoderWeights enc = train_encoder(labeled, ec, spec, &enc_log);
  if (!std::isfinite(enc_log.back().loss))
    throw NumericError("encoder training diverged");
  std::cout << "encoder: accuracy " << enc_log.back().accuracy << " after "
            << rc.enc_epochs << " epochs\n";

  // Hard EM on masked-instance stacks.
  std::vector<TrainExample> examples;
  for (std::size_t i = 0; i < idx.train.size(); ++i) {
    TrainExample ex;
    ex.category = labeled[i].label;
    ex.f_td = masked_instance_stack(labeled[i].image, masks[i],
                                    labeled[i].label, enc, spec);
    examples.push_back(std::move(ex));
  }
  GenerativeModel model =
      init_generative_model(spec, derive_seed(rc.seed, 0x6d6f64));
  EmConfig em = rc.em;
  em.seed = rc.seed;
  em.threads = rc.threads;
  const EmTrace trace = hard_em(examples, model, em);
  for (const EmIterRow& row : trace.rows)
    if (!std::isfinite(row.complete_data_loglik))
      throw NumericError("EM diverged");

  // Observation fit comes after EM because the generated side of each pair
  // is the trained model's decode. The evidence side is the same instance
  // composited with another instance and clutter, so the background
  // population sees the bright pixels a parse has to leave unexplained.
  const ObservationParams obs = fit_observation_pairs(
      idx, labeled, examples, model, enc, spec, rc.obs_pairs, rc.obs_clutter,
      rc.obs_grid_points, rc.seed);
  model.observation = obs;

  // Artifacts.
  save_model(model, rc.out + "/model.json", rc.out + "/model.ntf");
  save_encoder(enc, rc.out + "/encoder.ntf");
  {
    std::ofstream f(rc.out + "/encoder_log.csv", std::ios::binary);
    f << "epoch,loss,accuracy\n";
    for (const EncoderEpochRow& r : enc_log)
      f << r.epoch << "," << num(r.loss) << "," << num(r.accuracy) << "\n";
  }
  {
    std::ofstream f(rc.out + "/em_trace.csv", std::ios::binary);
    f << "iter,complete_data_loglik";
    for (int l = 0; l < L; ++l) f << ",recon_loss_l" << l;
    f << ",top_components_used\n";
    for (const EmIterRow& r : trace.rows) {
      f << r.iter << "," << num(r.complete_data_loglik);
      for (int l = 0; l < L; ++l) f << "," << num(r.recon_loss[l]);
      int used = 0;
      for (int c : r.gamma_hist[L - 1]) used += c > 0 ? 1 : 0;
      f << "," << used << "\n";
    }
  }
  {
    std::ofstream f(rc.out + "/observation_fit.csv", std::ios::binary);
    f << "layer,lambda,beta,sigma2,fit_score,flagged_channels,background_flagged\n";
    for (int l = 0; l < L; ++l) {
      const ObservationLayerParams& p = obs.layers[l];
      f << l << "," << num(p.lambda) << "," << num(p.beta) << ","
        << num(p.sigma2) << "," << num(p.fit_score) << ","
        << p.flagged_channels.size() << "," << (p.background_flagged ? 1 : 0)
        << "\n";
    }
  }
  write_snapshot(rc, "train", {{"data", data_dir}});
  std::cout << "EM: loglik " << trace.rows.front().complete_data_loglik
            << " -> " << trace.rows.back().complete_data_loglik << " over "
            << trace.rows.size() << " iterations\n";
  std::cout << "model written to " << rc.out << "\n";
  return 0;
}

int cmd_sample(RunConfig rc, const std::string& model_dir) {
  fs::create_directories(rc.out);
  const GenerativeModel m =
      load_model(model_dir + "/model.json", model_dir + "/model.ntf");
  if (rc.sample_count < 1) throw ConfigError("sample count must be >= 1");
  if (rc.sample_category >= m.spec.num_categories())
    throw ConfigError("sample category out of range");
  const int L = m.spec.top();

  std::vector<double> cat_probs(m.spec.num_categories());
  for (int c = 0; c < m.spec.num_categories(); ++c)
    cat_probs[c] = m.categories.prob(c);

  std::vector<Tensor> tiles;
  nlohmann::json items = nlohmann::json::array();
  std::optional<HiddenLayerAssign> group_top;
  int group_cat = 0;
  for (int i = 0; i < rc.sample_count; ++i) {
    Rng rng(derive_seed(rc.seed, 0x73616d00ULL + static_cast<std::uint64_t>(i)));
    if (rc.clamp_top) {
      // Groups of five share the top-layer assignment (and its category).
      if (i % 5 == 0) {
        Rng grng(derive_seed(rc.seed,
                             0x67727000ULL + static_cast<std::uint64_t>(i / 5)));
        group_cat = rc.sample_category >= 0
                        ? rc.sample_category
                        : grng.categorical(cat_probs);
        group_top = sample_hidden_pinned(m, group_cat, std::nullopt, grng)
                        .layers[L - 1];
      }
    }
    const int cat = rc.clamp_top ? group_cat
                    : rc.sample_category >= 0 ? rc.sample_category
                                              : rng.categorical(cat_probs);
    const HiddenAssignment h = sample_hidden_pinned(
        m, cat, rc.clamp_top ? group_top : std::nullopt, rng);
    const ActivationStack st = noisy_stack(m, h, rng);
    ensure_finite_stack(st, "sample stack");

    char name[32];
    std::snprintf(name, sizeof name, "sample_%03d.png", i);
    write_png_gray8(rc.out + "/" + name, st.layers[0]);
    tiles.push_back(st.layers[0]);
    nlohmann::json item = assign_json(h);
    item["file"] = name;
    if (rc.clamp_top) item["group"] = i / 5;
    items.push_back(item);
  }
  const int cols = rc.clamp_top
                       ? std::min(5, rc.sample_count)
                       : static_cast<int>(std::ceil(std::sqrt(
                             static_cast<double>(rc.sample_count))));
  write_png_gray8(rc.out + "/samples_grid.png", montage(tiles, cols));
  {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["clamp_top"] = rc.clamp_top;
    j["samples"] = items;
    std::ofstream f(rc.out + "/assignments.json", std::ios::binary);
    f << j.dump(2) << "\n";
  }
  write_snapshot(rc, "sample", {{"model", model_dir}});
  std::cout << "wrote " << rc.sample_count << " samples to " << rc.out << "\n";
  return 0;
}

int cmd_parse(RunConfig rc, const std::string& model_dir,
              const std::string& scene_path,
              const std::optional<int>& clamp_category,
              const std::optional<int>& clamp_gamma,
              const std::optional<int>& clamp_dy,
              const std::optional<int>& clamp_dx) {
  fs::create_directories(rc.out);
  const GenerativeModel m =
      load_model(model_dir + "/model.json", model_dir + "/model.ntf");
  const EncoderWeights enc =
      load_encoder(model_dir + "/encoder.ntf", m.spec);
  const Tensor scene = read_png_gray8(scene_path);
  const int L = m.spec.top();

  HiddenClamp clamp;
  if (clamp_category) clamp.category = *clamp_category;
  if (clamp_gamma || clamp_dy || clamp_dx) {
    clamp.layers.resize(L);
    clamp.layers[L - 1] = {clamp_gamma, clamp_dy, clamp_dx};
  }

  ParseResult pr;
  nlohmann::json extras = {{"model", model_dir}, {"scene", scene_path}};
  if (!rc.scales.empty()) {
    const ScanResult sr = scan_scales(scene, rc.scales, rc.steps, rc.beam,
                                      clamp, m, enc, rc.top_m, rc.threads);
    pr = sr.parse;
    extras["best_scale"] = sr.best_scale;
    std::ofstream f(rc.out + "/scale_scores.csv", std::ios::binary);
    f << "scale,first_instance_log_score\n";
    for (const auto& [s, v] : sr.scale_scores)
      f << num(s) << "," << num(v) << "\n";
  } else {
    pr = parse_scene(scene, rc.steps, rc.beam, clamp, m, enc, rc.top_m,
                     rc.threads);
  }

  nlohmann::json steps_json = nlohmann::json::array();
  for (std::size_t s = 0; s < pr.instances.size(); ++s) {
    const ParsedInstance& inst = pr.instances[s];
    const std::string recon = "recon_step" + std::to_string(s) + ".png";
    const std::string modes = "modes_step" + std::to_string(s) + ".csv";
    write_png_gray8(rc.out + "/" + recon, inst.f_td.layers[0]);
    std::ofstream f(rc.out + "/" + modes, std::ios::binary);
    f << "rank,gamma,dy,dx,log_posterior\n";
    const std::vector<ModeRow>& rows = pr.step_modes[s];
    for (std::size_t r = 0; r < rows.size(); ++r)
      f << r + 1 << "," << rows[r].top_h.gamma << "," << rows[r].top_h.dy
        << "," << rows[r].top_h.dx << "," << num(rows[r].log_posterior)
        << "\n";

    nlohmann::json sj = assign_json(inst.h);
    sj["step"] = s;
    sj["log_score"] = inst.log_score;
    sj["placement_cell"] = {inst.placement_row, inst.placement_col};
    sj["recon"] = recon;
    sj["modes_csv"] = modes;
    steps_json.push_back(sj);
    std::cout << "instance " << s << ": category="
              << category_name(inst.h.category) << " cell=("
              << inst.placement_row << "," << inst.placement_col
              << ") score=" << inst.log_score << "\n";
  }
  {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["total_log_score"] = pr.total_log_score;
    if (extras.contains("best_scale")) j["best_scale"] = extras["best_scale"];
    j["steps"] = steps_json;
    std::ofstream f(rc.out + "/parse_trace.json", std::ios::binary);
    f << j.dump(2) << "\n";
  }
  write_snapshot(rc, "parse", extras);
  return 0;
}

int cmd_probe(RunConfig rc, const std::string& model_dir,
              const std::string& clean_path,
              const std::string& distractor_path) {
  fs::create_directories(rc.out);
  const HierarchySpec spec = default_hierarchy(kNumShapeCategories);
  const EncoderWeights enc =
      load_encoder(model_dir + "/encoder.ntf", spec);

  Tensor clean;
  if (!clean_path.empty()) {
    clean = read_png_gray8(clean_path);
  } else {
    ShapeParams p;
    p.category = 0;
    p.rotation = 30.0;
    p.cell_row = p.cell_col = 1;
    p.intensity = 0.9;
    clean = render_instance(p, spec.layers[0].height, 4).first;
  }
  Tensor distractor;
  if (!distractor_path.empty()) {
    distractor = read_png_gray8(distractor_path);
  } else {
    ClutterShape c;
    c.cy = c.cx = 4.0;
    c.half_w = 2.5;
    c.half_h = 1.2;
    c.rotation = 30.0;
    c.intensity = 0.8;
    distractor = render_clutter(c, 9);
  }

  const std::vector<ProbeRow> rows =
      compositionality_probe(clean, distractor, rc.probe_steps, enc, spec);
  std::ofstream f(rc.out + "/probe.csv", std::ios::binary);
  f << "frame,layer,change_norm\n";
  for (const ProbeRow& r : rows)
    f << r.frame << "," << r.layer << "," << num(r.change_norm) << "\n";
  write_snapshot(rc, "probe", {{"model", model_dir}});
  std::cout << "wrote " << rows.size() << " probe rows to " << rc.out
            << "/probe.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig rc;
  std::string config_path, data_dir, model_dir, scene_path;
  std::string clean_path, distractor_path;
  std::optional<int> clamp_category, clamp_gamma, clamp_dy, clamp_dx;

  CLI::App app{"hierarchical generative model of CNN activations"};
  app.fallthrough();
  app.require_subcommand(1);
  CLI::Option* o_config = app.add_option("--config", config_path,
                                         "JSON config file");
  CLI::Option* o_seed = app.add_option("--seed", rc.seed, "global seed");
  CLI::Option* o_out = app.add_option("--out", rc.out, "output directory");
  CLI::Option* o_threads =
      app.add_option("--threads", rc.threads, "worker threads");

  CLI::App* c_gen = app.add_subcommand("gen-data", "render the dataset");
  CLI::Option* o_ntrain =
      c_gen->add_option("--n-train", rc.dataset.n_train, "training items");
  CLI::Option* o_ntest = c_gen->add_option(
      "--n-test", rc.dataset.n_test_scenes, "evaluation scenes");
  CLI::Option* o_vary = c_gen->add_flag("--vary-scale", rc.dataset.vary_scale,
                                        "alternate 0.5x instance scenes");
  CLI::Option* o_mini = c_gen->add_option("--min-instances",
                                          rc.dataset.min_instances, "");
  CLI::Option* o_maxi = c_gen->add_option("--max-instances",
                                          rc.dataset.max_instances, "");

  CLI::App* c_train = app.add_subcommand("train", "fit encoder and model");
  c_train->add_option("--data", data_dir, "dataset directory")->required();
  CLI::Option* o_epochs =
      c_train->add_option("--epochs", rc.enc_epochs, "encoder epochs");
  CLI::Option* o_iters =
      c_train->add_option("--iterations", rc.em.iterations, "EM iterations");
  CLI::Option* o_guard = c_train->add_flag(
      "--no-guard",
      [&rc](std::int64_t) { rc.em.improvement_guard = false; },
      "disable the EM improvement guard");

  CLI::App* c_sample = app.add_subcommand("sample", "draw model samples");
  c_sample->add_option("--model", model_dir, "model directory")->required();
  CLI::Option* o_count =
      c_sample->add_option("--count", rc.sample_count, "samples to draw");
  CLI::Option* o_cat = c_sample->add_option("--category", rc.sample_category,
                                            "category (-1: prior)");
  CLI::Option* o_clamp = c_sample->add_flag("--clamp-top", rc.clamp_top,
                                            "groups of 5 share the top mode");

  CLI::App* c_parse = app.add_subcommand("parse", "parse a scene image");
  c_parse->add_option("--model", model_dir, "model directory")->required();
  c_parse->add_option("--scene", scene_path, "scene PNG")->required();
  CLI::Option* o_steps = c_parse->add_option("--steps", rc.steps, "instances");
  CLI::Option* o_beam = c_parse->add_option("--beam", rc.beam, "beam width");
  CLI::Option* o_topm = c_parse->add_option("--top-m", rc.top_m,
                                            "modes per report");
  CLI::Option* o_scales = c_parse->add_option("--scales", rc.scales,
                                              "scale factors to scan");
  c_parse->add_option("--clamp-category", clamp_category,
                      "pin the category");
  c_parse->add_option("--clamp-top-gamma", clamp_gamma,
                      "pin the top-layer component");
  c_parse->add_option("--clamp-top-dy", clamp_dy, "pin the top-layer dy");
  c_parse->add_option("--clamp-top-dx", clamp_dx, "pin the top-layer dx");

  CLI::App* c_probe = app.add_subcommand("probe",
                                         "feature compositionality sweep");
  c_probe->add_option("--model", model_dir, "model directory")->required();
  CLI::Option* o_psteps =
      c_probe->add_option("--steps", rc.probe_steps, "slide frames");
  c_probe->add_option("--clean", clean_path, "clean instance PNG");
  c_probe->add_option("--distractor", distractor_path, "distractor PNG");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (o_config->count() > 0) {
      // File values fill in wherever no flag was given.
      const RunConfig fc = parse_config_file(config_path);
      auto unset = [](const CLI::Option* o) { return o->count() == 0; };
      if (unset(o_seed)) rc.seed = fc.seed;
      if (unset(o_out)) rc.out = fc.out;
      if (unset(o_threads)) rc.threads = fc.threads;
      if (unset(o_ntrain)) rc.dataset.n_train = fc.dataset.n_train;
      if (unset(o_ntest)) rc.dataset.n_test_scenes = fc.dataset.n_test_scenes;
      if (unset(o_vary)) rc.dataset.vary_scale = fc.dataset.vary_scale;
      if (unset(o_mini)) rc.dataset.min_instances = fc.dataset.min_instances;
      if (unset(o_maxi)) rc.dataset.max_instances = fc.dataset.max_instances;
      rc.dataset.min_clutter = fc.dataset.min_clutter;
      rc.dataset.max_clutter = fc.dataset.max_clutter;
      rc.dataset.image_size = fc.dataset.image_size;
      rc.dataset.grid = fc.dataset.grid;
      if (unset(o_epochs)) rc.enc_epochs = fc.enc_epochs;
      rc.enc_lr = fc.enc_lr;
      rc.enc_batch = fc.enc_batch;
      rc.obs_grid_points = fc.obs_grid_points;
      rc.obs_pairs = fc.obs_pairs;
      rc.obs_clutter = fc.obs_clutter;
      const bool guard_flagged = o_guard->count() > 0;
      const int cli_iters = rc.em.iterations;
      rc.em = fc.em;
      if (o_iters->count() > 0) rc.em.iterations = cli_iters;
      if (guard_flagged) rc.em.improvement_guard = false;
      if (unset(o_count)) rc.sample_count = fc.sample_count;
      if (unset(o_cat)) rc.sample_category = fc.sample_category;
      if (unset(o_clamp)) rc.clamp_top = fc.clamp_top;
      if (unset(o_steps)) rc.steps = fc.steps;
      if (unset(o_beam)) rc.beam = fc.beam;
      if (unset(o_topm)) rc.top_m = fc.top_m;
      if (unset(o_scales)) rc.scales = fc.scales;
      if (unset(o_psteps)) rc.probe_steps = fc.probe_steps;
    }
    if (rc.threads < 1) throw ConfigError("threads must be >= 1");

    fs::create_directories(rc.out);
    if (c_gen->parsed()) return cmd_gen_data(rc);
    if (c_train->parsed()) return cmd_train(rc, data_dir);
    if (c_sample->parsed()) return cmd_sample(rc, model_dir);
    if (c_parse->parsed())
      return cmd_parse(rc, model_dir, scene_path, clamp_category, clamp_gamma,
                       clamp_dy, clamp_dx);
    if (c_probe->parsed())
      return cmd_probe(rc, model_dir, clean_path, distractor_path);
    throw ConfigError("no command given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
