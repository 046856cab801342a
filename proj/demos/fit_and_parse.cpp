// Miniature end-to-end run, all in memory: render a small training set,
// train the encoder, run a few EM iterations, fit the observation model
// from the trained model's decodes, then parse a fresh two-instance scene
// and report what was found.
// Takes around a minute; the command-line tool does the same at full size.

#include <cstdio>
#include <vector>

#include "genpass/dataset.hpp"
#include "genpass/encoder.hpp"
#include "genpass/genmodel.hpp"
#include "genpass/image.hpp"
#include "genpass/inference.hpp"
#include "genpass/learning.hpp"
#include "genpass/observation.hpp"

using namespace genpass;

int main() {
  const std::uint64_t seed = 21;
  const HierarchySpec spec = default_hierarchy(kNumShapeCategories);

  // Training set: clean single instances plus their masks.
  std::vector<LabeledImage> labeled;
  std::vector<Tensor> masks;
  std::vector<ShapeParams> poses;
  const DatasetConfig dcfg;
  for (int i = 0; i < 60; ++i) {
    Rng rng(derive_seed(seed, 0x1000 + i));
    const ShapeParams p = draw_train_pose(dcfg, i, rng);
    auto [img, mask] = render_instance(p, 32, 4);
    labeled.push_back({img, p.category});
    masks.push_back(mask);
    poses.push_back(p);
  }

  EncoderTrainConfig ec;
  ec.epochs = 12;
  ec.seed = seed;
  std::vector<EncoderEpochRow> log;
  const EncoderWeights enc = train_encoder(labeled, ec, spec, &log);
  std::printf("encoder: accuracy %.2f after %d epochs\n",
              log.back().accuracy, ec.epochs);

  std::vector<TrainExample> examples;
  for (std::size_t i = 0; i < labeled.size(); ++i)
    examples.push_back({masked_instance_stack(labeled[i].image, masks[i],
                                              labeled[i].label, enc, spec),
                        labeled[i].label});

  GenerativeModel m = init_generative_model(spec, derive_seed(seed, 0x6d));
  EmConfig cfg;
  cfg.iterations = 6;
  cfg.seed = seed;
  const EmTrace trace = hard_em(examples, m, cfg);
  std::printf("EM: loglik %.1f -> %.1f\n",
              trace.rows.front().complete_data_loglik,
              trace.rows.back().complete_data_loglik);

  // Observation fit after EM: each evidence scene gets a partner instance
  // at a different cell plus clutter, and the generated side is the trained
  // model's decode of the imputed assignment. Matching has to be judged by
  // what the model actually draws, or foreground never pays for misses.
  std::vector<StackPair> pairs;
  auto cell = [&](std::size_t t) {
    return std::pair(poses[t].cell_row, poses[t].cell_col);
  };
  for (std::size_t i = 0; i < 24; ++i) {
    Tensor cluttered = labeled[i].image;
    for (std::size_t j = 1; j < labeled.size(); ++j) {
      const std::size_t t = (i + j) % labeled.size();
      if (cell(t) != cell(i)) {
        compose_max(cluttered, labeled[t].image);
        break;
      }
    }
    Rng rng(derive_seed(seed, 0x2000 + i));
    for (int k = 0; k < 3; ++k)
      compose_max(cluttered, render_clutter(draw_clutter(rng, 32), 32));
    StackPair p;
    p.bu = forward(cluttered, enc, spec);
    p.td = decode_topdown(m, impute(m, examples[i]));
    pairs.push_back(std::move(p));
  }
  const auto grids = default_lambda_grids(pairs, spec.top(), 48);
  m.observation = fit_observation(pairs, grids);

  // A scene the model has never seen: one of each category, plus clutter.
  Rng srng(derive_seed(seed, 0x3000));
  const std::vector<ShapeParams> truth =
      draw_scene_instances(dcfg, /*count*/ 2, /*scale*/ 1.0, srng);
  const SceneData scene = compose_scene(truth, 3, derive_seed(seed, 0x3001));
  write_png_gray8("demo_scene.png", scene.image);

  const ParseResult pr =
      parse_scene(scene.image, /*steps*/ 2, /*beam*/ 1, HiddenClamp{}, m, enc);
  for (std::size_t s = 0; s < pr.instances.size(); ++s) {
    const ParsedInstance& inst = pr.instances[s];
    std::printf("instance %zu: %s at cell (%d,%d), log score %.1f\n", s,
                category_name(inst.h.category), inst.placement_row,
                inst.placement_col, inst.log_score);
    write_png_gray8("demo_recon_" + std::to_string(s) + ".png",
                    inst.f_td.layers[0]);
  }
  std::printf("truth:      %s at cell (%d,%d); %s at cell (%d,%d)\n",
              category_name(truth[0].category), truth[0].cell_row,
              truth[0].cell_col, category_name(truth[1].category),
              truth[1].cell_row, truth[1].cell_col);
  return 0;
}
