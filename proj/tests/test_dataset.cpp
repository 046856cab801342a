#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "genpass/dataset.hpp"

using namespace genpass;
namespace fs = std::filesystem;

namespace {

// Independent point test: winding number instead of even-odd crossings.
// Identical for simple polygons, which both shape classes are.
int winding_number(double y, double x,
                   const std::vector<std::pair<double, double>>& poly) {
  int wn = 0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto [y0, x0] = poly[i];
    const auto [y1, x1] = poly[(i + 1) % n];
    const double cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
    if (y0 <= y) {
      if (y1 > y && cross > 0) ++wn;
    } else {
      if (y1 <= y && cross < 0) --wn;
    }
  }
  return wn;
}

double oracle_coverage(int py, int px,
                       const std::vector<std::pair<double, double>>& poly) {
  int hits = 0;
  for (int sy = 0; sy < 16; ++sy)
    for (int sx = 0; sx < 16; ++sx) {
      const double y = py - 0.5 + (sy + 0.5) / 16.0;
      const double x = px - 0.5 + (sx + 0.5) / 16.0;
      if (winding_number(y, x, poly) != 0) ++hits;
    }
  return hits / 256.0;
}

double shoelace_area(const std::vector<std::pair<double, double>>& poly) {
  double a = 0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto [y0, x0] = poly[i];
    const auto [y1, x1] = poly[(i + 1) % n];
    a += x0 * y1 - x1 * y0;
  }
  return std::abs(a) / 2.0;
}

std::string fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("rasterizer agrees with a dense winding-number oracle") {
  Rng rng(24601);
  for (int trial = 0; trial < 12; ++trial) {
    ShapeParams p;
    p.category = trial % 2;
    p.rotation = rng.uniform(0.0, 360.0);
    p.cell_row = rng.uniform_int(1, 2);
    p.cell_col = rng.uniform_int(1, 2);
    p.jitter_y = rng.uniform_int(-2, 2);
    p.jitter_x = rng.uniform_int(-2, 2);
    p.intensity = rng.uniform(0.3, 1.0);

    const auto poly = shape_outline(p, 32, 4);
    const auto [img, mask] = render_instance(p, 32, 4);

    double total_err = 0;
    double max_err = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const double ref = oracle_coverage(y, x, poly) * p.intensity;
        const double err = std::abs(img.at(0, y, x) - ref);
        total_err += err;
        max_err = std::max(max_err, err);
      }
    REQUIRE(total_err / (32 * 32) < 0.02 * p.intensity);
    REQUIRE(max_err < 0.35 * p.intensity);

    // Total mass approximates area times intensity.
    double mass = 0;
    for (double v : img.values()) mass += v;
    REQUIRE(mass ==
            Catch::Approx(shoelace_area(poly) * p.intensity).epsilon(0.05));

    // Mask is exactly the coverage > 0.5 set.
    for (std::size_t i = 0; i < img.size(); ++i) {
      const bool inside = img.values()[i] > 0.5 * p.intensity;
      REQUIRE(mask.values()[i] == (inside ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("full turns render bit-identically") {
  for (int cat = 0; cat < 2; ++cat) {
    ShapeParams a;
    a.category = cat;
    a.rotation = 75.0;
    a.cell_row = a.cell_col = 1;
    a.intensity = 0.8;
    ShapeParams b = a;
    b.rotation = 75.0 + 360.0;
    const auto [ia, ma] = render_instance(a, 32, 4);
    const auto [ib, mb] = render_instance(b, 32, 4);
    REQUIRE(max_abs_diff(ia, ib) == 0.0);
    REQUIRE(max_abs_diff(ma, mb) == 0.0);

    ShapeParams zero = a;
    zero.rotation = 0.0;
    ShapeParams turn = a;
    turn.rotation = 360.0;
    REQUIRE(max_abs_diff(render_instance(zero, 32, 4).first,
                         render_instance(turn, 32, 4).first) == 0.0);
  }
}

TEST_CASE("shape categories are visibly distinct") {
  ShapeParams p;
  p.cell_row = p.cell_col = 1;
  p.intensity = 1.0;
  p.category = 0;
  const Tensor glider = render_instance(p, 32, 4).first;
  p.category = 1;
  const Tensor dart = render_instance(p, 32, 4).first;
  REQUIRE(max_abs_diff(glider, dart) > 0.5);

  double glider_mass = 0, dart_mass = 0;
  for (double v : glider.values()) glider_mass += v;
  for (double v : dart.values()) dart_mass += v;
  REQUIRE(glider_mass > dart_mass);  // the dart is the narrow one

  REQUIRE_THROWS_AS(category_polygon(2), InputError);
}

TEST_CASE("compose_scene blends and books instances") {
  const SceneData empty = compose_scene({}, 0, 7);
  for (double v : empty.image.values()) REQUIRE(v == 0.0);
  REQUIRE(empty.masks.empty());

  ShapeParams p;
  p.category = 1;
  p.rotation = 45.0;
  p.cell_row = p.cell_col = 2;
  p.intensity = 0.9;
  const SceneData solo = compose_scene({p}, 0, 7);
  const auto [img, mask] = render_instance(p, 32, 4);
  REQUIRE(max_abs_diff(solo.image, img) == 0.0);
  REQUIRE(solo.masks.size() == 1);
  REQUIRE(max_abs_diff(solo.masks[0], mask) == 0.0);

  // Max blending: the scene equals the elementwise max of the parts.
  ShapeParams q = p;
  q.cell_row = q.cell_col = 1;
  q.intensity = 0.5;
  const SceneData duo = compose_scene({p, q}, 0, 7);
  const Tensor qi = render_instance(q, 32, 4).first;
  for (std::size_t i = 0; i < duo.image.size(); ++i)
    REQUIRE(duo.image.values()[i] ==
            std::max(img.values()[i], qi.values()[i]));

  // Clutter only adds, never removes, and is seed-stable.
  const SceneData c1 = compose_scene({p}, 3, 99);
  const SceneData c2 = compose_scene({p}, 3, 99);
  REQUIRE(max_abs_diff(c1.image, c2.image) == 0.0);
  REQUIRE(c1.clutter.size() == 3);
  for (std::size_t i = 0; i < c1.image.size(); ++i)
    REQUIRE(c1.image.values()[i] >= img.values()[i]);
  const SceneData c3 = compose_scene({p}, 3, 100);
  REQUIRE(max_abs_diff(c1.image, c3.image) > 0.0);
}

TEST_CASE("train and test rotation pools are disjoint") {
  const std::vector<double> tr = train_rotations();
  const std::vector<double> te = test_rotations();
  REQUIRE(tr.size() == 12);
  REQUIRE(te.size() == 12);
  std::set<double> seen(tr.begin(), tr.end());
  for (double r : te) REQUIRE(seen.count(r) == 0);
}

TEST_CASE("generate_dataset writes a loadable, reproducible corpus") {
  DatasetConfig cfg;
  cfg.n_train = 8;
  cfg.n_test_scenes = 6;
  cfg.seed = 2024;
  cfg.min_clutter = 1;
  cfg.max_clutter = 2;
  cfg.out_dir = fresh_dir("genpass_ds_a");

  const DatasetIndex idx = generate_dataset(cfg);
  REQUIRE(idx.train.size() == 8);
  REQUIRE(idx.scenes.size() == 6);

  // Balanced categories, inner cells, pool rotations.
  int cat1 = 0;
  const std::vector<double> tr = train_rotations();
  for (const TrainRecord& r : idx.train) {
    cat1 += r.shape.category;
    REQUIRE(r.shape.cell_row >= 1);
    REQUIRE(r.shape.cell_row <= 2);
    REQUIRE(r.shape.cell_col >= 1);
    REQUIRE(r.shape.cell_col <= 2);
    REQUIRE(std::count(tr.begin(), tr.end(), r.shape.rotation) == 1);
    REQUIRE(r.shape.intensity >= 0.3);
    REQUIRE(r.shape.intensity <= 1.0);
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / r.file));
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / r.mask_file));
  }
  REQUIRE(cat1 == 4);

  const std::vector<double> te = test_rotations();
  for (const SceneRecord& s : idx.scenes) {
    REQUIRE(s.instances.size() >= 1);
    REQUIRE(s.instances.size() <= 2);
    REQUIRE(s.mask_files.size() == s.instances.size());
    REQUIRE(s.clutter_count >= 1);
    REQUIRE(s.clutter_count <= 2);
    for (const ShapeParams& p : s.instances)
      REQUIRE(std::count(te.begin(), te.end(), p.rotation) == 1);
    if (s.instances.size() == 2) {
      REQUIRE((s.instances[0].cell_row != s.instances[1].cell_row ||
               s.instances[0].cell_col != s.instances[1].cell_col));
    }
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / s.file));
  }

  // Round trip through the manifest.
  const DatasetIndex back = load_dataset_index(cfg.out_dir);
  REQUIRE(back.seed == cfg.seed);
  REQUIRE(back.train.size() == idx.train.size());
  for (std::size_t i = 0; i < idx.train.size(); ++i) {
    REQUIRE(back.train[i].shape == idx.train[i].shape);
    REQUIRE(back.train[i].file == idx.train[i].file);
  }
  for (std::size_t i = 0; i < idx.scenes.size(); ++i) {
    REQUIRE(back.scenes[i].instances == idx.scenes[i].instances);
    REQUIRE(back.scenes[i].scene_scale == idx.scenes[i].scene_scale);
  }

  // The written image matches an in-memory re-render.
  const Tensor disk = load_gray(cfg.out_dir, idx.train[0].file);
  const Tensor mem = render_instance(idx.train[0].shape, 32, 4).first;
  REQUIRE(max_abs_diff(disk, mem) <= 0.5 / 255.0 + 1e-12);

  // Byte-identical regeneration.
  DatasetConfig cfg2 = cfg;
  cfg2.out_dir = fresh_dir("genpass_ds_b");
  generate_dataset(cfg2);
  for (const TrainRecord& r : idx.train)
    REQUIRE(slurp(cfg.out_dir + "/" + r.file) ==
            slurp(cfg2.out_dir + "/" + r.file));
  for (const SceneRecord& s : idx.scenes)
    REQUIRE(slurp(cfg.out_dir + "/" + s.file) ==
            slurp(cfg2.out_dir + "/" + s.file));
  REQUIRE(slurp(cfg.out_dir + "/index.json") ==
          slurp(cfg2.out_dir + "/index.json"));

  // A different seed changes content.
  DatasetConfig cfg3 = cfg;
  cfg3.seed = 2025;
  cfg3.out_dir = fresh_dir("genpass_ds_c");
  generate_dataset(cfg3);
  REQUIRE(slurp(cfg.out_dir + "/index.json") !=
          slurp(cfg3.out_dir + "/index.json"));

  fs::remove_all(cfg.out_dir);
  fs::remove_all(cfg2.out_dir);
  fs::remove_all(cfg3.out_dir);
}

TEST_CASE("vary_scale alternates scene scales") {
  DatasetConfig cfg;
  cfg.n_train = 0;
  cfg.n_test_scenes = 4;
  cfg.vary_scale = true;
  cfg.min_clutter = 0;
  cfg.max_clutter = 0;
  cfg.out_dir = fresh_dir("genpass_ds_scale");
  const DatasetIndex idx = generate_dataset(cfg);
  REQUIRE(idx.scenes[0].scene_scale == 1.0);
  REQUIRE(idx.scenes[1].scene_scale == 0.5);
  REQUIRE(idx.scenes[2].scene_scale == 1.0);
  REQUIRE(idx.scenes[3].scene_scale == 0.5);
  for (const SceneRecord& s : idx.scenes)
    for (const ShapeParams& p : s.instances)
      REQUIRE(p.scale == s.scene_scale);

  // Half-scale instances carry roughly a quarter of the mass.
  ShapeParams p = idx.scenes[1].instances[0];
  const Tensor small = render_instance(p, 32, 4).first;
  p.scale = 1.0;
  const Tensor full = render_instance(p, 32, 4).first;
  double ms = 0, mf = 0;
  for (double v : small.values()) ms += v;
  for (double v : full.values()) mf += v;
  REQUIRE(ms < 0.4 * mf);
  fs::remove_all(cfg.out_dir);
}

TEST_CASE("dataset config validation") {
  DatasetConfig cfg;
  cfg.out_dir = "";
  REQUIRE_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg.out_dir = fresh_dir("genpass_ds_bad");
  cfg.min_instances = 0;
  REQUIRE_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg.min_instances = 1;
  cfg.max_clutter = -1;
  REQUIRE_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg.max_clutter = 2;
  cfg.image_size = 30;
  REQUIRE_THROWS_AS(generate_dataset(cfg), ConfigError);
  fs::remove_all(cfg.out_dir);
  REQUIRE_THROWS_AS(load_dataset_index("/nonexistent/genpass"), IoError);
}
