#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "genpass/errors.hpp"
#include "genpass/image.hpp"
#include "genpass/rng.hpp"
#include "genpass/tensor.hpp"

namespace genpass {

// Canonical shape size in pixels. Two airplane-silhouette polygon classes:
// a wide swept-wing glider and a narrow concave dart.
inline constexpr double kBaseRadius = 5.2;
inline constexpr int kNumShapeCategories = 2;

struct ShapeParams {
  int category = 0;
  double rotation = 0.0;  // degrees
  int cell_row = 0, cell_col = 0;
  double jitter_y = 0.0, jitter_x = 0.0;  // pixels, relative to cell center
  double intensity = 1.0;
  double scale = 1.0;  // held at 1 in the default set

  bool operator==(const ShapeParams&) const = default;
};

inline const char* category_name(int category) {
  switch (category) {
    case 0: return "glider";
    case 1: return "dart";
    default: throw InputError("unknown shape category");
  }
}

// Unit outlines as (x, y) pairs, nose pointing +x at rotation 0.
inline std::vector<std::pair<double, double>> category_polygon(int category) {
  switch (category) {
    case 0:
      return {{1.00, 0.00},
              {-0.30, 0.85},
              {-0.60, 0.45},
              {-0.60, -0.45},
              {-0.30, -0.85}};
    case 1:  // concave tail notch
      return {{1.00, 0.00}, {-0.55, 0.55}, {-0.20, 0.00}, {-0.55, -0.55}};
    default:
      throw InputError("unknown shape category");
  }
}

// Center of a placement cell in pixel-center coordinates.
inline double cell_center(int cell, int image_size, int grid) {
  const int px = image_size / grid;
  return cell * px + (px - 1) / 2.0;
}

namespace detail {

// Vertices snap to 1/256 px so floating-point noise cannot flip a sample.
inline double quant256(double v) {
  return static_cast<double>(std::llround(v * 256.0)) / 256.0;
}

inline bool point_in_polygon(double y, double x,
                             const std::vector<std::pair<double, double>>& p) {
  bool in = false;
  const std::size_t n = p.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto [yi, xi] = p[i];
    const auto [yj, xj] = p[j];
    if ((yi > y) != (yj > y)) {
      const double t = (y - yi) / (yj - yi);
      if (x < xi + t * (xj - xi)) in = !in;
    }
  }
  return in;
}

// 4x4 subsample coverage; pixel (y, x) is the unit square centered there.
inline Tensor rasterize(const std::vector<std::pair<double, double>>& poly,
                        int h, int w) {
  Tensor out(1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double py = y - 0.5 + (sy + 0.5) / 4.0;
          const double px = x - 0.5 + (sx + 0.5) / 4.0;
          if (point_in_polygon(py, px, poly)) ++hits;
        }
      out.at(0, y, x) = hits / 16.0;
    }
  return out;
}

// Rotation folds to [0, 360) first so full turns are bit-identical.
inline std::vector<std::pair<double, double>> place_outline(
    const std::vector<std::pair<double, double>>& unit, double cy, double cx,
    double radius, double rotation_deg) {
  const double theta = std::fmod(rotation_deg, 360.0) * M_PI / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  std::vector<std::pair<double, double>> out;
  out.reserve(unit.size());
  for (const auto& [ux, uy] : unit) {
    const double rx = ux * c - uy * s;
    const double ry = ux * s + uy * c;
    out.emplace_back(quant256(cy + radius * ry), quant256(cx + radius * rx));
  }
  return out;
}

}  // namespace detail

// Outline of a posed shape in image coordinates, as (y, x) pairs.
inline std::vector<std::pair<double, double>> shape_outline(
    const ShapeParams& p, int image_size, int grid) {
  if (p.scale <= 0) throw InputError("shape scale must be > 0");
  const double cy = cell_center(p.cell_row, image_size, grid) + p.jitter_y;
  const double cx = cell_center(p.cell_col, image_size, grid) + p.jitter_x;
  return detail::place_outline(category_polygon(p.category), cy, cx,
                               kBaseRadius * p.scale, p.rotation);
}

// Renders one instance; returns the intensity image and the coverage > 0.5
// mask.
inline std::pair<Tensor, Tensor> render_instance(const ShapeParams& p,
                                                 int image_size, int grid) {
  const Tensor cov =
      detail::rasterize(shape_outline(p, image_size, grid), image_size,
                        image_size);
  Tensor image(1, image_size, image_size);
  Tensor mask(1, image_size, image_size);
  for (std::size_t i = 0; i < cov.size(); ++i) {
    image.values()[i] = cov.values()[i] * p.intensity;
    mask.values()[i] = cov.values()[i] > 0.5 ? 1.0 : 0.0;
  }
  return {std::move(image), std::move(mask)};
}

inline void compose_max(Tensor& canvas, const Tensor& layer) {
  require_same_shape(canvas, layer, "compose_max");
  for (std::size_t i = 0; i < canvas.size(); ++i)
    canvas.values()[i] = std::max(canvas.values()[i], layer.values()[i]);
}

// Distractor family: small rotated bars, deliberately not from either shape
// category.
struct ClutterShape {
  double cy = 0, cx = 0;
  double half_w = 1.0, half_h = 0.5;
  double rotation = 0.0;
  double intensity = 0.4;
};

inline Tensor render_clutter(const ClutterShape& c, int image_size) {
  const std::vector<std::pair<double, double>> unit = {
      {1.0, 1.0}, {1.0, -1.0}, {-1.0, -1.0}, {-1.0, 1.0}};
  std::vector<std::pair<double, double>> scaled;
  for (const auto& [ux, uy] : unit)
    scaled.emplace_back(ux * c.half_w, uy * c.half_h);
  const auto poly =
      detail::place_outline(scaled, c.cy, c.cx, 1.0, c.rotation);
  Tensor cov = detail::rasterize(poly, image_size, image_size);
  for (double& v : cov.values()) v *= c.intensity;
  return cov;
}

inline ClutterShape draw_clutter(Rng& rng, int image_size) {
  ClutterShape c;
  c.cy = rng.uniform(3.0, image_size - 3.0);
  c.cx = rng.uniform(3.0, image_size - 3.0);
  c.half_w = rng.uniform(0.8, 2.0);
  c.half_h = rng.uniform(0.4, 1.0);
  c.rotation = rng.uniform(0.0, 360.0);
  c.intensity = rng.uniform(0.2, 0.6);
  return c;
}

struct SceneData {
  Tensor image;
  std::vector<Tensor> masks;  // one per instance
  std::vector<ShapeParams> instances;
  std::vector<ClutterShape> clutter;
};

// Instances composite by max blending in list order; clutter shapes are
// drawn from the given seed's stream.
inline SceneData compose_scene(const std::vector<ShapeParams>& instances,
                               int clutter_count, std::uint64_t seed,
                               int image_size = 32, int grid = 4) {
  if (clutter_count < 0) throw InputError("clutter_count must be >= 0");
  SceneData out;
  out.image = Tensor(1, image_size, image_size);
  out.instances = instances;
  for (const ShapeParams& p : instances) {
    auto [img, mask] = render_instance(p, image_size, grid);
    compose_max(out.image, img);
    out.masks.push_back(std::move(mask));
  }
  Rng rng(derive_seed(seed, 0x636c7574));
  for (int k = 0; k < clutter_count; ++k) {
    const ClutterShape c = draw_clutter(rng, image_size);
    compose_max(out.image, render_clutter(c, image_size));
    out.clutter.push_back(c);
  }
  return out;
}

// Pose pools. Training rotations are multiples of 30 degrees; evaluation
// rotations sit halfway between, so the pools never overlap.
inline std::vector<double> train_rotations() {
  std::vector<double> r;
  for (int k = 0; k < 12; ++k) r.push_back(30.0 * k);
  return r;
}

inline std::vector<double> test_rotations() {
  std::vector<double> r;
  for (int k = 0; k < 12; ++k) r.push_back(30.0 * k + 15.0);
  return r;
}

struct DatasetConfig {
  int n_train = 400;
  int n_test_scenes = 50;
  std::uint64_t seed = 1;
  std::string out_dir;
  int image_size = 32;
  int grid = 4;
  int min_instances = 1, max_instances = 2;
  int min_clutter = 2, max_clutter = 4;
  bool vary_scale = false;  // alternate scenes at 0.5x instance size
};

namespace detail {

struct InnerCells {
  int lo, hi;  // inclusive cell index range on each axis
};

inline InnerCells inner_cells(int grid) {
  return {grid / 2 - 1, grid / 2};
}

}  // namespace detail

// Training pose: balanced category, pool rotation, inner placement cell,
// small integer jitter.
inline ShapeParams draw_train_pose(const DatasetConfig& cfg, int index,
                                   Rng& rng) {
  const std::vector<double> pool = train_rotations();
  const detail::InnerCells in = detail::inner_cells(cfg.grid);
  ShapeParams p;
  p.category = index % kNumShapeCategories;
  p.rotation = pool[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
  p.cell_row = rng.uniform_int(in.lo, in.hi);
  p.cell_col = rng.uniform_int(in.lo, in.hi);
  p.jitter_y = rng.uniform_int(-2, 2);
  p.jitter_x = rng.uniform_int(-2, 2);
  p.intensity = rng.uniform(0.3, 1.0);
  return p;
}

// Scene instances: first cell uniform over the inner block; a second
// instance lands on the diagonal partner most of the time, an adjacent cell
// otherwise. Scene instances stay clearly visible.
inline std::vector<ShapeParams> draw_scene_instances(const DatasetConfig& cfg,
                                                     int count, double scale,
                                                     Rng& rng) {
  if (count < 1 || count > 2)
    throw InputError("scenes hold one or two instances");
  const std::vector<double> pool = test_rotations();
  const detail::InnerCells in = detail::inner_cells(cfg.grid);
  const int span = in.lo + in.hi;  // partner cell mirrors through the block

  std::vector<std::pair<int, int>> cells;
  const int r0 = rng.uniform_int(in.lo, in.hi);
  const int c0 = rng.uniform_int(in.lo, in.hi);
  cells.emplace_back(r0, c0);
  if (count == 2) {
    if (rng.uniform() < 0.2) {
      // adjacent: flip one axis
      if (rng.uniform_int(0, 1) == 0)
        cells.emplace_back(span - r0, c0);
      else
        cells.emplace_back(r0, span - c0);
    } else {
      cells.emplace_back(span - r0, span - c0);
    }
  }

  std::vector<ShapeParams> out;
  for (const auto& [r, c] : cells) {
    ShapeParams p;
    p.category = rng.uniform_int(0, kNumShapeCategories - 1);
    p.rotation = pool[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
    p.cell_row = r;
    p.cell_col = c;
    p.jitter_y = rng.uniform_int(-2, 2);
    p.jitter_x = rng.uniform_int(-2, 2);
    p.intensity = rng.uniform(0.5, 1.0);
    p.scale = scale;
    out.push_back(p);
  }
  return out;
}

struct TrainRecord {
  std::string file, mask_file;
  ShapeParams shape;
};

struct SceneRecord {
  int id = 0;
  std::string file;
  std::vector<std::string> mask_files;
  std::vector<ShapeParams> instances;
  int clutter_count = 0;
  double scene_scale = 1.0;
};

struct DatasetIndex {
  int schema_version = 1;
  std::uint64_t seed = 0;
  int image_size = 32;
  int grid = 4;
  std::vector<TrainRecord> train;
  std::vector<SceneRecord> scenes;
};

namespace detail {

inline nlohmann::json shape_to_json(const ShapeParams& p) {
  return {{"category", p.category},
          {"rotation", p.rotation},
          {"cell", {p.cell_row, p.cell_col}},
          {"jitter", {p.jitter_y, p.jitter_x}},
          {"intensity", p.intensity},
          {"scale", p.scale}};
}

inline ShapeParams shape_from_json(const nlohmann::json& j) {
  ShapeParams p;
  p.category = j.at("category").get<int>();
  p.rotation = j.at("rotation").get<double>();
  p.cell_row = j.at("cell").at(0).get<int>();
  p.cell_col = j.at("cell").at(1).get<int>();
  p.jitter_y = j.at("jitter").at(0).get<double>();
  p.jitter_x = j.at("jitter").at(1).get<double>();
  p.intensity = j.at("intensity").get<double>();
  p.scale = j.at("scale").get<double>();
  return p;
}

inline std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace detail

// Renders the full dataset to out_dir: clean single-instance training images
// with masks, cluttered evaluation scenes with per-instance masks, and an
// index.json manifest. Fully determined by the config.
inline DatasetIndex generate_dataset(const DatasetConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("dataset out_dir is empty");
  if (cfg.n_train < 0 || cfg.n_test_scenes < 0)
    throw ConfigError("dataset counts must be >= 0");
  if (cfg.min_instances < 1 || cfg.max_instances > 2 ||
      cfg.min_instances > cfg.max_instances)
    throw ConfigError("instances per scene must lie in [1, 2]");
  if (cfg.min_clutter < 0 || cfg.min_clutter > cfg.max_clutter)
    throw ConfigError("bad clutter range");
  if (cfg.image_size % cfg.grid != 0)
    throw ConfigError("image size must be a multiple of the grid");

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(cfg.out_dir) / "train");
  fs::create_directories(fs::path(cfg.out_dir) / "test");

  DatasetIndex idx;
  idx.seed = cfg.seed;
  idx.image_size = cfg.image_size;
  idx.grid = cfg.grid;

  for (int i = 0; i < cfg.n_train; ++i) {
    Rng rng(derive_seed(cfg.seed, 0x74720000ULL + static_cast<std::uint64_t>(i)));
    TrainRecord rec;
    rec.shape = draw_train_pose(cfg, i, rng);
    const std::string stem = "item_" + detail::zero_pad(i, 4);
    rec.file = "train/" + stem + ".png";
    rec.mask_file = "train/" + stem + "_mask.png";
    auto [img, mask] = render_instance(rec.shape, cfg.image_size, cfg.grid);
    write_png_gray8(cfg.out_dir + "/" + rec.file, img);
    write_png_gray8(cfg.out_dir + "/" + rec.mask_file, mask);
    idx.train.push_back(std::move(rec));
  }

  for (int i = 0; i < cfg.n_test_scenes; ++i) {
    Rng rng(derive_seed(cfg.seed, 0x73630000ULL + static_cast<std::uint64_t>(i)));
    SceneRecord rec;
    rec.id = i;
    rec.scene_scale = cfg.vary_scale ? (i % 2 == 1 ? 0.5 : 1.0) : 1.0;
    const int count = rng.uniform_int(cfg.min_instances, cfg.max_instances);
    const std::vector<ShapeParams> inst =
        draw_scene_instances(cfg, count, rec.scene_scale, rng);
    const int clutter = rng.uniform_int(cfg.min_clutter, cfg.max_clutter);
    const SceneData scene = compose_scene(
        inst, clutter,
        derive_seed(cfg.seed, 0x636c0000ULL + static_cast<std::uint64_t>(i)),
        cfg.image_size, cfg.grid);
    rec.instances = scene.instances;
    rec.clutter_count = clutter;
    const std::string stem = "scene_" + detail::zero_pad(i, 4);
    rec.file = "test/" + stem + ".png";
    write_png_gray8(cfg.out_dir + "/" + rec.file, scene.image);
    for (std::size_t k = 0; k < scene.masks.size(); ++k) {
      const std::string mf =
          "test/" + stem + "_mask_" + std::to_string(k) + ".png";
      write_png_gray8(cfg.out_dir + "/" + mf, scene.masks[k]);
      rec.mask_files.push_back(mf);
    }
    idx.scenes.push_back(std::move(rec));
  }

  nlohmann::json j;
  j["schema_version"] = idx.schema_version;
  j["seed"] = idx.seed;
  j["image_size"] = idx.image_size;
  j["grid"] = idx.grid;
  j["categories"] = {category_name(0), category_name(1)};
  j["train_rotations"] = train_rotations();
  j["test_rotations"] = test_rotations();
  j["train"] = nlohmann::json::array();
  for (const TrainRecord& r : idx.train) {
    nlohmann::json e = detail::shape_to_json(r.shape);
    e["file"] = r.file;
    e["mask_file"] = r.mask_file;
    j["train"].push_back(e);
  }
  j["scenes"] = nlohmann::json::array();
  for (const SceneRecord& r : idx.scenes) {
    nlohmann::json e;
    e["id"] = r.id;
    e["file"] = r.file;
    e["scene_scale"] = r.scene_scale;
    e["clutter_count"] = r.clutter_count;
    e["instances"] = nlohmann::json::array();
    for (std::size_t k = 0; k < r.instances.size(); ++k) {
      nlohmann::json ie = detail::shape_to_json(r.instances[k]);
      ie["mask_file"] = r.mask_files[k];
      e["instances"].push_back(ie);
    }
    j["scenes"].push_back(e);
  }
  std::ofstream out(cfg.out_dir + "/index.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + cfg.out_dir + "/index.json");
  out << j.dump(2) << "\n";
  return idx;
}

inline DatasetIndex load_dataset_index(const std::string& dir) {
  std::ifstream in(dir + "/index.json", std::ios::binary);
  if (!in) throw IoError("cannot open " + dir + "/index.json");
  nlohmann::json j;
  try {
    in >> j;
    DatasetIndex idx;
    idx.schema_version = j.at("schema_version").get<int>();
    if (idx.schema_version != 1)
      throw IoError("unsupported dataset schema version");
    idx.seed = j.at("seed").get<std::uint64_t>();
    idx.image_size = j.at("image_size").get<int>();
    idx.grid = j.at("grid").get<int>();
    for (const nlohmann::json& e : j.at("train")) {
      TrainRecord r;
      r.shape = detail::shape_from_json(e);
      r.file = e.at("file").get<std::string>();
      r.mask_file = e.at("mask_file").get<std::string>();
      idx.train.push_back(std::move(r));
    }
    for (const nlohmann::json& e : j.at("scenes")) {
      SceneRecord r;
      r.id = e.at("id").get<int>();
      r.file = e.at("file").get<std::string>();
      r.scene_scale = e.at("scene_scale").get<double>();
      r.clutter_count = e.at("clutter_count").get<int>();
      for (const nlohmann::json& ie : e.at("instances")) {
        r.instances.push_back(detail::shape_from_json(ie));
        r.mask_files.push_back(ie.at("mask_file").get<std::string>());
      }
      idx.scenes.push_back(std::move(r));
    }
    return idx;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad dataset index: ") + e.what());
  }
}

inline Tensor load_gray(const std::string& dir, const std::string& rel) {
  return read_png_gray8(dir + "/" + rel);
}

}  // namespace genpass
