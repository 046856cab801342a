// Renders both shape categories across rotations plus one cluttered scene,
// writing montages to the current directory. No model involved; this is the
// dataset layer on its own.

#include <cstdio>
#include <vector>

#include "genpass/dataset.hpp"
#include "genpass/image.hpp"

using namespace genpass;

int main() {
  std::vector<Tensor> tiles;
  for (int cat = 0; cat < kNumShapeCategories; ++cat) {
    for (int k = 0; k < 6; ++k) {
      ShapeParams p;
      p.category = cat;
      p.rotation = 60.0 * k;
      p.cell_row = p.cell_col = 1;
      p.jitter_y = p.jitter_x = 0;
      p.intensity = 0.9;
      tiles.push_back(render_instance(p, 32, 4).first);
    }
  }
  write_png_gray8("shapes_by_rotation.png", montage(tiles, 6));
  std::printf("shapes_by_rotation.png: %s row, then %s row\n",
              category_name(0), category_name(1));

  ShapeParams a;
  a.category = 0;
  a.rotation = 30.0;
  a.cell_row = 1;
  a.cell_col = 1;
  a.intensity = 0.8;
  ShapeParams b = a;
  b.category = 1;
  b.rotation = 105.0;
  b.cell_row = 2;
  b.cell_col = 2;
  const SceneData scene = compose_scene({a, b}, 3, /*seed*/ 42);
  write_png_gray8("scene.png", scene.image);
  write_png_gray8("scene_masks.png",
                  montage({scene.masks[0], scene.masks[1]}, 2));
  std::printf("scene.png: two instances, %d clutter bars\n",
              static_cast<int>(scene.clutter.size()));
  return 0;
}
