#pragma once

#include <string>
#include <vector>

#include "genpass/errors.hpp"

namespace genpass {

// One level of the feature hierarchy. Layer 0 is the image; the last layer
// is the category one-hot (1x1 spatial). td_* describe the generative step
// that produces THIS layer from the one above: a choice among mixture_count
// transposed-convolution filters with stride td_stride and kernel td_kernel,
// followed by a rigid offset in [-offset_range, offset_range]^2. The top
// layer has no generator; its td fields are ignored.
struct LayerSpec {
  std::string name;
  int channels = 0;
  int height = 0;
  int width = 0;
  int td_kernel = 0;
  int td_stride = 1;
  int mixture_count = 1;
  int offset_range = 0;
};

struct HierarchySpec {
  std::vector<LayerSpec> layers;

  int top() const { return static_cast<int>(layers.size()) - 1; }
  int num_categories() const { return layers.back().channels; }

  void validate() const {
    if (layers.size() < 2)
      throw ShapeError("HierarchySpec: need at least image and category");
    const int L = top();
    if (layers[L].height != 1 || layers[L].width != 1)
      throw ShapeError("HierarchySpec: top layer must be 1x1, got " +
                       std::to_string(layers[L].height) + "x" +
                       std::to_string(layers[L].width));
    for (int l = 0; l <= L; ++l) {
      const LayerSpec& s = layers[l];
      if (s.channels < 1 || s.height < 1 || s.width < 1)
        throw ShapeError("HierarchySpec: layer " + std::to_string(l) +
                         " has empty dims");
    }
    // Bottom-up: each stage below the classifier is conv(3x3, pad 1) + relu
    // + maxpool2, so spatial dims halve.
    for (int l = 0; l + 2 <= L; ++l) {
      if (layers[l].height != 2 * layers[l + 1].height ||
          layers[l].width != 2 * layers[l + 1].width)
        throw ShapeError("HierarchySpec: layer " + std::to_string(l + 1) +
                         " must halve layer " + std::to_string(l));
    }
    // Top-down: transposed conv from layer l+1 must produce layer l exactly.
    for (int l = 0; l < L; ++l) {
      const LayerSpec& s = layers[l];
      if (s.mixture_count < 1)
        throw ShapeError("HierarchySpec: layer " + std::to_string(l) +
                         " needs mixture_count >= 1");
      if (s.offset_range < 0 || s.offset_range > s.height ||
          s.offset_range > s.width)
        throw ShapeError("HierarchySpec: layer " + std::to_string(l) +
                         " offset_range out of range");
      if (s.height != layers[l + 1].height * s.td_stride ||
          s.width != layers[l + 1].width * s.td_stride)
        throw ShapeError("HierarchySpec: layer " + std::to_string(l) +
                         " td_stride does not map layer " +
                         std::to_string(l + 1) + " onto it");
      if (s.td_kernel < s.td_stride || (s.td_kernel - s.td_stride) % 2 != 0)
        throw ShapeError("HierarchySpec: layer " + std::to_string(l) +
                         " td_kernel/td_stride mismatch");
    }
  }

  int offset_choices(int layer) const {
    const int d = layers[layer].offset_range;
    return (2 * d + 1) * (2 * d + 1);
  }
};

// The hierarchy used throughout: 32x32 images, three feature layers, two
// object categories. The top generator expands the 1x1 one-hot to the full
// 4x4 map in one stride-4 step; lower generators are stride-2.
inline HierarchySpec default_hierarchy(int categories = 2) {
  HierarchySpec h;
  h.layers.push_back({"image", 1, 32, 32, /*k*/ 4, /*s*/ 2,
                      /*K*/ 4, /*d*/ 1});
  h.layers.push_back({"f1", 8, 16, 16, 4, 2, 4, 1});
  h.layers.push_back({"f2", 16, 8, 8, 4, 2, 4, 1});
  h.layers.push_back({"f3", 32, 4, 4, 4, 4, 16, 1});
  h.layers.push_back({"category", categories, 1, 1, 0, 1, 1, 0});
  h.validate();
  return h;
}

}  // namespace genpass
