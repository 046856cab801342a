#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "genpass/errors.hpp"
#include "genpass/hierarchy.hpp"
#include "genpass/ntf.hpp"
#include "genpass/rng.hpp"
#include "genpass/tensor.hpp"

namespace genpass {

// A full set of per-layer feature maps, image at index 0, category scores or
// one-hot at the top. The role tag only documents where the stack came from;
// shapes are identical either way.
enum class StackRole { bottom_up, top_down };

struct ActivationStack {
  StackRole role = StackRole::bottom_up;
  std::vector<Tensor> layers;
};

// Fixed-architecture CNN: per stage conv(3x3, pad 1) + relu + maxpool2, then
// a linear classifier over the flattened last feature map. The classifier
// only exists to train the features; inference uses the feature maps.
struct EncoderWeights {
  std::vector<FilterBank> conv;   // one bank per stage
  std::vector<double> fc_weight;  // [category][flattened top feature map]
  std::vector<double> fc_bias;    // [category]
};

inline EncoderWeights init_encoder(const HierarchySpec& spec,
                                   std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x656e63));
  EncoderWeights w;
  const int stages = spec.top() - 1;
  for (int l = 0; l < stages; ++l) {
    FilterBank f(spec.layers[l + 1].channels, spec.layers[l].channels, 3, 3,
                 1);
    const double bound = std::sqrt(6.0 / (f.in_channels * 9));
    for (double& v : f.weights) v = rng.uniform(-bound, bound);
    w.conv.push_back(std::move(f));
  }
  const LayerSpec& last = spec.layers[spec.top() - 1];
  const int flat = last.channels * last.height * last.width;
  const int cats = spec.num_categories();
  const double bound = std::sqrt(6.0 / flat);
  w.fc_weight.resize(static_cast<std::size_t>(cats) * flat);
  for (double& v : w.fc_weight) v = rng.uniform(-bound, bound);
  w.fc_bias.assign(cats, 0.0);
  return w;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= z;
  return p;
}

namespace detail {

// Everything the backward pass of training needs to see again.
struct EncoderTrace {
  std::vector<Tensor> inputs;               // per stage
  std::vector<Tensor> pre;                  // conv outputs, pre-relu
  std::vector<std::vector<std::size_t>> pool_arg;
  std::vector<double> flat;
  std::vector<double> logits;
  std::vector<double> probs;
};

inline EncoderTrace encoder_forward_trace(const Tensor& image,
                                          const EncoderWeights& w) {
  EncoderTrace tr;
  Tensor cur = image;
  for (std::size_t l = 0; l < w.conv.size(); ++l) {
    tr.inputs.push_back(cur);
    Tensor pre = conv2d(cur, w.conv[l], 1);
    tr.pre.push_back(pre);
    std::vector<std::size_t> arg;
    cur = maxpool2_argmax(relu(pre), &arg);
    tr.pool_arg.push_back(std::move(arg));
  }
  tr.flat = cur.values();
  const int cats = static_cast<int>(w.fc_bias.size());
  tr.logits.resize(cats);
  for (int c = 0; c < cats; ++c) {
    double acc = w.fc_bias[c];
    const double* row = &w.fc_weight[static_cast<std::size_t>(c) *
                                     tr.flat.size()];
    for (std::size_t j = 0; j < tr.flat.size(); ++j) acc += row[j] * tr.flat[j];
    tr.logits[c] = acc;
  }
  tr.probs = softmax(tr.logits);
  return tr;
}

}  // namespace detail

// Bottom-up stack for an image: feature maps per layer, category softmax at
// the top.
inline ActivationStack forward(const Tensor& image, const EncoderWeights& w,
                               const HierarchySpec& spec) {
  if (image.channels() != spec.layers[0].channels ||
      image.height() != spec.layers[0].height ||
      image.width() != spec.layers[0].width)
    throw ShapeError("forward: image is " + image.shape_str() +
                     ", hierarchy wants " +
                     Tensor(spec.layers[0].channels, spec.layers[0].height,
                            spec.layers[0].width)
                         .shape_str());
  if (static_cast<int>(w.conv.size()) != spec.top() - 1)
    throw ShapeError("forward: encoder has " + std::to_string(w.conv.size()) +
                     " stages, hierarchy wants " +
                     std::to_string(spec.top() - 1));
  ActivationStack st;
  st.role = StackRole::bottom_up;
  st.layers.push_back(image);
  Tensor cur = image;
  for (std::size_t l = 0; l < w.conv.size(); ++l) {
    cur = maxpool2(relu(conv2d(cur, w.conv[l], 1)));
    st.layers.push_back(cur);
  }
  const std::vector<double>& flat = cur.values();
  const int cats = spec.num_categories();
  std::vector<double> logits(cats);
  for (int c = 0; c < cats; ++c) {
    double acc = w.fc_bias[c];
    const double* row =
        &w.fc_weight[static_cast<std::size_t>(c) * flat.size()];
    for (std::size_t j = 0; j < flat.size(); ++j) acc += row[j] * flat[j];
    logits[c] = acc;
  }
  const std::vector<double> probs = softmax(logits);
  Tensor top(cats, 1, 1);
  for (int c = 0; c < cats; ++c) top.at(c, 0, 0) = probs[c];
  st.layers.push_back(top);
  for (const Tensor& t : st.layers) require_finite(t, "forward");
  return st;
}

// Same, but the image is multiplied by a {0,1} (or soft) mask first. Used to
// present one object instance at a time.
inline ActivationStack forward_masked(const Tensor& image, const Tensor& mask,
                                      const EncoderWeights& w,
                                      const HierarchySpec& spec) {
  require_same_shape(image, mask, "forward_masked");
  Tensor masked = image;
  for (std::size_t i = 0; i < masked.size(); ++i)
    masked.values()[i] *= mask.values()[i];
  return forward(masked, w, spec);
}

// Bottom-up features of a masked instance with the top layer replaced by the
// label's one-hot. This is the "observed" complete stack used to fit the
// generative side.
inline ActivationStack masked_instance_stack(const Tensor& image,
                                             const Tensor& mask, int category,
                                             const EncoderWeights& w,
                                             const HierarchySpec& spec) {
  if (category < 0 || category >= spec.num_categories())
    throw InputError("masked_instance_stack: category out of range");
  ActivationStack st = forward_masked(image, mask, w, spec);
  Tensor top(spec.num_categories(), 1, 1);
  top.at(category, 0, 0) = 1.0;
  st.layers.back() = top;
  st.role = StackRole::top_down;
  return st;
}

struct EncoderTrainConfig {
  int epochs = 30;
  double lr = 0.05;
  int batch = 16;
  std::uint64_t seed = 0;
};

struct EncoderEpochRow {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct LabeledImage {
  Tensor image;
  int label = 0;
};

// Plain SGD on softmax cross-entropy. Deterministic for a fixed seed: the
// shuffle order, init and batch boundaries are all derived from it.
inline EncoderWeights train_encoder(const std::vector<LabeledImage>& data,
                                    const EncoderTrainConfig& cfg,
                                    const HierarchySpec& spec,
                                    std::vector<EncoderEpochRow>* log = nullptr,
                                    EncoderWeights* warm_start = nullptr) {
  if (data.empty()) throw InputError("train_encoder: empty dataset");
  if (cfg.epochs < 1 || cfg.batch < 1 || !(cfg.lr > 0))
    throw InputError("train_encoder: bad config");
  for (const auto& d : data)
    if (d.label < 0 || d.label >= spec.num_categories())
      throw InputError("train_encoder: label out of range");

  EncoderWeights w =
      warm_start ? *warm_start : init_encoder(spec, cfg.seed);
  Rng rng(derive_seed(cfg.seed, 0x7472));
  const int n = static_cast<int>(data.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  const std::size_t flat_n =
      w.fc_weight.size() / w.fc_bias.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with our own rng, so the order is seed-stable.
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(0, i)]);

    double epoch_loss = 0.0;
    int correct = 0;
    int done = 0;
    while (done < n) {
      const int bsz = std::min(cfg.batch, n - done);
      std::vector<ConvGrad> conv_g;
      for (const FilterBank& f : w.conv) {
        ConvGrad g;
        g.weights.assign(f.weights.size(), 0.0);
        g.bias.assign(f.bias.size(), 0.0);
        conv_g.push_back(std::move(g));
      }
      std::vector<double> fc_wg(w.fc_weight.size(), 0.0);
      std::vector<double> fc_bg(w.fc_bias.size(), 0.0);

      for (int b = 0; b < bsz; ++b) {
        const LabeledImage& ex = data[order[done + b]];
        detail::EncoderTrace tr = detail::encoder_forward_trace(ex.image, w);
        epoch_loss += -std::log(std::max(tr.probs[ex.label], 1e-300));
        const int pred = static_cast<int>(std::distance(
            tr.probs.begin(),
            std::max_element(tr.probs.begin(), tr.probs.end())));
        if (pred == ex.label) ++correct;

        // d loss / d logits
        std::vector<double> glog = tr.probs;
        glog[ex.label] -= 1.0;
        std::vector<double> gflat(flat_n, 0.0);
        for (std::size_t c = 0; c < glog.size(); ++c) {
          fc_bg[c] += glog[c];
          double* wrow = &fc_wg[c * flat_n];
          const double* row = &w.fc_weight[c * flat_n];
          for (std::size_t j = 0; j < flat_n; ++j) {
            wrow[j] += glog[c] * tr.flat[j];
            gflat[j] += glog[c] * row[j];
          }
        }

        // Back through the stages.
        const LayerSpec& lastf = spec.layers[spec.top() - 1];
        Tensor g(lastf.channels, lastf.height, lastf.width);
        g.values() = gflat;
        for (int l = static_cast<int>(w.conv.size()) - 1; l >= 0; --l) {
          // Un-pool: route each pooled gradient to the element that won.
          Tensor gpre(tr.pre[l].channels(), tr.pre[l].height(),
                      tr.pre[l].width());
          for (std::size_t j = 0; j < g.size(); ++j)
            gpre.values()[tr.pool_arg[l][j]] += g.values()[j];
          // relu mask on pre-activation
          for (std::size_t j = 0; j < gpre.size(); ++j)
            if (!(tr.pre[l].values()[j] > 0.0)) gpre.values()[j] = 0.0;
          ConvGrad cg = conv2d_grad(tr.inputs[l], w.conv[l], 1, gpre);
          for (std::size_t j = 0; j < cg.weights.size(); ++j)
            conv_g[l].weights[j] += cg.weights[j];
          for (std::size_t j = 0; j < cg.bias.size(); ++j)
            conv_g[l].bias[j] += cg.bias[j];
          g = cg.input;
        }
      }

      const double step = cfg.lr / bsz;
      for (std::size_t l = 0; l < w.conv.size(); ++l) {
        for (std::size_t j = 0; j < w.conv[l].weights.size(); ++j)
          w.conv[l].weights[j] -= step * conv_g[l].weights[j];
        for (std::size_t j = 0; j < w.conv[l].bias.size(); ++j)
          w.conv[l].bias[j] -= step * conv_g[l].bias[j];
      }
      for (std::size_t j = 0; j < w.fc_weight.size(); ++j)
        w.fc_weight[j] -= step * fc_wg[j];
      for (std::size_t j = 0; j < w.fc_bias.size(); ++j)
        w.fc_bias[j] -= step * fc_bg[j];
      done += bsz;
    }
    if (log)
      log->push_back(
          {epoch, epoch_loss / n, static_cast<double>(correct) / n});
  }
  return w;
}

// Slides a distractor patch toward an object and reports, per frame and per
// layer, how much the features WITHIN THE OBJECT'S OWN support change. The
// patch enters from the left, fully off-canvas on the first frame, and ends
// centered on the object.
struct ProbeRow {
  int frame = 0;
  int layer = 0;
  double change_norm = 0.0;
};

inline std::vector<ProbeRow> compositionality_probe(
    const Tensor& clean, const Tensor& distractor, int steps,
    const EncoderWeights& w, const HierarchySpec& spec) {
  if (steps < 2) throw InputError("compositionality_probe: steps must be >= 2");
  if (distractor.height() >= clean.height() ||
      distractor.width() >= clean.width())
    throw InputError("compositionality_probe: distractor must be smaller "
                     "than the image");

  // Instance support and its intensity centroid.
  double cy = 0, cx = 0, mass = 0;
  for (int y = 0; y < clean.height(); ++y)
    for (int x = 0; x < clean.width(); ++x) {
      const double v = clean.at(0, y, x);
      cy += v * y;
      cx += v * x;
      mass += v;
    }
  if (!(mass > 0)) throw InputError("compositionality_probe: blank image");
  cy /= mass;
  cx /= mass;

  // Mask per layer: block-max downsample of the image-level support.
  const int L = spec.top();
  std::vector<Tensor> masks;
  for (int l = 0; l <= L; ++l) {
    const int lh = spec.layers[l].height, lw = spec.layers[l].width;
    const int fy = clean.height() / lh, fx = clean.width() / lw;
    Tensor m(1, lh, lw);
    for (int y = 0; y < clean.height(); ++y)
      for (int x = 0; x < clean.width(); ++x)
        if (clean.at(0, y, x) > 0)
          m.at(0, std::min(y / fy, lh - 1), std::min(x / fx, lw - 1)) = 1.0;
    masks.push_back(std::move(m));
  }

  const ActivationStack base = forward(clean, w, spec);
  const int top_y =
      static_cast<int>(std::lround(cy - distractor.height() / 2.0));
  const int x_from = -distractor.width();
  const int x_to = static_cast<int>(std::lround(cx - distractor.width() / 2.0));

  std::vector<ProbeRow> rows;
  for (int t = 0; t < steps; ++t) {
    const int x_pos = static_cast<int>(std::lround(
        x_from + (x_to - x_from) * static_cast<double>(t) / (steps - 1)));
    Tensor frame = clean;
    for (int py = 0; py < distractor.height(); ++py)
      for (int px = 0; px < distractor.width(); ++px) {
        const int y = top_y + py, x = x_pos + px;
        if (y < 0 || y >= frame.height() || x < 0 || x >= frame.width())
          continue;
        frame.at(0, y, x) = std::max(frame.at(0, y, x), distractor.at(0, py, px));
      }
    const ActivationStack st = forward(frame, w, spec);
    for (int l = 0; l <= L; ++l) {
      double ss = 0.0;
      const Tensor& m = masks[l];
      for (int c = 0; c < st.layers[l].channels(); ++c)
        for (int y = 0; y < st.layers[l].height(); ++y)
          for (int x = 0; x < st.layers[l].width(); ++x)
            if (m.at(0, y, x) > 0) {
              const double d =
                  st.layers[l].at(c, y, x) - base.layers[l].at(c, y, x);
              ss += d * d;
            }
      rows.push_back({t, l, std::sqrt(ss)});
    }
  }
  return rows;
}

inline void save_encoder(const EncoderWeights& w, const std::string& path) {
  std::vector<NamedTensor> ts;
  for (std::size_t i = 0; i < w.conv.size(); ++i) {
    const FilterBank& f = w.conv[i];
    ts.push_back({"enc.conv" + std::to_string(i) + ".weight",
                  {f.out_channels, f.in_channels, f.kernel_h, f.kernel_w},
                  f.weights});
    ts.push_back(
        {"enc.conv" + std::to_string(i) + ".bias", {f.out_channels}, f.bias});
  }
  ts.push_back({"enc.fc.weight",
                {static_cast<int>(w.fc_bias.size()),
                 static_cast<int>(w.fc_weight.size() / w.fc_bias.size())},
                w.fc_weight});
  ts.push_back(
      {"enc.fc.bias", {static_cast<int>(w.fc_bias.size())}, w.fc_bias});
  save_ntf(path, ts);
}

inline EncoderWeights load_encoder(const std::string& path,
                                   const HierarchySpec& spec) {
  const std::vector<NamedTensor> ts = load_ntf(path);
  EncoderWeights w;
  const int stages = spec.top() - 1;
  for (int i = 0; i < stages; ++i) {
    const NamedTensor& wt =
        find_tensor(ts, "enc.conv" + std::to_string(i) + ".weight");
    const NamedTensor& bt =
        find_tensor(ts, "enc.conv" + std::to_string(i) + ".bias");
    FilterBank f;
    if (wt.dims.size() != 4)
      throw IoError("encoder checkpoint: bad conv weight rank");
    f.out_channels = wt.dims[0];
    f.in_channels = wt.dims[1];
    f.kernel_h = wt.dims[2];
    f.kernel_w = wt.dims[3];
    f.stride = 1;
    if (f.in_channels != spec.layers[i].channels ||
        f.out_channels != spec.layers[i + 1].channels)
      throw IoError("encoder checkpoint does not match the hierarchy");
    f.weights = wt.data;
    f.bias = bt.data;
    w.conv.push_back(std::move(f));
  }
  const NamedTensor& fw = find_tensor(ts, "enc.fc.weight");
  const NamedTensor& fb = find_tensor(ts, "enc.fc.bias");
  if (fw.dims.size() != 2 || fw.dims[0] != spec.num_categories())
    throw IoError("encoder checkpoint: bad fc shape");
  w.fc_weight = fw.data;
  w.fc_bias = fb.data;
  return w;
}

}  // namespace genpass
