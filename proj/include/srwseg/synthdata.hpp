#pragma once

// Synthetic two-modality lesion corpus, the augmentation pipeline, the photometric style
// transform used to build whitening pairs, and the on-disk dataset layout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "srwseg/core/error.hpp"
#include "srwseg/core/rng.hpp"
#include "srwseg/core/tensor.hpp"
#include "srwseg/io/png.hpp"

namespace srwseg::synth {

enum class Modality { Source, Target };

inline std::string to_string(Modality m) { return m == Modality::Source ? "source-like" : "target-like"; }

inline Modality parse_modality(std::string_view tag) {
  if (tag == "source-like" || tag == "source") return Modality::Source;
  if (tag == "target-like" || tag == "target") return Modality::Target;
  throw ValidationError("unknown modality tag '" + std::string(tag) + "' (expected source-like or target-like)");
}

using Image = Tensor<float>;        // (3, H, W), values in [0, 1]
using Mask = Tensor<std::uint8_t>;  // (H, W), values in {0, 1}

struct SamplePair {
  Image image;
  Image image_aug;  // empty unless a style-transformed copy was attached
  Mask mask;
  Modality modality = Modality::Source;
  std::string id;
};

inline constexpr const char* kGeneratorVersion = "srwseg-synth-1";

inline constexpr double kLesionQuantile = 0.85;
inline constexpr double kMinLesionArea = 0.02;
inline constexpr double kMaxLesionArea = 0.30;
inline constexpr int kMaxSceneAttempts = 20;

inline constexpr std::array<double, 3> kTissueColor{0.62, 0.42, 0.36};
inline constexpr std::array<double, 3> kLesionOffset{0.10, -0.12, -0.06};
inline constexpr double kBackgroundAmplitude = 0.10;
inline constexpr double kGrainAmplitude = 0.03;
inline constexpr double kLesionTextureAmplitude = 0.06;

using ColorMatrix = std::array<std::array<double, 3>, 3>;
inline constexpr ColorMatrix kSourceMatrix{{{1.00, 0.08, 0.02}, {0.06, 0.90, 0.04}, {0.02, 0.05, 0.75}}};
inline constexpr ColorMatrix kTargetMatrix{{{0.45, 0.10, 0.05}, {0.12, 0.95, 0.20}, {0.10, 0.25, 1.00}}};
inline constexpr double kSourceGamma = 0.9;
inline constexpr double kTargetGamma = 1.1;
inline constexpr double kTargetGreenBoost = 0.15;
inline constexpr double kLocalContrastSigma = 2.0;

// ---------------------------------------------------------------------------------------
// Pixel helpers

namespace detail {

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

inline std::vector<double> gaussian_taps(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    taps[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += taps[k + radius];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

/// Separable Gaussian blur of one h*w plane with mirrored borders.
template <class V>
void blur_plane(V* p, int h, int w, double sigma) {
  if (sigma <= 0.0) return;
  const auto taps = gaussian_taps(sigma);
  const int r = static_cast<int>(taps.size() / 2);
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) s += taps[k + r] * p[y * w + reflect(x + k, w)];
      tmp[y * w + x] = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) s += taps[k + r] * tmp[reflect(y + k, h) * w + x];
      p[y * w + x] = static_cast<V>(s);
    }
  }
}

/// Gaussian-blurred white noise rescaled to zero mean and unit standard deviation.
inline std::vector<double> smooth_field(Rng& rng, int h, int w, double sigma) {
  std::vector<double> f(static_cast<std::size_t>(h) * w);
  for (auto& v : f) v = rng.normal();
  blur_plane(f.data(), h, w, sigma);
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= f.size();
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / f.size());
  for (auto& v : f) v = sd > 0 ? (v - mean) / sd : 0.0;
  return f;
}

/// Largest 4-connected component of a binary map (first found wins ties).
inline std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& bin, int h, int w) {
  std::vector<int> label(bin.size(), -1);
  std::vector<int> stack;
  int best_label = -1;
  std::size_t best_size = 0;
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (!bin[start] || label[start] >= 0) continue;
    std::size_t size = 0;
    stack.push_back(start);
    label[start] = next;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++size;
      const int y = p / w, x = p % w;
      const int nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nbr) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const int j = q[0] * w + q[1];
        if (bin[j] && label[j] < 0) {
          label[j] = next;
          stack.push_back(j);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  std::vector<std::uint8_t> out(bin.size(), 0);
  for (std::size_t i = 0; i < bin.size(); ++i) out[i] = label[i] == best_label && best_label >= 0;
  return out;
}

inline float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

inline void require_image(const Image& img, const char* what) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ValidationError(std::string(what) + ": expected a (3, H, W) image, got " + srwseg::to_string(img.shape()));
  }
}

inline void require_unit_range(const Image& img, const char* what) {
  for (float v : img.values()) {
    if (!(v >= -1e-6f && v <= 1.0f + 1e-6f)) {
      throw ValidationError(std::string(what) + ": image values must lie in [0, 1]");
    }
  }
}

inline void require_mask(const Mask& m, const Image& img, const char* what) {
  if (m.rank() != 2 || m.dim(0) != img.dim(1) || m.dim(1) != img.dim(2)) {
    throw ValidationError(std::string(what) + ": mask " + srwseg::to_string(m.shape()) + " not aligned with image " +
                          srwseg::to_string(img.shape()));
  }
}

}  // namespace detail

/// Bilinear resize with half-pixel centers, per channel.
inline Image resize_image(const Image& img, int out_h, int out_w) {
  detail::require_image(img, "resize_image");
  const int h = img.dim(1), w = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Image out({3, out_h, out_w});
  auto coord = [](int i, int in, int out, int& i0, int& i1, double& f) {
    double s = (i + 0.5) * in / out - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - i0;
  };
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double fy;
    coord(y, h, out_h, y0, y1, fy);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double fx;
      coord(x, w, out_w, x0, x1, fx);
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1);
        const double bot = (1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize; keeps the mask binary.
inline Mask resize_mask(const Mask& m, int out_h, int out_w) {
  const int h = m.dim(0), w = m.dim(1);
  if (h == out_h && w == out_w) return m;
  Mask out({out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
    for (int x = 0; x < out_w; ++x) {
      out.at(y, x) = m.at(sy, std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w)));
    }
  }
  return out;
}

inline Image hflip(const Image& img) {
  Image out(img.shape());
  const int h = img.dim(1), w = img.dim(2);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y, w - 1 - x);
  return out;
}

inline Mask hflip(const Mask& m) {
  Mask out(m.shape());
  const int h = m.dim(0), w = m.dim(1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = m.at(y, w - 1 - x);
  return out;
}

inline void gaussian_blur(Image& img, double sigma) {
  for (int c = 0; c < img.dim(0); ++c) detail::blur_plane(img.data() + c * img.dim(1) * img.dim(2), img.dim(1), img.dim(2), sigma);
}

/// Brightness, contrast and saturation factors, applied in that order with clipping.
inline void color_jitter(Image& img, double brightness, double contrast, double saturation) {
  const std::size_t hw = static_cast<std::size_t>(img.dim(1)) * img.dim(2);
  float* r = img.data();
  float* g = r + hw;
  float* b = g + hw;
  for (auto& v : img.values()) v = detail::clip01(v * brightness);
  double mean = 0.0;
  for (std::size_t i = 0; i < hw; ++i) mean += 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  mean /= hw;
  for (auto& v : img.values()) v = detail::clip01((v - mean) * contrast + mean);
  for (std::size_t i = 0; i < hw; ++i) {
    const double gray = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    r[i] = detail::clip01(gray + (r[i] - gray) * saturation);
    g[i] = detail::clip01(gray + (g[i] - gray) * saturation);
    b[i] = detail::clip01(gray + (b[i] - gray) * saturation);
  }
}

// ---------------------------------------------------------------------------------------
// Scene generation

struct Scene {
  Image image;
  Mask mask;
};

/// Modality-free scene: low-frequency tissue background with one textured, tinted lesion blob.
inline Scene generate_scene(std::uint64_t seed, int size) {
  if (size < 32 || size % 2 != 0) {
    throw ValidationError("generate_scene: size must be even and >= 32, got " + std::to_string(size));
  }
  Rng rng(seed);
  const int n = size * size;
  Scene scene{Image({3, size, size}), Mask({size, size})};

  std::array<double, 3> tint;
  for (int c = 0; c < 3; ++c) tint[c] = kTissueColor[c] + rng.uniform(-0.05, 0.05);
  for (int c = 0; c < 3; ++c) {
    const auto broad = detail::smooth_field(rng, size, size, size / 8.0);
    const auto grain = detail::smooth_field(rng, size, size, 1.0);
    float* p = scene.image.data() + static_cast<std::size_t>(c) * n;
    for (int i = 0; i < n; ++i) p[i] = static_cast<float>(tint[c] + kBackgroundAmplitude * broad[i] + kGrainAmplitude * grain[i]);
  }

  std::vector<std::uint8_t> blob;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxSceneAttempts) {
      throw GenerationError("generate_scene: no lesion blob with area in [2%, 30%] after " +
                            std::to_string(kMaxSceneAttempts) + " resamples (seed " + std::to_string(seed) +
                            "); reseed");
    }
    const auto field = detail::smooth_field(rng, size, size, size / 10.0);
    auto sorted = field;
    const auto k = static_cast<std::ptrdiff_t>(kLesionQuantile * (n - 1));
    std::nth_element(sorted.begin(), sorted.begin() + k, sorted.end());
    const double threshold = sorted[k];
    std::vector<std::uint8_t> bin(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) bin[i] = field[i] > threshold;
    blob = detail::largest_component(bin, size, size);
    const double area = static_cast<double>(std::count(blob.begin(), blob.end(), 1)) / n;
    if (area >= kMinLesionArea && area <= kMaxLesionArea) break;
  }

  const auto texture = detail::smooth_field(rng, size, size, 0.8);
  const double strength = rng.uniform(0.8, 1.2);
  for (int c = 0; c < 3; ++c) {
    float* p = scene.image.data() + static_cast<std::size_t>(c) * n;
    for (int i = 0; i < n; ++i) {
      if (blob[i]) p[i] = static_cast<float>(p[i] + strength * kLesionOffset[c] + kLesionTextureAmplitude * texture[i]);
    }
  }
  for (auto& v : scene.image.values()) v = detail::clip01(v);
  for (int i = 0; i < n; ++i) scene.mask[i] = blob[i];
  return scene;
}

inline double mask_fraction(const Mask& m) {
  std::size_t on = 0;
  for (auto v : m.values()) on += v != 0;
  return static_cast<double>(on) / m.size();
}

/// Color-only rendering of a scene under an imaging modality.
inline Image apply_modality(const Image& image, Modality modality) {
  detail::require_image(image, "apply_modality");
  detail::require_unit_range(image, "apply_modality");
  const bool source = modality == Modality::Source;
  const ColorMatrix& m = source ? kSourceMatrix : kTargetMatrix;
  const double gamma = source ? kSourceGamma : kTargetGamma;
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Image out(image.shape());
  for (std::size_t i = 0; i < hw; ++i) {
    const double in[3] = {image.data()[i], image.data()[hw + i], image.data()[2 * hw + i]};
    for (int c = 0; c < 3; ++c) {
      const double lin = std::clamp(m[c][0] * in[0] + m[c][1] * in[1] + m[c][2] * in[2], 0.0, 1.0);
      out.data()[c * hw + i] = static_cast<float>(std::pow(lin, gamma));
    }
  }
  if (!source) {
    float* g = out.data() + hw;
    std::vector<double> local(g, g + hw);
    detail::blur_plane(local.data(), h, w, kLocalContrastSigma);
    for (std::size_t i = 0; i < hw; ++i) g[i] = detail::clip01(g[i] + kTargetGreenBoost * (g[i] - local[i]));
  }
  return out;
}

inline std::array<double, 3> channel_means(const Image& image) {
  std::array<double, 3> m{};
  const std::size_t hw = image.size() / 3;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) m[c] += image.data()[c * hw + i];
    m[c] /= static_cast<double>(hw);
  }
  return m;
}

/// Held-out accuracy of a Fisher discriminant on per-channel means telling the two modalities
/// apart: fit on scenes [first, first + n/2), scored on the next n/2.
inline double modality_separability(int n = 200, std::uint64_t first = 7000, int size = 64) {
  if (n < 4) throw ValidationError("modality_separability: need at least 4 scenes");
  const int half = n / 2;
  auto features = [&](int i, Modality m) {
    const auto v = channel_means(apply_modality(generate_scene(first + static_cast<std::uint64_t>(i), size).image, m));
    return Eigen::Vector3d(v[0], v[1], v[2]);
  };
  std::vector<Eigen::Vector3d> fit[2];
  Eigen::Vector3d mu[2] = {Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()};
  for (int i = 0; i < half; ++i) {
    fit[0].push_back(features(i, Modality::Source));
    fit[1].push_back(features(i, Modality::Target));
  }
  for (int k = 0; k < 2; ++k) {
    for (const auto& v : fit[k]) mu[k] += v / half;
  }
  Eigen::Matrix3d within = Eigen::Matrix3d::Identity() * 1e-9;
  for (int k = 0; k < 2; ++k) {
    for (const auto& v : fit[k]) within += (v - mu[k]) * (v - mu[k]).transpose();
  }
  const Eigen::Vector3d w = within.ldlt().solve(mu[1] - mu[0]);
  const double cut = w.dot(0.5 * (mu[0] + mu[1]));
  int correct = 0;
  for (int i = half; i < 2 * half; ++i) {
    correct += w.dot(features(i, Modality::Source)) < cut;
    correct += w.dot(features(i, Modality::Target)) > cut;
  }
  return static_cast<double>(correct) / (2 * half);
}

// ---------------------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  bool scale = true;
  double scale_min = 0.8;
  double scale_max = 1.2;
  bool crop = true;
  int crop_h = 0;  // 0: input size
  int crop_w = 0;
  bool flip = true;
  double flip_prob = 0.5;
  bool jitter = true;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  bool blur = true;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;

  static AugmentPolicy identity() {
    AugmentPolicy p;
    p.scale = p.crop = p.flip = p.jitter = p.blur = false;
    return p;
  }
};

/// Geometric steps (scale, crop, flip) hit image and mask alike, the mask by nearest neighbour;
/// photometric steps (jitter, blur) touch the image only. Output size is the crop size.
inline std::pair<Image, Mask> augment(const Image& image, const Mask& mask, std::uint64_t seed,
                                      const AugmentPolicy& policy) {
  detail::require_image(image, "augment");
  detail::require_mask(mask, image, "augment");
  const int h = image.dim(1), w = image.dim(2);
  const int ch = policy.crop && policy.crop_h > 0 ? policy.crop_h : h;
  const int cw = policy.crop && policy.crop_w > 0 ? policy.crop_w : w;
  if (ch > h || cw > w) {
    throw ValidationError("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than image " +
                          std::to_string(h) + "x" + std::to_string(w));
  }
  Rng rng(seed);
  Image img = image;
  Mask m = mask;

  if (policy.scale) {
    const double s = rng.uniform(policy.scale_min, policy.scale_max);
    const int sh = std::max(1, static_cast<int>(std::lround(h * s)));
    const int sw = std::max(1, static_cast<int>(std::lround(w * s)));
    img = resize_image(img, sh, sw);
    m = resize_mask(m, sh, sw);
  }

  // window of the crop size; out-of-range pixels (after a downscale) are zero background
  const int ih = img.dim(1), iw = img.dim(2);
  int oy = (ih - ch) / 2, ox = (iw - cw) / 2;
  if (policy.crop) {
    const int ly = std::min(0, ih - ch), hy = std::max(0, ih - ch);
    const int lx = std::min(0, iw - cw), hx = std::max(0, iw - cw);
    oy = ly + static_cast<int>(rng.below(static_cast<std::uint64_t>(hy - ly + 1)));
    ox = lx + static_cast<int>(rng.below(static_cast<std::uint64_t>(hx - lx + 1)));
  }
  if (oy != 0 || ox != 0 || ih != ch || iw != cw) {
    Image wi({3, ch, cw});
    Mask wm({ch, cw});
    for (int y = 0; y < ch; ++y) {
      const int sy = y + oy;
      if (sy < 0 || sy >= ih) continue;
      for (int x = 0; x < cw; ++x) {
        const int sx = x + ox;
        if (sx < 0 || sx >= iw) continue;
        for (int c = 0; c < 3; ++c) wi.at(c, y, x) = img.at(c, sy, sx);
        wm.at(y, x) = m.at(sy, sx);
      }
    }
    img = std::move(wi);
    m = std::move(wm);
  }

  if (policy.flip && rng.bernoulli(policy.flip_prob)) {
    img = hflip(img);
    m = hflip(m);
  }
  if (policy.jitter) {
    const double b = 1.0 + rng.uniform(-policy.brightness, policy.brightness);
    const double c = 1.0 + rng.uniform(-policy.contrast, policy.contrast);
    const double s = 1.0 + rng.uniform(-policy.saturation, policy.saturation);
    color_jitter(img, b, c, s);
  }
  if (policy.blur && rng.bernoulli(policy.blur_prob)) {
    gaussian_blur(img, rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max));
  }
  return {std::move(img), std::move(m)};
}

struct StylePolicy {
  double jitter = 0.3;
  double sigma_min = 0.1;
  double sigma_max = 1.5;
};

/// Photometric T of a whitening pair: jitter then blur, geometry untouched.
inline Image style_transform(const Image& image, std::uint64_t seed, const StylePolicy& policy = {}) {
  detail::require_image(image, "style_transform");
  Rng rng(seed);
  Image out = image;
  const double b = 1.0 + rng.uniform(-policy.jitter, policy.jitter);
  const double c = 1.0 + rng.uniform(-policy.jitter, policy.jitter);
  const double s = 1.0 + rng.uniform(-policy.jitter, policy.jitter);
  const double sigma = rng.uniform(policy.sigma_min, policy.sigma_max);
  if (policy.jitter > 0.0) color_jitter(out, b, c, s);
  if (sigma >= 1e-3) gaussian_blur(out, sigma);
  return out;
}

// ---------------------------------------------------------------------------------------
// Corpus

inline const std::array<std::string, 4> kSplitNames{"train", "val", "test-source", "test-target"};

struct CorpusConfig {
  std::uint64_t seed = 0;
  int source_count = 600;
  int target_count = 100;
  int size = 64;
  double train_fraction = 0.8;
  double val_fraction = 0.1;

  void validate() const {
    if (source_count < 3 || target_count < 0) throw ConfigError("corpus counts: need >= 3 source and >= 0 target scenes");
    if (size < 32 || size % 2) throw ConfigError("corpus size must be even and >= 32");
    if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction >= 1) {
      throw ConfigError("corpus split fractions must satisfy 0 < train, 0 <= val, train + val < 1");
    }
  }
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<std::string>> splits;
  std::string generator_version = kGeneratorVersion;

  std::map<std::string, int> counts() const {
    std::map<std::string, int> c;
    for (const auto& [name, ids] : splits) c[name] = static_cast<int>(ids.size());
    return c;
  }

  /// Split a given id belongs to (empty when absent).
  std::string split_of(const std::string& id) const {
    for (const auto& [name, ids] : splits) {
      if (std::binary_search(ids.begin(), ids.end(), id)) return name;
    }
    return {};
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& [name, ids] : splits) {
      if (!std::is_sorted(ids.begin(), ids.end())) throw ValidationError("manifest: split '" + name + "' is not sorted");
      for (const auto& id : ids) {
        if (!seen.insert(id).second) throw ValidationError("manifest: id '" + id + "' appears in more than one split");
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["splits"] = splits;
    j["counts"] = counts();
    j["generator_version"] = generator_version;
    return j;
  }

  static CorpusManifest from_json(const nlohmann::json& j) {
    CorpusManifest m;
    try {
      m.seed = j.at("seed").get<std::uint64_t>();
      m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
      m.generator_version = j.value("generator_version", std::string{});
      if (j.contains("counts")) {
        const auto counts = j.at("counts").get<std::map<std::string, int>>();
        if (counts != m.counts()) throw ValidationError("manifest: counts disagree with split lists");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("manifest: malformed (") + e.what() + ")");
    }
    m.validate();
    return m;
  }
};

struct Corpus {
  CorpusManifest manifest;
  std::vector<SamplePair> samples;  // sorted by id
};

inline std::string scene_id(Modality m, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%s%04d", m == Modality::Source ? "s" : "t", index);
  return buf;
}

/// Scene for (corpus seed, modality, index); failed draws are reseeded deterministically.
inline Scene corpus_scene(std::uint64_t seed, Modality m, int index, int size) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    try {
      return generate_scene(derive_seed(seed, m == Modality::Source ? 1 : 2, static_cast<std::uint64_t>(index), attempt),
                            size);
    } catch (const GenerationError&) {
      if (attempt >= 100) throw;
    }
  }
}

inline Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.manifest.seed = config.seed;
  std::vector<std::string> source_ids;
  for (int i = 0; i < config.source_count; ++i) {
    const Scene s = corpus_scene(config.seed, Modality::Source, i, config.size);
    corpus.samples.push_back({apply_modality(s.image, Modality::Source), {}, s.mask, Modality::Source,
                              scene_id(Modality::Source, i)});
    source_ids.push_back(corpus.samples.back().id);
  }
  std::vector<std::string> target_ids;
  for (int i = 0; i < config.target_count; ++i) {
    const Scene s = corpus_scene(config.seed, Modality::Target, i, config.size);
    corpus.samples.push_back({apply_modality(s.image, Modality::Target), {}, s.mask, Modality::Target,
                              scene_id(Modality::Target, i)});
    target_ids.push_back(corpus.samples.back().id);
  }

  Rng rng(derive_seed(config.seed, 3));
  rng.shuffle(source_ids.begin(), source_ids.end());
  const int n = config.source_count;
  const int n_train = static_cast<int>(std::lround(config.train_fraction * n));
  const int n_val = static_cast<int>(std::lround(config.val_fraction * n));
  auto take = [&](int from, int to) {
    std::vector<std::string> ids(source_ids.begin() + from, source_ids.begin() + to);
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  corpus.manifest.splits["train"] = take(0, n_train);
  corpus.manifest.splits["val"] = take(n_train, n_train + n_val);
  corpus.manifest.splits["test-source"] = take(n_train + n_val, n);
  corpus.manifest.splits["test-target"] = target_ids;
  corpus.manifest.validate();
  return corpus;
}

inline io::Image8 to_image8(const Image& img) {
  const int h = img.dim(1), w = img.dim(2);
  io::Image8 out{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w * 3)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        out.pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
      }
  return out;
}

inline Image from_image8(const io::Image8& img) {
  Image out({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        out.at(c, y, x) = img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] / 255.0f;
      }
  return out;
}

inline void write_sample(const std::filesystem::path& root, const SamplePair& s) {
  io::write_png(root / "images" / (s.id + ".png"), to_image8(s.image));
  io::Image8 m{s.mask.dim(1), s.mask.dim(0), 1, std::vector<std::uint8_t>(s.mask.size())};
  for (std::size_t i = 0; i < s.mask.size(); ++i) m.pixels[i] = s.mask[i] ? 255 : 0;
  io::write_png(root / "masks" / (s.id + ".png"), m);
}

inline void write_manifest(const std::filesystem::path& root, const CorpusManifest& manifest) {
  std::ofstream f(root / "manifest.json");
  if (!f) throw IoError("cannot write " + (root / "manifest.json").string());
  f << manifest.to_json().dump(2) << "\n";
  if (!f) throw IoError("write failed for " + (root / "manifest.json").string());
}

/// Generates the corpus and writes it under `root`. Files are staged in a sibling directory
/// and moved into place at the end, so a failure leaves no partial corpus behind.
inline CorpusManifest build_corpus(const CorpusConfig& config, const std::filesystem::path& root, bool force = false) {
  namespace fs = std::filesystem;
  if (fs::exists(root) && !force) {
    throw ConfigError("output directory " + root.string() + " already exists (use --force to overwrite)");
  }
  const Corpus corpus = generate_corpus(config);
  const fs::path staging = root.string() + ".partial";
  std::error_code ec;
  fs::remove_all(staging, ec);
  try {
    fs::create_directories(staging / "images");
    fs::create_directories(staging / "masks");
    for (const auto& s : corpus.samples) write_sample(staging, s);
    write_manifest(staging, corpus.manifest);
    if (fs::exists(root)) fs::remove_all(root);
    if (root.has_parent_path()) fs::create_directories(root.parent_path());
    fs::rename(staging, root);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    throw IoError(std::string("build_corpus: ") + e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
  return corpus.manifest;
}

// ---------------------------------------------------------------------------------------
// Loading

struct LoadOptions {
  std::string split;  // empty: every id
  int resize = 0;     // square size to resample to; 0 keeps the stored size
};

struct Dataset {
  std::optional<CorpusManifest> manifest;
  std::vector<SamplePair> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

inline std::optional<CorpusManifest> read_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.json";
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::ifstream f(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return CorpusManifest::from_json(j);
}

/// Loads `<root>/images/<id>.png` with `<root>/masks/<id>.png` in id order. Problems with
/// individual items are collected and reported together.
inline Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& options = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset directory " + root.string() + " does not exist");
  Dataset ds;
  ds.manifest = read_manifest(root);

  std::vector<std::string> ids;
  if (ds.manifest) {
    if (!options.split.empty()) {
      auto it = ds.manifest->splits.find(options.split);
      if (it == ds.manifest->splits.end()) {
        throw ValidationError("dataset " + root.string() + " has no split '" + options.split + "'");
      }
      ids = it->second;
    } else {
      for (const auto& [name, list] : ds.manifest->splits) ids.insert(ids.end(), list.begin(), list.end());
    }
  } else {
    if (!options.split.empty()) {
      throw ValidationError("dataset " + root.string() + " has no manifest.json, so split '" + options.split +
                            "' cannot be resolved");
    }
    if (fs::is_directory(root / "images")) {
      for (const auto& e : fs::directory_iterator(root / "images")) {
        if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
      }
    }
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ValidationError("empty dataset at " + root.string());

  std::vector<std::string> problems;
  for (const auto& id : ids) {
    const fs::path ip = root / "images" / (id + ".png");
    const fs::path mp = root / "masks" / (id + ".png");
    if (!fs::exists(ip)) {
      problems.push_back(id + ": missing image " + ip.string());
      continue;
    }
    if (!fs::exists(mp)) {
      problems.push_back(id + ": missing mask " + mp.string());
      continue;
    }
    io::Image8 img, msk;
    try {
      img = io::read_png(ip, 3);
      msk = io::read_png(mp, 1);
    } catch (const IoError& e) {
      problems.push_back(id + ": " + e.what());
      continue;
    }
    if (img.width != msk.width || img.height != msk.height) {
      problems.push_back(id + ": image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                         " and mask " + std::to_string(msk.width) + "x" + std::to_string(msk.height) + " differ in size");
      continue;
    }
    const auto bad = std::find_if(msk.pixels.begin(), msk.pixels.end(), [](std::uint8_t v) { return v != 0 && v != 255; });
    if (bad != msk.pixels.end()) {
      problems.push_back(id + ": mask is not binary (found value " + std::to_string(*bad) + ", expected 0 or 255)");
      continue;
    }
    SamplePair s;
    s.id = id;
    s.image = from_image8(img);
    s.mask = Mask({msk.height, msk.width});
    for (std::size_t i = 0; i < msk.pixels.size(); ++i) s.mask[i] = msk.pixels[i] == 255;
    if (options.resize > 0) {
      s.image = resize_image(s.image, options.resize, options.resize);
      s.mask = resize_mask(s.mask, options.resize, options.resize);
    }
    s.modality = ds.manifest && ds.manifest->split_of(id) == "test-target" ? Modality::Target : Modality::Source;
    ds.samples.push_back(std::move(s));
  }
  if (!problems.empty()) throw LoadError(std::move(problems));
  return ds;
}

}  // namespace srwseg::synth
