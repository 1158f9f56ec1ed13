#include "acebert/vision.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <random>

#include "acebert/errors.hpp"

namespace acebert::vision {

Image::Image(int h, int w, int c, float fill)
    : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

void Image::validate() const {
  if (height < 8 || width < 8) {
    throw ConfigError("image: height and width must be >= 8, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  if (channels <= 0 || pixels.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ConfigError("image: pixel buffer does not match H x W x C");
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("image: pixel values must lie in [0, 1]");
  }
}

bool RoI::valid_for(const Image& img) const {
  return top >= 0 && left >= 0 && top < bottom && left < right && bottom <= img.height && right <= img.width &&
         area() >= kMinRoiArea;
}

double iou(const RoI& a, const RoI& b) {
  const int t = std::max(a.top, b.top);
  const int l = std::max(a.left, b.left);
  const int bo = std::min(a.bottom, b.bottom);
  const int r = std::min(a.right, b.right);
  const double inter = (bo > t && r > l) ? static_cast<double>(bo - t) * (r - l) : 0.0;
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

RoI full_frame(const Image& img) { return RoI{0, 0, img.height, img.width}; }

namespace {

std::vector<float> grayscale(const Image& img) {
  std::vector<float> g(static_cast<std::size_t>(img.height) * img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      float v = 0;
      if (img.channels >= 3) {
        v = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
      } else {
        v = img.at(y, x, 0);
      }
      g[static_cast<std::size_t>(y) * img.width + x] = v;
    }
  }
  return g;
}

}  // namespace

RoI detect_roi(const Image& img, double threshold_percentile, double margin) {
  img.validate();
  const int h = img.height;
  const int w = img.width;
  const auto g = grayscale(img);
  const auto px = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return g[static_cast<std::size_t>(y) * w + x];
  };
  std::vector<float> mag(g.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                       (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const float gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                       (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      mag[static_cast<std::size_t>(y) * w + x] = std::sqrt(gx * gx + gy * gy);
    }
  }
  std::vector<float> sorted = mag;
  const double p = std::clamp(threshold_percentile, 0.0, 100.0) / 100.0;
  const auto rank = static_cast<std::size_t>(std::floor(p * static_cast<double>(sorted.size() - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
  const float threshold = sorted[rank];

  int top = h, left = w, bottom = -1, right = -1;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mag[static_cast<std::size_t>(y) * w + x] > threshold) {
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, x);
        right = std::max(right, x);
      }
    }
  }
  if (bottom < 0) return full_frame(img);
  ++bottom;
  ++right;
  const int dy = static_cast<int>(std::lround(margin * (bottom - top)));
  const int dx = static_cast<int>(std::lround(margin * (right - left)));
  RoI box{std::max(0, top - dy), std::max(0, left - dx), std::min(h, bottom + dy), std::min(w, right + dx)};
  if (box.area() < kMinRoiArea) return full_frame(img);
  return box;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height <= 0 || width <= 0) throw ConfigError("resize: target size must be positive");
  Image out(height, width, img.channels);
  const double sy = height > 1 ? static_cast<double>(img.height - 1) / (height - 1) : 0.0;
  const double sx = width > 1 ? static_cast<double>(img.width - 1) / (width - 1) : 0.0;
  for (int i = 0; i < height; ++i) {
    const double fy = i * sy;
    const int y0 = std::min(static_cast<int>(std::floor(fy)), img.height - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int j = 0; j < width; ++j) {
      const double fx = j * sx;
      const int x0 = std::min(static_cast<int>(std::floor(fx)), img.width - 1);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(i, j, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

Image crop(const Image& img, const RoI& roi) {
  if (!(roi.top >= 0 && roi.left >= 0 && roi.top < roi.bottom && roi.left < roi.right && roi.bottom <= img.height &&
        roi.right <= img.width)) {
    throw ConfigError("crop: RoI outside the image");
  }
  Image out(roi.height(), roi.width(), img.channels);
  for (int y = 0; y < roi.height(); ++y) {
    for (int x = 0; x < roi.width(); ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(roi.top + y, roi.left + x, c);
    }
  }
  return out;
}

std::vector<Image> patchify_roi(const Image& img, const RoI& roi, int rows, int cols, int canvas) {
  if (!roi.valid_for(img)) {
    throw ConfigError("patchify_roi: invalid RoI [" + std::to_string(roi.top) + "," + std::to_string(roi.left) + "," +
                      std::to_string(roi.bottom) + "," + std::to_string(roi.right) + ")");
  }
  if (rows <= 0 || cols <= 0 || canvas % rows != 0 || canvas % cols != 0) {
    throw ConfigError("patchify_roi: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " does not divide canvas " + std::to_string(canvas));
  }
  const Image square = resize_bilinear(crop(img, roi), canvas, canvas);
  const int ph = canvas / rows;
  const int pw = canvas / cols;
  std::vector<Image> patches;
  patches.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      patches.push_back(crop(square, RoI{r * ph, c * pw, (r + 1) * ph, (c + 1) * pw}));
    }
  }
  return patches;
}

PatchFeatureExtractor PatchFeatureExtractor::create(std::uint64_t seed, int feature_dim) {
  if (feature_dim <= 0) throw ConfigError("patch_feature_dim must be positive");
  std::mt19937_64 rng(seed);
  PatchFeatureExtractor ex;
  const int c1 = std::max(1, feature_dim / 4);
  const int c2 = std::max(1, feature_dim / 2);
  const int channels[4] = {3, c1, c2, feature_dim};
  const int strides[3] = {1, 2, 2};
  for (int l = 0; l < 3; ++l) {
    ConvLayer layer;
    layer.in_channels = channels[l];
    layer.out_channels = channels[l + 1];
    layer.stride = strides[l];
    std::normal_distribution<float> wdist(0.0f, std::sqrt(2.0f / (9.0f * layer.in_channels)));
    std::uniform_real_distribution<float> bdist(-0.1f, 0.1f);
    layer.weight.resize(static_cast<std::size_t>(layer.out_channels) * 9 * layer.in_channels);
    for (auto& v : layer.weight) v = wdist(rng);
    layer.bias.resize(layer.out_channels);
    for (auto& v : layer.bias) v = bdist(rng);
    ex.layers_.push_back(std::move(layer));
  }
  return ex;
}

std::vector<float> PatchFeatureExtractor::extract(const std::vector<Image>& patches) const {
  using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (layers_.empty()) throw ConfigError("feature extractor has no weights");
  const int dim = feature_dim();
  std::vector<float> features(patches.size() * static_cast<std::size_t>(dim));
  for (std::size_t p = 0; p < patches.size(); ++p) {
    const Image& patch = patches[p];
    if (patch.channels != layers_.front().in_channels || patch.height != patches.front().height ||
        patch.width != patches.front().width) {
      throw ShapeError("feature extractor: patch " + std::to_string(p) + " has shape (" +
                       std::to_string(patch.height) + "x" + std::to_string(patch.width) + "x" +
                       std::to_string(patch.channels) + "), expected (" + std::to_string(patches.front().height) +
                       "x" + std::to_string(patches.front().width) + "x" +
                       std::to_string(layers_.front().in_channels) + ")");
    }
    int h = patch.height;
    int w = patch.width;
    std::vector<float> act = patch.pixels;
    for (const auto& layer : layers_) {
      const int cin = layer.in_channels;
      const int ho = (h - 1) / layer.stride + 1;
      const int wo = (w - 1) / layer.stride + 1;
      MatR cols = MatR::Zero(static_cast<Eigen::Index>(ho) * wo, 9 * cin);
      for (int y = 0; y < ho; ++y) {
        for (int x = 0; x < wo; ++x) {
          float* row = cols.data() + (static_cast<std::size_t>(y) * wo + x) * 9 * cin;
          for (int ky = 0; ky < 3; ++ky) {
            const int sy = y * layer.stride + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int sx = x * layer.stride + kx - 1;
              if (sx < 0 || sx >= w) continue;
              std::copy_n(act.data() + (static_cast<std::size_t>(sy) * w + sx) * cin, cin, row + (ky * 3 + kx) * cin);
            }
          }
        }
      }
      Eigen::Map<const MatR> weight(layer.weight.data(), layer.out_channels, 9 * cin);
      MatR out = cols * weight.transpose();
      for (Eigen::Index r = 0; r < out.rows(); ++r) {
        for (int c = 0; c < layer.out_channels; ++c) out(r, c) = std::max(0.0f, out(r, c) + layer.bias[c]);
      }
      act.assign(out.data(), out.data() + out.size());
      h = ho;
      w = wo;
    }
    float* dst = features.data() + p * dim;
    const int cells = h * w;
    for (int c = 0; c < dim; ++c) {
      float total = 0;
      for (int i = 0; i < cells; ++i) total += act[static_cast<std::size_t>(i) * dim + c];
      dst[c] = total / static_cast<float>(cells);
    }
  }
  return features;
}

std::vector<std::pair<std::string, Tensor>> PatchFeatureExtractor::named_weights() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::string prefix = "extractor.conv" + std::to_string(l);
    out.emplace_back(prefix + ".weight",
                     Tensor::from({static_cast<std::size_t>(layer.out_channels), 3, 3,
                                   static_cast<std::size_t>(layer.in_channels)},
                                  layer.weight));
    out.emplace_back(prefix + ".bias", Tensor::from({static_cast<std::size_t>(layer.out_channels)}, layer.bias));
    out.emplace_back(prefix + ".stride", Tensor::from({1}, {static_cast<float>(layer.stride)}));
  }
  return out;
}

PatchFeatureExtractor PatchFeatureExtractor::from_named_weights(
    const std::vector<std::pair<std::string, Tensor>>& blobs) {
  PatchFeatureExtractor ex;
  for (int l = 0;; ++l) {
    const std::string prefix = "extractor.conv" + std::to_string(l);
    const Tensor* weight = nullptr;
    const Tensor* bias = nullptr;
    const Tensor* stride = nullptr;
    for (const auto& [name, t] : blobs) {
      if (name == prefix + ".weight") weight = &t;
      if (name == prefix + ".bias") bias = &t;
      if (name == prefix + ".stride") stride = &t;
    }
    if (weight == nullptr) break;
    if (bias == nullptr || stride == nullptr || weight->rank() != 4 || weight->dim(1) != 3 || weight->dim(2) != 3 ||
        bias->shape() != Shape{weight->dim(0)}) {
      throw FormatError("extractor section: malformed layer " + std::to_string(l));
    }
    ConvLayer layer;
    layer.out_channels = static_cast<int>(weight->dim(0));
    layer.in_channels = static_cast<int>(weight->dim(3));
    layer.stride = static_cast<int>(stride->item());
    layer.weight.assign(weight->data().begin(), weight->data().end());
    layer.bias.assign(bias->data().begin(), bias->data().end());
    if (!ex.layers_.empty() && ex.layers_.back().out_channels != layer.in_channels) {
      throw FormatError("extractor section: channel mismatch at layer " + std::to_string(l));
    }
    ex.layers_.push_back(std::move(layer));
  }
  if (ex.layers_.empty()) throw FormatError("extractor section: no layers");
  return ex;
}

bool PatchFeatureExtractor::operator==(const PatchFeatureExtractor& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.in_channels != b.in_channels || a.out_channels != b.out_channels || a.stride != b.stride ||
        a.weight != b.weight || a.bias != b.bias) {
      return false;
    }
  }
  return true;
}

PixelPatchSet pixel_patchify(const Image& img, int target_height, int target_width, int patch_height,
                             int patch_width) {
  if (patch_height <= 0 || patch_width <= 0 || target_height % patch_height != 0 ||
      target_width % patch_width != 0) {
    throw ConfigError("pixel_patchify: patch " + std::to_string(patch_height) + "x" + std::to_string(patch_width) +
                      " does not divide target " + std::to_string(target_height) + "x" +
                      std::to_string(target_width));
  }
  const Image resized = resize_bilinear(img, target_height, target_width);
  PixelPatchSet set;
  set.patch_height = patch_height;
  set.patch_width = patch_width;
  set.channels = img.channels;
  set.grid_rows = target_height / patch_height;
  set.grid_cols = target_width / patch_width;
  set.count = set.grid_rows * set.grid_cols;
  set.flattened.reserve(static_cast<std::size_t>(set.count) * set.flat_dim());
  for (int pr = 0; pr < set.grid_rows; ++pr) {
    for (int pc = 0; pc < set.grid_cols; ++pc) {
      for (int y = 0; y < patch_height; ++y) {
        for (int x = 0; x < patch_width; ++x) {
          for (int c = 0; c < img.channels; ++c) {
            set.flattened.push_back(resized.at(pr * patch_height + y, pc * patch_width + x, c));
          }
        }
      }
    }
  }
  return set;
}

Image unpatchify(const PixelPatchSet& set) {
  Image out(set.grid_rows * set.patch_height, set.grid_cols * set.patch_width, set.channels);
  std::size_t k = 0;
  for (int pr = 0; pr < set.grid_rows; ++pr) {
    for (int pc = 0; pc < set.grid_cols; ++pc) {
      for (int y = 0; y < set.patch_height; ++y) {
        for (int x = 0; x < set.patch_width; ++x) {
          for (int c = 0; c < set.channels; ++c) {
            out.at(pr * set.patch_height + y, pc * set.patch_width + x, c) = set.flattened[k++];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace acebert::vision
