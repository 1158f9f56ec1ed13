#pragma once

// Image front-end: edge-based RoI detection, RoI patch grid with frozen
// convolutional patch features, and fixed-resolution pixel patches.

#include <cstdint>
#include <string>
#include <vector>

#include "acebert/tensor.hpp"

namespace acebert::vision {

// Row-major H x W x C image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f);

  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  // Throws ConfigError unless H, W >= 8 and every value lies in [0, 1].
  void validate() const;
  bool operator==(const Image&) const = default;
};

// Half-open pixel box [top, bottom) x [left, right).
struct RoI {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;

  int height() const { return bottom - top; }
  int width() const { return right - left; }
  int area() const { return height() * width(); }
  bool valid_for(const Image& img) const;
  bool operator==(const RoI&) const = default;
};

inline constexpr int kMinRoiArea = 64;

double iou(const RoI& a, const RoI& b);

// Full-frame box of an image.
RoI full_frame(const Image& img);

// Grayscale -> Sobel magnitude -> pixels strictly above the given
// percentile -> tightest box, grown by `margin` of its own size on each
// side and clipped to the frame. Falls back to the full frame when no edge
// survives or the box is smaller than kMinRoiArea.
RoI detect_roi(const Image& img, double threshold_percentile = 90.0, double margin = 0.05);

// Bilinear resampling with corner-aligned sampling: output pixel (i, j)
// reads source coordinate (i * (H-1)/(h-1), j * (W-1)/(w-1)).
Image resize_bilinear(const Image& img, int height, int width);

Image crop(const Image& img, const RoI& roi);

// Crops the RoI, resizes it to a canvas x canvas square and cuts it into
// rows x cols equal patches in row-major order.
std::vector<Image> patchify_roi(const Image& img, const RoI& roi, int rows, int cols, int canvas);

// Frozen 3-block strided convolutional network (3x3 kernels, strides 1/2/2,
// ReLU) followed by global average pooling. Weights come from a pinned
// seed and never receive gradients.
class PatchFeatureExtractor {
 public:
  struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    std::vector<float> weight;  // [out][ky][kx][in]
    std::vector<float> bias;    // [out]
  };

  static PatchFeatureExtractor create(std::uint64_t seed, int feature_dim = 128);

  int feature_dim() const { return layers_.empty() ? 0 : layers_.back().out_channels; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  std::vector<ConvLayer>& mutable_layers() { return layers_; }

  // N x feature_dim features, row per patch. All patches must share one
  // resolution and have 3 channels.
  std::vector<float> extract(const std::vector<Image>& patches) const;

  // Named weight blobs for the checkpoint's extractor section.
  std::vector<std::pair<std::string, Tensor>> named_weights() const;
  static PatchFeatureExtractor from_named_weights(const std::vector<std::pair<std::string, Tensor>>& blobs);

  bool operator==(const PatchFeatureExtractor& other) const;

 private:
  std::vector<ConvLayer> layers_;
};

struct PixelPatchSet {
  int count = 0;
  int patch_height = 0;
  int patch_width = 0;
  int channels = 3;
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<float> flattened;  // count x (patch_height * patch_width * channels)

  int flat_dim() const { return patch_height * patch_width * channels; }
};

// Resizes to target_h x target_w, splits into (target_h/patch_h) *
// (target_w/patch_w) patches in row-major patch order and flattens each as
// [y][x][c]. Throws ConfigError when the patch size does not divide the
// target.
PixelPatchSet pixel_patchify(const Image& img, int target_height, int target_width, int patch_height,
                             int patch_width);

// Exact inverse of the split/flatten step of pixel_patchify.
Image unpatchify(const PixelPatchSet& set);

}  // namespace acebert::vision
