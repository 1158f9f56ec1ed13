#pragma once

// Image front-end applied to a catalog: RoI patch features and pixel
// patches for every product, computed once and reused by every training
// and serving phase.

#include <cstdint>
#include <vector>

#include "acebert/synth.hpp"
#include "acebert/vision.hpp"

namespace acebert {

struct ImageFeatureConfig {
  bool use_roi = true;  // false: patch grid over the full frame
  int roi_grid = 4;
  int roi_canvas = 32;
  double roi_percentile = 90.0;
  double roi_margin = 0.05;
  int pixel_target = 32;
  int pixel_patch = 8;
  // Standardise every feature dimension over the catalog.
  bool standardize = true;

  int patch_count() const { return roi_grid * roi_grid; }
  int pixel_count() const { return (pixel_target / pixel_patch) * (pixel_target / pixel_patch); }
  int pixel_dim() const { return pixel_patch * pixel_patch * 3; }
  void validate() const;
};

struct ProductFeatures {
  std::vector<float> patch_rows;  // n_patch x D1
  std::size_t n_patch = 0;
  std::vector<float> pixel_rows;  // n_pixel x pixel_dim
  std::size_t n_pixel = 0;
  vision::RoI roi;
};

ProductFeatures compute_features(const vision::Image& image, const vision::PatchFeatureExtractor& extractor,
                                 const ImageFeatureConfig& config);

// Per-dimension mean and inverse standard deviation (floored at 1e-3 std)
// of patch and pixel rows.
struct FeatureStats {
  std::vector<float> patch_mean, patch_inv_std;
  std::vector<float> pixel_mean, pixel_inv_std;

  static FeatureStats fit(const std::vector<ProductFeatures>& features);
  void apply(ProductFeatures& f) const;
};

// Features for every product, standardised with statistics fitted on the
// same catalog when config.standardize is set.
std::vector<ProductFeatures> compute_catalog_features(const std::vector<synth::Product>& products,
                                                      const vision::PatchFeatureExtractor& extractor,
                                                      const ImageFeatureConfig& config);

}  // namespace acebert
