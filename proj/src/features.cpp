#include "acebert/features.hpp"

#include <cmath>

#include "acebert/errors.hpp"

namespace acebert {

void ImageFeatureConfig::validate() const {
  if (roi_grid < 1) throw ConfigError("image config: roi_grid must be >= 1");
  if (roi_canvas % roi_grid != 0) throw ConfigError("image config: roi_grid must divide roi_canvas");
  if (pixel_patch < 1 || pixel_target % pixel_patch != 0) {
    throw ConfigError("image config: pixel_patch must divide pixel_target");
  }
  if (roi_percentile < 0 || roi_percentile > 100) throw ConfigError("image config: roi_percentile must lie in [0, 100]");
  if (roi_margin < 0) throw ConfigError("image config: roi_margin must be >= 0");
}

ProductFeatures compute_features(const vision::Image& image, const vision::PatchFeatureExtractor& extractor,
                                 const ImageFeatureConfig& config) {
  ProductFeatures f;
  f.roi = config.use_roi ? vision::detect_roi(image, config.roi_percentile, config.roi_margin)
                         : vision::full_frame(image);
  const auto patches = vision::patchify_roi(image, f.roi, config.roi_grid, config.roi_grid, config.roi_canvas);
  f.patch_rows = extractor.extract(patches);
  f.n_patch = patches.size();
  auto pixels = vision::pixel_patchify(image, config.pixel_target, config.pixel_target, config.pixel_patch,
                                       config.pixel_patch);
  f.pixel_rows = std::move(pixels.flattened);
  f.n_pixel = static_cast<std::size_t>(pixels.count);
  return f;
}

namespace {

void fit_block(const std::vector<ProductFeatures>& features, bool patch, std::vector<float>& mean,
               std::vector<float>& inv_std) {
  std::size_t dim = 0, rows = 0;
  for (const auto& f : features) {
    const auto n = patch ? f.n_patch : f.n_pixel;
    if (n == 0) continue;
    const auto& data = patch ? f.patch_rows : f.pixel_rows;
    dim = data.size() / n;
    break;
  }
  mean.assign(dim, 0.0f);
  inv_std.assign(dim, 1.0f);
  if (dim == 0) return;
  std::vector<double> sum(dim, 0.0), sq(dim, 0.0);
  for (const auto& f : features) {
    const auto& data = patch ? f.patch_rows : f.pixel_rows;
    if (data.size() % dim != 0) throw ShapeError("feature rows of differing width");
    for (std::size_t i = 0; i < data.size(); ++i) {
      sum[i % dim] += data[i];
      sq[i % dim] += static_cast<double>(data[i]) * data[i];
    }
    rows += data.size() / dim;
  }
  for (std::size_t j = 0; j < dim; ++j) {
    const double m = sum[j] / static_cast<double>(rows);
    const double var = std::max(0.0, sq[j] / static_cast<double>(rows) - m * m);
    mean[j] = static_cast<float>(m);
    inv_std[j] = static_cast<float>(1.0 / std::max(std::sqrt(var), 1e-3));
  }
}

void apply_block(std::vector<float>& data, const std::vector<float>& mean, const std::vector<float>& inv_std) {
  const auto dim = mean.size();
  if (dim == 0) return;
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = (data[i] - mean[i % dim]) * inv_std[i % dim];
}

}  // namespace

FeatureStats FeatureStats::fit(const std::vector<ProductFeatures>& features) {
  FeatureStats s;
  fit_block(features, true, s.patch_mean, s.patch_inv_std);
  fit_block(features, false, s.pixel_mean, s.pixel_inv_std);
  return s;
}

void FeatureStats::apply(ProductFeatures& f) const {
  apply_block(f.patch_rows, patch_mean, patch_inv_std);
  apply_block(f.pixel_rows, pixel_mean, pixel_inv_std);
}

std::vector<ProductFeatures> compute_catalog_features(const std::vector<synth::Product>& products,
                                                      const vision::PatchFeatureExtractor& extractor,
                                                      const ImageFeatureConfig& config) {
  config.validate();
  std::vector<ProductFeatures> out;
  out.reserve(products.size());
  for (const auto& p : products) out.push_back(compute_features(p.image(), extractor, config));
  if (config.standardize) {
    const auto stats = FeatureStats::fit(out);
    for (auto& f : out) stats.apply(f);
  }
  return out;
}

}  // namespace acebert
