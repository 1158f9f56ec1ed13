#include "acebert/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace acebert {

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step(double lr) {
  ++step_;
  double clip = 1.0;
  if (config_.max_grad_norm > 0) {
    double sq = 0;
    for (const auto& p : params_) {
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.max_grad_norm) clip = config_.max_grad_norm / norm;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = static_cast<float>(b1 * m[j] + (1 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

double LinearSchedule::at(std::size_t step) const {
  const auto total = std::max<std::size_t>(total_steps, 1);
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
  if (warm > 0 && step < warm) return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (step >= total) return 0.0;
  const double remaining = static_cast<double>(total - step) / static_cast<double>(total - warm);
  return peak_lr * remaining;
}

std::uint64_t hash_tensors(const std::vector<Tensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    for (float f : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      for (int k = 0; k < 4; ++k) {
        h ^= (bits >> (8 * k)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace acebert
