#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "acebert/tensor.hpp"

namespace acebert {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double max_grad_norm = 0.0;
};

// Adam over a fixed parameter group. Parameters without an accumulated
// gradient are left untouched (their moments do not advance).
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return step_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t step_ = 0;
};

// Linear warmup over the first `warmup_fraction` of steps, then linear decay
// to zero at `total_steps`.
struct LinearSchedule {
  double peak_lr = 1e-3;
  std::size_t total_steps = 1;
  double warmup_fraction = 0.1;

  double at(std::size_t step) const;
};

// FNV-1a over the raw bytes of every tensor, for freeze checks.
std::uint64_t hash_tensors(const std::vector<Tensor>& tensors);

}  // namespace acebert
