#pragma once

// Central finite-difference verification of reverse-mode gradients.
//
// Relative error per element is |analytic - numeric| / max(|analytic|,
// |numeric|, floor), floor 1e-8 by default; the checks report the maximum over the inspected
// elements. Float32 central differences bottom out near 1e-4 relative error
// for O(1) losses, so deep compositions are checked on the double
// instantiation of the same code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "acebert/errors.hpp"
#include "acebert/tensor.hpp"

namespace acebert {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Up to `limit` distinct flat indices of a tensor with `numel` elements
// (all of them when numel <= limit), in ascending order.
inline std::vector<std::size_t> sample_indices(std::size_t numel, std::size_t limit, std::uint64_t seed) {
  std::vector<std::size_t> idx(numel);
  for (std::size_t i = 0; i < numel; ++i) idx[i] = i;
  if (limit > 0 && numel > limit) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

// Perturbs `param` in place (restoring it afterwards) and compares the
// numeric derivative of `loss_fn` with the taped gradient. `elements`
// selects the flat indices to inspect; empty means every element. Raise
// `floor` above the difference quotient's round-off (about ulp(loss)/eps)
// when some gradients are exactly zero.
template <class T>
GradCheckReport check_parameter_gradient(const std::function<BasicTensor<T>()>& loss_fn, BasicTensor<T> param,
                                         T eps, const std::vector<std::size_t>& elements = {},
                                         double floor = 1e-8) {
  if (!(eps > T(0))) throw Error("finite difference step must be positive");
  const auto evaluate = [&] {
    NoGradScope no_grad;
    return loss_fn().item();
  };
  if (evaluate() != evaluate()) throw Error("finite difference check: loss function is not deterministic");

  const bool had_grad_flag = param.requires_grad();
  param.set_requires_grad(true);
  param.zero_grad();
  std::vector<T> analytic(param.numel(), T(0));
  {
    GradTape tape;
    BasicTensor<T> loss;
    {
      TapeScope scope(tape);
      loss = loss_fn();
    }
    if (!loss.is_leaf()) {
      tape.backward(loss);
      if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());
    }
  }
  param.zero_grad();
  param.set_requires_grad(had_grad_flag);

  GradCheckReport report;
  auto values = param.mutable_data();
  const auto check_one = [&](std::size_t i) {
    const T original = values[i];
    values[i] = original + eps;
    const double up = evaluate();
    values[i] = original - eps;
    const double down = evaluate();
    values[i] = original;
    const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (report.checked == 1 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  };
  if (elements.empty()) {
    for (std::size_t i = 0; i < values.size(); ++i) check_one(i);
  } else {
    for (const auto i : elements) {
      if (i >= values.size()) throw IndexError("finite difference check: element index out of range");
      check_one(i);
    }
  }
  return report;
}

// Max relative error between the taped gradient of f at x and central
// differences with step `eps`.
template <class T>
double finite_difference_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                               const BasicTensor<T>& x, T eps) {
  BasicTensor<T> leaf = x.detach();
  const std::function<BasicTensor<T>()> bound = [&] { return f(leaf); };
  return check_parameter_gradient<T>(bound, leaf, eps).max_rel_error;
}

}  // namespace acebert
