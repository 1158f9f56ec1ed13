#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "acebert/errors.hpp"
#include "acebert/grad_check.hpp"
#include "acebert/ops.hpp"
#include "acebert/tensor.hpp"

using namespace acebert;

namespace {

template <class T>
BasicTensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return BasicTensor<T>::from(std::move(shape), std::move(v));
}

// Scalar probe: sum(op(x) * w) with a fixed random weighting, so every
// output element contributes a distinct gradient.
TensorD weighted(const TensorD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor<double>(y.shape(), rng);
  return ops::sum(ops::mul(y, w));
}

}  // namespace

TEST(Tensor, SoftmaxUniformLogits) {
  auto y = ops::softmax(Tensor::from({4}, {0, 0, 0, 0}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Tensor, L2NormalizeThreeFourFive) {
  auto y = ops::l2_normalize(Tensor::from({2}, {3, 4}));
  EXPECT_NEAR(y.at(0), 0.6f, 1e-7);
  EXPECT_NEAR(y.at(1), 0.8f, 1e-7);
}

TEST(Tensor, L2NormalizeZeroRowFallsBackToUniform) {
  auto y = ops::l2_normalize(Tensor::zeros({4}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Tensor, MatmulShapeRule) {
  auto c = ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}));
  EXPECT_EQ(c.shape(), (Shape{2, 4}));
}

TEST(Tensor, MatmulValues) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 1}, {5, 6});
  auto c = ops::matmul(a, b);
  EXPECT_FLOAT_EQ(c.at(0), 17.0f);
  EXPECT_FLOAT_EQ(c.at(1), 39.0f);
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos);
    EXPECT_NE(msg.find("(4x5)"), std::string::npos);
  }
  EXPECT_THROW(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_NO_THROW(ops::add(Tensor::zeros({2, 5, 3}), Tensor::zeros({3})));
}

TEST(Tensor, NonFiniteOutputNamesOp) {
  try {
    ops::log(Tensor::from({2}, {1.0f, -1.0f}));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Tensor, GatherOutOfRangeIsIndexError) {
  std::vector<std::int64_t> idx{0, 3};
  EXPECT_THROW(ops::gather_rows(Tensor::zeros({3, 2}), idx), IndexError);
}

TEST(Autograd, SumGradientIsOnes) {
  auto x = Tensor::from({3}, {0.5f, -1.0f, 2.0f});
  x.set_requires_grad(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(x);
  }
  tape.backward(loss);
  for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 1.0f);
}

TEST(Autograd, SumOfSquaresGradient) {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::mul(x, x));
  }
  tape.backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
}

TEST(Autograd, SecondBackwardAccumulatesExactlyTwice) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<float>({3, 4}, rng);
  auto w = random_tensor<float>({4, 2}, rng);
  x.set_requires_grad(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::gelu(ops::matmul(x, w)));
  }
  tape.backward(loss);
  std::vector<float> once(x.grad().begin(), x.grad().end());
  tape.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0f * once[i]);
}

TEST(Autograd, UsesAccumulateAdditively) {
  auto x = Tensor::from({1}, {3.0f});
  x.set_requires_grad(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::add(ops::scale(x, 2.0f), ops::mul(x, x)));
  }
  tape.backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f + 6.0f);
}

TEST(Autograd, DetachedTensorIsConstant) {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    auto y = ops::scale(x, 3.0f);
    loss = ops::sum(ops::mul(y.detach(), x));
  }
  tape.backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 6.0f);
}

TEST(Autograd, NonScalarLossRejected) {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  GradTape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = ops::scale(x, 2.0f);
  }
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Autograd, NothingRecordedWithoutTape) {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  auto y = ops::scale(x, 2.0f);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, TapeIsTopologicallyOrdered) {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  GradTape tape;
  {
    TapeScope scope(tape);
    auto y = ops::relu(ops::scale(x, 2.0f));
    ops::sum(y);
  }
  ASSERT_EQ(tape.size(), 3u);
  EXPECT_EQ(tape.nodes()[0].op, "scale");
  EXPECT_EQ(tape.nodes()[1].op, "relu");
  EXPECT_EQ(tape.nodes()[2].op, "sum");
}

// Float32 central differences cannot resolve 1e-4 relative error on
// elements near zero, so the closed-form case runs on doubles.
TEST(FiniteDifference, SumOfSquaresRandom) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor<double>({8}, rng);
    const std::function<TensorD(const TensorD&)> f = [](const TensorD& v) { return ops::sum(ops::mul(v, v)); };
    EXPECT_LT(finite_difference_check<double>(f, x, 1e-3), 1e-4);
  }
}

TEST(FiniteDifference, SoftmaxThenPick) {
  std::mt19937_64 rng(12);
  const std::vector<std::int64_t> target{2};
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor<float>({5}, rng);
    const std::function<Tensor(const Tensor&)> f = [&](const Tensor& v) {
      return ops::sum(ops::pick(ops::softmax(ops::reshape(v, {1, 5})), target));
    };
    EXPECT_LT(finite_difference_check<float>(f, x, 1e-2f), 1e-3);
  }
}

TEST(FiniteDifference, ConstantFunctionHasZeroError) {
  const std::function<Tensor(const Tensor&)> f = [](const Tensor&) { return Tensor::scalar(4.0f); };
  EXPECT_EQ(finite_difference_check<float>(f, Tensor::from({3}, {1, 2, 3}), 1e-3f), 0.0);
}

TEST(FiniteDifference, NonDeterministicFunctionRejected) {
  int calls = 0;
  const std::function<Tensor(const Tensor&)> f = [&](const Tensor& v) {
    return ops::add_scalar(ops::sum(v), static_cast<float>(++calls));
  };
  EXPECT_THROW(finite_difference_check<float>(f, Tensor::from({2}, {1, 2}), 1e-3f), Error);
}

// Every differentiable op, on random small inputs, against central
// differences (double precision, shallow tolerance 1e-4).
TEST(FiniteDifference, EveryOpMatchesCentralDifferences) {
  using F = std::function<TensorD(const TensorD&)>;
  std::mt19937_64 rng(2024);
  const auto other = random_tensor<double>({3, 4}, rng);
  const auto rhs = random_tensor<double>({4, 5}, rng);
  const auto row = random_tensor<double>({4}, rng);
  const auto gain = random_tensor<double>({4}, rng, 0.5, 1.5);
  const std::vector<std::int64_t> rows{2, 0, 2, 1};
  const std::vector<std::int64_t> cols{3, 0, 1};
  std::vector<std::pair<std::string, F>> cases = {
      {"matmul", [&](const TensorD& x) { return ops::matmul(x, rhs); }},
      {"matmul_rhs", [&](const TensorD& x) { return ops::matmul(ops::transpose(rhs), ops::transpose(x)); }},
      {"add", [&](const TensorD& x) { return ops::add(x, other); }},
      {"add_broadcast", [&](const TensorD& x) { return ops::add(other, ops::reshape(ops::slice(x, 0, 1, 2), {4})); }},
      {"sub", [&](const TensorD& x) { return ops::sub(other, x); }},
      {"mul", [&](const TensorD& x) { return ops::mul(x, x); }},
      {"mul_broadcast", [&](const TensorD& x) { return ops::mul(x, row); }},
      {"scale", [&](const TensorD& x) { return ops::scale(x, -2.5); }},
      {"add_scalar", [&](const TensorD& x) { return ops::mul(ops::add_scalar(x, 0.3), x); }},
      {"transpose", [&](const TensorD& x) { return ops::transpose(x); }},
      {"reshape", [&](const TensorD& x) { return ops::reshape(x, {2, 6}); }},
      {"concat0", [&](const TensorD& x) { return ops::concat<double>({x, other, x}, 0); }},
      {"concat1", [&](const TensorD& x) { return ops::concat<double>({x, other}, 1); }},
      {"slice", [&](const TensorD& x) { return ops::slice(x, 1, 1, 3); }},
      {"gather_rows", [&](const TensorD& x) { return ops::gather_rows(x, rows); }},
      {"pick", [&](const TensorD& x) { return ops::pick(x, cols); }},
      {"softmax", [&](const TensorD& x) { return ops::softmax(x); }},
      {"log_softmax", [&](const TensorD& x) { return ops::log_softmax(x); }},
      {"log", [&](const TensorD& x) { return ops::log(ops::add_scalar(ops::mul(x, x), 0.5)); }},
      {"clamp", [&](const TensorD& x) { return ops::clamp(x, -0.5, 0.5); }},
      {"layer_norm", [&](const TensorD& x) { return ops::layer_norm(x, gain, row); }},
      {"layer_norm_params",
       [&](const TensorD& x) {
         return ops::layer_norm(other, ops::reshape(ops::slice(x, 0, 0, 1), {4}),
                                ops::reshape(ops::slice(x, 0, 2, 3), {4}));
       }},
      {"gelu", [&](const TensorD& x) { return ops::gelu(x); }},
      {"relu", [&](const TensorD& x) { return ops::relu(x); }},
      {"sigmoid", [&](const TensorD& x) { return ops::sigmoid(ops::scale(x, 3.0)); }},
      {"sum", [&](const TensorD& x) { return ops::scale(ops::sum(ops::mul(x, other)), 1.0); }},
      {"mean", [&](const TensorD& x) { return ops::mean(ops::mul(x, x)); }},
      {"sum_last", [&](const TensorD& x) { return ops::sum_last(ops::mul(x, x)); }},
      {"l2_normalize", [&](const TensorD& x) { return ops::l2_normalize(x); }},
  };
  for (const auto& [name, op] : cases) {
    for (int trial = 0; trial < 3; ++trial) {
      auto x = random_tensor<double>({3, 4}, rng);
      const std::uint64_t wseed = rng();
      const F probe = [&](const TensorD& v) { return weighted(op(v), wseed); };
      const double err = finite_difference_check<double>(probe, x, 1e-5);
      EXPECT_LT(err, 1e-4) << name << " trial " << trial;
    }
  }
}

TEST(FiniteDifference, AttentionMatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  const std::size_t batch = 2, seq = 4, heads = 2, dm = 4;
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 0, 0};
  for (int trial = 0; trial < 3; ++trial) {
    auto x = random_tensor<double>({batch * seq, 3 * dm}, rng);
    const std::uint64_t wseed = rng();
    const std::function<TensorD(const TensorD&)> f = [&](const TensorD& v) {
      return weighted(ops::multi_head_attention(v, batch, seq, heads, mask), wseed);
    };
    EXPECT_LT(finite_difference_check<double>(f, x, 1e-5), 1e-4);
  }
}

TEST(Properties, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<float>({3, 7}, rng, -20.0, 20.0);
    auto y = ops::softmax(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const float p = y.at(r * 7 + j);
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-5);
    }
  }
}

TEST(Properties, AttentionRowsSumToOneAndIgnorePadding) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({6, 12}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
  std::vector<float> probs;
  ops::multi_head_attention(x, 2, 3, 2, mask, &probs);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 3; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < 3; ++j) {
          const float p = probs[((b * 2 + h) * 3 + i) * 3 + j];
          if (!mask[b * 3 + j]) {
            EXPECT_EQ(p, 0.0f);
          }
          total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-5);
      }
    }
  }
}
