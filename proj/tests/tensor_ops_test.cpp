#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "sdflow/neuron.hpp"
#include "sdflow/ops.hpp"

using namespace sdflow;

namespace {

Tensor random_tensor(Shape shape, std::mt19937& rng, bool requires_grad = true,
                     float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> data(static_cast<size_t>(numel(shape)));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

using BuildFn = std::function<Tensor(std::vector<Tensor>&)>;

// Central finite differences with eps=1e-3 against reverse-mode gradients.
// The objective is a fixed random weighting of the op output; for the FD side
// it is accumulated in double so fp32 reduction noise does not mask analytic
// errors. Checks a random directional derivative plus single coordinates;
// error is measured relative to max(1, |fd|, |ad|).
void check_gradients(const BuildFn& build, std::vector<Tensor> leaves, uint32_t seed,
                     float eps = 1e-3f, float tol = 1e-3f) {
  Tensor y0 = build(leaves);
  std::vector<float> coefs(static_cast<size_t>(y0.numel()));
  {
    std::mt19937 crng(seed ^ 0x9e3779b9u);
    std::uniform_real_distribution<float> cdist(-1.0f, 1.0f);
    for (auto& v : coefs) v = cdist(crng);
  }
  Tensor coef_t = Tensor::from_data(y0.shape(), coefs, false);
  Tensor scalar = op_sum_all(op_hadamard(y0, coef_t));
  for (auto& l : leaves) l.zero_grad();
  backward(scalar);
  std::vector<std::vector<float>> grads;
  for (auto& l : leaves) grads.push_back(l.grad());

  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);

  auto eval = [&]() {
    Tensor y = build(leaves);
    double acc = 0.0;
    for (size_t i = 0; i < coefs.size(); ++i)
      acc += static_cast<double>(y.data()[i]) * coefs[i];
    return acc;
  };

  // Directional derivative.
  std::vector<std::vector<float>> dir;
  double norm = 0.0;
  for (auto& l : leaves) {
    std::vector<float> d(l.data().size());
    for (auto& v : d) {
      v = dist(rng);
      norm += static_cast<double>(v) * v;
    }
    dir.push_back(std::move(d));
  }
  norm = std::sqrt(norm);
  for (auto& d : dir)
    for (auto& v : d) v = static_cast<float>(v / norm);

  auto shift = [&](float scale) {
    for (size_t i = 0; i < leaves.size(); ++i)
      for (size_t j = 0; j < dir[i].size(); ++j) leaves[i].data()[j] += scale * dir[i][j];
  };
  shift(eps);
  double fplus = eval();
  shift(-2 * eps);
  double fminus = eval();
  shift(eps);
  double fd = (fplus - fminus) / (2.0 * eps);
  double ad = 0.0;
  for (size_t i = 0; i < leaves.size(); ++i)
    for (size_t j = 0; j < dir[i].size(); ++j)
      ad += static_cast<double>(grads[i][j]) * dir[i][j];
  double denom = std::max({1.0, std::fabs(fd), std::fabs(ad)});
  EXPECT_LT(std::fabs(fd - ad) / denom, tol) << "directional derivative mismatch";

  // A few single coordinates.
  for (int probe = 0; probe < 4; ++probe) {
    size_t li = rng() % leaves.size();
    if (leaves[li].data().empty()) continue;
    size_t ei = rng() % leaves[li].data().size();
    float saved = leaves[li].data()[ei];
    leaves[li].data()[ei] = saved + eps;
    double fp = eval();
    leaves[li].data()[ei] = saved - eps;
    double fm = eval();
    leaves[li].data()[ei] = saved;
    double fdc = (fp - fm) / (2.0 * eps);
    double adc = grads[li][ei];
    double den = std::max({1.0, std::fabs(fdc), std::fabs(adc)});
    EXPECT_LT(std::fabs(fdc - adc) / den, tol)
        << "coordinate (" << li << "," << ei << ") mismatch: fd=" << fdc << " ad=" << adc;
  }
}

}  // namespace

TEST(TensorBasics, ShapeInvariants) {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_THROW(Tensor::from_data({2, 3}, {1, 2, 3}), std::invalid_argument);
  t.grad();  // allocates
  EXPECT_EQ(t.node()->grad.size(), t.data().size());
}

TEST(MatmulOp, IdentityCase) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor y = op_matmul(a, eye);
  EXPECT_EQ(y.data(), (std::vector<float>{1, 2, 3, 4}));
}

TEST(MatmulOp, ShapeMismatchThrows) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  EXPECT_THROW(op_matmul(a, b), std::invalid_argument);
}

TEST(SumAxisOp, CountingCase) {
  Tensor x = Tensor::filled({2, 3}, 1.0f);
  Tensor y = op_sum_axis(x, 1);
  EXPECT_EQ(y.shape(), (Shape{2}));
  EXPECT_FLOAT_EQ(y.data()[0], 3.0f);
  EXPECT_FLOAT_EQ(y.data()[1], 3.0f);
}

TEST(BackwardPass, SumGivesOnes) {
  Tensor x = Tensor::from_data({3}, {0.3f, -0.1f, 2.0f}, true);
  Tensor y = op_sum_all(x);
  backward(y);
  EXPECT_EQ(x.grad(), (std::vector<float>{1, 1, 1}));
}

TEST(BackwardPass, NonScalarRootThrows) {
  Tensor x = Tensor::zeros({3}, true);
  Tensor y = op_scalar_mul(x, 2.0f);
  EXPECT_THROW(backward(y), std::invalid_argument);
}

TEST(BackwardPass, RepeatedCallsAccumulate) {
  Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  Tensor y = op_sum_all(op_scalar_mul(x, 3.0f));
  backward(y);
  backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 6.0f);
}

TEST(BackwardPass, SharedSubgraphAccumulates) {
  Tensor x = Tensor::from_data({2}, {1.0f, -1.0f}, true);
  Tensor y = op_sum_all(op_add(x, x));
  backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
}

TEST(BackwardPass, SiblingOrderIndependence) {
  std::mt19937 rng(7);
  Tensor x = random_tensor({4}, rng);
  Tensor a = Tensor::from_data({4}, {0.5f, -1.5f, 2.0f, 0.25f});
  Tensor b = Tensor::from_data({4}, {-0.75f, 0.1f, 1.0f, -2.0f});

  Tensor y1 = op_sum_all(op_add(op_hadamard(a, x), op_hadamard(b, x)));
  x.zero_grad();
  backward(y1);
  auto g1 = x.grad();

  Tensor y2 = op_sum_all(op_add(op_hadamard(b, x), op_hadamard(a, x)));
  x.zero_grad();
  backward(y2);
  auto g2 = x.grad();

  for (size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-6f);
}

TEST(GradCheck, Conv2dAgainstFiniteDifferences) {
  // Spec case: random 1x2x5x5 input.
  for (uint32_t seed : {11u, 12u, 13u}) {
    std::mt19937 rng(seed);
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) { return op_conv2d(in[0], in[1], in[2], 1, 1); },
        {x, w, b}, seed);
  }
}

TEST(GradCheck, TwoLayerLinearChain) {
  for (uint32_t seed : {21u, 22u}) {
    std::mt19937 rng(seed);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor w1 = random_tensor({5, 3}, rng);
    Tensor b1 = random_tensor({5}, rng);
    Tensor w2 = random_tensor({2, 5}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor h = op_linear(in[0], in[1], in[2]);
          return op_linear(h, in[3]);
        },
        {x, w1, b1, w2}, seed);
  }
}

TEST(GradCheck, ElementwiseAndBroadcast) {
  for (uint32_t seed : {31u, 32u}) {
    std::mt19937 rng(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor row = random_tensor({4}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor y = op_add(op_hadamard(in[0], in[1]), op_sub(in[0], in[2]));
          y = op_add(y, in[2]);  // broadcast add
          return op_scalar_add(op_scalar_mul(y, 0.5f), 0.25f);
        },
        {a, b, row}, seed);
  }
}

TEST(GradCheck, AbsAwayFromKink) {
  std::mt19937 rng(41);
  std::vector<float> vals = {0.5f, -0.7f, 1.2f, -0.3f, 0.9f, -1.1f};
  Tensor x = Tensor::from_data({6}, vals, true);
  check_gradients([](std::vector<Tensor>& in) { return op_abs(in[0]); }, {x}, 41);
}

TEST(GradCheck, BatchedMatmulBothVariants) {
  for (uint32_t seed : {51u, 52u}) {
    std::mt19937 rng(seed);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 4, 5}, rng);
    Tensor c = random_tensor({2, 6, 5}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor y = op_bmm(in[0], in[1]);  // (2,3,5)
          return op_bmm_nt(y, in[2]);       // (2,3,6)
        },
        {a, b, c}, seed);
  }
}

TEST(GradCheck, ConvTranspose2d) {
  for (uint32_t seed : {61u, 62u}) {
    std::mt19937 rng(seed);
    Tensor x = random_tensor({1, 3, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 4, 4}, rng);
    Tensor b = random_tensor({2}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) { return op_conv_transpose2d(in[0], in[1], in[2], 2, 1); },
        {x, w, b}, seed);
  }
}

TEST(GradCheck, BatchNorm) {
  for (uint32_t seed : {71u, 72u}) {
    std::mt19937 rng(seed);
    Tensor x = random_tensor({3, 4, 2, 2}, rng);
    Tensor gamma = random_tensor({4}, rng, true, 0.5f, 1.5f);
    Tensor beta = random_tensor({4}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) { return op_batchnorm(in[0], in[1], in[2]); },
        {x, gamma, beta}, seed, 1e-3f, 2e-3f);
  }
}

TEST(GradCheck, ShapeManipulationOps) {
  for (uint32_t seed : {81u, 82u}) {
    std::mt19937 rng(seed);
    Tensor x = random_tensor({2, 3, 4}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor y = op_permute(in[0], {2, 0, 1});  // (4,2,3)
          y = op_reshape(y, {4, 6});
          y = op_slice(y, 0, 1, 3);     // (3,6)
          y = op_pad_end(y, {1, 2});    // (4,8)
          y = op_roll(y, {1, -3});
          return op_crop_to(y, {3, 5});
        },
        {x}, seed);
  }
}

TEST(GradCheck, ConcatAndReductions) {
  for (uint32_t seed : {91u, 92u}) {
    std::mt19937 rng(seed);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 2}, rng);
    check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor y = op_concat({in[0], in[1]}, 1);  // (2,5)
          Tensor s = op_sum_axis(y, 0);             // (5)
          Tensor m = op_mean_axis(y, 1, true);      // (2,1)
          return op_concat({s, op_reshape(m, {2})}, 0);
        },
        {a, b}, seed);
  }
}

TEST(GradCheck, GatherRowsAndUpsample) {
  for (uint32_t seed : {101u, 102u}) {
    std::mt19937 rng(seed);
    Tensor table = random_tensor({5, 3}, rng);
    Tensor x = random_tensor({1, 2, 3, 3}, rng);
    std::vector<int64_t> idx = {0, 4, 2, 2, 1, 3};
    check_gradients(
        [idx](std::vector<Tensor>& in) {
          Tensor g = op_gather_rows(in[0], idx);
          Tensor u = op_upsample_bilinear(in[1], 6, 7);
          return op_concat({op_reshape(g, {18}), op_reshape(u, {84})}, 0);
        },
        {table, x}, seed);
  }
}

TEST(ConcatOp, MismatchThrows) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  EXPECT_THROW(op_concat({a, b}, 1), std::invalid_argument);
}

TEST(BatchNormOp, EmptyBatchThrows) {
  Tensor x = Tensor::from_data({0, 3}, {});
  Tensor gamma = Tensor::filled({3}, 1.0f);
  Tensor beta = Tensor::zeros({3});
  EXPECT_THROW(op_batchnorm(x, gamma, beta), std::invalid_argument);
}

TEST(RollOp, MatchesManualRoll) {
  Tensor x = Tensor::from_data({2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor y = op_roll(x, {0, 1});
  EXPECT_EQ(y.data(), (std::vector<float>{3, 0, 1, 2, 7, 4, 5, 6}));
  Tensor z = op_roll(x, {1, -1});
  EXPECT_EQ(z.data(), (std::vector<float>{5, 6, 7, 4, 1, 2, 3, 0}));
}

TEST(HeavisideOp, ForwardConvention) {
  SurrogateSpec sg;
  Tensor x = Tensor::from_data({3}, {0.15f, 0.1f, 0.05f});
  Tensor y = op_heaviside(x, 0.1f, sg);
  EXPECT_FLOAT_EQ(y.data()[0], 1.0f);  // above threshold
  EXPECT_FLOAT_EQ(y.data()[1], 1.0f);  // exact threshold fires
  EXPECT_FLOAT_EQ(y.data()[2], 0.0f);
}

TEST(HeavisideOp, OutputIsBinary) {
  std::mt19937 rng(123);
  SurrogateSpec sg;
  Tensor x = random_tensor({100}, rng, false, -2.0f, 2.0f);
  Tensor y = op_heaviside(x, 0.3f, sg);
  for (float v : y.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(HeavisideOp, SurrogateBackwardClosedForm) {
  SurrogateSpec sg;  // atan, width 2
  EXPECT_NEAR(sg.derivative(0.0f), 1.0f, 1e-6f);  // g(0) = alpha/2 = 1

  Tensor x = Tensor::from_data({1}, {0.1f}, true);
  Tensor y = op_sum_all(op_heaviside(x, 0.1f, sg));
  backward(y);
  EXPECT_NEAR(x.grad()[0], 1.0f, 1e-6f);  // at threshold: g(0) = 1

  // Elementwise surrogate match on random values.
  std::mt19937 rng(321);
  Tensor xs = random_tensor({64}, rng);
  Tensor th = Tensor::scalar(0.25f, true);
  xs.zero_grad();
  Tensor loss = op_sum_all(op_heaviside(xs, th, sg));
  backward(loss);
  for (int64_t i = 0; i < xs.numel(); ++i) {
    float expect = sg.derivative(xs.data()[i] - 0.25f);
    EXPECT_NEAR(xs.grad()[i], expect, 1e-6f);
  }
  // Threshold receives the negated surrogate.
  float th_expect = 0.0f;
  for (int64_t i = 0; i < xs.numel(); ++i) th_expect -= sg.derivative(xs.data()[i] - 0.25f);
  EXPECT_NEAR(th.grad()[0], th_expect, 1e-4f);
}

TEST(HeavisideOp, LeadingAxisThresholdBroadcast) {
  SurrogateSpec sg;
  Tensor x = Tensor::from_data({2, 2}, {0.2f, 0.05f, 0.2f, 0.05f});
  Tensor th = Tensor::from_data({2}, {0.1f, 0.3f});
  Tensor y = op_heaviside(x, th, sg);
  EXPECT_EQ(y.data(), (std::vector<float>{1, 0, 0, 0}));
  Tensor bad = Tensor::zeros({3});
  EXPECT_THROW(op_heaviside(x, bad, sg), std::invalid_argument);
}

TEST(HeavisideOp, BackwardThroughSum) {
  // Spec case: y = sum(heaviside(x, 0.1)) at x=[0.1] -> grad 1.0.
  SurrogateSpec sg;
  Tensor x = Tensor::from_data({1}, {0.1f}, true);
  backward(op_sum_all(op_heaviside(x, 0.1f, sg)));
  EXPECT_NEAR(x.grad()[0], 1.0f, 1e-6f);
}
