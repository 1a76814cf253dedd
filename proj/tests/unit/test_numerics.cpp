#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "crate/numerics/autograd.hpp"
#include "crate/numerics/grad_check.hpp"
#include "crate/numerics/kernels.hpp"
#include "crate/numerics/rng.hpp"
#include "support.hpp"

using namespace crate;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), Error);
  Tensor<double> t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(Tensor<double>({0, 3}), Error);
}

TEST(Softmax, UniformRow) {
  auto out = softmax_rows(Tensor<double>({1, 3}, {0, 0, 0}));
  for (double v : out.values) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MaskedEntryGetsZero) {
  auto out = softmax_rows(Tensor<double>({1, 2}, {0, -kInf}));
  EXPECT_EQ(out.values[0], 1.0);
  EXPECT_EQ(out.values[1], 0.0);
}

TEST(Softmax, HandEvaluation) {
  auto out = softmax_rows(Tensor<double>({1, 2}, {0, std::log(3.0)}));
  EXPECT_NEAR(out.values[0], 0.25, 1e-12);
  EXPECT_NEAR(out.values[1], 0.75, 1e-12);
}

TEST(Softmax, AllMaskedRowIsAnError) {
  try {
    softmax_rows(Tensor<double>({1, 2}, {-kInf, -kInf}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "empty_attention_support");
  }
}

TEST(Softmax, ShiftInvarianceProperty) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    auto m = testkit::random_tensor({3, 6}, 3.0, rng);
    auto shifted = m;
    for (std::size_t r = 0; r < 3; ++r) {
      const double c = 100.0 * rng.normal();
      for (std::size_t j = 0; j < 6; ++j) shifted(r, j) += c;
    }
    auto a = softmax_rows(m);
    auto b = softmax_rows(shifted);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_NEAR(a(r, j), b(r, j), 1e-6);
        EXPECT_GE(a(r, j), 0.0);
        total += a(r, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  Tensor<double> g({4}, 1.0), b({4}, 0.0);
  auto out = layer_norm(Tensor<double>({1, 4}, {2, 2, 2, 2}), g, b);
  for (double v : out.values) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGainGivesBeta) {
  Tensor<double> g({3}, 0.0), b({3}, {0.5, -1.0, 2.0});
  auto out = layer_norm(Tensor<double>({2, 3}, {1, 5, 9, -3, 0, 4}), g, b);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out(r, i), b.values[i]);
}

TEST(LayerNorm, TwoElementHandCase) {
  Tensor<double> g({2}, 1.0), b({2}, 0.0);
  auto out = layer_norm(Tensor<double>({1, 2}, {1, 3}), g, b, 1e-12);
  EXPECT_NEAR(out.values[0], -1.0, 1e-9);
  EXPECT_NEAR(out.values[1], 1.0, 1e-9);
}

TEST(LayerNorm, NormalizedMomentsProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = testkit::random_tensor({4, 16}, 5.0, rng);
    auto out = layer_norm(x, Tensor<double>({16}, 1.0), Tensor<double>({16}, 0.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < 16; ++i) mean += out(r, i);
      mean /= 16;
      for (std::size_t i = 0; i < 16; ++i) var += (out(r, i) - mean) * (out(r, i) - mean);
      var /= 16;
      EXPECT_NEAR(mean, 0.0, 1e-12);
      EXPECT_NEAR(var, 1.0, 1e-5);
    }
  }
}

TEST(GradCheck, SumHasAllOnesGradient) {
  GradFunction f = [](const Tensor<double>& x, Tensor<double>* g) {
    double s = 0;
    for (double v : x.values) s += v;
    if (g) *g = Tensor<double>(x.shape, 1.0);
    return s;
  };
  EXPECT_LT(grad_check(f, Tensor<double>({3}, {0.3, -1.2, 4.0}), 1e-5), 1e-10);
}

TEST(GradCheck, HalfSquaredNorm) {
  GradFunction f = [](const Tensor<double>& x, Tensor<double>* g) {
    double s = 0;
    for (double v : x.values) s += 0.5 * v * v;
    if (g) *g = x;
    return s;
  };
  EXPECT_LT(grad_check(f, Tensor<double>({2}, {1, 2}), 1e-5), 1e-8);
}

TEST(GradCheck, WrongGradientIsDetected) {
  GradFunction f = [](const Tensor<double>& x, Tensor<double>* g) {
    if (g) *g = Tensor<double>(x.shape, 2.0);
    return x.values[0];
  };
  EXPECT_GT(grad_check(f, Tensor<double>({1}, {1.0}), 1e-5), 0.1);
}

TEST(GradCheck, NonFiniteObjectivePropagates) {
  GradFunction f = [](const Tensor<double>& x, Tensor<double>* g) {
    if (g) *g = Tensor<double>(x.shape, 0.0);
    return std::log(x.values[0]);
  };
  try {
    grad_check(f, Tensor<double>({1}, {-1.0}), 1e-5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "non_finite");
  }
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformRangeAndMoments) {
  Rng rng(1);
  double mean = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double z = rng.normal();
    mean += z;
    sq += z * z;
  }
  EXPECT_NEAR(mean / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
  Rng rng(9);
  auto s = rng.sample_without_replacement(50, 50);
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 50u);
  Rng f1 = rng.fork(3), f2 = rng.fork(3), f3 = rng.fork(4);
  EXPECT_EQ(f1.next_u64(), f2.next_u64());
  EXPECT_NE(Rng(9).fork(3).next_u64(), f3.next_u64());
}

// Each tape op against central differences in f64.
namespace {

using OpBuilder = std::function<ag::Var(ag::Tape<double>&, ag::Var)>;

// Weighted sum of every output entry, with distinct weights, built from
// tape ops: sum_r (e_r^T out) w_r^T.
ag::Var weighted_total(ag::Tape<double>& t, ag::Var out) {
  const Mat<double> ov = t.value(out);
  ag::Var total;
  for (Eigen::Index r = 0; r < ov.rows(); ++r) {
    Mat<double> sel = Mat<double>::Zero(1, ov.rows());
    sel(0, r) = 1.0;
    Mat<double> w(1, ov.cols());
    for (Eigen::Index c = 0; c < ov.cols(); ++c)
      w(0, c) = std::sin(1.0 + 0.7 * static_cast<double>(r * ov.cols() + c));
    ag::Var term = ag::matmul_nt(t, ag::matmul(t, t.leaf(sel), out), t.leaf(w));
    total = total.valid() ? ag::add(t, total, term) : term;
  }
  return total;
}

double op_grad_error(const Tensor<double>& x0, const OpBuilder& build) {
  GradFunction f = [&](const Tensor<double>& x, Tensor<double>* g) {
    ag::Tape<double> tape(g != nullptr);
    ag::Var in = tape.leaf(Mat<double>(x.matrix()), true);
    ag::Var loss = weighted_total(tape, build(tape, in));
    if (g) {
      tape.backward(loss);
      const Mat<double>& grad = tape.grad(in);
      *g = Tensor<double>(x.shape, std::vector<double>(grad.data(), grad.data() + grad.size()));
    }
    return tape.value(loss)(0, 0);
  };
  return grad_check(f, x0, 1e-6);
}

}  // namespace

TEST(Autograd, ElementwiseAndLinearOps) {
  Rng rng(11);
  auto x = testkit::random_tensor({3, 4}, 1.0, rng);
  auto wmat = testkit::random_tensor({4, 5}, 1.0, rng);
  EXPECT_LT(op_grad_error(x, [&](auto& t, ag::Var v) {
              return ag::matmul(t, v, t.leaf(Mat<double>(wmat.matrix())));
            }),
            1e-7);
  EXPECT_LT(op_grad_error(x, [&](auto& t, ag::Var v) { return ag::matmul_nt(t, v, v); }), 1e-7);
  EXPECT_LT(op_grad_error(x, [](auto& t, ag::Var v) { return ag::gelu(t, v); }), 1e-7);
  EXPECT_LT(op_grad_error(x, [](auto& t, ag::Var v) { return ag::scale(t, ag::add_scalar(t, v, 0.3), 2.5); }),
            1e-7);
  EXPECT_LT(op_grad_error(x, [](auto& t, ag::Var v) { return ag::slice_cols(t, v, 1, 2); }), 1e-7);
  EXPECT_LT(op_grad_error(x, [](auto& t, ag::Var v) { return ag::sub(t, v, ag::scale(t, v, 0.5)); }),
            1e-7);
}

TEST(Autograd, LayerNormGradient) {
  Rng rng(12);
  auto x = testkit::random_tensor({3, 6}, 2.0, rng);
  auto g = testkit::random_tensor({1, 6}, 1.0, rng);
  auto b = testkit::random_tensor({1, 6}, 1.0, rng);
  EXPECT_LT(op_grad_error(x, [&](auto& t, ag::Var v) {
              return ag::layer_norm(t, v, t.leaf(Mat<double>(g.matrix())),
                                    t.leaf(Mat<double>(b.matrix())), 1e-5);
            }),
            1e-6);
}

TEST(Autograd, CausalAttentionGradientWithTiedInputs) {
  Rng rng(13);
  auto x = testkit::random_tensor({8, 4}, 1.0, rng);  // batch 2, seq 4, 2 heads
  EXPECT_LT(op_grad_error(x, [](auto& t, ag::Var v) {
              return ag::causal_attention(t, v, v, v, 2, 4, 2);
            }),
            1e-6);
}

TEST(Autograd, CrossEntropyHandCases) {
  ag::Tape<double> tape(false);
  std::vector<std::uint32_t> target = {1};
  ag::Var logits = tape.leaf(Mat<double>{{0.0, std::log(3.0)}});
  EXPECT_NEAR(tape.value(ag::cross_entropy(tape, logits, target))(0, 0), std::log(4.0 / 3.0),
              1e-12);
  Mat<double> uniform = Mat<double>::Zero(2, 256);
  std::vector<std::uint32_t> targets = {3, 200};
  EXPECT_NEAR(tape.value(ag::cross_entropy(tape, tape.leaf(uniform), targets))(0, 0),
              std::log(256.0), 1e-12);
}

TEST(Autograd, CrossEntropyGradient) {
  Rng rng(14);
  auto x = testkit::random_tensor({4, 7}, 2.0, rng);
  std::vector<std::uint32_t> targets = {0, 6, 3, 3};
  GradFunction f = [&](const Tensor<double>& in, Tensor<double>* g) {
    ag::Tape<double> tape(true);
    ag::Var v = tape.leaf(Mat<double>(in.matrix()), true);
    ag::Var loss = ag::cross_entropy(tape, v, targets);
    if (g) {
      tape.backward(loss);
      *g = Tensor<double>::from_matrix(tape.grad(v));
      g->shape = in.shape;
    }
    return tape.value(loss)(0, 0);
  };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-7);
}

TEST(Autograd, CausalAttentionReadsOnlyThePast) {
  Rng rng(15);
  auto x = testkit::random_tensor({6, 4}, 1.0, rng);
  ag::Tape<double> tape(false);
  auto base = tape.value(ag::causal_attention(tape, tape.leaf(Mat<double>(x.matrix())),
                                              tape.leaf(Mat<double>(x.matrix())),
                                              tape.leaf(Mat<double>(x.matrix())), 1, 6, 2));
  for (std::size_t s = 0; s < 6; ++s) {
    auto y = x;
    for (std::size_t r = s; r < 6; ++r)
      for (std::size_t c = 0; c < 4; ++c) y(r, c) += 1.0 + rng.normal();
    auto m = Mat<double>(y.matrix());
    auto out = tape.value(ag::causal_attention(tape, tape.leaf(m), tape.leaf(m), tape.leaf(m), 1, 6, 2));
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(r, c), base(r, c));
  }
}

TEST(Autograd, SingleTokenAttendsToItself) {
  ag::Tape<double> tape(false);
  Mat<double> q{{1.0, -2.0, 0.5, 3.0}};
  auto out = tape.value(ag::causal_attention(tape, tape.leaf(q), tape.leaf(q), tape.leaf(q), 1, 1, 2));
  for (int c = 0; c < 4; ++c) EXPECT_EQ(out(0, c), q(0, c));
}
