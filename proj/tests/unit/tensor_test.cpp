#include <gtest/gtest.h>

#include "ctdense/errors.hpp"
#include "ctdense/ops.hpp"
#include "ctdense/rng.hpp"
#include "test_support.hpp"

namespace ctdense {
namespace {

TEST(Tensor, FactoriesAndShape) {
  auto t = Tensor<float>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3);
  EXPECT_EQ(t.at({1, 2}), 6.0f);
  EXPECT_THROW(Tensor<float>::from_vector({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor<double>::full({3}, 2.5).data()[2], 2.5);
  EXPECT_EQ(shape_str({2, 3}), "[2x3]");
}

TEST(Tensor, BackwardWithoutTapeThrows) {
  auto x = Tensor<double>::scalar(2.0);
  x.set_requires_grad(true);
  auto y = mul(x, x);  // no tape active
  EXPECT_THROW(backward(y), NoGraphError);
}

TEST(Tensor, BackwardOnNonScalarThrows) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = Tensor<double>::from_vector({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  EXPECT_THROW(backward(y), ShapeError);
}

TEST(Tensor, SharedSubexpressionAccumulates) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = Tensor<double>::from_vector({3}, {1, -2, 3});
  x.set_requires_grad(true);
  auto y = mul(x, x);              // x^2
  auto z = sum(add(y, y));         // 2 x^2
  tape.backward(z);
  const auto g = x.grad();
  EXPECT_DOUBLE_EQ(g[0], 4.0);
  EXPECT_DOUBLE_EQ(g[1], -8.0);
  EXPECT_DOUBLE_EQ(g[2], 12.0);
  for (int count : tape.last_visit_counts()) EXPECT_LE(count, 1);
}

TEST(Tensor, LeafGradientsAccumulateAcrossBackward) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = Tensor<double>::from_vector({1}, {3.0});
  x.set_requires_grad(true);
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, NoGradGuardSuspendsRecording) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = Tensor<double>::scalar(1.0);
  x.set_requires_grad(true);
  {
    NoGradGuard<double> off;
    auto y = mul(x, x);
    EXPECT_FALSE(y.on_tape());
  }
  EXPECT_TRUE(mul(x, x).on_tape());
}

TEST(Tensor, ConstantsGetNoGradientBuffer) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = Tensor<double>::from_vector({2}, {1, 2});
  x.set_requires_grad(true);
  auto c = Tensor<double>::from_vector({2}, {3, 4});
  tape.backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Tensor, ReshapeIsDifferentiable) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  Rng rng(3);
  auto x = testing::random_leaf<double>({2, 3}, rng);
  auto y = x.reshape({3, 2});
  EXPECT_THROW(x.reshape({4, 2}), ShapeError);
  tape.backward(sum(mul(y, y)));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
}

TEST(Tensor, NonLeafCannotToggleGradient) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = Tensor<double>::scalar(1.0);
  x.set_requires_grad(true);
  auto y = mul(x, x);
  EXPECT_ANY_THROW(y.set_requires_grad(false));
}

TEST(Rng, SequencesAreReproducible) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(c.index(10), 10u);
  }
}

TEST(Rng, PermutationCoversEveryIndex) {
  Rng rng(5);
  auto p = rng.permutation(100);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i);
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.01);
}

}  // namespace
}  // namespace ctdense
