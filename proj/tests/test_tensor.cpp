#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dprune/error.hpp"
#include "dprune/tensor.hpp"
#include "helpers.hpp"

namespace dprune {
namespace {

using testing::gradcheck;
using testing::random_tensor;

void expect_data(const Tensor& t, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.at(i), want[i], tol) << "at " << i;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kUndefined;
}

// Weighted sum so every output element has a distinct gradient.
Tensor weighted(Tape& tape, const Tensor& y, std::uint64_t seed = 99) {
  return sum(tape, mul(tape, y, random_tensor(y.shape(), seed)));
}

TEST(MatMul, IdentityLeavesMatrixUnchanged) {
  Tape tape(false);
  auto c = matmul(tape, Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 2}, {1, 2, 3, 4}));
  expect_data(c, {1, 2, 3, 4});
}

TEST(MatMul, ZeroAnnihilates) {
  Tape tape(false);
  auto c = matmul(tape, Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::zeros({2, 2}));
  expect_data(c, {0, 0, 0, 0});
}

TEST(MatMul, HandComputedProduct) {
  Tape tape(false);
  auto c = matmul(tape, Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 2}, {5, 6, 7, 8}));
  expect_data(c, {19, 22, 43, 50});
}

TEST(MatMul, MismatchNamesBothShapes) {
  Tape tape(false);
  try {
    matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShape);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(RmsNorm, ConstantVectorNormalizesToOne) {
  Tape tape(false);
  expect_data(rms_norm(tape, Tensor::from({4}, {2, 2, 2, 2}), Tensor::full({4}, 1.0), 0.0),
              {1, 1, 1, 1});
}

TEST(RmsNorm, SignedPair) {
  Tape tape(false);
  expect_data(rms_norm(tape, Tensor::from({2}, {3, -3}), Tensor::full({2}, 1.0), 0.0), {1, -1});
}

TEST(RmsNorm, WeightScalesOutput) {
  Tape tape(false);
  expect_data(rms_norm(tape, Tensor::from({4}, {1, 0, 0, 0}), Tensor::full({4}, 2.0), 0.0),
              {4, 0, 0, 0});
}

TEST(RmsNorm, EmptyAxisIsShapeError) {
  Tape tape(false);
  EXPECT_EQ(code_of([&] { rms_norm(tape, Tensor::zeros({3, 0}), Tensor::zeros({0}), 1e-5); }),
            ErrorCode::kShape);
}

TEST(SwiGlu, ZeroGateGivesZero) {
  Tape tape(false);
  expect_data(swiglu(tape, Tensor::zeros({3}), Tensor::from({3}, {5, -7, 1e6})), {0, 0, 0});
}

TEST(SwiGlu, LargeGateSaturatesToIdentity) {
  Tape tape(false);
  expect_data(swiglu(tape, Tensor::from({1}, {50.0}), Tensor::from({1}, {3.0})), {150.0}, 1e-9);
}

TEST(SwiGlu, UnitGate) {
  Tape tape(false);
  expect_data(swiglu(tape, Tensor::from({1}, {1.0}), Tensor::from({1}, {2.0})),
              {2.0 / (1.0 + std::exp(-1.0))}, 1e-12);
  EXPECT_NEAR(swiglu(tape, Tensor::from({1}, {1.0}), Tensor::from({1}, {2.0})).item(), 1.4621,
              5e-5);
}

TEST(SwiGlu, ShapeMismatch) {
  Tape tape(false);
  EXPECT_EQ(code_of([&] { swiglu(tape, Tensor::zeros({2}), Tensor::zeros({3})); }),
            ErrorCode::kShape);
}

TEST(Softmax, UniformRow) {
  Tape tape(false);
  expect_data(softmax(tape, Tensor::zeros({1, 3}), false), {1.0 / 3, 1.0 / 3, 1.0 / 3});
}

TEST(Softmax, ShiftInvariant) {
  Tape tape(false);
  const double c = 123.25;
  auto a = softmax(tape, Tensor::from({1, 3}, {c + 1000, c, c}), false);
  auto b = softmax(tape, Tensor::from({1, 3}, {1000, 0, 0}), false);
  expect_data(a, {b.at(0), b.at(1), b.at(2)}, 0.0);
}

TEST(Softmax, TwoLogits) {
  Tape tape(false);
  expect_data(softmax(tape, Tensor::from({1, 2}, {1, 2}), false), {0.26894, 0.73106}, 5e-6);
}

TEST(Softmax, RowsSumToOneAndCausalMaskZeroesFuture) {
  Tape tape(false);
  auto y = softmax(tape, random_tensor({5, 5}, 7, -30, 30), true);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      s += y.at(r, c);
      if (c > r) {
        EXPECT_EQ(y.at(r, c), 0.0);
      }
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, FullyMaskedRowIsError) {
  Tape tape(false);
  EXPECT_THROW(softmax(tape, Tensor::zeros({2, 2}), true, -1), Error);
}

TEST(CrossEntropy, UniformLogits) {
  Tape tape(false);
  const std::vector<int> t{2};
  EXPECT_NEAR(cross_entropy(tape, Tensor::full({1, 4}, 0.7), t).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  Tape tape(false);
  const std::vector<int> t{1};
  EXPECT_NEAR(cross_entropy(tape, Tensor::from({1, 3}, {0, 1e6, 0}), t).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, HandComputed) {
  Tape tape(false);
  const std::vector<int> t{0};
  EXPECT_NEAR(cross_entropy(tape, Tensor::from({1, 2}, {0, std::log(3.0)}), t).item(),
              std::log(4.0), 1e-12);
}

TEST(CrossEntropy, TargetOutOfRangeIsIndexError) {
  Tape tape(false);
  const std::vector<int> t{4};
  EXPECT_EQ(code_of([&] { cross_entropy(tape, Tensor::zeros({1, 4}), t); }), ErrorCode::kIndex);
}

TEST(Backward, SumGivesOnes) {
  auto w = random_tensor({3, 4}, 1, -2, 2, true);
  Tape tape;
  tape.backward(sum(tape, w));
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ZeroTimesAnythingGivesZero) {
  auto w = random_tensor({3, 3}, 2, -2, 2, true);
  Tape tape;
  tape.backward(scale(tape, sum(tape, mul(tape, w, w)), 0.0));
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarIsContractError) {
  auto w = random_tensor({2, 2}, 3, -2, 2, true);
  Tape tape;
  auto y = scale(tape, w, 2.0);
  EXPECT_EQ(code_of([&] { tape.backward(y); }), ErrorCode::kContract);
}

TEST(Backward, NoGradTensorNeverAccumulates) {
  auto w = random_tensor({2, 2}, 4, -2, 2, true);
  auto c = random_tensor({2, 2}, 5);
  Tape tape;
  tape.backward(sum(tape, matmul(tape, w, c)));
  EXPECT_FALSE(c.has_grad());
}

TEST(Backward, AccumulationIsLinear) {
  auto w = random_tensor({3, 3}, 6, -2, 2, true);
  auto build = [&](Tape& t) { return weighted(t, softmax(t, matmul(t, w, w), false)); };
  Tape once;
  once.backward(build(once));
  const std::vector<double> g1(w.grad().begin(), w.grad().end());
  w.zero_grad();
  Tape twice;
  auto loss = build(twice);
  twice.backward(loss);
  twice.backward(loss);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(w.grad()[i], 2.0 * g1[i], 1e-14 * std::abs(g1[i]));
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    auto w = random_tensor({4, 4}, 8, -2, 2, true);
    Tape tape;
    tape.backward(weighted(tape, rms_norm(tape, matmul(tape, w, w), Tensor::full({4}, 1.5), 1e-5)));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, RecordsAreTopologicallyOrdered) {
  auto a = random_tensor({2, 2}, 9, -2, 2, true);
  Tape tape;
  auto loss = sum(tape, matmul(tape, add(tape, a, a), transpose(tape, a)));
  ASSERT_EQ(tape.size(), 4u);
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.records()[i].inputs) EXPECT_LT(in.tape_id(), static_cast<std::int64_t>(i));
    EXPECT_EQ(tape.records()[i].output.tape_id(), static_cast<std::int64_t>(i));
  }
  (void)loss;
}

TEST(FiniteDiff, SumGivesOnes) {
  auto x = random_tensor({3}, 10);
  auto g = finite_diff_grad([](const Tensor& t) { return std::accumulate(t.data().begin(), t.data().end(), 0.0); }, x, 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, Square) {
  auto x = Tensor::scalar(3.0);
  auto g = finite_diff_grad([](const Tensor& t) { return t.item() * t.item(); }, x, 1e-5);
  EXPECT_NEAR(g.item(), 6.0, 1e-8);
}

TEST(FiniteDiff, NonPositiveStepIsContractError) {
  EXPECT_EQ(code_of([] { finite_diff_grad([](const Tensor&) { return 0.0; }, Tensor::scalar(1), 0.0); }),
            ErrorCode::kContract);
}

TEST(FiniteDiff, CrossEntropySoftmaxChainMatchesBackward) {
  auto x = random_tensor({2, 2}, 11);
  const std::vector<int> t{1, 0};
  EXPECT_LT(gradcheck([&](Tape& tp) { return cross_entropy(tp, softmax(tp, x, false), t); }, {x}),
            1e-6);
}

// Every differentiable op against central differences on inputs in [-2, 2].
class OpGradcheck : public ::testing::Test {
 protected:
  static constexpr double kTol = 1e-6;
};

TEST_F(OpGradcheck, MatMul) {
  auto a = random_tensor({3, 3}, 20), b = random_tensor({3, 3}, 21);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, matmul(t, a, b)); }, {a, b}), kTol);
}

TEST_F(OpGradcheck, Linear) {
  auto x = random_tensor({3, 4}, 22), w = random_tensor({2, 4}, 23);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, linear(t, x, w)); }, {x, w}), kTol);
}

TEST_F(OpGradcheck, AddMulScale) {
  auto a = random_tensor({3, 3}, 24), b = random_tensor({3, 3}, 25);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, scale(t, mul(t, add(t, a, b), a), -1.5)); },
                      {a, b}),
            kTol);
}

TEST_F(OpGradcheck, TransposeSliceConcat) {
  auto a = random_tensor({3, 4}, 28), b = random_tensor({3, 2}, 29);
  EXPECT_LT(gradcheck(
                [&](Tape& t) {
                  auto s = slice_cols(t, a, 1, 2);
                  return weighted(t, transpose(t, concat_cols(t, {s, b, a})));
                },
                {a, b}),
            kTol);
}

TEST_F(OpGradcheck, Embedding) {
  auto table = random_tensor({5, 3}, 30);
  const std::vector<int> ids{4, 0, 4, 2};
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, embedding(t, table, ids)); }, {table}), kTol);
}

TEST_F(OpGradcheck, RmsNorm) {
  auto x = random_tensor({3, 3}, 31), w = random_tensor({3}, 32);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, rms_norm(t, x, w, 1e-5)); }, {x, w}), kTol);
}

TEST_F(OpGradcheck, SwiGlu) {
  auto g = random_tensor({3, 3}, 33), u = random_tensor({3, 3}, 34);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, swiglu(t, g, u)); }, {g, u}), kTol);
}

TEST_F(OpGradcheck, SoftmaxPlainAndCausal) {
  auto x = random_tensor({3, 3}, 35);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, softmax(t, x, false)); }, {x}), kTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return weighted(t, softmax(t, x, true)); }, {x}), kTol);
}

TEST_F(OpGradcheck, CrossEntropy) {
  auto x = random_tensor({3, 3}, 36);
  const std::vector<int> targets{2, 0, 1};
  EXPECT_LT(gradcheck([&](Tape& t) { return cross_entropy(t, x, targets); }, {x}), kTol);
}

TEST(TensorInvariants, NumelMatchesShape) {
  EXPECT_EQ(Tensor::zeros({3, 4}).numel(), 12u);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), Error);
}

TEST(TensorInvariants, GradHasDataShape) {
  auto w = random_tensor({2, 3}, 40, -2, 2, true);
  Tape tape;
  tape.backward(sum(tape, w));
  EXPECT_EQ(w.grad().size(), w.numel());
}

}  // namespace
}  // namespace dprune
