#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "ps8/grad_check.hpp"
#include "ps8/ops.hpp"

namespace {

using ps8::Mode;
using ps8::Shape;
using ps8::Tape;
using ps8::Tensor;
using ps8::Var;

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// Direct sliding window over an explicitly zero-padded copy of the input.
std::vector<double> naive_conv(const std::vector<double>& x, std::size_t time, std::size_t cin,
                               const std::vector<double>& w, std::size_t cout, std::size_t len,
                               const std::vector<double>& bias) {
  const std::size_t head = len / 2, tail = (len - 1) / 2;
  std::vector<double> padded((time + head + tail) * cin, 0.0);
  for (std::size_t t = 0; t < time; ++t)
    for (std::size_t c = 0; c < cin; ++c) padded[(t + head) * cin + c] = x[t * cin + c];
  std::vector<double> out(time * cout);
  for (std::size_t t = 0; t < time; ++t)
    for (std::size_t k = 0; k < cout; ++k) {
      double s = bias[k];
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t c = 0; c < cin; ++c) s += w[(k * len + j) * cin + c] * padded[(t + j) * cin + c];
      out[t * cout + k] = s;
    }
  return out;
}

Tape<float>& no_grad() {
  static Tape<float> tape;
  tape.set_recording(false);
  return tape;
}

TEST(Conv1dSame, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(1);
  Var<float> x(Tensor<float>({6, 3}, 0.0f));
  Var<float> w(random_tensor<float>({4, 5, 3}, rng));
  Var<float> b(Tensor<float>({4}, 0.0f));
  auto y = ps8::conv1d_same(no_grad(), x, w, b);
  for (float v : y.value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv1dSame, IdentityKernel) {
  Var<float> x(Tensor<float>({5, 1}, {1, -2, 3, 4.5f, 5}));
  Var<float> w(Tensor<float>({1, 1, 1}, {1}));
  Var<float> b(Tensor<float>({1}, {0}));
  auto y = ps8::conv1d_same(no_grad(), x, w, b);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv1dSame, SlidingWindowExample) {
  const auto expected = naive_conv({1, 2, 3, 4}, 4, 1, {1, 1, 1}, 1, 3, {0});
  ASSERT_EQ(expected, (std::vector<double>{3, 6, 9, 7}));
  Var<float> x(Tensor<float>({4, 1}, {1, 2, 3, 4}));
  Var<float> w(Tensor<float>({1, 3, 1}, {1, 1, 1}));
  Var<float> b(Tensor<float>({1}, {0}));
  auto y = ps8::conv1d_same(no_grad(), x, w, b);
  EXPECT_EQ(std::vector<float>(y.value().data().begin(), y.value().data().end()), (std::vector<float>{3, 6, 9, 7}));
}

TEST(Conv1dSame, MatchesNaiveOracleOnRandomBatches) {
  std::mt19937_64 rng(7);
  for (std::size_t len : {1u, 2u, 3u, 4u, 5u, 11u}) {
    const std::size_t batch = 3, time = 9, cin = 5, cout = 37;
    auto xt = random_tensor<double>({batch, time, cin}, rng);
    auto wt = random_tensor<double>({cout, len, cin}, rng);
    auto bt = random_tensor<double>({cout}, rng);
    Tape<double> tape;
    auto y = ps8::conv1d_same(tape, Var<double>(xt), Var<double>(wt), Var<double>(bt));
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> xb(xt.ptr() + b * time * cin, xt.ptr() + (b + 1) * time * cin);
      const auto ref = naive_conv(xb, time, cin, {wt.data().begin(), wt.data().end()}, cout, len,
                                  {bt.data().begin(), bt.data().end()});
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[b * time * cout + i], ref[i], 1e-12);
    }
  }
}

TEST(Conv1dSame, PreservesLengthForAllKernelSizes) {
  std::mt19937_64 rng(3);
  for (std::size_t len : {1u, 3u, 5u, 11u})
    for (std::size_t time = 1; time <= 32; ++time) {
      Var<float> x(random_tensor<float>({2, time, 3}, rng));
      Var<float> w(random_tensor<float>({4, len, 3}, rng));
      Var<float> b(random_tensor<float>({4}, rng));
      auto y = ps8::conv1d_same(no_grad(), x, w, b);
      EXPECT_EQ(y.shape(), (Shape{2, time, 4}));
    }
}

TEST(Conv1dSame, IsLinearWithZeroBias) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto xa = random_tensor<float>({10, 6}, rng), xb = random_tensor<float>({10, 6}, rng);
    Var<float> w(random_tensor<float>({5, 5, 6}, rng)), b(Tensor<float>({5}, 0.0f));
    const float alpha = 0.7f, beta = -1.3f;
    Tensor<float> mix({10, 6});
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * xa[i] + beta * xb[i];
    auto fa = ps8::conv1d_same(no_grad(), Var<float>(xa), w, b);
    auto fb = ps8::conv1d_same(no_grad(), Var<float>(xb), w, b);
    auto fm = ps8::conv1d_same(no_grad(), Var<float>(mix), w, b);
    for (std::size_t i = 0; i < fm.value().size(); ++i)
      EXPECT_NEAR(fm.value()[i], alpha * fa.value()[i] + beta * fb.value()[i], 1e-5);
  }
}

TEST(Conv1dSame, RejectsChannelMismatch) {
  Var<float> x(Tensor<float>({4, 3})), w(Tensor<float>({2, 3, 5})), b(Tensor<float>({2}));
  EXPECT_THROW(ps8::conv1d_same(no_grad(), x, w, b), ps8::ShapeError);
}

TEST(Relu, Definition) {
  Var<float> x(Tensor<float>({3}, {-1, 0, 2}));
  auto y = ps8::relu(no_grad(), x);
  EXPECT_EQ(y.value(), Tensor<float>({3}, {0, 0, 2}));
  Var<float> neg(Tensor<float>({4}, {-1, -2, -0.5f, -9}));
  const auto zeros = ps8::relu(no_grad(), neg);
  for (float v : zeros.value().data()) EXPECT_EQ(v, 0.0f);
  Var<float> pos(Tensor<float>({3}, {1, 2, 0.25f}));
  EXPECT_EQ(ps8::relu(no_grad(), pos).value(), pos.value());
}

TEST(BatchNorm, TrainModeNormalizesPerChannel) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(3.0, 2.0);
  Tensor<float> xt({4, 50, 3});
  for (float& v : xt.data()) v = static_cast<float>(n(rng));
  ps8::BatchNormStats<float> stats(3);
  Var<float> g(Tensor<float>({3}, 1.0f)), b(Tensor<float>({3}, 0.0f));
  auto y = ps8::batchnorm(no_grad(), Var<float>(xt), g, b, stats, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    const std::size_t rows = y.value().rows();
    for (std::size_t r = 0; r < rows; ++r) mean += y.value()[r * 3 + c];
    mean /= rows;
    for (std::size_t r = 0; r < rows; ++r) var += std::pow(y.value()[r * 3 + c] - mean, 2);
    var /= rows;
    EXPECT_LT(std::abs(mean), 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
  // Running statistics moved 1% of the way towards the batch statistics.
  EXPECT_GT(stats.mean[0], 0.0f);
  EXPECT_LT(stats.mean[0], 0.1f);
}

TEST(BatchNorm, ZeroGammaOutputsBeta) {
  std::mt19937_64 rng(2);
  ps8::BatchNormStats<float> stats(2);
  Var<float> g(Tensor<float>({2}, 0.0f)), b(Tensor<float>({2}, {0.5f, -2.0f}));
  for (Mode mode : {Mode::train, Mode::infer}) {
    auto y = ps8::batchnorm(no_grad(), Var<float>(random_tensor<float>({7, 2}, rng)), g, b, stats, mode);
    for (std::size_t r = 0; r < 7; ++r) {
      EXPECT_EQ(y.value()(r, 0), 0.5f);
      EXPECT_EQ(y.value()(r, 1), -2.0f);
    }
  }
}

TEST(BatchNorm, InferModeWithUnitStatsIsNearIdentity) {
  std::mt19937_64 rng(4);
  ps8::BatchNormStats<float> stats(3);
  Var<float> g(Tensor<float>({3}, 1.0f)), b(Tensor<float>({3}, 0.0f));
  auto x = random_tensor<float>({5, 3}, rng);
  auto y = ps8::batchnorm(no_grad(), Var<float>(x), g, b, stats, Mode::infer);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-5);
}

TEST(BatchNorm, ConstantChannelDoesNotDivideByZero) {
  ps8::BatchNormStats<float> stats(1);
  Var<float> g(Tensor<float>({1}, 1.0f)), b(Tensor<float>({1}, 0.0f));
  auto y = ps8::batchnorm(no_grad(), Var<float>(Tensor<float>({8, 1}, 4.0f)), g, b, stats, Mode::train);
  for (float v : y.value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Dropout, RateZeroAndInferAreIdentity) {
  std::mt19937_64 rng(8);
  Var<float> x(random_tensor<float>({100}, rng));
  EXPECT_EQ(ps8::dropout(no_grad(), x, 0.0, 1, Mode::train).value(), x.value());
  EXPECT_EQ(ps8::dropout(no_grad(), x, 0.0, 1, Mode::infer).value(), x.value());
  EXPECT_EQ(ps8::dropout(no_grad(), x, 0.5, 1, Mode::infer).value(), x.value());
}

TEST(Dropout, PreservesExpectation) {
  Var<float> x(Tensor<float>({1000000}, 1.0f));
  auto y = ps8::dropout(no_grad(), x, 0.25, 1234, Mode::train);
  double mean = 0;
  std::size_t zeros = 0;
  for (float v : y.value().data()) {
    mean += v;
    zeros += v == 0.0f;
  }
  mean /= 1e6;
  EXPECT_GE(mean, 0.99);
  EXPECT_LE(mean, 1.01);
  EXPECT_NEAR(static_cast<double>(zeros) / 1e6, 0.25, 0.005);
  EXPECT_EQ(ps8::dropout(no_grad(), x, 0.25, 1234, Mode::train).value(), y.value());
  EXPECT_NE(ps8::dropout(no_grad(), x, 0.25, 1235, Mode::train).value(), y.value());
}

TEST(ConcatChannels, LaysOutPartsInOrder) {
  Var<float> a(Tensor<float>({2, 1}, {1, 2})), b(Tensor<float>({2, 2}, {3, 4, 5, 6}));
  auto y = ps8::concat_channels(no_grad(), {a, b});
  EXPECT_EQ(y.value(), Tensor<float>({2, 3}, {1, 3, 4, 2, 5, 6}));
  EXPECT_EQ(ps8::concat_channels(no_grad(), {a}).value(), a.value());
  Var<float> wide(Tensor<float>({700, 128}));
  EXPECT_EQ(ps8::concat_channels(no_grad(), {wide, wide}).shape(), (Shape{700, 256}));
  Var<float> branch(Tensor<float>({700, 256}));
  EXPECT_EQ(ps8::concat_channels(no_grad(), {branch, branch, branch, branch}).shape(), (Shape{700, 1024}));
  Var<float> other(Tensor<float>({3, 2}));
  EXPECT_THROW(ps8::concat_channels(no_grad(), {a, other}), ps8::ShapeError);
}

TEST(AddResidual, Elementwise) {
  Var<float> a(Tensor<float>({2}, {1, 2})), b(Tensor<float>({2}, {3, 4}));
  EXPECT_EQ(ps8::add_residual(no_grad(), a, b).value(), Tensor<float>({2}, {4, 6}));
  EXPECT_EQ(ps8::add_residual(no_grad(), a, Var<float>(Tensor<float>({2}, 0.0f))).value(), a.value());
  EXPECT_EQ(ps8::add_residual(no_grad(), a, Var<float>(Tensor<float>({2}, {-1, -2}))).value(),
            Tensor<float>({2}, 0.0f));
  EXPECT_THROW(ps8::add_residual(no_grad(), a, Var<float>(Tensor<float>({3}))), ps8::ShapeError);
}

TEST(Affine, Examples) {
  Var<float> x(Tensor<float>({1, 2}, {1, 2}));
  Var<float> eye(Tensor<float>({2, 2}, {1, 0, 0, 1}));
  Var<float> zero(Tensor<float>({2}, 0.0f)), ones(Tensor<float>({2}, 1.0f));
  EXPECT_EQ(ps8::affine(no_grad(), x, eye, zero).value(), x.value());
  EXPECT_EQ(ps8::affine(no_grad(), x, eye, ones).value(), Tensor<float>({1, 2}, {2, 3}));
  Var<float> bias(Tensor<float>({2}, {0.5f, -1}));
  auto y = ps8::affine(no_grad(), Var<float>(Tensor<float>({3, 2}, 0.0f)), eye, bias);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(y.value()(r, 0), 0.5f);
    EXPECT_EQ(y.value()(r, 1), -1.0f);
  }
  EXPECT_THROW(ps8::affine(no_grad(), x, Var<float>(Tensor<float>({3, 2})), zero), ps8::ShapeError);
}

TEST(SoftmaxRows, Examples) {
  auto eq = ps8::softmax_rows(no_grad(), Var<float>(Tensor<float>({1, 8}, 0.3f)));
  for (float v : eq.value().data()) EXPECT_NEAR(v, 0.125f, 1e-7);
  Var<double> x(Tensor<double>({1, 2}, {std::log(1.0), std::log(3.0)}));
  Tape<double> tape;
  auto y = ps8::softmax_rows(tape, x);
  EXPECT_NEAR(y.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.75, 1e-15);
}

TEST(SoftmaxRows, RowsSumToOneAndAreShiftInvariant) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<float>({6, 8}, rng, -10, 10);
    // Snap to a 2^-10 grid so that adding 100 is exact in float.
    for (float& v : x.data()) v = std::round(v * 1024.0f) / 1024.0f;
    auto shifted = x;
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 8; ++c) shifted(r, c) += 100.0f;
    auto p = ps8::softmax_rows(no_grad(), Var<float>(x));
    auto q = ps8::softmax_rows(no_grad(), Var<float>(shifted));
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_GE(p.value()(r, c), 0.0f);
        EXPECT_NEAR(p.value()(r, c), q.value()(r, c), 1e-6);
        s += p.value()(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(MaskedCrossEntropy, Examples) {
  std::vector<std::int32_t> labels{2, 5};
  std::vector<std::uint8_t> all{1, 1};
  Tensor<float> perfect({2, 8}, 0.0f);
  perfect(0, 2) = 1.0f;
  perfect(1, 5) = 1.0f;
  EXPECT_NEAR(ps8::masked_cross_entropy(no_grad(), Var<float>(perfect), labels, all).value()[0], 0.0, 1e-7);

  auto uniform = ps8::masked_cross_entropy(no_grad(), Var<float>(Tensor<float>({2, 8}, 0.125f)), labels, all);
  EXPECT_NEAR(uniform.value()[0], std::log(8.0), 1e-6);

  Tensor<float> half = perfect;
  for (std::size_t c = 0; c < 8; ++c) half(1, c) = c == 0 ? 1.0f : 0.0f;
  std::vector<std::uint8_t> first_only{1, 0};
  EXPECT_NEAR(ps8::masked_cross_entropy(no_grad(), Var<float>(half), labels, first_only).value()[0], 0.0, 1e-7);

  std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(ps8::masked_cross_entropy(no_grad(), Var<float>(perfect), labels, none), ps8::ValidationError);
}

TEST(MaskedCrossEntropy, IgnoresMaskedOutPositionsExactly) {
  std::mt19937_64 rng(12);
  std::vector<std::int32_t> labels{1, 8, 3, 0};
  std::vector<std::uint8_t> mask{1, 0, 1, 0};
  for (int trial = 0; trial < 20; ++trial) {
    auto a = ps8::softmax_rows(no_grad(), Var<float>(random_tensor<float>({4, 8}, rng)));
    Tensor<float> b = a.value();
    for (std::size_t c = 0; c < 8; ++c) {
      b(1, c) = static_cast<float>(rng() % 1000) - 500.0f;
      b(3, c) = std::numeric_limits<float>::quiet_NaN();
    }
    EXPECT_EQ(ps8::masked_cross_entropy(no_grad(), a, labels, mask).value()[0],
              ps8::masked_cross_entropy(no_grad(), Var<float>(b), labels, mask).value()[0]);
  }
}

TEST(Backward, SumGivesOnes) {
  Var<float> x(Tensor<float>({2, 3, 4}, 0.5f), true);
  Tape<float> tape;
  ps8::backward(tape, ps8::sum(tape, x));
  for (float g : x.grad().data()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, ReluSubgradient) {
  Var<float> x(Tensor<float>({2}, {-1, 2}), true);
  Tape<float> tape;
  ps8::backward(tape, ps8::sum(tape, ps8::relu(tape, x)));
  EXPECT_EQ(x.grad(), Tensor<float>({2}, {0, 1}));
  Var<float> z(Tensor<float>({1}, 0.0f), true);
  Tape<float> t2;
  ps8::backward(t2, ps8::sum(t2, ps8::relu(t2, z)));
  EXPECT_EQ(z.grad()[0], 0.0f);
}

TEST(Backward, FanOutContributionsSum) {
  Var<float> x(Tensor<float>({3}, {1, 2, 3}), true);
  Tape<float> tape;
  auto y = ps8::add_residual(tape, x, x);
  ps8::backward(tape, ps8::sum(tape, ps8::add_residual(tape, y, x)));
  for (float g : x.grad().data()) EXPECT_EQ(g, 3.0f);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, RejectsNonScalarLoss) {
  Var<float> x(Tensor<float>({3}, 1.0f), true);
  Tape<float> tape;
  auto y = ps8::relu(tape, x);
  EXPECT_THROW(ps8::backward(tape, y), ps8::ShapeError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Var<float> x(Tensor<float>({2, 3}, 0.5f), true);
  Tape<float> tape;
  auto a = ps8::relu(tape, x);
  auto b = ps8::add_residual(tape, a, x);
  auto c = ps8::sum(tape, b);
  std::vector<const ps8::Node<float>*> produced{x.node()};
  for (const auto& e : tape.entries()) {
    for (const auto* in : e.inputs) EXPECT_NE(std::find(produced.begin(), produced.end(), in), produced.end());
    produced.push_back(e.output.get());
  }
  EXPECT_EQ(tape.size(), 3u);
  (void)c;
}

// Nonlinear scalar readout with fixed random weights and labels, so every
// element of the tensor under test influences the loss differently.
Var<double> readout(Tape<double>& t, const Var<double>& v) {
  std::mt19937_64 rng(77);
  const std::size_t c = v.value().channels(), rows = v.value().rows();
  Var<double> w(random_tensor<double>({c, 8}, rng), false);
  Var<double> b(random_tensor<double>({8}, rng), false);
  std::vector<std::int32_t> labels(rows);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng() % 8);
  std::vector<std::uint8_t> mask(rows, 1);
  return ps8::masked_cross_entropy(t, ps8::softmax_rows(t, ps8::affine(t, v, w, b)), labels, mask);
}

TEST(GradCheck, AffineLayer) {
  std::mt19937_64 rng(21);
  Var<double> x(random_tensor<double>({5, 4}, rng), true, "x");
  Var<double> w(random_tensor<double>({4, 3}, rng), true, "w");
  Var<double> b(random_tensor<double>({3}, rng), true, "b");
  auto r = ps8::grad_check({x, w, b}, [&](Tape<double>& t) { return readout(t, ps8::affine(t, x, w, b)); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_parameter;
}

TEST(GradCheck, ConvAffineSoftmaxCrossEntropyChain) {
  std::mt19937_64 rng(22);
  Var<double> x(random_tensor<double>({4, 2}, rng), true, "x");
  Var<double> w(random_tensor<double>({3, 3, 2}, rng), true, "conv.w");
  Var<double> cb(random_tensor<double>({3}, rng), true, "conv.b");
  Var<double> a(random_tensor<double>({3, 8}, rng), true, "dense.w");
  Var<double> ab(random_tensor<double>({8}, rng), true, "dense.b");
  std::vector<std::int32_t> labels{0, 3, 7, 2};
  std::vector<std::uint8_t> mask{1, 1, 0, 1};
  auto r = ps8::grad_check({x, w, cb, a, ab}, [&](Tape<double>& t) {
    auto h = ps8::affine(t, ps8::conv1d_same(t, x, w, cb), a, ab);
    return ps8::masked_cross_entropy(t, ps8::softmax_rows(t, h), labels, mask);
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter;
}

TEST(GradCheck, ConvolutionAllKernelSizes) {
  std::mt19937_64 rng(24);
  for (std::size_t len : {1u, 3u, 5u, 11u}) {
    Var<double> x(random_tensor<double>({2, 7, 3}, rng), true, "x");
    Var<double> w(random_tensor<double>({4, len, 3}, rng), true, "w");
    Var<double> b(random_tensor<double>({4}, rng), true, "b");
    auto r = ps8::grad_check({x, w, b}, [&](Tape<double>& t) { return readout(t, ps8::conv1d_same(t, x, w, b)); });
    EXPECT_LT(r.max_rel_error, 1e-4) << "L=" << len << " " << r.worst_parameter;
  }
}

TEST(GradCheck, ReluAwayFromKink) {
  std::mt19937_64 rng(25);
  auto t = random_tensor<double>({6, 4}, rng, 0.1, 1.0);
  for (double& v : t.data()) v *= (rng() & 1) ? 1.0 : -1.0;
  Var<double> x(t, true, "x");
  auto r = ps8::grad_check({x}, [&](Tape<double>& tp) { return readout(tp, ps8::relu(tp, x)); });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter;
}

TEST(GradCheck, BatchNormBothModes) {
  std::mt19937_64 rng(26);
  for (Mode mode : {Mode::train, Mode::infer}) {
    Var<double> x(random_tensor<double>({3, 6, 4}, rng), true, "x");
    Var<double> g(random_tensor<double>({4}, rng, 0.5, 1.5), true, "gamma");
    Var<double> b(random_tensor<double>({4}, rng), true, "beta");
    ps8::BatchNormStats<double> stats(4);
    for (std::size_t k = 0; k < 4; ++k) {
      stats.mean[k] = 0.1 * static_cast<double>(k);
      stats.var[k] = 0.5 + static_cast<double>(k);
    }
    auto r = ps8::grad_check({x, g, b}, [&](Tape<double>& t) {
      return readout(t, ps8::batchnorm(t, x, g, b, stats, mode));
    });
    EXPECT_LT(r.max_rel_error, 1e-4) << (mode == Mode::train ? "train " : "infer ") << r.worst_parameter;
  }
}

TEST(GradCheck, StructuralOps) {
  std::mt19937_64 rng(27);
  Var<double> a(random_tensor<double>({5, 3}, rng), true, "a");
  Var<double> b(random_tensor<double>({5, 2}, rng), true, "b");
  Var<double> c(random_tensor<double>({5, 3}, rng), true, "c");
  auto r = ps8::grad_check({a, b, c}, [&](Tape<double>& t) {
    auto cat = ps8::concat_channels(t, {a, b, ps8::add_residual(t, a, c)});
    auto dropped = ps8::dropout(t, cat, 0.3, 42, Mode::train);
    return readout(t, ps8::slice_channels(t, dropped, 1, 7));
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter;
}

TEST(GradCheck, EmbeddingTable) {
  std::mt19937_64 rng(28);
  Tensor<double> onehot({6, 21}, 0.0);
  for (std::size_t r = 0; r < 5; ++r) onehot(r, (r * 7) % 21) = 1.0;  // last row is padding
  Var<double> table(random_tensor<double>({21, 21}, rng), true, "embedding");
  auto r = ps8::grad_check({table}, [&](Tape<double>& t) {
    return readout(t, ps8::embed_sequence(t, Var<double>(onehot), table));
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter;
}

}  // namespace
