#pragma once

// Finite-difference gradient suite: one case per layer type, the composite
// blocks, and a tiny full network in inference mode.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ps8/grad_check.hpp"
#include "ps8/model.hpp"
#include "ps8/ops.hpp"

namespace ps8 {

struct GradCase {
  std::string name;
  GradCheckResult result;
  std::size_t kinks_moved = 0;
  double seconds = 0.0;
};

namespace detail {

inline Tensor<double> uniform_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Fixed-weight linear functional sum(w * v), one weight per element with
// |w| in [0.5, 1]. Linear, so central differences see only the curvature of
// the op under test.
inline Var<double> random_readout(Tape<double>& t, const Var<double>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  Tensor<double> w(v.shape());
  for (double& e : w.data()) e = (rng() & 1) ? u(rng) : -u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * v.value()[i];
  Var<double> y = t.make_output(Tensor<double>::scalar(acc), v);
  if (y.requires_grad())
    t.record("weighted_sum", {v.node()}, y, [v, y, w]() mutable {
      const double g = y.grad()[0];
      Tensor<double>& gv = v.grad_buffer();
      for (std::size_t i = 0; i < w.size(); ++i) gv[i] += g * w[i];
    });
  return y;
}

// Moves parameters off their initial values and gives batch-norm statistics
// non-trivial values.
inline void perturb(Ps8Net<double>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  visit_tensors(
      net, [&](const std::string&, Var<double>& v) { for (double& x : v.value().data()) x = 0.8 * x + 0.2 * u(rng); },
      [&](const std::string& name, Tensor<double>& t) {
        const bool var = name.ends_with("running_var");
        for (double& x : t.data()) x = var ? 1.0 + u(rng) : u(rng);
      });
}

inline std::vector<Var<double>> parameter_vars(Ps8Net<double>& net, const std::string& prefix = {}) {
  std::vector<Var<double>> out;
  for (auto& [n, v] : named_parameters(net))
    if (n.starts_with(prefix)) out.push_back(v);
  return out;
}

inline Tensor<double> protein_features(std::size_t batch, std::size_t time, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> x(Shape{batch, time, kInputFeatures}, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < time; ++t) {
      x(b, t, rng() % kAlphabetSize) = 1.0;
      for (std::size_t k = 0; k < kAlphabetSize; ++k) x(b, t, kAlphabetSize + k) = u(rng);
    }
  return x;
}

}  // namespace detail

/// Network used by the full-network case: every architectural element at
/// width 4.
inline NetConfig gradcheck_net_config() {
  NetConfig c;
  c.front_width = 4;
  c.module_widths = {4, 4, 4};
  c.link_width = 4;
  c.fc_widths = {4, 4};
  c.module_dropout = 0.0;
  c.fc_dropout = 0.0;
  return c;
}

/// Runs every case at central-difference step `step`.
inline std::vector<GradCase> run_gradient_suite(std::uint64_t seed = 1, double step = 1e-3,
                                                const std::function<void(const GradCase&)>& on_case = {}) {
  using detail::random_readout;
  using detail::uniform_tensor;
  std::vector<GradCase> out;
  std::mt19937_64 rng(seed);
  auto run = [&](std::string name, std::vector<Var<double>> params, auto&& loss, bool kinks = false) {
    GradCase c{std::move(name), {}, 0, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    if (kinks) c.kinks_moved = avoid_relu_kinks(params, loss);
    c.result = grad_check(params, loss, step);
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_case) on_case(c);
    out.push_back(std::move(c));
  };
  const std::uint64_t rs = rng();

  for (std::size_t len : {1u, 3u, 5u, 11u}) {
    Var<double> x(uniform_tensor({2, 7, 3}, rng), true, "x");
    Var<double> w(uniform_tensor({4, len, 3}, rng), true, "kernels");
    Var<double> b(uniform_tensor({4}, rng), true, "bias");
    run("conv1d kernel " + std::to_string(len), {x, w, b},
        [=](Tape<double>& t) { return random_readout(t, conv1d_same(t, x, w, b), rs); });
  }
  {
    Var<double> x(uniform_tensor({5, 4}, rng), true, "x");
    Var<double> w(uniform_tensor({4, 3}, rng), true, "weight");
    Var<double> b(uniform_tensor({3}, rng), true, "bias");
    run("affine", {x, w, b}, [=](Tape<double>& t) { return random_readout(t, affine(t, x, w, b), rs); });
  }
  {
    auto v = uniform_tensor({6, 4}, rng, 0.1, 1.0);
    for (double& e : v.data()) e *= (rng() & 1) ? 1.0 : -1.0;
    Var<double> x(v, true, "x");
    run("relu", {x}, [=](Tape<double>& t) { return random_readout(t, relu(t, x), rs); });
  }
  for (Mode mode : {Mode::train, Mode::infer}) {
    Var<double> x(uniform_tensor({3, 6, 4}, rng), true, "x");
    Var<double> g(uniform_tensor({4}, rng, 0.5, 1.5), true, "gamma");
    Var<double> b(uniform_tensor({4}, rng), true, "beta");
    BatchNormStats<double> init(4);
    for (std::size_t k = 0; k < 4; ++k) {
      init.mean[k] = 0.1 * static_cast<double>(k);
      init.var[k] = 0.5 + static_cast<double>(k);
    }
    run(std::string("batchnorm ") + (mode == Mode::train ? "train" : "infer"), {x, g, b}, [=](Tape<double>& t) {
      BatchNormStats<double> stats = init;
      return random_readout(t, batchnorm(t, x, g, b, stats, mode), rs);
    });
  }
  {
    Var<double> x(uniform_tensor({2, 5, 8}, rng, -2.0, 2.0), true, "logits");
    std::vector<std::int32_t> labels(10);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng() % kNumClasses);
    std::vector<std::uint8_t> mask{1, 1, 1, 0, 0, 1, 0, 1, 1, 1};
    run("softmax + masked cross-entropy", {x}, [=](Tape<double>& t) {
      return masked_cross_entropy(t, softmax_rows(t, x), std::span<const std::int32_t>(labels),
                                  std::span<const std::uint8_t>(mask));
    });
  }
  {
    Tensor<double> onehot({6, kAlphabetSize}, 0.0);
    for (std::size_t r = 0; r < 5; ++r) onehot(r, (r * 7) % kAlphabetSize) = 1.0;
    Var<double> table(uniform_tensor({kAlphabetSize, kAlphabetSize}, rng, -0.4, 0.4), true, "embedding");
    run("embedding", {table},
        [=](Tape<double>& t) { return random_readout(t, embed_sequence(t, Var<double>(onehot), table), rs); });
  }
  {
    Var<double> a(uniform_tensor({5, 3}, rng), true, "a");
    Var<double> b(uniform_tensor({5, 2}, rng), true, "b");
    Var<double> c(uniform_tensor({5, 3}, rng), true, "c");
    run("concat + slice + residual add", {a, b, c}, [=](Tape<double>& t) {
      return random_readout(t, slice_channels(t, concat_channels(t, {a, b, add_residual(t, a, c)}), 1, 7), rs);
    });
  }
  {
    Var<double> x(uniform_tensor({6, 5}, rng), true, "x");
    run("dropout (fixed mask)", {x}, [=](Tape<double>& t) { return random_readout(t, dropout(t, x, 0.3, 42, Mode::train), rs); });
  }

  auto net = build_ps8net<double>(gradcheck_net_config(), seed);
  detail::perturb(net, seed + 1);
  {
    auto& block = net.links.front();
    Var<double> x(uniform_tensor({7, 4 * net.config.branch_width(0)}, rng), true, "x");
    std::vector<Var<double>> params = detail::parameter_vars(net, "link.0.");
    params.push_back(x);
    run("skip block", params, [=, &block](Tape<double>& t) {
      return random_readout(t, sk_block_forward(t, block, x, Mode::infer), rs);
    }, true);
  }
  {
    auto& mod = net.modules.front();
    Var<double> x(uniform_tensor({6, net.config.front_width}, rng), true, "x");
    std::vector<Var<double>> params = detail::parameter_vars(net, "module.0.");
    params.push_back(x);
    run("convolution module", params, [=, &mod](Tape<double>& t) {
      return random_readout(t, ps8_module_forward(t, mod, x, Mode::infer, 0), rs);
    }, true);
  }
  {
    const std::size_t time = 5;
    Var<double> x(detail::protein_features(1, time, seed + 2));
    std::vector<std::int32_t> labels(time);
    for (std::size_t t = 0; t < time; ++t) labels[t] = static_cast<std::int32_t>((5 * t + 1) % kNumClasses);
    std::vector<std::uint8_t> mask(time, 1);
    run("full network", detail::parameter_vars(net), [=, &net](Tape<double>& t) {
      return masked_cross_entropy(t, ps8net_forward(t, net, x, Mode::infer, 0), std::span<const std::int32_t>(labels),
                                  std::span<const std::uint8_t>(mask));
    }, true);
  }
  return out;
}

inline std::string format_grad_case(const GradCase& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-32s %8zu elements  max rel err %.3e  (%s)  %.2fs", c.name.c_str(),
                c.result.elements_checked, c.result.max_rel_error, c.result.worst_parameter.c_str(), c.seconds);
  return buf;
}

}  // namespace ps8
