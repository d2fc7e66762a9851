#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "ps8/autograd.hpp"

namespace ps8 {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::size_t elements_checked = 0;
};

/// Compares reverse-mode gradients against central differences.
/// `loss_fn(tape)` must rebuild the loss from `params` each time it is called.
/// The per-element error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8);
/// the result is the maximum over every element of every parameter.
template <class F>
GradCheckResult grad_check(std::vector<Var<double>> params, F&& loss_fn, double step = 1e-3) {
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = loss_fn(tape);
    backward(tape, loss);
  }
  std::vector<Tensor<double>> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : Tensor<double>(p.shape(), 0.0));

  auto evaluate = [&]() {
    Tape<double> tape;
    tape.set_recording(false);
    return loss_fn(tape).value()[0];
  };

  GradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<double>& value = params[i].value();
    for (std::size_t e = 0; e < value.size(); ++e) {
      const double saved = value[e];
      value[e] = saved + step;
      const double up = evaluate();
      value[e] = saved - step;
      const double down = evaluate();
      value[e] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i][e];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.elements_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = params[i].name();
        result.worst_index = e;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

/// Moves a test point away from ReLU kinks, where central differences are
/// meaningless. Each ReLU input is channel-wise additive in a bias (conv,
/// dense) or beta (batch norm, possibly behind a residual add); those offsets
/// are nudged until every ReLU input is at least `margin` from zero. Returns
/// the number of channels adjusted, or throws if the point cannot be fixed.
template <class F>
std::size_t avoid_relu_kinks(const std::vector<Var<double>>& params, F&& loss_fn, double margin = 0.05,
                             std::size_t max_passes = 100000) {
  std::unordered_map<const Node<double>*, Var<double>> by_node;
  for (const auto& p : params) by_node.emplace(p.node(), p);
  std::size_t adjusted = 0;
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    Tape<double> tape;
    loss_fn(tape);
    std::unordered_map<const Node<double>*, const Tape<double>::Entry*> producer;
    for (const auto& e : tape.entries()) producer.emplace(e.output.get(), &e);

    auto offset_of = [&](const Node<double>* node) -> Var<double>* {
      for (int depth = 0; depth < 4; ++depth) {
        auto it = producer.find(node);
        if (it == producer.end()) return nullptr;
        const auto& e = *it->second;
        if (e.kind == "add_residual") {
          node = e.inputs[0];
          continue;
        }
        if (e.kind != "conv1d_same" && e.kind != "affine" && e.kind != "batchnorm") return nullptr;
        auto p = by_node.find(e.inputs[2]);
        return p == by_node.end() ? nullptr : &p->second;
      }
      return nullptr;
    };

    bool changed = false;
    for (const auto& e : tape.entries()) {
      if (e.kind != "relu") continue;
      const Tensor<double>& z = e.inputs[0]->value;
      const std::size_t channels = z.channels(), rows = z.size() / channels;
      Var<double>* offset = nullptr;
      for (std::size_t c = 0; c < channels; ++c) {
        auto ok = [&](double d) {
          for (std::size_t r = 0; r < rows; ++r)
            if (std::abs(z[r * channels + c] + d) < margin) return false;
          return true;
        };
        if (ok(0.0)) continue;
        if (!offset && !(offset = offset_of(e.inputs[0])))
          throw std::logic_error("avoid_relu_kinks: ReLU input has no adjustable offset");
        double best = 0.0;
        bool found = false;
        for (std::size_t r = 0; r < rows; ++r)
          for (double d : {1.25 * margin - z[r * channels + c], -1.25 * margin - z[r * channels + c]})
            if (ok(d) && (!found || std::abs(d) < std::abs(best))) {
              best = d;
              found = true;
            }
        offset->value()[c] += best;
        ++adjusted;
        changed = true;
      }
      if (changed) break;
    }
    if (!changed) return adjusted;
  }
  throw std::runtime_error("avoid_relu_kinks: did not converge");
}

}  // namespace ps8
