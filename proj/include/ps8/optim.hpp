#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ps8/autograd.hpp"
#include "ps8/kv_text.hpp"

namespace ps8 {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam. Moments are kept per parameter, in parameter order.
template <class T>
class Adam {
 public:
  using Named = std::vector<std::pair<std::string, Var<T>>>;

  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update using the accumulated gradients, then clears them.
  /// Parameters without a gradient are treated as having g = 0. Nothing is
  /// modified if any gradient is non-finite.
  void step(const Named& params, double lr) {
    bind(params);
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (T g : p.grad().data())
        if (!std::isfinite(static_cast<double>(g)))
          throw NonFiniteGradient("non-finite gradient in parameter `" + name + "`");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Var<T>& p = params[i].second;
      T* theta = p.node()->value.ptr();
      T* m = m_[i].ptr();
      T* v = v_[i].ptr();
      const T* g = p.has_grad() ? p.grad().ptr() : nullptr;
      for (std::size_t e = 0, n = p.value().size(); e < n; ++e) {
        const double ge = g ? static_cast<double>(g[e]) : 0.0;
        const double me = config_.beta1 * static_cast<double>(m[e]) + (1.0 - config_.beta1) * ge;
        const double ve = config_.beta2 * static_cast<double>(v[e]) + (1.0 - config_.beta2) * ge * ge;
        m[e] = static_cast<T>(me);
        v[e] = static_cast<T>(ve);
        theta[e] = static_cast<T>(static_cast<double>(theta[e]) -
                                  lr * (me / c1) / (std::sqrt(ve / c2) + config_.epsilon));
      }
      p.zero_grad();
    }
  }

  std::uint64_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::vector<Tensor<T>>& first_moments() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return v_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  /// Allocates zero moments for `params` if not yet bound.
  void bind(const Named& params) {
    if (!names_.empty()) {
      if (names_.size() != params.size()) throw std::logic_error("Adam: parameter list changed");
      for (std::size_t i = 0; i < params.size(); ++i)
        if (names_[i] != params[i].first || m_[i].shape() != params[i].second.shape())
          throw std::logic_error("Adam: parameter `" + params[i].first + "` does not match optimizer state");
      return;
    }
    for (const auto& [name, p] : params) {
      names_.push_back(name);
      m_.emplace_back(p.shape(), T{0});
      v_.emplace_back(p.shape(), T{0});
    }
  }

  KeyValues to_key_values() const {
    return {{"adam.beta1", format_double(config_.beta1)},
            {"adam.beta2", format_double(config_.beta2)},
            {"adam.epsilon", format_double(config_.epsilon)},
            {"adam.steps", std::to_string(t_)}};
  }

  void restore(const KeyValues& kv, std::vector<std::string> names, std::vector<Tensor<T>> m,
               std::vector<Tensor<T>> v) {
    config_.beta1 = parse_double("adam.beta1", kv.at("adam.beta1"));
    config_.beta2 = parse_double("adam.beta2", kv.at("adam.beta2"));
    config_.epsilon = parse_double("adam.epsilon", kv.at("adam.epsilon"));
    t_ = parse_uint("adam.steps", kv.at("adam.steps"));
    names_ = std::move(names);
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> m_, v_;
};

/// Cuts the learning rate by `factor` after `patience` consecutive epochs
/// without an improvement of at least `min_delta` in a monitored loss,
/// never going below `floor`.
class PlateauScheduler {
 public:
  struct Config {
    double initial_lr = 2e-4;
    double factor = std::sqrt(0.1);
    std::size_t patience = 7;
    double floor = 0.5e-5;
    double min_delta = 1e-4;
  };

  PlateauScheduler() : PlateauScheduler(Config{}) {}
  explicit PlateauScheduler(Config c) : config_(c), lr_(std::max(c.initial_lr, c.floor)) {}

  /// Records one epoch's monitored value and returns the rate for the next.
  double step(double monitored) {
    if (monitored < best_ - config_.min_delta) {
      best_ = monitored;
      wait_ = 0;
    } else if (++wait_ >= config_.patience) {
      if (lr_ > config_.floor) lr_ = std::max(lr_ * config_.factor, config_.floor);
      wait_ = 0;
    }
    return lr_;
  }

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  std::size_t wait() const noexcept { return wait_; }
  const Config& config() const noexcept { return config_; }

  KeyValues to_key_values() const {
    return {{"sched.lr", format_double(lr_)},
            {"sched.best", format_double(best_)},
            {"sched.wait", std::to_string(wait_)},
            {"sched.initial_lr", format_double(config_.initial_lr)},
            {"sched.factor", format_double(config_.factor)},
            {"sched.patience", std::to_string(config_.patience)},
            {"sched.floor", format_double(config_.floor)},
            {"sched.min_delta", format_double(config_.min_delta)}};
  }

  static PlateauScheduler from_key_values(const KeyValues& kv) {
    auto get = [&](const char* k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw ConfigError(std::string("missing `") + k + "`");
      return it->second;
    };
    Config c;
    c.initial_lr = parse_double("sched.initial_lr", get("sched.initial_lr"));
    c.factor = parse_double("sched.factor", get("sched.factor"));
    c.patience = parse_uint("sched.patience", get("sched.patience"));
    c.floor = parse_double("sched.floor", get("sched.floor"));
    c.min_delta = parse_double("sched.min_delta", get("sched.min_delta"));
    PlateauScheduler s(c);
    s.lr_ = parse_double("sched.lr", get("sched.lr"));
    s.best_ = parse_double("sched.best", get("sched.best"));
    s.wait_ = parse_uint("sched.wait", get("sched.wait"));
    return s;
  }

 private:
  Config config_;
  double lr_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t wait_ = 0;
};

}  // namespace ps8
