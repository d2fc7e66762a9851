#pragma once

// Differentiable operations. Every op takes the tape first; when the tape is
// recording and any input requires a gradient, the op appends its backward
// rule. Activations are laid out [batch, time, channels] (rank 2 means a
// single sequence).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ps8/autograd.hpp"
#include "ps8/gemm.hpp"
#include "ps8/tensor.hpp"

namespace ps8 {

enum class Mode { train, infer };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kProbabilityFloor = 1e-12;

namespace detail {

struct SeqDims {
  std::size_t batch, time, channels;
};

inline SeqDims seq_dims(const Shape& s, const char* op) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected [T,C] or [B,T,C], got " + to_string(s));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Uniform [0,1) draw that depends only on (seed, index).
inline double hashed_uniform(std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t h = splitmix64(splitmix64(seed) ^ (index * 0xd6e8feb86659fd93ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

}  // namespace detail

/// Elementwise sum of a and b. Used for the identity path of residual blocks.
template <class T>
Var<T> add_residual(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add_residual");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  Var<T> y = tape.make_output(std::move(out), a, b);
  if (y.requires_grad()) {
    tape.record("add_residual", {a.node(), b.node()}, y, [a, b, y]() mutable {
      const Tensor<T>& g = y.grad();
      if (a.requires_grad()) detail::add_into(a.grad_buffer(), g);
      if (b.requires_grad()) detail::add_into(b.grad_buffer(), g);
    });
  }
  return y;
}

template <class T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  Var<T> y = tape.make_output(std::move(out), x);
  if (y.requires_grad()) {
    // y > 0 exactly where x > 0; the derivative at 0 is taken as 0.
    tape.record("relu", {x.node()}, y, [x, y]() mutable {
      if (!x.requires_grad()) return;
      const T* g = y.grad().ptr();
      const T* yv = y.value().ptr();
      T* gx = x.grad_buffer().ptr();
      for (std::size_t i = 0, n = y.value().size(); i < n; ++i)
        if (yv[i] > T{0}) gx[i] += g[i];
    });
  }
  return y;
}

/// Scalar sum of all elements.
template <class T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  T s{};
  for (T v : x.value().data()) s += v;
  Var<T> y = tape.make_output(Tensor<T>::scalar(s), x);
  if (y.requires_grad()) {
    tape.record("sum", {x.node()}, y, [x, y]() mutable {
      const T g = y.grad()[0];
      for (T& v : x.grad_buffer().data()) v += g;
    });
  }
  return y;
}

/// Same-length 1D convolution. kernels is [Cout, L, Cin], bias is [Cout].
/// The input is zero-padded with floor(L/2) rows at the head and
/// floor((L-1)/2) rows at the tail, so the output keeps the input length.
template <class T>
Var<T> conv1d_same(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias) {
  const auto d = detail::seq_dims(x.shape(), "conv1d_same");
  const Shape& ks = kernels.shape();
  if (ks.size() != 3) throw ShapeError("conv1d_same: kernels must be [Cout,L,Cin], got " + to_string(ks));
  const std::size_t cout = ks[0], len = ks[1], cin = ks[2];
  if (cin != d.channels) {
    throw ShapeError("conv1d_same: input has " + std::to_string(d.channels) + " channels but kernels expect " +
                     std::to_string(cin) + " (input " + to_string(x.shape()) + ", kernels " + to_string(ks) + ")");
  }
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv1d_same: bias must be [" + std::to_string(cout) + "], got " + to_string(bias.shape()));

  const std::size_t head = len / 2;
  const std::size_t padded_len = d.time + len - 1;
  const std::size_t window = len * cin;

  // [L*Cin, Cout] so each output row is a window of the padded input times this matrix.
  std::vector<T> wt(window * cout);
  const T* w = kernels.value().ptr();
  for (std::size_t k = 0; k < cout; ++k)
    for (std::size_t p = 0; p < window; ++p) wt[p * cout + k] = w[k * window + p];

  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor<T> out(out_shape);
  std::vector<T> padded(padded_len * cin, T{});
  for (std::size_t b = 0; b < d.batch; ++b) {
    const T* xb = x.value().ptr() + b * d.time * cin;
    std::copy(xb, xb + d.time * cin, padded.begin() + head * cin);
    T* yb = out.ptr() + b * d.time * cout;
    for (std::size_t t = 0; t < d.time; ++t) std::copy(bias.value().ptr(), bias.value().ptr() + cout, yb + t * cout);
    detail::gemm_acc(d.time, cout, window, padded.data(), cin, std::size_t{1}, wt.data(), cout, yb, cout);
  }

  Var<T> y = tape.make_output(std::move(out), x, kernels, bias);
  if (y.requires_grad()) {
    tape.record("conv1d_same", {x.node(), kernels.node(), bias.node()}, y,
                [x, kernels, bias, y, d, cout, len, cin, head, padded_len, window]() mutable {
                  const Tensor<T>& g = y.grad();
                  if (bias.requires_grad()) {
                    T* gb = bias.grad_buffer().ptr();
                    for (std::size_t r = 0, n = g.rows(); r < n; ++r)
                      for (std::size_t k = 0; k < cout; ++k) gb[k] += g[r * cout + k];
                  }
                  std::vector<T> pad(padded_len * cin, T{});
                  if (kernels.requires_grad()) {
                    std::vector<T> gwt(window * cout, T{});
                    for (std::size_t b = 0; b < d.batch; ++b) {
                      const T* xb = x.value().ptr() + b * d.time * cin;
                      std::copy(xb, xb + d.time * cin, pad.begin() + head * cin);
                      detail::gemm_acc(window, cout, d.time, pad.data(), std::size_t{1}, cin,
                                       g.ptr() + b * d.time * cout, cout, gwt.data(), cout);
                    }
                    T* gw = kernels.grad_buffer().ptr();
                    for (std::size_t k = 0; k < cout; ++k)
                      for (std::size_t p = 0; p < window; ++p) gw[k * window + p] += gwt[p * cout + k];
                  }
                  if (x.requires_grad()) {
                    T* gx = x.grad_buffer().ptr();
                    const T* w = kernels.value().ptr();
                    for (std::size_t b = 0; b < d.batch; ++b) {
                      std::fill(pad.begin(), pad.end(), T{});
                      const T* gy = g.ptr() + b * d.time * cout;
                      for (std::size_t j = 0; j < len; ++j)
                        detail::gemm_acc(d.time, cin, cout, gy, cout, std::size_t{1}, w + j * cin, window,
                                         pad.data() + j * cin, cin);
                      T* gxb = gx + b * d.time * cin;
                      const T* src = pad.data() + head * cin;
                      for (std::size_t i = 0, n = d.time * cin; i < n; ++i) gxb[i] += src[i];
                    }
                  }
                });
  }
  return y;
}

/// Position-wise dense layer: x[..., Cin] * W[Cin, Cout] + b[Cout].
template <class T>
Var<T> affine(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || x.shape().empty() || ws[0] != x.value().channels()) {
    throw ShapeError("affine: cannot multiply " + to_string(x.shape()) + " by " + to_string(ws));
  }
  const std::size_t cin = ws[0], cout = ws[1], rows = x.value().rows();
  if (bias.shape() != Shape{cout})
    throw ShapeError("affine: bias must be [" + std::to_string(cout) + "], got " + to_string(bias.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias.value().ptr(), bias.value().ptr() + cout, out.ptr() + r * cout);
  detail::gemm_acc(rows, cout, cin, x.value().ptr(), cin, std::size_t{1}, weight.value().ptr(), cout, out.ptr(),
                   cout);
  Var<T> y = tape.make_output(std::move(out), x, weight, bias);
  if (y.requires_grad()) {
    tape.record("affine", {x.node(), weight.node(), bias.node()}, y, [x, weight, bias, y, cin, cout, rows]() mutable {
      const Tensor<T>& g = y.grad();
      if (bias.requires_grad()) {
        T* gb = bias.grad_buffer().ptr();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < cout; ++k) gb[k] += g[r * cout + k];
      }
      if (weight.requires_grad()) {
        detail::gemm_acc(cin, cout, rows, x.value().ptr(), std::size_t{1}, cin, g.ptr(), cout,
                         weight.grad_buffer().ptr(), cout);
      }
      if (x.requires_grad()) {
        std::vector<T> wt(cout * cin);
        const T* w = weight.value().ptr();
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t k = 0; k < cout; ++k) wt[k * cin + c] = w[c * cout + k];
        detail::gemm_acc(rows, cin, cout, g.ptr(), cout, std::size_t{1}, wt.data(), cin, x.grad_buffer().ptr(), cin);
      }
    });
  }
  return y;
}

/// Row-wise softmax over the last axis, computed after subtracting the row max.
template <class T>
Var<T> softmax_rows(Tape<T>& tape, const Var<T>& x) {
  const std::size_t c = x.value().channels(), rows = x.value().rows();
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.ptr() + r * c;
    const T mx = *std::max_element(row, row + c);
    T total{};
    for (std::size_t k = 0; k < c; ++k) {
      row[k] = std::exp(row[k] - mx);
      total += row[k];
    }
    for (std::size_t k = 0; k < c; ++k) row[k] /= total;
  }
  Var<T> y = tape.make_output(std::move(out), x);
  if (y.requires_grad()) {
    tape.record("softmax_rows", {x.node()}, y, [x, y, c, rows]() mutable {
      if (!x.requires_grad()) return;
      const T* g = y.grad().ptr();
      const T* p = y.value().ptr();
      T* gx = x.grad_buffer().ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot{};
        for (std::size_t k = 0; k < c; ++k) dot += g[r * c + k] * p[r * c + k];
        for (std::size_t k = 0; k < c; ++k) gx[r * c + k] += p[r * c + k] * (g[r * c + k] - dot);
      }
    });
  }
  return y;
}

/// Mean of -ln(p[label]) over positions whose mask is set. Masked-out
/// positions are never read.
template <class T>
Var<T> masked_cross_entropy(Tape<T>& tape, const Var<T>& probs, std::span<const std::int32_t> labels,
                            std::span<const std::uint8_t> mask) {
  const std::size_t c = probs.value().channels(), rows = probs.value().rows();
  if (labels.size() != rows || mask.size() != rows) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(rows) + " positions but " +
                     std::to_string(labels.size()) + " labels and " + std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw ValidationError("masked_cross_entropy: label " + std::to_string(labels[r]) + " out of range at position " +
                            std::to_string(r));
    ++count;
  }
  if (count == 0) throw ValidationError("masked_cross_entropy: mask selects no positions");

  const T floor = static_cast<T>(kProbabilityFloor);
  double total = 0.0;
  const T* p = probs.value().ptr();
  for (std::size_t r = 0; r < rows; ++r)
    if (mask[r]) total -= std::log(static_cast<double>(std::max(p[r * c + labels[r]], floor)));
  Var<T> y = tape.make_output(Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count))), probs);
  if (y.requires_grad()) {
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    tape.record("masked_cross_entropy", {probs.node()}, y,
                [probs, y, lab = std::move(lab), msk = std::move(msk), c, rows, count, floor]() mutable {
                  const T scale = y.grad()[0] / static_cast<T>(count);
                  const T* p = probs.value().ptr();
                  T* gp = probs.grad_buffer().ptr();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!msk[r]) continue;
                    const T v = p[r * c + lab[r]];
                    if (v > floor) gp[r * c + lab[r]] -= scale / v;
                  }
                });
  }
  return y;
}

/// Channel-wise concatenation in list order.
template <class T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat_channels: scalar input");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw ShapeError("concat_channels: leading dimensions differ, " + to_string(first) + " vs " + to_string(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor<T> out(out_shape);
  const std::size_t rows = out.rows();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const T* src = parts[i].value().ptr();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(src + r * widths[i], src + (r + 1) * widths[i], out.ptr() + r * total + offset);
    offset += widths[i];
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  Var<T> y(std::move(out), tape.recording() && any);
  y.node()->leaf = false;
  if (y.requires_grad()) {
    std::vector<const Node<T>*> inputs;
    for (const auto& p : parts) inputs.push_back(p.node());
    tape.record("concat_channels", std::move(inputs), y, [parts, y, widths, rows, total]() mutable {
      const T* g = y.grad().ptr();
      std::size_t offset = 0;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].requires_grad()) {
          T* gp = parts[i].grad_buffer().ptr();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < widths[i]; ++k) gp[r * widths[i] + k] += g[r * total + offset + k];
        }
        offset += widths[i];
      }
    });
  }
  return y;
}

/// Channels [begin, end) of the last axis.
template <class T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t c = x.value().channels(), rows = x.value().rows();
  if (x.shape().empty() || begin >= end || end > c)
    throw ShapeError("slice_channels: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     to_string(x.shape()));
  const std::size_t w = end - begin;
  Shape out_shape = x.shape();
  out_shape.back() = w;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(x.value().ptr() + r * c + begin, x.value().ptr() + r * c + end, out.ptr() + r * w);
  Var<T> y = tape.make_output(std::move(out), x);
  if (y.requires_grad()) {
    tape.record("slice_channels", {x.node()}, y, [x, y, begin, w, c, rows]() mutable {
      const T* g = y.grad().ptr();
      T* gx = x.grad_buffer().ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < w; ++k) gx[r * c + begin + k] += g[r * w + k];
    });
  }
  return y;
}

/// Inverted dropout. Identity (the same variable) in infer mode or at rate 0;
/// in train mode the keep mask depends only on (seed, element index).
template <class T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double rate, std::uint64_t seed, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0,1)");
  if (mode == Mode::infer || rate == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  const std::size_t n = x.value().size();
  std::vector<std::uint8_t> keep(n);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    keep[i] = detail::hashed_uniform(seed, i) >= rate;
    out[i] = keep[i] ? out[i] * scale : T{0};
  }
  Var<T> y = tape.make_output(std::move(out), x);
  if (y.requires_grad()) {
    tape.record("dropout", {x.node()}, y, [x, y, keep = std::move(keep), scale, n]() mutable {
      const T* g = y.grad().ptr();
      T* gx = x.grad_buffer().ptr();
      for (std::size_t i = 0; i < n; ++i)
        if (keep[i]) gx[i] += g[i] * scale;
    });
  }
  return y;
}

/// Running statistics of one batch-normalization layer.
template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;

  explicit BatchNormStats(std::size_t channels = 1) : mean(Shape{channels}, T{0}), var(Shape{channels}, T{1}) {}
};

/// Per-channel batch normalization over all leading axes.
/// Train mode normalizes with the batch's biased variance and folds the
/// batch mean and unbiased variance into the running statistics; infer mode
/// reads the running statistics only.
template <class T>
Var<T> batchnorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                 Mode mode, double eps = kBatchNormEpsilon, double momentum = kBatchNormMomentum) {
  const std::size_t c = x.value().channels(), n = x.value().rows();
  if (x.shape().empty() || gamma.shape() != Shape{c} || beta.shape() != Shape{c} || stats.mean.shape() != Shape{c})
    throw ShapeError("batchnorm: parameters do not match input " + to_string(x.shape()));

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const T* xv = x.value().ptr();
  if (mode == Mode::train) {
    if (n < 2) throw ShapeError("batchnorm: train mode needs at least 2 samples per channel");
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k) mean[k] += xv[r * c + k];
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const double dv = xv[r * c + k] - mean[k];
        var[k] += dv * dv;
      }
    for (std::size_t k = 0; k < c; ++k) {
      const double biased = var[k] / static_cast<double>(n);
      const double unbiased = var[k] / static_cast<double>(n - 1);
      stats.mean[k] = static_cast<T>(momentum * stats.mean[k] + (1.0 - momentum) * mean[k]);
      stats.var[k] = static_cast<T>(momentum * stats.var[k] + (1.0 - momentum) * unbiased);
      var[k] = biased;
    }
  } else {
    for (std::size_t k = 0; k < c; ++k) {
      mean[k] = stats.mean[k];
      var[k] = stats.var[k];
    }
  }
  std::vector<T> shift(c), inv_std(c);
  for (std::size_t k = 0; k < c; ++k) {
    shift[k] = static_cast<T>(mean[k]);
    inv_std[k] = static_cast<T>(1.0 / std::sqrt(var[k] + eps));
  }
  Tensor<T> out(x.shape());
  const T* gm = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < c; ++k)
      out[r * c + k] = gm[k] * ((xv[r * c + k] - shift[k]) * inv_std[k]) + bt[k];

  Var<T> y = tape.make_output(std::move(out), x, gamma, beta);
  if (y.requires_grad()) {
    tape.record("batchnorm", {x.node(), gamma.node(), beta.node()}, y,
                [x, gamma, beta, y, shift, inv_std, c, n, mode]() mutable {
                  const T* g = y.grad().ptr();
                  const T* xv = x.value().ptr();
                  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < c; ++k) {
                      const double xh = (xv[r * c + k] - shift[k]) * inv_std[k];
                      sum_g[k] += g[r * c + k];
                      sum_gx[k] += g[r * c + k] * xh;
                    }
                  if (gamma.requires_grad()) {
                    T* gg = gamma.grad_buffer().ptr();
                    for (std::size_t k = 0; k < c; ++k) gg[k] += static_cast<T>(sum_gx[k]);
                  }
                  if (beta.requires_grad()) {
                    T* gb = beta.grad_buffer().ptr();
                    for (std::size_t k = 0; k < c; ++k) gb[k] += static_cast<T>(sum_g[k]);
                  }
                  if (!x.requires_grad()) return;
                  const T* gm = gamma.value().ptr();
                  T* gx = x.grad_buffer().ptr();
                  if (mode == Mode::infer) {
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t k = 0; k < c; ++k) gx[r * c + k] += g[r * c + k] * gm[k] * inv_std[k];
                    return;
                  }
                  const double inv_n = 1.0 / static_cast<double>(n);
                  std::vector<T> mean_g(c), mean_gx(c), coef(c);
                  for (std::size_t k = 0; k < c; ++k) {
                    mean_g[k] = static_cast<T>(sum_g[k] * inv_n);
                    mean_gx[k] = static_cast<T>(sum_gx[k] * inv_n);
                    coef[k] = gm[k] * inv_std[k];
                  }
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < c; ++k) {
                      const T xh = (xv[r * c + k] - shift[k]) * inv_std[k];
                      gx[r * c + k] += coef[k] * (g[r * c + k] - mean_g[k] - xh * mean_gx[k]);
                    }
                });
  }
  return y;
}

/// Replaces each one-hot row of `onehot` with the matching row of the
/// embedding table; all-zero (padding) rows stay zero.
template <class T>
Var<T> embed_sequence(Tape<T>& tape, const Var<T>& onehot, const Var<T>& table) {
  const std::size_t symbols = onehot.value().channels(), rows = onehot.value().rows();
  const Shape& ts = table.shape();
  if (onehot.shape().empty() || ts.size() != 2 || ts[0] != symbols)
    throw ShapeError("embed_sequence: one-hot " + to_string(onehot.shape()) + " does not match table " + to_string(ts));
  const std::size_t width = ts[1];
  std::vector<std::int32_t> index(rows, -1);
  const T* oh = onehot.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t s = 0; s < symbols; ++s) {
      const T v = oh[r * symbols + s];
      if (v == T{0}) continue;
      if (v != T{1} || index[r] >= 0)
        throw ValidationError("embed_sequence: row " + std::to_string(r) + " is not a one-hot or all-zero vector");
      index[r] = static_cast<std::int32_t>(s);
    }
  }
  Shape out_shape = onehot.shape();
  out_shape.back() = width;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    if (index[r] >= 0)
      std::copy_n(table.value().ptr() + static_cast<std::size_t>(index[r]) * width, width, out.ptr() + r * width);
  Var<T> y = tape.make_output(std::move(out), table);
  if (y.requires_grad()) {
    tape.record("embed_sequence", {onehot.node(), table.node()}, y,
                [table, y, index = std::move(index), width, rows]() mutable {
                  const T* g = y.grad().ptr();
                  T* gt = table.grad_buffer().ptr();
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (index[r] < 0) continue;
                    T* dst = gt + static_cast<std::size_t>(index[r]) * width;
                    for (std::size_t k = 0; k < width; ++k) dst[k] += g[r * width + k];
                  }
                });
  }
  return y;
}

}  // namespace ps8
