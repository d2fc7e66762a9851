#pragma once

// PS8-Net building blocks and the assembled network.
//
//   features -> CONV5 -> CONV5 -> Module A -> SKB2 -> Module B -> SKB2 -> Module C
//            -> FC 512 -> FC 256 -> FC 8 -> softmax       (applied per residue)
//
// A PS8 module runs four convolution series on the same input and
// concatenates them; series 2 and 3 end in three kernel-3 residual blocks.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ps8/kv_text.hpp"
#include "ps8/ops.hpp"

namespace ps8 {

inline constexpr std::size_t kSequenceLength = 700;
inline constexpr std::size_t kAlphabetSize = 21;
inline constexpr std::size_t kInputFeatures = 2 * kAlphabetSize;
inline constexpr std::size_t kNumClasses = 8;
inline constexpr const char* kDefaultLabelOrder = "LBEGIHST";

enum class FeatureSet { both, sequence, profile };

inline const char* to_string(FeatureSet f) {
  switch (f) {
    case FeatureSet::sequence: return "sequence";
    case FeatureSet::profile: return "profile";
    default: return "both";
  }
}

inline FeatureSet parse_feature_set(std::string_view s) {
  if (s == "both") return FeatureSet::both;
  if (s == "sequence") return FeatureSet::sequence;
  if (s == "profile") return FeatureSet::profile;
  throw ConfigError("features must be one of both|sequence|profile, got `" + std::string(s) + "`");
}

inline std::size_t input_width(FeatureSet f) { return f == FeatureSet::both ? kInputFeatures : kAlphabetSize; }

/// Architecture description. Defaults reproduce the published network.
struct NetConfig {
  FeatureSet features = FeatureSet::both;
  std::size_t front_width = 512;
  std::size_t front_kernel = 5;
  std::size_t front_layers = 2;
  std::vector<std::size_t> module_widths{256, 128, 128};
  std::size_t link_width = 128;
  std::size_t link_kernel = 11;
  std::size_t inner_kernel = 3;
  std::size_t inner_blocks = 3;
  std::vector<std::size_t> fc_widths{512, 256};
  double module_dropout = 0.25;
  double fc_dropout = 0.5;
  bool inner_skip = true;
  bool link_skip = true;
  /// When set, a module's width is the total of its four branches instead of
  /// the width of each branch.
  bool width_is_total = false;
  double bn_epsilon = kBatchNormEpsilon;
  double bn_momentum = kBatchNormMomentum;
  std::string label_order = kDefaultLabelOrder;

  std::size_t branch_width(std::size_t module) const {
    const std::size_t h = module_widths.at(module);
    return width_is_total ? std::max<std::size_t>(1, h / 4) : h;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* key) {
      if (v == 0) throw ConfigError(std::string("`") + key + "` must be positive");
    };
    positive(front_width, "front_width");
    positive(front_kernel, "front_kernel");
    positive(front_layers, "front_layers");
    positive(link_width, "link_width");
    positive(link_kernel, "link_kernel");
    positive(inner_kernel, "inner_kernel");
    if (module_widths.empty()) throw ConfigError("`module_widths` needs at least one module");
    for (std::size_t w : module_widths) positive(w, "module_widths");
    for (std::size_t w : fc_widths) positive(w, "fc_widths");
    if (!(module_dropout >= 0 && module_dropout < 1) || !(fc_dropout >= 0 && fc_dropout < 1))
      throw ConfigError("dropout rates must lie in [0,1)");
    if (label_order.size() != kNumClasses) throw ConfigError("`label_order` must have 8 letters");
    for (char c : std::string_view("GHIEBTSL"))
      if (label_order.find(c) == std::string::npos)
        throw ConfigError("`label_order` must be a permutation of GHIEBTSL, got `" + label_order + "`");
  }

  /// Multiplies every width by `factor` (rounded, at least 1).
  NetConfig scaled(double factor) const {
    auto s = [factor](std::size_t w) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * factor)));
    };
    NetConfig out = *this;
    out.front_width = s(front_width);
    out.link_width = s(link_width);
    for (auto& w : out.module_widths) w = s(w);
    for (auto& w : out.fc_widths) w = s(w);
    return out;
  }

  KeyValues to_key_values() const {
    return {{"features", to_string(features)},
            {"front_width", std::to_string(front_width)},
            {"front_kernel", std::to_string(front_kernel)},
            {"front_layers", std::to_string(front_layers)},
            {"module_widths", format_width_list(module_widths)},
            {"link_width", std::to_string(link_width)},
            {"link_kernel", std::to_string(link_kernel)},
            {"inner_kernel", std::to_string(inner_kernel)},
            {"inner_blocks", std::to_string(inner_blocks)},
            {"fc_widths", format_width_list(fc_widths)},
            {"module_dropout", format_double(module_dropout)},
            {"fc_dropout", format_double(fc_dropout)},
            {"inner_skip", inner_skip ? "true" : "false"},
            {"link_skip", link_skip ? "true" : "false"},
            {"width_is_total", width_is_total ? "true" : "false"},
            {"bn_epsilon", format_double(bn_epsilon)},
            {"bn_momentum", format_double(bn_momentum)},
            {"label_order", label_order}};
  }

  /// Applies recognized keys and returns true if `key` was one of them.
  bool apply(const std::string& key, const std::string& v) {
    auto size = [&](std::size_t& dst) {
      const auto n = parse_int(key, v);
      if (n <= 0) throw ConfigError("`" + key + "` must be positive, got " + v);
      dst = static_cast<std::size_t>(n);
    };
    if (key == "features") features = parse_feature_set(v);
    else if (key == "front_width") size(front_width);
    else if (key == "front_kernel") size(front_kernel);
    else if (key == "front_layers") size(front_layers);
    else if (key == "module_widths") module_widths = parse_width_list(key, v);
    else if (key == "link_width") size(link_width);
    else if (key == "link_kernel") size(link_kernel);
    else if (key == "inner_kernel") size(inner_kernel);
    else if (key == "inner_blocks") {
      const auto n = parse_int(key, v);
      if (n < 0) throw ConfigError("`inner_blocks` must be non-negative");
      inner_blocks = static_cast<std::size_t>(n);
    } else if (key == "fc_widths") fc_widths = v.empty() ? std::vector<std::size_t>{} : parse_width_list(key, v);
    else if (key == "module_dropout") module_dropout = parse_double(key, v);
    else if (key == "fc_dropout") fc_dropout = parse_double(key, v);
    else if (key == "inner_skip") inner_skip = parse_bool(key, v);
    else if (key == "link_skip") link_skip = parse_bool(key, v);
    else if (key == "width_is_total") width_is_total = parse_bool(key, v);
    else if (key == "bn_epsilon") bn_epsilon = parse_double(key, v);
    else if (key == "bn_momentum") bn_momentum = parse_double(key, v);
    else if (key == "label_order") label_order = v;
    else return false;
    return true;
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Module widths for an ablation with `count` modules: the first module is
/// the wide one, every later module uses the narrow width.
inline std::vector<std::size_t> module_widths_for_count(std::size_t count, std::size_t wide = 256,
                                                        std::size_t narrow = 128) {
  if (count == 0) throw ConfigError("module count must be positive");
  std::vector<std::size_t> w(count, narrow);
  w[0] = wide;
  return w;
}

template <class T>
struct ConvLayer {
  Var<T> weight;  // [Cout, L, Cin]
  Var<T> bias;    // [Cout]
};

template <class T>
struct NormLayer {
  Var<T> gamma;
  Var<T> beta;
  BatchNormStats<T> stats;
};

template <class T>
struct SkBlock {
  std::size_t kernel = 3;
  std::optional<ConvLayer<T>> projection;
  std::array<ConvLayer<T>, 3> conv;
  std::array<NormLayer<T>, 3> norm;
};

template <class T>
struct DeepSeries {
  ConvLayer<T> conv1;
  ConvLayer<T> conv3;
  std::vector<SkBlock<T>> blocks;
};

template <class T>
struct Ps8Module {
  std::size_t width = 0;
  double dropout = 0.25;
  ConvLayer<T> s1_conv3, s1_conv1;
  DeepSeries<T> s2, s3;
  ConvLayer<T> s4_conv3, s4_conv1;

  std::size_t output_width() const { return 4 * width; }
};

template <class T>
struct DenseLayer {
  Var<T> weight;  // [Cin, Cout]
  Var<T> bias;
};

template <class T>
struct Ps8Net {
  NetConfig config;
  Var<T> embedding;  // [21, 21]
  std::vector<ConvLayer<T>> front;
  std::vector<Ps8Module<T>> modules;
  std::vector<SkBlock<T>> links;  // links[i] sits between modules i and i+1
  std::vector<DenseLayer<T>> head;
};

// ---------------------------------------------------------------------------
// Parameter traversal. The visiting order is fixed and defines the order in
// which parameters are initialized, optimized and serialized.

namespace detail {

template <class T, class P, class B>
void visit_conv(ConvLayer<T>& c, const std::string& prefix, P& param, B&) {
  param(prefix + ".weight", c.weight);
  param(prefix + ".bias", c.bias);
}

template <class T, class P, class B>
void visit_norm(NormLayer<T>& n, const std::string& prefix, P& param, B& buffer) {
  param(prefix + ".gamma", n.gamma);
  param(prefix + ".beta", n.beta);
  buffer(prefix + ".running_mean", n.stats.mean);
  buffer(prefix + ".running_var", n.stats.var);
}

template <class T, class P, class B>
void visit_block(SkBlock<T>& s, const std::string& prefix, P& param, B& buffer) {
  if (s.projection) visit_conv(*s.projection, prefix + ".projection", param, buffer);
  for (std::size_t i = 0; i < 3; ++i) {
    visit_conv(s.conv[i], prefix + ".conv." + std::to_string(i), param, buffer);
    visit_norm(s.norm[i], prefix + ".norm." + std::to_string(i), param, buffer);
  }
}

template <class T, class P, class B>
void visit_series(DeepSeries<T>& s, const std::string& prefix, P& param, B& buffer) {
  visit_conv(s.conv1, prefix + ".conv1", param, buffer);
  visit_conv(s.conv3, prefix + ".conv3", param, buffer);
  for (std::size_t i = 0; i < s.blocks.size(); ++i)
    visit_block(s.blocks[i], prefix + ".block." + std::to_string(i), param, buffer);
}

}  // namespace detail

/// Calls param(name, Var&) for every trainable tensor and buffer(name,
/// Tensor&) for every batch-norm running statistic.
template <class T, class P, class B>
void visit_tensors(Ps8Net<T>& net, P&& param, B&& buffer) {
  param(std::string("embedding"), net.embedding);
  for (std::size_t i = 0; i < net.front.size(); ++i)
    detail::visit_conv(net.front[i], "front." + std::to_string(i), param, buffer);
  for (std::size_t m = 0; m < net.modules.size(); ++m) {
    auto& mod = net.modules[m];
    const std::string p = "module." + std::to_string(m);
    detail::visit_conv(mod.s1_conv3, p + ".series1.conv3", param, buffer);
    detail::visit_conv(mod.s1_conv1, p + ".series1.conv1", param, buffer);
    detail::visit_series(mod.s2, p + ".series2", param, buffer);
    detail::visit_series(mod.s3, p + ".series3", param, buffer);
    detail::visit_conv(mod.s4_conv3, p + ".series4.conv3", param, buffer);
    detail::visit_conv(mod.s4_conv1, p + ".series4.conv1", param, buffer);
    if (m < net.links.size()) detail::visit_block(net.links[m], "link." + std::to_string(m), param, buffer);
  }
  for (std::size_t i = 0; i < net.head.size(); ++i) {
    param("head." + std::to_string(i) + ".weight", net.head[i].weight);
    param("head." + std::to_string(i) + ".bias", net.head[i].bias);
  }
}

template <class T, class P>
void visit_parameters(Ps8Net<T>& net, P&& param) {
  visit_tensors(net, std::forward<P>(param), [](const std::string&, Tensor<T>&) {});
}

template <class T>
std::vector<std::pair<std::string, Var<T>>> named_parameters(Ps8Net<T>& net) {
  std::vector<std::pair<std::string, Var<T>>> out;
  visit_parameters(net, [&](const std::string& n, Var<T>& v) { out.emplace_back(n, v); });
  return out;
}

template <class T>
std::size_t parameter_count(Ps8Net<T>& net) {
  std::size_t n = 0;
  visit_parameters(net, [&](const std::string&, Var<T>& v) { n += v.value().size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Construction.

namespace detail {

template <class T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Var<T> normal(Shape shape, double variance, const std::string& name) {
    std::normal_distribution<double> dist(0.0, std::sqrt(variance));
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(dist(rng_));
    return Var<T>(std::move(t), true, name);
  }

  Var<T> constant(Shape shape, double value, const std::string& name) {
    return Var<T>(Tensor<T>(std::move(shape), static_cast<T>(value)), true, name);
  }

  ConvLayer<T> conv(std::size_t cin, std::size_t cout, std::size_t kernel, const std::string& name) {
    return {normal({cout, kernel, cin}, 2.0 / static_cast<double>(kernel * cin), name + ".weight"),
            constant({cout}, 0.0, name + ".bias")};
  }

  SkBlock<T> block(std::size_t cin, std::size_t cout, std::size_t kernel, const std::string& name) {
    SkBlock<T> s;
    s.kernel = kernel;
    if (cin != cout) s.projection = conv(cin, cout, 1, name + ".projection");
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = std::to_string(i);
      s.conv[i] = conv(cout, cout, kernel, name + ".conv." + n);
      s.norm[i].gamma = constant({cout}, 1.0, name + ".norm." + n + ".gamma");
      s.norm[i].beta = constant({cout}, 0.0, name + ".norm." + n + ".beta");
      s.norm[i].stats = BatchNormStats<T>(cout);
    }
    return s;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace detail

/// Builds a network with freshly initialized parameters. Identical
/// (config, seed) pairs give bit-identical parameters.
template <class T>
Ps8Net<T> build_ps8net(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  detail::Initializer<T> init(seed);
  Ps8Net<T> net;
  net.config = config;

  {
    Tensor<T> e(Shape{kAlphabetSize, kAlphabetSize});
    std::normal_distribution<double> noise(0.0, 0.01);
    for (std::size_t i = 0; i < kAlphabetSize; ++i)
      for (std::size_t j = 0; j < kAlphabetSize; ++j)
        e(i, j) = static_cast<T>((i == j ? 1.0 : 0.0) + noise(init.rng()));
    net.embedding = Var<T>(std::move(e), true, "embedding");
  }

  std::size_t width = input_width(config.features);
  for (std::size_t i = 0; i < config.front_layers; ++i) {
    net.front.push_back(init.conv(width, config.front_width, config.front_kernel, "front." + std::to_string(i)));
    width = config.front_width;
  }

  for (std::size_t m = 0; m < config.module_widths.size(); ++m) {
    const std::size_t h = config.branch_width(m);
    const std::string p = "module." + std::to_string(m);
    Ps8Module<T> mod;
    mod.width = h;
    mod.dropout = config.module_dropout;
    mod.s1_conv3 = init.conv(width, h, 3, p + ".series1.conv3");
    mod.s1_conv1 = init.conv(h, h, 1, p + ".series1.conv1");
    for (auto* series : {&mod.s2, &mod.s3}) {
      const std::string sp = p + (series == &mod.s2 ? ".series2" : ".series3");
      series->conv1 = init.conv(width, h, 1, sp + ".conv1");
      series->conv3 = init.conv(h, h, 3, sp + ".conv3");
      if (config.inner_skip)
        for (std::size_t b = 0; b < config.inner_blocks; ++b)
          series->blocks.push_back(init.block(h, h, config.inner_kernel, sp + ".block." + std::to_string(b)));
    }
    mod.s4_conv3 = init.conv(width, h, 3, p + ".series4.conv3");
    mod.s4_conv1 = init.conv(h, h, 1, p + ".series4.conv1");
    width = mod.output_width();
    net.modules.push_back(std::move(mod));
    if (config.link_skip && m + 1 < config.module_widths.size()) {
      net.links.push_back(init.block(width, config.link_width, config.link_kernel, "link." + std::to_string(m)));
      width = config.link_width;
    }
  }

  for (std::size_t i = 0; i <= config.fc_widths.size(); ++i) {
    const bool last = i == config.fc_widths.size();
    const std::size_t out = last ? kNumClasses : config.fc_widths[i];
    const std::string p = "head." + std::to_string(i);
    net.head.push_back({init.normal({width, out}, (last ? 1.0 : 2.0) / static_cast<double>(width), p + ".weight"),
                        init.constant({out}, 0.0, p + ".bias")});
    width = out;
  }
  return net;
}

// ---------------------------------------------------------------------------
// Forward passes.

template <class T>
Var<T> conv_relu(Tape<T>& tape, const Var<T>& x, const ConvLayer<T>& c) {
  return relu(tape, conv1d_same(tape, x, c.weight, c.bias));
}

/// Residual block: conv-BN-ReLU, conv-BN-ReLU, conv-BN, add the (projected)
/// input, ReLU. The projection, when present, feeds both paths.
template <class T>
Var<T> sk_block_forward(Tape<T>& tape, SkBlock<T>& block, const Var<T>& x, Mode mode,
                        double eps = kBatchNormEpsilon, double momentum = kBatchNormMomentum) {
  const Var<T> identity =
      block.projection ? conv1d_same(tape, x, block.projection->weight, block.projection->bias) : x;
  Var<T> h = identity;
  for (std::size_t i = 0; i < 3; ++i) {
    h = conv1d_same(tape, h, block.conv[i].weight, block.conv[i].bias);
    h = batchnorm(tape, h, block.norm[i].gamma, block.norm[i].beta, block.norm[i].stats, mode, eps, momentum);
    if (i < 2) h = relu(tape, h);
  }
  return relu(tape, add_residual(tape, h, identity));
}

template <class T>
Var<T> ps8_module_forward(Tape<T>& tape, Ps8Module<T>& mod, const Var<T>& x, Mode mode, std::uint64_t seed,
                          double eps = kBatchNormEpsilon, double momentum = kBatchNormMomentum) {
  auto deep = [&](DeepSeries<T>& s) {
    Var<T> h = conv_relu(tape, conv_relu(tape, x, s.conv1), s.conv3);
    for (auto& block : s.blocks) h = sk_block_forward(tape, block, h, mode, eps, momentum);
    return h;
  };
  std::vector<Var<T>> parts;
  parts.push_back(conv_relu(tape, conv_relu(tape, x, mod.s1_conv3), mod.s1_conv1));
  parts.push_back(deep(mod.s2));
  parts.push_back(deep(mod.s3));
  parts.push_back(conv_relu(tape, conv_relu(tape, x, mod.s4_conv3), mod.s4_conv1));
  return dropout(tape, concat_channels(tape, parts), mod.dropout, seed, mode);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t site) {
  return detail::splitmix64(seed ^ detail::splitmix64(site + 0x51ed2701ULL));
}

/// Maps a [B, T, 42] feature batch ([sequence one-hot | profile]) to
/// per-residue class probabilities [B, T, 8].
template <class T>
Var<T> ps8net_forward(Tape<T>& tape, Ps8Net<T>& net, const Var<T>& batch, Mode mode, std::uint64_t seed) {
  if (batch.shape().size() != 3 || batch.shape()[2] != kInputFeatures)
    throw ShapeError("ps8net_forward: expected [B,T,42] features, got " + to_string(batch.shape()));
  const NetConfig& cfg = net.config;
  Var<T> h;
  switch (cfg.features) {
    case FeatureSet::both:
      h = concat_channels(tape, {embed_sequence(tape, slice_channels(tape, batch, 0, kAlphabetSize), net.embedding),
                                 slice_channels(tape, batch, kAlphabetSize, kInputFeatures)});
      break;
    case FeatureSet::sequence:
      h = embed_sequence(tape, slice_channels(tape, batch, 0, kAlphabetSize), net.embedding);
      break;
    case FeatureSet::profile:
      h = slice_channels(tape, batch, kAlphabetSize, kInputFeatures);
      break;
  }
  for (const auto& layer : net.front) h = conv_relu(tape, h, layer);
  for (std::size_t m = 0; m < net.modules.size(); ++m) {
    h = ps8_module_forward(tape, net.modules[m], h, mode, derive_seed(seed, m), cfg.bn_epsilon, cfg.bn_momentum);
    if (m < net.links.size()) h = sk_block_forward(tape, net.links[m], h, mode, cfg.bn_epsilon, cfg.bn_momentum);
  }
  for (std::size_t i = 0; i < net.head.size(); ++i) {
    h = affine(tape, h, net.head[i].weight, net.head[i].bias);
    if (i + 1 < net.head.size())
      h = dropout(tape, relu(tape, h), cfg.fc_dropout, derive_seed(seed, 1000 + i), mode);
  }
  return softmax_rows(tape, h);
}

/// Positions on either side of a residue that can influence its output.
inline std::size_t receptive_radius(const NetConfig& cfg) {
  auto r = [](std::size_t k) { return k / 2; };
  std::size_t total = cfg.front_layers * r(cfg.front_kernel);
  const std::size_t deep = r(1) + r(3) + (cfg.inner_skip ? cfg.inner_blocks * 3 * r(cfg.inner_kernel) : 0);
  total += cfg.module_widths.size() * std::max<std::size_t>(deep, r(3));
  if (cfg.link_skip && cfg.module_widths.size() > 1) total += (cfg.module_widths.size() - 1) * 3 * r(cfg.link_kernel);
  return total;
}

}  // namespace ps8
