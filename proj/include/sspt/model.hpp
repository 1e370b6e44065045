#pragma once

// Two-layer transformer encoder with learned feature/positional embeddings,
// mean pooling over time, and named fully connected task heads.
//
// Parameters live in a flat ParamSet; every tensor carries a group tag
// ("embedding", "attention-1", "ffn-1", "attention-2", "ffn-2", "head-<name>")
// which the fine-tuning code uses to decide what to freeze.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sspt/ndgrad/graph.hpp"
#include "sspt/ndgrad/tensor.hpp"
#include "sspt/rng.hpp"

namespace sspt::model {

using ndgrad::Graph;
using ndgrad::NodeId;
using ndgrad::Shape;
using ndgrad::Tensor;

inline constexpr std::size_t kEncoderLayers = 2;

enum class Activation { Relu, Gelu };
enum class NormPlacement { Pre, Post };
enum class Pooling { Mean, Last };

struct ModelConfig {
  std::size_t input_width = 10;  // price features plus the mask-indicator channel
  std::size_t lookback = 16;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 128;
  Activation activation = Activation::Relu;
  NormPlacement norm = NormPlacement::Pre;
  Pooling pooling = Pooling::Mean;
};

struct HeadSpec {
  std::string name;
  std::size_t out_dim = 1;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string head_group(std::string_view head) { return "head-" + std::string(head); }
inline bool is_head_group(std::string_view group) { return group.rfind("head-", 0) == 0; }

/// Trunk groups in declaration order.
inline std::vector<std::string> trunk_groups() {
  return {"embedding", "attention-1", "ffn-1", "attention-2", "ffn-2"};
}

template <typename T>
struct ParamSet {
  ModelConfig config;
  std::vector<std::string> names;   // "<group>/<local name>"
  std::vector<std::string> groups;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const noexcept { return tensors.size(); }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw ModelError("no parameter named '" + std::string(name) + "'");
  }

  bool has_head(std::string_view head) const {
    const auto g = head_group(head);
    return std::find(groups.begin(), groups.end(), g) != groups.end();
  }

  std::vector<std::string> head_names() const {
    std::vector<std::string> out;
    for (const auto& g : groups) {
      if (is_head_group(g)) {
        auto h = g.substr(5);
        if (std::find(out.begin(), out.end(), h) == out.end()) out.push_back(h);
      }
    }
    return out;
  }

  std::size_t head_dim(std::string_view head) const {
    return tensors[index_of(head_group(head) + "/w")].dim(1);
  }

  std::size_t count_in_groups(const std::vector<std::string>& gs) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i) {
      if (std::find(gs.begin(), gs.end(), groups[i]) != gs.end()) n += tensors[i].size();
    }
    return n;
  }

  void add(std::string group, std::string local, Tensor<T> t) {
    names.push_back(group + "/" + local);
    groups.push_back(std::move(group));
    tensors.push_back(std::move(t));
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.config = config;
    out.names = names;
    out.groups = groups;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

namespace detail {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
void add_linear(ParamSet<T>& p, const std::string& group, const std::string& name, std::size_t in,
                std::size_t out, Rng& rng, bool zero_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  p.add(group, name + ".w", uniform_tensor<T>({in, out}, bound, rng));
  p.add(group, name + ".b", zero_bias ? Tensor<T>(Shape{out}) : uniform_tensor<T>({out}, bound, rng));
}

template <typename T>
void add_norm(ParamSet<T>& p, const std::string& group, const std::string& name, std::size_t d) {
  p.add(group, name + ".gamma", Tensor<T>(Shape{d}, T(1)));
  p.add(group, name + ".beta", Tensor<T>(Shape{d}));
}

inline void validate(const ModelConfig& cfg) {
  if (cfg.input_width == 0 || cfg.lookback == 0 || cfg.d_model == 0 || cfg.heads == 0 || cfg.ffn_hidden == 0) {
    throw ModelError("model config: all sizes must be positive");
  }
  if (cfg.d_model % cfg.heads != 0) {
    throw ModelError("model config: d_model " + std::to_string(cfg.d_model) + " not divisible by " +
                     std::to_string(cfg.heads) + " heads");
  }
}

}  // namespace detail

/// Appends a freshly initialized head; weights uniform in +-1/sqrt(d_model), bias zero.
template <typename T>
void add_head(ParamSet<T>& p, const HeadSpec& spec, std::uint64_t seed) {
  if (spec.out_dim == 0) throw ModelError("head '" + spec.name + "' needs a positive output width");
  if (p.has_head(spec.name)) throw ModelError("head '" + spec.name + "' already present");
  Rng rng(seed);
  const auto grp = head_group(spec.name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.config.d_model));
  p.add(grp, "w", detail::uniform_tensor<T>({p.config.d_model, spec.out_dim}, bound, rng));
  p.add(grp, "b", Tensor<T>(Shape{spec.out_dim}));
}

template <typename T>
ParamSet<T> init_params(std::uint64_t seed, const ModelConfig& cfg, const std::vector<HeadSpec>& heads) {
  detail::validate(cfg);
  ParamSet<T> p;
  p.config = cfg;
  Rng rng(seed);
  const std::size_t d = cfg.d_model;
  detail::add_linear(p, "embedding", "feature", cfg.input_width, d, rng, false);
  p.add("embedding", "position", detail::uniform_tensor<T>({cfg.lookback, d}, 0.02, rng));
  for (std::size_t l = 1; l <= kEncoderLayers; ++l) {
    const auto attn = "attention-" + std::to_string(l);
    const auto ffn = "ffn-" + std::to_string(l);
    detail::add_norm(p, attn, "norm", d);
    detail::add_linear(p, attn, "qkv", d, 3 * d, rng, false);
    detail::add_linear(p, attn, "out", d, d, rng, false);
    detail::add_norm(p, ffn, "norm", d);
    detail::add_linear(p, ffn, "fc1", d, cfg.ffn_hidden, rng, false);
    detail::add_linear(p, ffn, "fc2", cfg.ffn_hidden, d, rng, false);
  }
  if (cfg.norm == NormPlacement::Pre) detail::add_norm(p, "ffn-2", "final_norm", d);
  for (std::size_t h = 0; h < heads.size(); ++h) add_head(p, heads[h], derive_seed(seed, 1000 + h));
  return p;
}

/// Removes `old_head` and appends a freshly initialized `fresh`. Trunk tensors are untouched.
template <typename T>
void swap_head(ParamSet<T>& p, std::string_view old_head, const HeadSpec& fresh, std::uint64_t seed) {
  if (!p.has_head(old_head)) throw ModelError("swap_head: no head named '" + std::string(old_head) + "'");
  if (fresh.name != old_head && p.has_head(fresh.name)) {
    throw ModelError("swap_head: head '" + fresh.name + "' already present");
  }
  const auto g = head_group(old_head);
  ParamSet<T> kept;
  kept.config = p.config;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.groups[i] == g) continue;
    kept.names.push_back(std::move(p.names[i]));
    kept.groups.push_back(std::move(p.groups[i]));
    kept.tensors.push_back(std::move(p.tensors[i]));
  }
  p = std::move(kept);
  add_head(p, fresh, seed);
}

/// Builds the encoder on `g` for windows shaped [batch, lookback, input_width]
/// and returns the pooled representation [batch, d_model].
template <typename T>
NodeId encode(Graph<T>& g, const ParamSet<T>& p, const Tensor<T>& windows) {
  const auto& cfg = p.config;
  if (windows.rank() != 3) throw ModelError("encode: windows must be [batch, days, features], got " +
                                            ndgrad::to_string(windows.shape()));
  if (windows.dim(1) != cfg.lookback) {
    throw ModelError("encode: window length " + std::to_string(windows.dim(1)) + " != positional table length " +
                     std::to_string(cfg.lookback));
  }
  if (windows.dim(2) != cfg.input_width) {
    throw ModelError("encode: feature width " + std::to_string(windows.dim(2)) + " != model input width " +
                     std::to_string(cfg.input_width));
  }
  const std::size_t batch = windows.dim(0), days = cfg.lookback, d = cfg.d_model, heads = cfg.heads;
  const std::size_t dh = d / heads;
  auto P = [&](const std::string& name) { return g.param(p.index_of(name)); };
  auto linear = [&](NodeId x, const std::string& prefix) {
    return g.add(g.matmul(x, P(prefix + ".w")), P(prefix + ".b"));
  };
  auto norm = [&](NodeId x, const std::string& prefix) {
    return g.layer_norm(x, P(prefix + ".gamma"), P(prefix + ".beta"));
  };

  NodeId x = g.input(windows);
  x = linear(x, "embedding/feature");
  x = g.add(x, P("embedding/position"));

  const bool pre = cfg.norm == NormPlacement::Pre;
  for (std::size_t l = 1; l <= kEncoderLayers; ++l) {
    const auto attn = "attention-" + std::to_string(l);
    const auto ffn = "ffn-" + std::to_string(l);

    NodeId h = pre ? norm(x, attn + "/norm") : x;
    NodeId qkv = linear(h, attn + "/qkv");
    auto split = [&](std::size_t part) {
      NodeId s = g.slice(qkv, part * d, (part + 1) * d);
      s = g.reshape(s, {batch, days, heads, dh});
      return g.permute(s, {0, 2, 1, 3});  // [B, H, T, dh]
    };
    NodeId q = split(0), k = split(1), v = split(2);
    NodeId scores = g.scale(g.matmul(q, k, true), T(1) / std::sqrt(T(dh)));
    NodeId ctx = g.matmul(g.softmax(scores), v);
    ctx = g.reshape(g.permute(ctx, {0, 2, 1, 3}), {batch, days, d});
    x = g.add(x, linear(ctx, attn + "/out"));
    if (!pre) x = norm(x, attn + "/norm");

    h = pre ? norm(x, ffn + "/norm") : x;
    NodeId f = linear(h, ffn + "/fc1");
    f = cfg.activation == Activation::Gelu ? g.gelu(f) : g.relu(f);
    f = linear(f, ffn + "/fc2");
    x = g.add(x, f);
    if (!pre) x = norm(x, ffn + "/norm");
  }
  if (pre) x = norm(x, "ffn-2/final_norm");

  if (cfg.pooling == Pooling::Mean) return g.mean(x, 1);
  NodeId last = g.permute(x, {0, 2, 1});  // [B, d, T]
  last = g.slice(last, days - 1, days);
  return g.reshape(last, {batch, d});
}

/// Applies head `name` to a pooled representation -> [batch, out_dim].
template <typename T>
NodeId apply_head(Graph<T>& g, const ParamSet<T>& p, NodeId pooled, std::string_view name) {
  if (!p.has_head(name)) throw ModelError("unknown head '" + std::string(name) + "'");
  const auto grp = head_group(name);
  return g.add(g.matmul(pooled, g.param(p.index_of(grp + "/w"))), g.param(p.index_of(grp + "/b")));
}

/// Value-only forward pass: [batch, days, width] -> [batch, out_dim].
template <typename T>
Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& windows, std::string_view head) {
  if (!p.has_head(head)) throw ModelError("unknown head '" + std::string(head) + "'");
  std::vector<bool> none(p.size(), false);
  Graph<T> g(p.tensors, none);
  NodeId pooled = encode(g, p, windows);
  return g.value(apply_head(g, p, pooled, head));
}

/// Pooled representation only.
template <typename T>
Tensor<T> represent(const ParamSet<T>& p, const Tensor<T>& windows) {
  std::vector<bool> none(p.size(), false);
  Graph<T> g(p.tensors, none);
  return g.value(encode(g, p, windows));
}

/// FNV-1a over names and raw tensor bytes of the selected groups (all when empty).
template <typename T>
std::uint64_t param_hash(const ParamSet<T>& p, const std::vector<std::string>& only_groups = {}) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!only_groups.empty() &&
        std::find(only_groups.begin(), only_groups.end(), p.groups[i]) == only_groups.end()) {
      continue;
    }
    mix(p.names[i].data(), p.names[i].size());
    mix(p.tensors[i].data().data(), p.tensors[i].size() * sizeof(T));
  }
  return h;
}

}  // namespace sspt::model
