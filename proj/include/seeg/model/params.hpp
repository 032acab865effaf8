#pragma once

// Flat parameter storage with a named layout. Every trainable tensor is a
// contiguous column-major segment of one vector, which keeps the optimizer,
// checkpointing, finite-difference checks, and freeze masks trivial.

#include <seeg/model/config.hpp>

#include <map>
#include <random>

namespace seeg::model {

struct ParamInfo {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
  Eigen::Index size() const { return rows * cols; }
};

struct ParamLayout {
  std::vector<ParamInfo> entries;
  std::map<std::string, int> index;
  Eigen::Index total = 0;

  void add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    index.emplace(name, static_cast<int>(entries.size()));
    entries.push_back({name, rows, cols, total});
    total += rows * cols;
  }
  const ParamInfo& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw std::invalid_argument("unknown parameter '" + name + "'");
    return entries[static_cast<size_t>(it->second)];
  }
  bool has(const std::string& name) const { return index.count(name) > 0; }
};

template <typename S>
struct Params {
  ParamLayout layout;
  VecX<S> flat;
  std::vector<std::string> head_subjects;  // head order; empty ids only for rh
  std::map<std::string, int> head_index;

  Eigen::Map<MatX<S>> mat(const std::string& name) {
    const auto& e = layout.at(name);
    return {flat.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const MatX<S>> mat(const std::string& name) const {
    const auto& e = layout.at(name);
    return {flat.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<VecX<S>> vec(const std::string& name) {
    const auto& e = layout.at(name);
    return {flat.data() + e.offset, e.size()};
  }
  Eigen::Map<const VecX<S>> vec(const std::string& name) const {
    const auto& e = layout.at(name);
    return {flat.data() + e.offset, e.size()};
  }

  std::pair<Eigen::Index, Eigen::Index> head_range(int head) const {
    const std::string p = "head." + head_subjects[static_cast<size_t>(head)];
    Eigen::Index lo = layout.at(p + ".w1").offset;
    const auto& last = layout.at(p + ".b2");
    return {lo, last.offset + last.size()};
  }
};

struct ParamCounts {
  long long shared = 0;
  long long per_head = 0;
  long long total = 0;
  int n_heads = 0;
};

namespace detail {

inline void add_attention_block(ParamLayout& l, const std::string& prefix, int k,
                                int ffn) {
  l.add(prefix + ".ln1.scale", k, 1);
  l.add(prefix + ".ln1.shift", k, 1);
  l.add(prefix + ".attn.wq", k, k);
  l.add(prefix + ".attn.bq", k, 1);
  l.add(prefix + ".attn.wk", k, k);
  l.add(prefix + ".attn.bk", k, 1);
  l.add(prefix + ".attn.wv", k, k);
  l.add(prefix + ".attn.bv", k, 1);
  l.add(prefix + ".attn.wo", k, k);
  l.add(prefix + ".attn.bo", k, 1);
  l.add(prefix + ".ln2.scale", k, 1);
  l.add(prefix + ".ln2.shift", k, 1);
  l.add(prefix + ".ffn.w1", ffn, k);
  l.add(prefix + ".ffn.b1", ffn, 1);
  l.add(prefix + ".ffn.w2", k, ffn);
  l.add(prefix + ".ffn.b2", k, 1);
}

}  // namespace detail

/// Deterministic layout; head order follows the given subject order.
inline ParamLayout build_layout(const ModelConfig& cfg,
                                const std::vector<std::string>& subjects) {
  cfg.validate();
  ParamLayout l;
  const int k = cfg.token_dim;
  l.add("tokenizer.conv.weight", k, cfg.conv_kernel);
  l.add("tokenizer.conv.bias", k, 1);
  l.add("tokenizer.bn.scale", k, 1);
  l.add("tokenizer.bn.shift", k, 1);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string base = "block" + std::to_string(b);
    if (cfg.variant_2d) {
      detail::add_attention_block(l, base + ".joint", k, cfg.ffn_dim());
    } else {
      if (!cfg.ablate.at)
        detail::add_attention_block(l, base + ".time", k, cfg.ffn_dim());
      if (!cfg.ablate.as)
        detail::add_attention_block(l, base + ".space", k, cfg.ffn_dim());
    }
  }
  if (cfg.pe_active()) {
    l.add("pe.proj.weight", k, cfg.pe_dim());
    l.add("pe.proj.bias", k, 1);
  }
  l.add("trunk.weight", cfg.feature_dim, cfg.flat_dim());
  l.add("trunk.bias", cfg.feature_dim, 1);
  if (cfg.ablate.rh) {
    l.add("head.shared.w1", cfg.head_hidden, cfg.feature_dim);
    l.add("head.shared.b1", cfg.head_hidden, 1);
    l.add("head.shared.w2", 1, cfg.head_hidden);
    l.add("head.shared.b2", 1, 1);
  } else {
    for (const auto& sid : subjects) {
      const std::string p = "head." + sid;
      l.add(p + ".w1", cfg.head_hidden, cfg.feature_dim);
      l.add(p + ".b1", cfg.head_hidden, 1);
      l.add(p + ".w2", 1, cfg.head_hidden);
      l.add(p + ".b2", 1, 1);
    }
  }
  return l;
}

template <typename S>
Params<S> build_params(const ModelConfig& cfg,
                       const std::vector<std::string>& subjects) {
  Params<S> p;
  p.layout = build_layout(cfg, subjects);
  p.flat = VecX<S>::Zero(p.layout.total);
  if (cfg.ablate.rh) {
    p.head_subjects = {"shared"};
    for (const auto& sid : subjects) p.head_index[sid] = 0;
    p.head_index["shared"] = 0;
  } else {
    p.head_subjects = subjects;
    for (size_t i = 0; i < subjects.size(); ++i)
      p.head_index[subjects[i]] = static_cast<int>(i);
  }
  return p;
}

/// Kaiming-style fan-in uniform for weights, zeros for biases, identity for
/// norm scales. Deterministic in layout order.
template <typename S>
void init_params(Params<S>& p, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0xA11CE));
  for (const auto& e : p.layout.entries) {
    auto seg = p.flat.segment(e.offset, e.size());
    const bool is_scale = e.name.ends_with(".scale");
    const bool is_bias = e.name.ends_with(".bias") || e.name.ends_with(".shift") ||
                         e.name.ends_with(".bq") || e.name.ends_with(".bk") ||
                         e.name.ends_with(".bv") || e.name.ends_with(".bo") ||
                         e.name.ends_with(".b1") || e.name.ends_with(".b2");
    if (is_scale) {
      seg.setOnes();
    } else if (is_bias) {
      seg.setZero();
    } else {
      const double bound = 1.0 / std::sqrt(double(e.cols));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < seg.size(); ++i)
        seg[i] = static_cast<S>(u(rng));
    }
  }
}

template <typename S>
ParamCounts count_parameters(const Params<S>& p) {
  ParamCounts c;
  long long head_total = 0;
  for (const auto& e : p.layout.entries) {
    if (e.name.rfind("head.", 0) == 0)
      head_total += e.size();
    else
      c.shared += e.size();
  }
  c.n_heads = static_cast<int>(p.head_subjects.size());
  c.per_head = c.n_heads > 0 ? head_total / c.n_heads : 0;
  c.total = c.shared + head_total;
  return c;
}

}  // namespace seeg::model
