#pragma once

// The decoder network: shared convolutional tokenizer, factorized
// time/space self-attention over [electrodes x tokens x token_dim] latents
// with RBF spatial encodings, a trunk projection to a low-dimensional
// feature, and per-subject regression heads.
//
// Backward passes are written by hand against the flat parameter layout;
// attention blocks cache only their inputs and recompute internals, which
// keeps memory linear in the latent size for any batch.

#include <seeg/model/config.hpp>
#include <seeg/model/features.hpp>
#include <seeg/model/params.hpp>

#include <cmath>

namespace seeg::model {

enum class LossKind { huber, mse };

inline std::string to_string(LossKind k) {
  return k == LossKind::huber ? "huber" : "mse";
}

template <typename S>
struct TrialBatch {
  int n_trials = 0;  // B
  int e_max = 0;     // padded electrode slots per trial
  MatRM<S> voltages;                  // [B*e_max x t_trial]; masked rows zero
  MatX<S> mni;                        // [B*e_max x 3]
  std::vector<std::uint8_t> mask;     // per row; 1 = real electrode
  std::vector<int> electrode_index;   // per row, within-subject position
  std::vector<int> head_of_trial;     // per trial
  VecX<S> targets;                    // [B] in scaled units

  Eigen::Index rows() const { return static_cast<Eigen::Index>(n_trials) * e_max; }

  void check() const {
    if (voltages.rows() != rows() || static_cast<Eigen::Index>(mask.size()) != rows())
      throw std::invalid_argument("batch: inconsistent shapes");
    if (!voltages.allFinite()) throw std::invalid_argument("batch: non-finite input");
    for (int b = 0; b < n_trials; ++b) {
      bool any = false;
      for (int e = 0; e < e_max; ++e) any = any || mask[size_t(b) * e_max + e];
      if (!any) throw std::invalid_argument("batch: trial with all electrodes masked");
    }
  }
};

namespace detail {

template <typename S>
struct BlockViews {
  Eigen::Map<const MatX<S>> wq, wk, wv, wo, w1, w2;
  Eigen::Map<const VecX<S>> bq, bk, bv, bo, b1, b2, g1, s1, g2, s2;
};

template <typename S>
struct BlockGrads {
  Eigen::Map<MatX<S>> wq, wk, wv, wo, w1, w2;
  Eigen::Map<VecX<S>> bq, bk, bv, bo, b1, b2, g1, s1, g2, s2;
};

template <typename S>
BlockViews<S> block_views(const Params<S>& p, const std::string& pre) {
  return BlockViews<S>{
      p.mat(pre + ".attn.wq"), p.mat(pre + ".attn.wk"), p.mat(pre + ".attn.wv"),
      p.mat(pre + ".attn.wo"), p.mat(pre + ".ffn.w1"),  p.mat(pre + ".ffn.w2"),
      p.vec(pre + ".attn.bq"), p.vec(pre + ".attn.bk"), p.vec(pre + ".attn.bv"),
      p.vec(pre + ".attn.bo"), p.vec(pre + ".ffn.b1"),  p.vec(pre + ".ffn.b2"),
      p.vec(pre + ".ln1.scale"), p.vec(pre + ".ln1.shift"),
      p.vec(pre + ".ln2.scale"), p.vec(pre + ".ln2.shift")};
}

template <typename S>
BlockGrads<S> block_grads(const Params<S>& p, VecX<S>& g, const std::string& pre) {
  auto m = [&](const std::string& n) -> Eigen::Map<MatX<S>> {
    const auto& e = p.layout.at(n);
    return {g.data() + e.offset, e.rows, e.cols};
  };
  auto v = [&](const std::string& n) -> Eigen::Map<VecX<S>> {
    const auto& e = p.layout.at(n);
    return {g.data() + e.offset, e.size()};
  };
  return BlockGrads<S>{
      m(pre + ".attn.wq"), m(pre + ".attn.wk"), m(pre + ".attn.wv"),
      m(pre + ".attn.wo"), m(pre + ".ffn.w1"),  m(pre + ".ffn.w2"),
      v(pre + ".attn.bq"), v(pre + ".attn.bk"), v(pre + ".attn.bv"),
      v(pre + ".attn.bo"), v(pre + ".ffn.b1"),  v(pre + ".ffn.b2"),
      v(pre + ".ln1.scale"), v(pre + ".ln1.shift"),
      v(pre + ".ln2.scale"), v(pre + ".ln2.shift")};
}

constexpr double kNormEps = 1e-5;

/// rowwise pre-norm: out = (z - mean)/sqrt(var + eps) * gamma + beta
template <typename S>
void layer_norm(const Eigen::Ref<const MatX<S>>& z,
                const Eigen::Map<const VecX<S>>& gamma,
                const Eigen::Map<const VecX<S>>& beta, Eigen::Ref<MatX<S>> out) {
  const S eps = static_cast<S>(kNormEps);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    S mu = z.row(i).mean();
    auto xc = (z.row(i).array() - mu).eval();
    S sd = std::sqrt(xc.square().mean() + eps);
    out.row(i) = (xc / sd) * gamma.transpose().array() +
                 beta.transpose().array();
  }
}

/// gradient of layer_norm wrt its input, given d(normalized-scaled) output;
/// also accumulates gamma/beta gradients. `dz` is ADDED to.
template <typename S>
void layer_norm_backward(const Eigen::Ref<const MatX<S>>& z,
                         const Eigen::Map<const VecX<S>>& gamma,
                         const Eigen::Ref<const MatX<S>>& dout,
                         Eigen::Ref<MatX<S>> dz, Eigen::Map<VecX<S>> dgamma,
                         Eigen::Map<VecX<S>> dbeta) {
  const S eps = static_cast<S>(kNormEps);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    S mu = z.row(i).mean();
    auto xc = (z.row(i).array() - mu).eval();
    S sd = std::sqrt(xc.square().mean() + eps);
    auto xhat = (xc / sd).eval();
    dgamma.transpose().array() += dout.row(i).array() * xhat;
    dbeta.transpose().array() += dout.row(i).array();
    auto dxhat = (dout.row(i).array() * gamma.transpose().array()).eval();
    S m1 = dxhat.mean();
    S m2 = (dxhat * xhat).mean();
    dz.row(i).array() += (dxhat - m1 - xhat * m2) / sd;
  }
}

template <typename S>
void softmax_rows(Eigen::Ref<MatX<S>> a) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    S mx = a.row(i).maxCoeff();
    a.row(i) = (a.row(i).array() - mx).exp();
    a.row(i) /= a.row(i).sum();
  }
}

template <typename S>
struct BlockScratch {
  MatX<S> n1, q, k, v, o, z2, n2, y;   // [seq x K]
  MatX<S> pre, h;                      // [seq x 4K]
  MatX<S> a, da;                       // [seq x seq]
  MatX<S> dq, dk, dv, dof, dz2, dn2, dn1, dpre;
  MatX<S> seq_in, seq_dy, seq_dz;      // gather buffers

  void ensure(Eigen::Index seq, Eigen::Index kdim, Eigen::Index ffn) {
    auto grow = [](MatX<S>& m, Eigen::Index r, Eigen::Index c) {
      if (m.rows() < r || m.cols() < c) m.resize(r, c);
    };
    for (auto* m : {&n1, &q, &k, &v, &o, &z2, &n2, &y, &dq, &dk, &dv, &dof,
                    &dz2, &dn2, &dn1, &seq_in, &seq_dy, &seq_dz})
      grow(*m, seq, kdim);
    for (auto* m : {&pre, &h, &dpre}) grow(*m, seq, ffn);
    grow(a, seq, seq);
    grow(da, seq, seq);
  }
};

/// Pre-norm transformer block forward on a compacted sequence z [n x K].
/// Writes the output into `y`.
template <typename S>
void block_forward(const BlockViews<S>& w, const Eigen::Ref<const MatX<S>>& z,
                   Eigen::Ref<MatX<S>> y, BlockScratch<S>& s) {
  const Eigen::Index n = z.rows(), kd = z.cols();
  const S scale = static_cast<S>(1.0 / std::sqrt(double(kd)));
  auto n1 = s.n1.topLeftCorner(n, kd);
  layer_norm<S>(z, w.g1, w.s1, n1);
  auto q = s.q.topLeftCorner(n, kd), k = s.k.topLeftCorner(n, kd),
       v = s.v.topLeftCorner(n, kd);
  q.noalias() = n1 * w.wq.transpose();
  q.rowwise() += w.bq.transpose();
  k.noalias() = n1 * w.wk.transpose();
  k.rowwise() += w.bk.transpose();
  v.noalias() = n1 * w.wv.transpose();
  v.rowwise() += w.bv.transpose();
  auto a = s.a.topLeftCorner(n, n);
  a.noalias() = q * k.transpose();
  a *= scale;
  softmax_rows<S>(a);
  auto o = s.o.topLeftCorner(n, kd);
  o.noalias() = a * v;
  auto z2 = s.z2.topLeftCorner(n, kd);
  z2.noalias() = o * w.wo.transpose();
  z2.rowwise() += w.bo.transpose();
  z2 += z;
  auto n2 = s.n2.topLeftCorner(n, kd);
  layer_norm<S>(z2, w.g2, w.s2, n2);
  const Eigen::Index f = w.w1.rows();
  auto pre = s.pre.topLeftCorner(n, f);
  pre.noalias() = n2 * w.w1.transpose();
  pre.rowwise() += w.b1.transpose();
  auto h = s.h.topLeftCorner(n, f);
  h = pre.cwiseMax(S(0));
  y.noalias() = h * w.w2.transpose();
  y.rowwise() += w.b2.transpose();
  y += z2;
}

/// Backward for block_forward: recomputes internals from z, fills dz with the
/// full input gradient and accumulates parameter gradients.
template <typename S>
void block_backward(const BlockViews<S>& w, BlockGrads<S>& g,
                    const Eigen::Ref<const MatX<S>>& z,
                    const Eigen::Ref<const MatX<S>>& dy, Eigen::Ref<MatX<S>> dz,
                    BlockScratch<S>& s) {
  const Eigen::Index n = z.rows(), kd = z.cols();
  const S scale = static_cast<S>(1.0 / std::sqrt(double(kd)));
  // forward recompute
  auto n1 = s.n1.topLeftCorner(n, kd);
  layer_norm<S>(z, w.g1, w.s1, n1);
  auto q = s.q.topLeftCorner(n, kd), k = s.k.topLeftCorner(n, kd),
       v = s.v.topLeftCorner(n, kd);
  q.noalias() = n1 * w.wq.transpose();
  q.rowwise() += w.bq.transpose();
  k.noalias() = n1 * w.wk.transpose();
  k.rowwise() += w.bk.transpose();
  v.noalias() = n1 * w.wv.transpose();
  v.rowwise() += w.bv.transpose();
  auto a = s.a.topLeftCorner(n, n);
  a.noalias() = q * k.transpose();
  a *= scale;
  softmax_rows<S>(a);
  auto o = s.o.topLeftCorner(n, kd);
  o.noalias() = a * v;
  auto z2 = s.z2.topLeftCorner(n, kd);
  z2.noalias() = o * w.wo.transpose();
  z2.rowwise() += w.bo.transpose();
  z2 += z;
  auto n2 = s.n2.topLeftCorner(n, kd);
  layer_norm<S>(z2, w.g2, w.s2, n2);
  const Eigen::Index f = w.w1.rows();
  auto pre = s.pre.topLeftCorner(n, f);
  pre.noalias() = n2 * w.w1.transpose();
  pre.rowwise() += w.b1.transpose();
  auto h = s.h.topLeftCorner(n, f);
  h = pre.cwiseMax(S(0));

  // feed-forward path
  auto dz2 = s.dz2.topLeftCorner(n, kd);
  dz2 = dy;  // residual through y = z2 + ffn
  g.w2.noalias() += dy.transpose() * h;
  g.b2 += dy.colwise().sum().transpose();
  auto dpre = s.dpre.topLeftCorner(n, f);
  dpre.noalias() = dy * w.w2;
  dpre.array() *= (pre.array() > S(0)).template cast<S>();
  g.w1.noalias() += dpre.transpose() * n2;
  g.b1 += dpre.colwise().sum().transpose();
  auto dn2 = s.dn2.topLeftCorner(n, kd);
  dn2.noalias() = dpre * w.w1;
  layer_norm_backward<S>(z2, w.g2, dn2, dz2, g.g2, g.s2);

  // attention path
  g.wo.noalias() += dz2.transpose() * o;
  g.bo += dz2.colwise().sum().transpose();
  auto dof = s.dof.topLeftCorner(n, kd);
  dof.noalias() = dz2 * w.wo;
  auto da = s.da.topLeftCorner(n, n);
  da.noalias() = dof * v.transpose();
  auto dv = s.dv.topLeftCorner(n, kd);
  dv.noalias() = a.transpose() * dof;
  // softmax rows
  VecX<S> rowdot = (da.array() * a.array()).rowwise().sum();
  da.array() = a.array() * (da.array().colwise() - rowdot.array());
  da *= scale;
  auto dq = s.dq.topLeftCorner(n, kd), dk = s.dk.topLeftCorner(n, kd);
  dq.noalias() = da * k;
  dk.noalias() = da.transpose() * q;
  g.wq.noalias() += dq.transpose() * n1;
  g.bq += dq.colwise().sum().transpose();
  g.wk.noalias() += dk.transpose() * n1;
  g.bk += dk.colwise().sum().transpose();
  g.wv.noalias() += dv.transpose() * n1;
  g.bv += dv.colwise().sum().transpose();
  auto dn1 = s.dn1.topLeftCorner(n, kd);
  dn1.noalias() = dq * w.wq;
  dn1.noalias() += dk * w.wk;
  dn1.noalias() += dv * w.wv;

  dz = dz2;  // residual through z2 = z + proj
  layer_norm_backward<S>(z, w.g1, dn1, dz, g.g1, g.s1);
}

}  // namespace detail

/// Projected positional encodings per electrode row; masked rows get zero.
template <typename S>
MatX<S> spatial_encodings(const ModelConfig& cfg, const Params<S>& params,
                          const MatX<S>& mni,
                          const std::vector<std::uint8_t>& mask,
                          const std::vector<int>& electrode_index) {
  const Eigen::Index n = mni.rows();
  MatX<S> out = MatX<S>::Zero(n, cfg.token_dim);
  if (!cfg.pe_active()) return out;
  auto wp = params.mat("pe.proj.weight");
  auto bp = params.vec("pe.proj.bias");
  for (Eigen::Index r = 0; r < n; ++r) {
    if (!mask.empty() && !mask[static_cast<size_t>(r)]) continue;
    Eigen::Matrix<S, 3, 1> pos = mni.row(r).transpose();
    VecX<S> f = pe_features<S>(cfg, pos,
                               electrode_index.empty()
                                   ? static_cast<int>(r)
                                   : electrode_index[static_cast<size_t>(r)]);
    out.row(r) = (wp * f + bp).transpose();
  }
  return out;
}

template <typename S>
class Net {
 public:
  Net(ModelConfig cfg, std::vector<std::string> subjects)
      : cfg_(std::move(cfg)), params_(build_params<S>(cfg_, subjects)) {
    cfg_.validate();
    bn_mean_ = VecX<S>::Zero(cfg_.token_dim);
    bn_var_ = VecX<S>::Ones(cfg_.token_dim);
    build_sublayers();
  }

  const ModelConfig& config() const { return cfg_; }
  Params<S>& params() { return params_; }
  const Params<S>& params() const { return params_; }
  VecX<S>& bn_running_mean() { return bn_mean_; }
  VecX<S>& bn_running_var() { return bn_var_; }
  const VecX<S>& bn_running_mean() const { return bn_mean_; }
  const VecX<S>& bn_running_var() const { return bn_var_; }

  void init(std::uint64_t seed) {
    init_params(params_, seed);
    bn_mean_.setZero();
    bn_var_.setOnes();
  }

  /// Eval-mode predictions (running batch-norm statistics), scaled units.
  VecX<S> predict(const TrialBatch<S>& batch) const {
    auto* self = const_cast<Net*>(this);
    Cache cache;
    return self->forward(batch, /*train=*/false, /*update_bn=*/false, cache);
  }

  /// Post-tokenizer latents [B*e_max x T*K] in eval mode (diagnostics).
  MatRM<S> tokenize_latents(const TrialBatch<S>& batch) const {
    auto* self = const_cast<Net*>(this);
    Cache cache;
    cache.scratch.ensure(self->max_seq(), cfg_.token_dim, cfg_.ffn_dim());
    return self->tokenize_pool(batch, cache, /*train=*/false, /*update_bn=*/false);
  }

  /// Training-mode loss; fills `grad` (layout of params().flat) when given.
  double loss_and_grad(const TrialBatch<S>& batch, LossKind kind, S delta,
                       VecX<S>* grad, bool update_bn = true) {
    Cache cache;
    VecX<S> preds = forward(batch, /*train=*/true, update_bn, cache);
    const Eigen::Index b = batch.targets.size();
    double loss = 0.0;
    VecX<S> dpred(b);
    for (Eigen::Index i = 0; i < b; ++i) {
      const double r = double(preds[i]) - double(batch.targets[i]);
      const double d = double(delta);
      if (kind == LossKind::huber) {
        loss += std::abs(r) <= d ? 0.5 * r * r : d * (std::abs(r) - 0.5 * d);
        dpred[i] = static_cast<S>((std::abs(r) <= d ? r : (r > 0 ? d : -d)) / b);
      } else {
        loss += r * r;
        dpred[i] = static_cast<S>(2.0 * r / b);
      }
    }
    loss /= double(b);
    if (grad) {
      grad->setZero(params_.layout.total);
      backward(batch, cache, dpred, *grad);
    }
    return loss;
  }

  /// Trainable-parameter counts grouped by named path.
  ParamCounts counts() const { return count_parameters(params_); }

 private:
  enum class Sub { time, pe, space, joint };

  void build_sublayers() {
    subs_.clear();
    for (int b = 0; b < cfg_.n_blocks; ++b) {
      if (cfg_.variant_2d) {
        subs_.push_back({Sub::joint, b});
        continue;
      }
      if (!cfg_.ablate.at) subs_.push_back({Sub::time, b});
      if (cfg_.pe_active()) subs_.push_back({Sub::pe, b});
      if (!cfg_.ablate.as) subs_.push_back({Sub::space, b});
    }
  }

  struct SubRef {
    Sub kind;
    int block;
  };

  struct Cache {
    std::vector<MatRM<S>> conv;   // per channel, pre-norm [BE x T_trial]
    VecX<S> mu, var;              // batch stats used (train) per channel
    bool train = false;
    std::vector<MatRM<S>> stage_inputs;  // latents before each sublayer
    MatRM<S> final_latents;              // trunk input [BE x T*K]
    MatX<S> pe_feat;                     // [BE x pe_dim]
    MatX<S> features;                    // F [B x d]
    MatX<S> head_pre;                    // [B x hidden]
    detail::BlockScratch<S> scratch;
  };

  Eigen::Index max_seq() const {
    Eigen::Index m = std::max<Eigen::Index>(cfg_.n_tokens(), cfg_.e_max);
    if (cfg_.variant_2d)
      m = std::max<Eigen::Index>(m, Eigen::Index(cfg_.e_max) * cfg_.n_tokens());
    return m;
  }

  std::string sub_prefix(const SubRef& sr) const {
    std::string base = "block" + std::to_string(sr.block);
    switch (sr.kind) {
      case Sub::time: return base + ".time";
      case Sub::space: return base + ".space";
      case Sub::joint: return base + ".joint";
      case Sub::pe: return "pe";
    }
    return base;
  }

  // ---- tokenizer -----------------------------------------------------------

  void conv_forward(const TrialBatch<S>& batch, Cache& cache) const {
    const Eigen::Index rows = batch.rows(), t = cfg_.t_trial;
    const int k = cfg_.token_dim, kl = cfg_.conv_kernel, p = (kl - 1) / 2;
    auto w = params_.mat("tokenizer.conv.weight");
    auto b = params_.vec("tokenizer.conv.bias");
    cache.conv.assign(static_cast<size_t>(k), MatRM<S>());
    for (int c = 0; c < k; ++c) {
      MatRM<S>& out = cache.conv[static_cast<size_t>(c)];
      out = MatRM<S>::Constant(rows, t, b[c]);
      for (int j = 0; j < kl; ++j) {
        const int off = j - p;
        const Eigen::Index lo = std::max<Eigen::Index>(0, -off);
        const Eigen::Index hi = std::min<Eigen::Index>(t, t - off);
        if (hi <= lo) continue;
        out.middleCols(lo, hi - lo) +=
            w(c, j) * batch.voltages.middleCols(lo + off, hi - lo);
      }
    }
  }

  // batch-norm statistics over unmasked rows and all times, per channel
  void bn_stats(const TrialBatch<S>& batch, const Cache& cache, VecX<S>& mu,
                VecX<S>& var) const {
    const int k = cfg_.token_dim;
    mu.resize(k);
    var.resize(k);
    double count = 0;
    for (auto m : batch.mask) count += m ? 1 : 0;
    count *= double(cfg_.t_trial);
    for (int c = 0; c < k; ++c) {
      double sum = 0, sq = 0;
      const MatRM<S>& m = cache.conv[static_cast<size_t>(c)];
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (!batch.mask[static_cast<size_t>(r)]) continue;
        sum += double(m.row(r).sum());
        sq += double(m.row(r).squaredNorm());
      }
      const double mean = sum / count;
      mu[c] = static_cast<S>(mean);
      var[c] = static_cast<S>(std::max(0.0, sq / count - mean * mean));
    }
  }

  MatRM<S> tokenize_pool(const TrialBatch<S>& batch, Cache& cache, bool train,
                         bool update_bn) {
    conv_forward(batch, cache);
    const int k = cfg_.token_dim, t_out = cfg_.n_tokens();
    const Eigen::Index rows = batch.rows();
    auto gamma = params_.vec("tokenizer.bn.scale");
    auto beta = params_.vec("tokenizer.bn.shift");

    if (train) {
      bn_stats(batch, cache, cache.mu, cache.var);
      if (update_bn) {
        const S mom = static_cast<S>(0.1);
        bn_mean_ = (S(1) - mom) * bn_mean_ + mom * cache.mu;
        bn_var_ = (S(1) - mom) * bn_var_ + mom * cache.var;
      }
    } else {
      cache.mu = bn_mean_;
      cache.var = bn_var_;
    }
    cache.train = train;

    MatRM<S> latents(rows, Eigen::Index(t_out) * k);
    const S eps = static_cast<S>(detail::kNormEps);
    for (int c = 0; c < k; ++c) {
      const S inv_sd = S(1) / std::sqrt(cache.var[c] + eps);
      const MatRM<S>& conv = cache.conv[static_cast<size_t>(c)];
      // fused normalize + average pool
      for (int t = 0; t < t_out; ++t) {
        auto win = conv.middleCols(Eigen::Index(t) * cfg_.pool_stride,
                                   cfg_.pool_window);
        latents.col(Eigen::Index(t) * k + c) =
            ((win.rowwise().mean().array() - cache.mu[c]) * inv_sd) * gamma[c] +
            beta[c];
      }
    }
    for (Eigen::Index r = 0; r < rows; ++r)
      if (!batch.mask[static_cast<size_t>(r)]) latents.row(r).setZero();
    return latents;
  }

  void tokenize_backward(const TrialBatch<S>& batch, const Cache& cache,
                         const MatRM<S>& dlat, VecX<S>& grad) const {
    const int k = cfg_.token_dim, t_out = cfg_.n_tokens();
    const Eigen::Index rows = batch.rows(), t = cfg_.t_trial;
    const S eps = static_cast<S>(detail::kNormEps);
    auto gamma = params_.vec("tokenizer.bn.scale");
    auto gmap = [&](const std::string& n) -> Eigen::Map<MatX<S>> {
      const auto& e = params_.layout.at(n);
      return {grad.data() + e.offset, e.rows, e.cols};
    };
    auto dW = gmap("tokenizer.conv.weight");
    auto db = gmap("tokenizer.conv.bias");
    auto dgamma = gmap("tokenizer.bn.scale");
    auto dbeta = gmap("tokenizer.bn.shift");

    double count = 0;
    for (auto m : batch.mask) count += m ? 1 : 0;
    count *= double(t);

    const int kl = cfg_.conv_kernel, p = (kl - 1) / 2;
    const S inv_w = S(1) / static_cast<S>(cfg_.pool_window);
    for (int c = 0; c < k; ++c) {
      // pool backward into dY (gradient wrt batch-norm output)
      MatRM<S> dy = MatRM<S>::Zero(rows, t);
      for (int tt = 0; tt < t_out; ++tt) {
        auto dcol = dlat.col(Eigen::Index(tt) * k + c);
        dy.middleCols(Eigen::Index(tt) * cfg_.pool_stride, cfg_.pool_window)
            .colwise() += dcol * inv_w;
      }
      // batch-norm backward (masked rows carry zero dy and zero dconv)
      const MatRM<S>& conv = cache.conv[static_cast<size_t>(c)];
      const S inv_sd = S(1) / std::sqrt(cache.var[c] + eps);
      double s_dxhat = 0, s_dxhat_xhat = 0, s_dy = 0, s_dy_xhat = 0;
      for (Eigen::Index r = 0; r < rows; ++r) {
        if (!batch.mask[static_cast<size_t>(r)]) continue;
        auto xhat = ((conv.row(r).array() - cache.mu[c]) * inv_sd).eval();
        auto dyr = dy.row(r).array();
        s_dy += double(dyr.sum());
        s_dy_xhat += double((dyr * xhat).sum());
      }
      s_dxhat = s_dy * double(gamma[c]);
      s_dxhat_xhat = s_dy_xhat * double(gamma[c]);
      dgamma(c, 0) += static_cast<S>(s_dy_xhat);
      dbeta(c, 0) += static_cast<S>(s_dy);

      MatRM<S> dconv = MatRM<S>::Zero(rows, t);
      if (cache.train) {
        const S m1 = static_cast<S>(s_dxhat / count);
        const S m2 = static_cast<S>(s_dxhat_xhat / count);
        for (Eigen::Index r = 0; r < rows; ++r) {
          if (!batch.mask[static_cast<size_t>(r)]) continue;
          auto xhat = ((conv.row(r).array() - cache.mu[c]) * inv_sd).eval();
          dconv.row(r).array() =
              (dy.row(r).array() * gamma[c] - m1 - xhat * m2) * inv_sd;
        }
      } else {
        for (Eigen::Index r = 0; r < rows; ++r) {
          if (!batch.mask[static_cast<size_t>(r)]) continue;
          dconv.row(r).array() = dy.row(r).array() * gamma[c] * inv_sd;
        }
      }

      // conv backward (weights and bias only; inputs are data)
      for (int j = 0; j < kl; ++j) {
        const int off = j - p;
        const Eigen::Index lo = std::max<Eigen::Index>(0, -off);
        const Eigen::Index hi = std::min<Eigen::Index>(t, t - off);
        if (hi <= lo) continue;
        dW(c, j) += (dconv.middleCols(lo, hi - lo).array() *
                     batch.voltages.middleCols(lo + off, hi - lo).array())
                        .sum();
      }
      db(c, 0) += dconv.sum();
    }
  }

  // ---- attention stages ----------------------------------------------------

  // gather/scatter between the [BE x T*K] latent sheet and compact sequences
  void run_time(const detail::BlockViews<S>& w, detail::BlockGrads<S>* g,
                const TrialBatch<S>& batch, const MatRM<S>& zin, MatRM<S>& zout,
                const MatRM<S>* dout, MatRM<S>* din, Cache& cache) {
    const int t = cfg_.n_tokens(), k = cfg_.token_dim;
    auto& s = cache.scratch;
    for (Eigen::Index r = 0; r < batch.rows(); ++r) {
      if (!batch.mask[static_cast<size_t>(r)]) continue;
      auto seq = s.seq_in.topLeftCorner(t, k);
      for (int tt = 0; tt < t; ++tt)
        seq.row(tt) = zin.row(r).segment(Eigen::Index(tt) * k, k);
      if (!dout) {
        auto y = s.y.topLeftCorner(t, k);
        detail::block_forward<S>(w, seq, y, s);
        for (int tt = 0; tt < t; ++tt)
          zout.row(r).segment(Eigen::Index(tt) * k, k) = y.row(tt);
      } else {
        auto dy = s.seq_dy.topLeftCorner(t, k);
        for (int tt = 0; tt < t; ++tt)
          dy.row(tt) = dout->row(r).segment(Eigen::Index(tt) * k, k);
        auto dz = s.seq_dz.topLeftCorner(t, k);
        detail::block_backward<S>(w, *g, seq, dy, dz, s);
        for (int tt = 0; tt < t; ++tt)
          din->row(r).segment(Eigen::Index(tt) * k, k) = dz.row(tt);
      }
    }
  }

  void run_space(const detail::BlockViews<S>& w, detail::BlockGrads<S>* g,
                 const TrialBatch<S>& batch, const MatRM<S>& zin, MatRM<S>& zout,
                 const MatRM<S>* dout, MatRM<S>* din, Cache& cache) {
    const int t = cfg_.n_tokens(), k = cfg_.token_dim, e = batch.e_max;
    auto& s = cache.scratch;
    std::vector<Eigen::Index> rows;
    rows.reserve(static_cast<size_t>(e));
    for (int b = 0; b < batch.n_trials; ++b) {
      rows.clear();
      for (int ee = 0; ee < e; ++ee) {
        Eigen::Index r = Eigen::Index(b) * e + ee;
        if (batch.mask[static_cast<size_t>(r)]) rows.push_back(r);
      }
      const auto nu = static_cast<Eigen::Index>(rows.size());
      for (int tt = 0; tt < t; ++tt) {
        auto seq = s.seq_in.topLeftCorner(nu, k);
        for (Eigen::Index i = 0; i < nu; ++i)
          seq.row(i) = zin.row(rows[static_cast<size_t>(i)])
                           .segment(Eigen::Index(tt) * k, k);
        if (!dout) {
          auto y = s.y.topLeftCorner(nu, k);
          detail::block_forward<S>(w, seq, y, s);
          for (Eigen::Index i = 0; i < nu; ++i)
            zout.row(rows[static_cast<size_t>(i)])
                .segment(Eigen::Index(tt) * k, k) = y.row(i);
        } else {
          auto dy = s.seq_dy.topLeftCorner(nu, k);
          for (Eigen::Index i = 0; i < nu; ++i)
            dy.row(i) = dout->row(rows[static_cast<size_t>(i)])
                            .segment(Eigen::Index(tt) * k, k);
          auto dz = s.seq_dz.topLeftCorner(nu, k);
          detail::block_backward<S>(w, *g, seq, dy, dz, s);
          for (Eigen::Index i = 0; i < nu; ++i)
            din->row(rows[static_cast<size_t>(i)])
                .segment(Eigen::Index(tt) * k, k) = dz.row(i);
        }
      }
    }
  }

  void run_joint(const detail::BlockViews<S>& w, detail::BlockGrads<S>* g,
                 const TrialBatch<S>& batch, const MatRM<S>& zin, MatRM<S>& zout,
                 const MatRM<S>* dout, MatRM<S>* din, Cache& cache) {
    const int t = cfg_.n_tokens(), k = cfg_.token_dim, e = batch.e_max;
    auto& s = cache.scratch;
    std::vector<Eigen::Index> rows;
    for (int b = 0; b < batch.n_trials; ++b) {
      rows.clear();
      for (int ee = 0; ee < e; ++ee) {
        Eigen::Index r = Eigen::Index(b) * e + ee;
        if (batch.mask[static_cast<size_t>(r)]) rows.push_back(r);
      }
      const auto nu = static_cast<Eigen::Index>(rows.size()) * t;
      auto seq = s.seq_in.topLeftCorner(nu, k);
      for (size_t i = 0; i < rows.size(); ++i)
        for (int tt = 0; tt < t; ++tt)
          seq.row(static_cast<Eigen::Index>(i) * t + tt) =
              zin.row(rows[i]).segment(Eigen::Index(tt) * k, k);
      if (!dout) {
        auto y = s.y.topLeftCorner(nu, k);
        detail::block_forward<S>(w, seq, y, s);
        for (size_t i = 0; i < rows.size(); ++i)
          for (int tt = 0; tt < t; ++tt)
            zout.row(rows[i]).segment(Eigen::Index(tt) * k, k) =
                y.row(static_cast<Eigen::Index>(i) * t + tt);
      } else {
        auto dy = s.seq_dy.topLeftCorner(nu, k);
        for (size_t i = 0; i < rows.size(); ++i)
          for (int tt = 0; tt < t; ++tt)
            dy.row(static_cast<Eigen::Index>(i) * t + tt) =
                dout->row(rows[i]).segment(Eigen::Index(tt) * k, k);
        auto dz = s.seq_dz.topLeftCorner(nu, k);
        detail::block_backward<S>(w, *g, seq, dy, dz, s);
        for (size_t i = 0; i < rows.size(); ++i)
          for (int tt = 0; tt < t; ++tt)
            din->row(rows[i]).segment(Eigen::Index(tt) * k, k) =
                dz.row(static_cast<Eigen::Index>(i) * t + tt);
      }
    }
  }

  // ---- full forward/backward ----------------------------------------------

  VecX<S> forward(const TrialBatch<S>& batch, bool train, bool update_bn,
                  Cache& cache) {
    batch.check();
    if (batch.e_max != cfg_.e_max)
      throw std::invalid_argument("batch e_max does not match model config");
    if (batch.voltages.cols() != cfg_.t_trial)
      throw std::invalid_argument("batch t_trial does not match model config");
    cache.scratch.ensure(max_seq(), cfg_.token_dim, cfg_.ffn_dim());

    MatRM<S> latents = tokenize_pool(batch, cache, train, update_bn);
    const int t = cfg_.n_tokens(), k = cfg_.token_dim;

    // positional encodings (shared across blocks)
    MatX<S> pe_vecs;
    if (cfg_.pe_active()) {
      const int pd = cfg_.pe_dim();
      cache.pe_feat.resize(batch.rows(), pd);
      cache.pe_feat.setZero();
      for (Eigen::Index r = 0; r < batch.rows(); ++r) {
        if (!batch.mask[static_cast<size_t>(r)]) continue;
        Eigen::Matrix<S, 3, 1> pos = batch.mni.row(r).transpose();
        cache.pe_feat.row(r) =
            pe_features<S>(cfg_, pos, batch.electrode_index[static_cast<size_t>(r)])
                .transpose();
      }
      pe_vecs.noalias() = cache.pe_feat * params_.mat("pe.proj.weight").transpose();
      pe_vecs.rowwise() += params_.vec("pe.proj.bias").transpose();
    }

    cache.stage_inputs.clear();
    for (const auto& sr : subs_) {
      cache.stage_inputs.push_back(latents);
      if (sr.kind == Sub::pe) {
        for (Eigen::Index r = 0; r < batch.rows(); ++r) {
          if (!batch.mask[static_cast<size_t>(r)]) continue;
          for (int tt = 0; tt < t; ++tt)
            latents.row(r).segment(Eigen::Index(tt) * k, k) +=
                pe_vecs.row(r);
        }
        continue;
      }
      auto w = detail::block_views(params_, sub_prefix(sr));
      MatRM<S> out = MatRM<S>::Zero(latents.rows(), latents.cols());
      if (sr.kind == Sub::time)
        run_time(w, nullptr, batch, latents, out, nullptr, nullptr, cache);
      else if (sr.kind == Sub::space)
        run_space(w, nullptr, batch, latents, out, nullptr, nullptr, cache);
      else
        run_joint(w, nullptr, batch, latents, out, nullptr, nullptr, cache);
      latents = std::move(out);
    }
    cache.final_latents = latents;

    // trunk: flatten (electrode-major, then token, then channel) and project
    Eigen::Map<const MatRM<S>> zflat(latents.data(), batch.n_trials,
                                     Eigen::Index(batch.e_max) * t * k);
    auto wt = params_.mat("trunk.weight");
    auto bt = params_.vec("trunk.bias");
    cache.features.resize(batch.n_trials, cfg_.feature_dim);
    cache.features.noalias() = zflat * wt.transpose();
    cache.features.rowwise() += bt.transpose();

    // subject heads
    cache.head_pre.resize(batch.n_trials, cfg_.head_hidden);
    VecX<S> preds(batch.n_trials);
    for (int b = 0; b < batch.n_trials; ++b) {
      const std::string hp =
          "head." + params_.head_subjects[static_cast<size_t>(
                        batch.head_of_trial[static_cast<size_t>(b)])];
      auto w1 = params_.mat(hp + ".w1");
      auto b1 = params_.vec(hp + ".b1");
      auto w2 = params_.mat(hp + ".w2");
      auto b2 = params_.vec(hp + ".b2");
      cache.head_pre.row(b) =
          (w1 * cache.features.row(b).transpose() + b1).transpose();
      preds[b] =
          (w2 * cache.head_pre.row(b).transpose().cwiseMax(S(0)))(0, 0) + b2[0];
    }
    return preds;
  }

  void backward(const TrialBatch<S>& batch, Cache& cache, const VecX<S>& dpred,
                VecX<S>& grad) {
    const int t = cfg_.n_tokens(), k = cfg_.token_dim;
    auto gmat = [&](const std::string& n) -> Eigen::Map<MatX<S>> {
      const auto& e = params_.layout.at(n);
      return {grad.data() + e.offset, e.rows, e.cols};
    };
    auto gvec = [&](const std::string& n) -> Eigen::Map<VecX<S>> {
      const auto& e = params_.layout.at(n);
      return {grad.data() + e.offset, e.size()};
    };

    // heads
    MatX<S> dfeat = MatX<S>::Zero(batch.n_trials, cfg_.feature_dim);
    for (int b = 0; b < batch.n_trials; ++b) {
      const std::string hp =
          "head." + params_.head_subjects[static_cast<size_t>(
                        batch.head_of_trial[static_cast<size_t>(b)])];
      auto w1 = params_.mat(hp + ".w1");
      auto w2 = params_.mat(hp + ".w2");
      VecX<S> h = cache.head_pre.row(b).transpose().cwiseMax(S(0));
      const S dy = dpred[b];
      gvec(hp + ".b2")[0] += dy;
      gmat(hp + ".w2").noalias() += dy * h.transpose();
      VecX<S> dh = dy * w2.transpose();
      for (int i = 0; i < cfg_.head_hidden; ++i)
        if (cache.head_pre(b, i) <= S(0)) dh[i] = S(0);
      gvec(hp + ".b1") += dh;
      gmat(hp + ".w1").noalias() += dh * cache.features.row(b);
      dfeat.row(b).noalias() = (w1.transpose() * dh).transpose();
    }

    // trunk
    auto wt = params_.mat("trunk.weight");
    Eigen::Map<const MatRM<S>> zflat(cache.final_latents.data(), batch.n_trials,
                                     Eigen::Index(batch.e_max) * t * k);
    gmat("trunk.weight").noalias() += dfeat.transpose() * zflat;
    gvec("trunk.bias") += dfeat.colwise().sum().transpose();
    MatRM<S> dlat(batch.rows(), Eigen::Index(t) * k);
    Eigen::Map<MatRM<S>> dflat(dlat.data(), batch.n_trials,
                               Eigen::Index(batch.e_max) * t * k);
    dflat.noalias() = dfeat * wt;
    for (Eigen::Index r = 0; r < batch.rows(); ++r)
      if (!batch.mask[static_cast<size_t>(r)]) dlat.row(r).setZero();

    // sublayers in reverse
    for (int i = static_cast<int>(subs_.size()) - 1; i >= 0; --i) {
      const auto& sr = subs_[static_cast<size_t>(i)];
      const MatRM<S>& zin = cache.stage_inputs[static_cast<size_t>(i)];
      if (sr.kind == Sub::pe) {
        auto dwp = gmat("pe.proj.weight");
        auto dbp = gvec("pe.proj.bias");
        for (Eigen::Index r = 0; r < batch.rows(); ++r) {
          if (!batch.mask[static_cast<size_t>(r)]) continue;
          VecX<S> dpe = VecX<S>::Zero(k);
          for (int tt = 0; tt < t; ++tt)
            dpe += dlat.row(r).segment(Eigen::Index(tt) * k, k).transpose();
          dwp.noalias() += dpe * cache.pe_feat.row(r);
          dbp += dpe;
        }
        continue;  // identity pass-through for dlat
      }
      auto w = detail::block_views(params_, sub_prefix(sr));
      auto g = detail::block_grads(params_, grad, sub_prefix(sr));
      MatRM<S> din = MatRM<S>::Zero(dlat.rows(), dlat.cols());
      if (sr.kind == Sub::time)
        run_time(w, &g, batch, zin, din, &dlat, &din, cache);
      else if (sr.kind == Sub::space)
        run_space(w, &g, batch, zin, din, &dlat, &din, cache);
      else
        run_joint(w, &g, batch, zin, din, &dlat, &din, cache);
      dlat = std::move(din);
    }

    tokenize_backward(batch, cache, dlat, grad);
  }

  ModelConfig cfg_;
  Params<S> params_;
  VecX<S> bn_mean_, bn_var_;
  std::vector<SubRef> subs_;
};

}  // namespace seeg::model
