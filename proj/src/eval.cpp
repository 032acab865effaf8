#include <seeg/eval.hpp>

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace seeg::eval {

using nlohmann::json;

double r2(const Eigen::Ref<const VecXd>& pred, const Eigen::Ref<const VecXd>& target) {
  if (pred.size() != target.size() || target.size() < 2)
    throw std::invalid_argument("r2: need >= 2 paired values");
  const double mu = target.mean();
  const double ss_tot = (target.array() - mu).square().sum();
  if (ss_tot <= 0.0) throw std::invalid_argument("r2: zero target variance");
  return 1.0 - (pred - target).squaredNorm() / ss_tot;
}

double rmse(const Eigen::Ref<const VecXd>& pred, const Eigen::Ref<const VecXd>& target) {
  if (pred.size() != target.size() || target.size() < 1)
    throw std::invalid_argument("rmse: empty input");
  return std::sqrt((pred - target).squaredNorm() / double(target.size()));
}

std::string EvalReport::to_json() const {
  json j;
  j["pooled_r2"] = pooled_r2;
  j["pooled_rmse_ms"] = pooled_rmse_ms;
  j["mean_r2"] = mean_r2;
  j["sem_r2"] = sem_r2;
  j["config_hash"] = config_hash;
  j["split_seed"] = split_seed;
  j["per_subject"] = json::array();
  for (const auto& s : per_subject)
    j["per_subject"].push_back({{"subject", s.id}, {"r2", s.r2},
                                {"rmse_ms", s.rmse_ms}, {"n_test", s.n_test}});
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(12);
  out << "subject,r2,rmse_ms,n_test\n";
  for (const auto& s : per_subject)
    out << s.id << ',' << s.r2 << ',' << s.rmse_ms << ',' << s.n_test << '\n';
  return out.str();
}

EvalReport evaluate(train::FloatNet& net, const model::TargetScaler& scaler,
                    const ProcessedCohort& pc, const SplitAssignment& split,
                    SplitLabel which) {
  train::Items items = train::collect_items(pc, split);
  const auto& sel = which == SplitLabel::test
                        ? items.test
                        : (which == SplitLabel::val ? items.val : items.train);
  if (sel.empty()) throw ValidationError("evaluate: empty split");

  train::FloatBatch b = train::make_batch(pc, net, scaler, sel);
  VecXf raw = net.predict(b);
  VecXd pred(raw.size()), target(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    pred[i] = scaler.to_ms(double(raw[i]));
    target[i] = pc.subjects[static_cast<size_t>(sel[static_cast<size_t>(i)].subject)]
                    .rt_ms[sel[static_cast<size_t>(i)].trial];
  }

  EvalReport rep;
  rep.pooled_r2 = r2(pred, target);
  rep.pooled_rmse_ms = rmse(pred, target);
  rep.config_hash = net.config().hash();
  rep.split_seed = split.seed;

  for (size_t s = 0; s < pc.subjects.size(); ++s) {
    std::vector<Eigen::Index> idx;
    for (size_t i = 0; i < sel.size(); ++i)
      if (sel[i].subject == static_cast<int>(s))
        idx.push_back(static_cast<Eigen::Index>(i));
    if (idx.size() < 2) continue;
    VecXd p(idx.size()), t(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      p[static_cast<Eigen::Index>(i)] = pred[idx[i]];
      t[static_cast<Eigen::Index>(i)] = target[idx[i]];
    }
    SubjectScore sc;
    sc.id = pc.subjects[s].id;
    sc.r2 = r2(p, t);
    sc.rmse_ms = rmse(p, t);
    sc.n_test = static_cast<int>(idx.size());
    rep.per_subject.push_back(sc);
  }
  if (!rep.per_subject.empty()) {
    double sum = 0.0;
    for (const auto& s : rep.per_subject) sum += s.r2;
    rep.mean_r2 = sum / double(rep.per_subject.size());
    if (rep.per_subject.size() > 1) {
      double sq = 0.0;
      for (const auto& s : rep.per_subject)
        sq += (s.r2 - rep.mean_r2) * (s.r2 - rep.mean_r2);
      rep.sem_r2 = std::sqrt(sq / double(rep.per_subject.size() - 1)) /
                   std::sqrt(double(rep.per_subject.size()));
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------

BaselineKind baseline_kind_from(const std::string& name) {
  if (name == "wiener") return BaselineKind::wiener;
  if (name == "ridge") return BaselineKind::ridge;
  if (name == "lasso") return BaselineKind::lasso;
  if (name == "mlp") return BaselineKind::mlp;
  if (name == "cnn_mlp") return BaselineKind::cnn_mlp;
  throw std::invalid_argument("unknown baseline '" + name + "'");
}

std::string to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::wiener: return "wiener";
    case BaselineKind::ridge: return "ridge";
    case BaselineKind::lasso: return "lasso";
    case BaselineKind::mlp: return "mlp";
    case BaselineKind::cnn_mlp: return "cnn_mlp";
  }
  return "?";
}

MatXd Pca::transform(const Eigen::Ref<const MatXd>& x) const {
  MatXd std_x = (x.rowwise() - mean.transpose());
  std_x.array().rowwise() /= scale.transpose().array();
  return std_x * components.transpose();
}

MatXd Pca::inverse(const Eigen::Ref<const MatXd>& scores) const {
  return scores * components;
}

Pca fit_pca(const Eigen::Ref<const MatXd>& x, double var_keep) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (n < 2) throw std::invalid_argument("pca: need >= 2 rows");
  Pca pca;
  pca.mean = x.colwise().mean();
  MatXd c = x.rowwise() - pca.mean.transpose();
  pca.scale = (c.array().square().colwise().sum() / double(n)).sqrt();
  for (Eigen::Index j = 0; j < d; ++j)
    if (pca.scale[j] <= 0.0) pca.scale[j] = 1.0;  // constant feature
  c.array().rowwise() /= pca.scale.transpose().array();

  // snapshot method: eigendecompose the n x n Gram matrix
  MatXd gram = c * c.transpose() / double(n);
  Eigen::SelfAdjointEigenSolver<MatXd> es(gram);
  VecXd evals = es.eigenvalues().reverse();
  MatXd evecs = es.eigenvectors().rowwise().reverse();

  double total = std::max(evals.sum(), 1e-300);
  const Eigen::Index max_rank = std::min<Eigen::Index>(n - 1, d);
  Eigen::Index keep = 0;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < max_rank; ++i) {
    if (evals[i] <= 1e-12 * evals[0]) break;  // rank-deficient tail truncated
    acc += evals[i];
    ++keep;
    if (acc / total >= var_keep) break;
  }
  keep = std::max<Eigen::Index>(keep, 1);

  pca.components.resize(keep, d);
  pca.explained = evals.head(keep);
  for (Eigen::Index i = 0; i < keep; ++i) {
    VecXd u = evecs.col(i);
    VecXd comp = c.transpose() * u;
    pca.components.row(i) = comp.normalized().transpose();
  }
  return pca;
}

VecXd lasso_fit(const Eigen::Ref<const MatXd>& x, const Eigen::Ref<const VecXd>& y,
                double alpha, int max_iter, double tol) {
  const Eigen::Index n = x.rows(), d = x.cols();
  VecXd w = VecXd::Zero(d);
  VecXd resid = y;
  VecXd col_sq(d);
  for (Eigen::Index j = 0; j < d; ++j) col_sq[j] = x.col(j).squaredNorm() / double(n);
  for (int it = 0; it < max_iter; ++it) {
    double max_delta = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (col_sq[j] <= 0.0) continue;
      const double wj = w[j];
      const double rho = x.col(j).dot(resid) / double(n) + col_sq[j] * wj;
      double nj;
      if (rho > alpha)
        nj = (rho - alpha) / col_sq[j];
      else if (rho < -alpha)
        nj = (rho + alpha) / col_sq[j];
      else
        nj = 0.0;
      if (nj != wj) {
        resid += x.col(j) * (wj - nj);
        w[j] = nj;
        max_delta = std::max(max_delta, std::abs(nj - wj));
      }
    }
    if (max_delta < tol) break;
  }
  return w;
}

namespace {

struct SubjectSplitData {
  MatXd x_train, x_val, x_test;  // flattened [trials x (E*samples)]
  VecXd y_train, y_val, y_test;  // ms
};

SubjectSplitData flatten_subject(const ProcessedSubject& sub,
                                 const std::vector<SplitLabel>& labels) {
  if (labels.size() != sub.trials.size())
    throw ValidationError("baseline: label count mismatch for " + sub.id);
  const Eigen::Index d =
      sub.trials.empty() ? 0 : sub.trials[0].rows() * sub.trials[0].cols();
  auto count = [&](SplitLabel l) {
    return std::count(labels.begin(), labels.end(), l);
  };
  SubjectSplitData out;
  out.x_train.resize(count(SplitLabel::train), d);
  out.x_val.resize(count(SplitLabel::val), d);
  out.x_test.resize(count(SplitLabel::test), d);
  out.y_train.resize(out.x_train.rows());
  out.y_val.resize(out.x_val.rows());
  out.y_test.resize(out.x_test.rows());
  Eigen::Index it = 0, iv = 0, is = 0;
  for (size_t t = 0; t < sub.trials.size(); ++t) {
    MatRM<float> rm = sub.trials[t];
    Eigen::Map<const VecXf> flat(rm.data(), d);
    switch (labels[t]) {
      case SplitLabel::train:
        out.x_train.row(it) = flat.cast<double>().transpose();
        out.y_train[it++] = sub.rt_ms[static_cast<Eigen::Index>(t)];
        break;
      case SplitLabel::val:
        out.x_val.row(iv) = flat.cast<double>().transpose();
        out.y_val[iv++] = sub.rt_ms[static_cast<Eigen::Index>(t)];
        break;
      case SplitLabel::test:
        out.x_test.row(is) = flat.cast<double>().transpose();
        out.y_test[is++] = sub.rt_ms[static_cast<Eigen::Index>(t)];
        break;
    }
  }
  return out;
}

// ------------------------- small deep baselines ----------------------------
// A plain dense stack (optionally preceded by the tokenizer-style conv +
// pool applied per electrode) trained with the single-subject recipe.

struct DenseNet {
  std::vector<MatXd> w;
  std::vector<VecXd> b;

  static DenseNet make(const std::vector<Eigen::Index>& dims, std::uint64_t seed) {
    DenseNet net;
    std::mt19937_64 rng(derive_seed(seed, 0xD15C0));
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      const double bound = 1.0 / std::sqrt(double(dims[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      MatXd wl(dims[l + 1], dims[l]);
      for (Eigen::Index i = 0; i < wl.size(); ++i) wl.data()[i] = u(rng);
      net.w.push_back(std::move(wl));
      net.b.push_back(VecXd::Zero(dims[l + 1]));
    }
    return net;
  }

  Eigen::Index n_params() const {
    Eigen::Index n = 0;
    for (size_t l = 0; l < w.size(); ++l) n += w[l].size() + b[l].size();
    return n;
  }

  VecXd forward(const MatXd& x) const {
    MatXd h = x;
    for (size_t l = 0; l < w.size(); ++l) {
      h = (h * w[l].transpose()).rowwise() + b[l].transpose();
      if (l + 1 < w.size()) h = h.cwiseMax(0.0);
    }
    return h.col(0);
  }

  // huber loss + gradient; returns loss
  double grad(const MatXd& x, const VecXd& y, double delta,
              std::vector<MatXd>& dw, std::vector<VecXd>& db) const {
    std::vector<MatXd> acts;  // pre-activations per layer
    MatXd h = x;
    acts.push_back(h);
    for (size_t l = 0; l < w.size(); ++l) {
      MatXd pre = (h * w[l].transpose()).rowwise() + b[l].transpose();
      acts.push_back(pre);
      h = (l + 1 < w.size()) ? pre.cwiseMax(0.0) : pre;
    }
    VecXd pred = h.col(0);
    const Eigen::Index n = y.size();
    double loss = 0.0;
    VecXd dp(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double r = pred[i] - y[i];
      loss += std::abs(r) <= delta ? 0.5 * r * r : delta * (std::abs(r) - 0.5 * delta);
      dp[i] = (std::abs(r) <= delta ? r : (r > 0 ? delta : -delta)) / double(n);
    }
    loss /= double(n);

    MatXd dh = dp;
    for (int l = static_cast<int>(w.size()) - 1; l >= 0; --l) {
      const MatXd& pre = acts[static_cast<size_t>(l) + 1];
      MatXd dpre = dh;
      if (static_cast<size_t>(l) + 1 < w.size())
        dpre.array() *= (pre.array() > 0.0).cast<double>();
      MatXd input = acts[static_cast<size_t>(l)];
      if (l > 0) input = input.cwiseMax(0.0);
      dw[static_cast<size_t>(l)] = dpre.transpose() * input;
      db[static_cast<size_t>(l)] = dpre.colwise().sum().transpose();
      if (l > 0) dh = dpre * w[static_cast<size_t>(l)];
    }
    return loss;
  }
};

double eval_r2_dense(const DenseNet& net, const MatXd& x, const VecXd& y) {
  return r2(net.forward(x), y);
}

// AdamW training of the dense stack; returns best-val weights
DenseNet train_dense(DenseNet net, const MatXd& xtr, const VecXd& ytr,
                     const MatXd& xva, const VecXd& yva,
                     const train::TrainConfig& cfg) {
  std::vector<MatXd> m_w, v_w, dw;
  std::vector<VecXd> m_b, v_b, db;
  for (size_t l = 0; l < net.w.size(); ++l) {
    m_w.push_back(MatXd::Zero(net.w[l].rows(), net.w[l].cols()));
    v_w.push_back(MatXd::Zero(net.w[l].rows(), net.w[l].cols()));
    dw.push_back(MatXd::Zero(net.w[l].rows(), net.w[l].cols()));
    m_b.push_back(VecXd::Zero(net.b[l].size()));
    v_b.push_back(VecXd::Zero(net.b[l].size()));
    db.push_back(VecXd::Zero(net.b[l].size()));
  }
  long long t = 0;
  double best_val = std::numeric_limits<double>::infinity();
  DenseNet best = net;
  std::vector<Eigen::Index> order(static_cast<size_t>(xtr.rows()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch, train::Mode::single_subject);
    auto rng = make_rng(cfg.seed, 31'000 + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_single)) {
      const size_t hi = std::min(order.size(), at + static_cast<size_t>(cfg.batch_single));
      MatXd xb(hi - at, xtr.cols());
      VecXd yb(hi - at);
      for (size_t i = at; i < hi; ++i) {
        xb.row(static_cast<Eigen::Index>(i - at)) = xtr.row(order[i]);
        yb[static_cast<Eigen::Index>(i - at)] = ytr[order[i]];
      }
      net.grad(xb, yb, cfg.huber_delta, dw, db);
      ++t;
      const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
      const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
      for (size_t l = 0; l < net.w.size(); ++l) {
        m_w[l] = cfg.beta1 * m_w[l] + (1.0 - cfg.beta1) * dw[l];
        v_w[l] = cfg.beta2 * v_w[l].array().matrix() +
                 (1.0 - cfg.beta2) * dw[l].cwiseProduct(dw[l]);
        net.w[l].array() -=
            lr * ((m_w[l].array() / bc1) / ((v_w[l].array() / bc2).sqrt() + 1e-8) +
                  cfg.weight_decay * net.w[l].array());
        m_b[l] = cfg.beta1 * m_b[l] + (1.0 - cfg.beta1) * db[l];
        v_b[l] = cfg.beta2 * v_b[l].array().matrix() +
                 (1.0 - cfg.beta2) * db[l].cwiseProduct(db[l]);
        net.b[l].array() -=
            lr * ((m_b[l].array() / bc1) / ((v_b[l].array() / bc2).sqrt() + 1e-8) +
                  cfg.weight_decay * net.b[l].array());
      }
    }
    if (xva.rows() >= 2) {
      const double val = (net.forward(xva) - yva).squaredNorm() / double(yva.size());
      if (val < best_val) {
        best_val = val;
        best = net;
      }
    } else {
      best = net;
    }
  }
  return best;
}

// tokenizer-style conv features for the cnn_mlp baseline: K kernels, same
// padding, average pooling; applied per electrode and flattened
struct ConvFront {
  MatXd kernel;  // [K x kl]
  VecXd bias;
  int e = 0, t = 0, window = 80, stride = 5;

  int t_out() const { return (t - window) / stride + 1; }

  MatXd apply(const MatXd& x) const {  // x: [trials x (e*t)] -> features
    const int k = static_cast<int>(kernel.rows());
    const int kl = static_cast<int>(kernel.cols());
    const int p = (kl - 1) / 2;
    const int to = t_out();
    MatXd out(x.rows(), Eigen::Index(e) * to * k);
    VecXd conv(t);
    for (Eigen::Index tr = 0; tr < x.rows(); ++tr) {
      for (int ee = 0; ee < e; ++ee) {
        for (int c = 0; c < k; ++c) {
          for (int pos = 0; pos < t; ++pos) {
            double acc = bias[c];
            for (int j = 0; j < kl; ++j) {
              const int src = pos + j - p;
              if (src >= 0 && src < t) acc += kernel(c, j) * x(tr, ee * t + src);
            }
            conv[pos] = acc;
          }
          for (int tt = 0; tt < to; ++tt)
            out(tr, (Eigen::Index(ee) * to + tt) * k + c) =
                conv.segment(tt * stride, window).mean();
        }
      }
    }
    return out;
  }
};

}  // namespace

BaselineResult baseline(BaselineKind kind, const ProcessedSubject& subject,
                        const std::vector<SplitLabel>& labels,
                        const train::TrainConfig& cfg) {
  SubjectSplitData d = flatten_subject(subject, labels);
  BaselineResult out;
  out.kind = kind;

  if (kind == BaselineKind::mlp || kind == BaselineKind::cnn_mlp) {
    // deep kinds: targets standardized by train stats, huber objective
    const double mu = d.y_train.mean();
    const double sd = std::sqrt(
        std::max((d.y_train.array() - mu).square().mean(), 1e-12));
    VecXd ytr = (d.y_train.array() - mu) / sd;
    VecXd yva = (d.y_val.array() - mu) / sd;

    MatXd xtr = d.x_train, xva = d.x_val, xte = d.x_test;
    if (kind == BaselineKind::cnn_mlp) {
      const int e = static_cast<int>(subject.trials[0].rows());
      const int t = static_cast<int>(subject.trials[0].cols());
      ConvFront front;
      front.e = e;
      front.t = t;
      std::mt19937_64 rng(derive_seed(cfg.seed, 0xC0FFEE));
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(11.0),
                                               1.0 / std::sqrt(11.0));
      front.kernel.resize(2, 11);
      for (Eigen::Index i = 0; i < front.kernel.size(); ++i)
        front.kernel.data()[i] = u(rng);
      front.bias = VecXd::Zero(2);
      xtr = front.apply(xtr);
      xva = front.apply(xva);
      xte = front.apply(xte);
    }

    std::vector<Eigen::Index> dims;
    if (kind == BaselineKind::mlp)
      dims = {xtr.cols(), 256, 128, 64, 1};   // 4 dense layers
    else
      dims = {xtr.cols(), 128, 64, 1};        // conv front + 3 dense layers
    DenseNet net = DenseNet::make(dims, cfg.seed);
    net = train_dense(std::move(net), xtr, ytr, xva, yva, cfg);
    VecXd pred = (net.forward(xte).array() * sd + mu);
    out.test_r2 = r2(pred, d.y_test);
    out.test_rmse_ms = rmse(pred, d.y_test);
    return out;
  }

  // classical kinds: standardize -> PCA -> regressor
  Pca pca = fit_pca(d.x_train);
  out.n_components = static_cast<int>(pca.components.rows());
  MatXd str = pca.transform(d.x_train);
  MatXd sva = pca.transform(d.x_val);
  MatXd ste = pca.transform(d.x_test);
  const double ymu = d.y_train.mean();
  VecXd yc = d.y_train.array() - ymu;

  auto ridge_fit = [&](double alpha) -> VecXd {
    MatXd a = str.transpose() * str;
    a.diagonal().array() += alpha;
    return a.ldlt().solve(str.transpose() * yc);
  };
  auto val_r2 = [&](const VecXd& w) {
    return d.y_val.size() >= 2 ? r2((sva * w).array() + ymu, d.y_val)
                               : 0.0;
  };

  VecXd w;
  if (kind == BaselineKind::wiener) {
    w = str.colPivHouseholderQr().solve(yc);
  } else {
    const std::vector<double> alphas = {0.1, 1.0, 10.0};
    double best = -std::numeric_limits<double>::infinity();
    for (double a : alphas) {
      VecXd cand = kind == BaselineKind::ridge ? ridge_fit(a)
                                               : lasso_fit(str, yc, a);
      const double v = val_r2(cand);
      if (v > best) {
        best = v;
        w = cand;
        out.alpha = a;
      }
    }
  }
  out.coef = w;
  VecXd pred = (ste * w).array() + ymu;
  out.test_r2 = r2(pred, d.y_test);
  out.test_rmse_ms = rmse(pred, d.y_test);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<AblationRow> ablation_suite(const ProcessedCohort& pc,
                                        const SplitAssignment& split,
                                        const train::TrainConfig& cfg,
                                        const model::ModelConfig& mcfg) {
  struct Variant {
    std::string name;
    model::ModelConfig cfg;
  };
  std::vector<Variant> variants;
  auto base = train::fit_config(mcfg, pc);
  variants.push_back({"full", base});
  {
    auto c = base;
    c.ablate.at = true;
    variants.push_back({"-AT", c});
  }
  {
    auto c = base;
    c.ablate.pe = true;
    variants.push_back({"-PE", c});
  }
  {
    auto c = base;
    c.ablate.as = true;
    variants.push_back({"-AS", c});
  }
  {
    auto c = base;
    c.ablate.rh = true;
    variants.push_back({"-RH", c});
  }
  {
    auto c = base;
    c.variant_2d = true;
    variants.push_back({"2D", c});
  }

  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    const auto t0 = std::chrono::steady_clock::now();
    train::FitResult fit =
        train::train(pc, split, cfg, train::Mode::multi_subject, v.cfg);
    AblationRow row;
    row.variant = v.name;
    row.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EvalReport rep = evaluate(fit.net, fit.scaler, pc, split);
    row.pooled_r2 = rep.pooled_r2;
    row.mean_r2 = rep.mean_r2;
    row.per_subject = rep.per_subject;
    row.attn_flops_per_trial = model::attention_flops(v.cfg, 1);
    auto counts = fit.net.counts();
    row.head_param_total = counts.per_head * counts.n_heads;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(12);
  out << "variant,pooled_r2,mean_r2,attn_flops_per_trial,head_param_total,"
         "train_seconds\n";
  for (const auto& r : rows)
    out << r.variant << ',' << r.pooled_r2 << ',' << r.mean_r2 << ','
        << r.attn_flops_per_trial << ',' << r.head_param_total << ','
        << r.train_seconds << '\n';
  return out.str();
}

LatencyStats measure_latency(const train::FloatNet& net,
                             const train::FloatBatch& one_trial, int n_warm,
                             int n_meas) {
  if (one_trial.n_trials != 1)
    throw std::invalid_argument("measure_latency: pass exactly one trial");
  for (int i = 0; i < n_warm; ++i) (void)net.predict(one_trial);
  std::vector<double> ms(static_cast<size_t>(n_meas));
  for (int i = 0; i < n_meas; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)net.predict(one_trial);
    ms[static_cast<size_t>(i)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                  t0)
            .count();
  }
  std::sort(ms.begin(), ms.end());
  LatencyStats out;
  out.n = n_meas;
  out.median_ms = ms[static_cast<size_t>(n_meas / 2)];
  out.p95_ms = ms[static_cast<size_t>(std::min<int>(n_meas - 1, (95 * n_meas) / 100))];
  return out;
}

RankSum wilcoxon_rank_sum(const Eigen::Ref<const VecXd>& x,
                          const Eigen::Ref<const VecXd>& y) {
  const Eigen::Index n1 = x.size(), n2 = y.size();
  if (n1 < 1 || n2 < 1) throw std::invalid_argument("rank_sum: empty sample");
  std::vector<std::pair<double, int>> all;
  for (Eigen::Index i = 0; i < n1; ++i) all.push_back({x[i], 0});
  for (Eigen::Index i = 0; i < n2; ++i) all.push_back({y[i], 1});
  std::sort(all.begin(), all.end());

  const auto n = static_cast<Eigen::Index>(all.size());
  std::vector<double> rank(static_cast<size_t>(n));
  double tie_term = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j < n && all[static_cast<size_t>(j)].first == all[static_cast<size_t>(i)].first)
      ++j;
    const double avg = 0.5 * double(i + j - 1) + 1.0;  // 1-based average rank
    for (Eigen::Index k = i; k < j; ++k) rank[static_cast<size_t>(k)] = avg;
    const double t = double(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  double w_stat = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (all[static_cast<size_t>(i)].second == 0) w_stat += rank[static_cast<size_t>(i)];

  const double mu = double(n1) * double(n + 1) / 2.0;
  const double var = double(n1) * double(n2) / 12.0 *
                     (double(n + 1) - tie_term / (double(n) * double(n - 1)));
  if (var <= 0.0) return {0.0, 1.0};
  const double z = (w_stat - mu) / std::sqrt(var);
  const double p = std::erfc(std::abs(z) / std::sqrt(2.0));
  return {z, p};
}

}  // namespace seeg::eval
