#include <seeg/train.hpp>

#include <chrono>
#include <cmath>
#include <fstream>

namespace seeg::train {

using model::LossKind;

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["weight_decay"] = weight_decay;
  j["huber_delta"] = huber_delta;
  j["batch_single"] = batch_single;
  j["batch_multi"] = batch_multi;
  j["unfreeze_epoch"] = unfreeze_epoch;
  j["n_splits"] = n_splits;
  j["seed"] = seed;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.huber_delta = j.value("huber_delta", c.huber_delta);
  c.batch_single = j.value("batch_single", c.batch_single);
  c.batch_multi = j.value("batch_multi", c.batch_multi);
  c.unfreeze_epoch = j.value("unfreeze_epoch", c.unfreeze_epoch);
  c.n_splits = j.value("n_splits", c.n_splits);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void TrainHistory::write_csv(const std::filesystem::path& file) const {
  std::ofstream out(file);
  if (!out) throw ValidationError("cannot write " + file.string());
  out << "epoch,train_loss,val_loss,lr\n";
  out.precision(12);
  for (size_t e = 0; e < train_loss.size(); ++e)
    out << e << ',' << train_loss[e] << ',' << val_loss[e] << ',' << lr[e] << '\n';
}

void AdamW::step(VecXf& params, const VecXf& grad,
                 const std::vector<std::pair<Eigen::Index, Eigen::Index>>& ranges) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (const auto& [lo, hi] : ranges) {
    for (Eigen::Index i = lo; i < hi; ++i) {
      const double g = grad[i];
      double m = beta1_ * m_[i] + (1.0 - beta1_) * g;
      double v = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      m_[i] = static_cast<float>(m);
      v_[i] = static_cast<float>(v);
      const double update =
          (m / bc1) / (std::sqrt(v / bc2) + eps_) + wd_ * double(params[i]);
      params[i] -= static_cast<float>(lr_ * update);
    }
  }
}

Items collect_items(const ProcessedCohort& pc, const SplitAssignment& split) {
  Items out;
  for (size_t s = 0; s < pc.subjects.size(); ++s) {
    const auto& sub = pc.subjects[s];
    auto it = split.labels.find(sub.id);
    if (it == split.labels.end())
      throw ValidationError("split is missing subject " + sub.id);
    if (it->second.size() != sub.trials.size())
      throw ValidationError("split trial count mismatch for subject " + sub.id);
    for (size_t t = 0; t < sub.trials.size(); ++t) {
      Items::Item item{static_cast<int>(s), static_cast<int>(t)};
      switch (it->second[t]) {
        case SplitLabel::train: out.train.push_back(item); break;
        case SplitLabel::val: out.val.push_back(item); break;
        case SplitLabel::test: out.test.push_back(item); break;
      }
    }
  }
  return out;
}

FloatBatch make_batch(const ProcessedCohort& pc, const FloatNet& net,
                      const model::TargetScaler& scaler,
                      const std::vector<Items::Item>& items) {
  const auto& cfg = net.config();
  FloatBatch b;
  b.n_trials = static_cast<int>(items.size());
  b.e_max = cfg.e_max;
  b.voltages = MatRM<float>::Zero(b.rows(), cfg.t_trial);
  b.mni = MatX<float>::Zero(b.rows(), 3);
  b.mask.assign(static_cast<size_t>(b.rows()), 0);
  b.electrode_index.assign(static_cast<size_t>(b.rows()), 0);
  b.head_of_trial.resize(items.size());
  b.targets.resize(b.n_trials);

  for (size_t i = 0; i < items.size(); ++i) {
    const auto& sub = pc.subjects[static_cast<size_t>(items[i].subject)];
    const auto& trial = sub.trials[static_cast<size_t>(items[i].trial)];
    const auto e_s = trial.rows();
    if (e_s > cfg.e_max)
      throw ValidationError("subject " + sub.id + " exceeds model e_max");
    if (trial.cols() != cfg.t_trial)
      throw ValidationError("subject " + sub.id + " trial length mismatch");
    const Eigen::Index base = static_cast<Eigen::Index>(i) * cfg.e_max;
    b.voltages.middleRows(base, e_s) = trial;
    b.mni.middleRows(base, e_s) = sub.mni.cast<float>();
    for (Eigen::Index e = 0; e < e_s; ++e) {
      b.mask[static_cast<size_t>(base + e)] = 1;
      b.electrode_index[static_cast<size_t>(base + e)] = static_cast<int>(e);
    }
    auto hit = net.params().head_index.find(sub.id);
    if (hit == net.params().head_index.end())
      throw ValidationError("no head registered for subject " + sub.id);
    b.head_of_trial[i] = hit->second;
    b.targets[static_cast<Eigen::Index>(i)] =
        static_cast<float>(scaler.to_scaled(sub.rt_ms[items[i].trial]));
  }
  return b;
}

model::ModelConfig fit_config(model::ModelConfig cfg, const ProcessedCohort& pc) {
  if (cfg.e_max == 0) cfg.e_max = std::max(1, pc.max_electrodes());
  if (pc.max_electrodes() > cfg.e_max)
    throw ValidationError("cohort needs e_max >= " +
                          std::to_string(pc.max_electrodes()));
  if (cfg.t_trial != pc.n_samples)
    throw ValidationError("model t_trial must equal processed sample count");
  cfg.validate();
  return cfg;
}

namespace {

model::TargetScaler fit_scaler(const ProcessedCohort& pc,
                               const std::vector<Items::Item>& items) {
  double sum = 0.0, sq = 0.0;
  for (const auto& it : items) {
    double v = pc.subjects[static_cast<size_t>(it.subject)].rt_ms[it.trial];
    sum += v;
    sq += v * v;
  }
  const double n = std::max<size_t>(items.size(), 1);
  model::TargetScaler sc;
  sc.mean_ms = sum / n;
  sc.sd_ms = std::sqrt(std::max(sq / n - sc.mean_ms * sc.mean_ms, 1e-12));
  return sc;
}

double eval_loss(FloatNet& net, const ProcessedCohort& pc,
                 const model::TargetScaler& scaler,
                 const std::vector<Items::Item>& items, LossKind kind,
                 double delta) {
  constexpr size_t kChunk = 256;
  double loss = 0.0;
  size_t n = 0;
  for (size_t at = 0; at < items.size(); at += kChunk) {
    std::vector<Items::Item> chunk(
        items.begin() + static_cast<std::ptrdiff_t>(at),
        items.begin() + static_cast<std::ptrdiff_t>(
                            std::min(items.size(), at + kChunk)));
    FloatBatch b = make_batch(pc, net, scaler, chunk);
    VecXf preds = net.predict(b);
    for (Eigen::Index i = 0; i < preds.size(); ++i) {
      const double r = double(preds[i]) - double(b.targets[i]);
      if (kind == LossKind::huber)
        loss += std::abs(r) <= delta ? 0.5 * r * r
                                     : delta * (std::abs(r) - 0.5 * delta);
      else
        loss += r * r;
      ++n;
    }
  }
  return n > 0 ? loss / double(n) : 0.0;
}

struct Phase {
  int epoch_from = 0;
  int epoch_to = 0;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> trainable;
  bool update_bn = true;
};

struct BestState {
  VecXf flat;
  VecXf bn_mean, bn_var;
  double val = std::numeric_limits<double>::infinity();
  int epoch = -1;
};

void run_phases(FloatNet& net, const ProcessedCohort& pc,
                const model::TargetScaler& scaler, const Items& items,
                const TrainConfig& cfg, Mode schedule_mode, int batch_size,
                LossKind kind, const std::vector<Phase>& phases,
                TrainHistory& hist, BestState& best) {
  AdamW opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay,
            net.params().layout.total);
  VecXf grad(net.params().layout.total);
  std::vector<Items::Item> order = items.train;
  const double delta = cfg.huber_delta;

  for (const auto& phase : phases) {
    for (int epoch = phase.epoch_from; epoch < phase.epoch_to; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      opt.set_lr(cfg.lr_at(epoch, schedule_mode));

      auto rng = make_rng(cfg.seed, 9000 + static_cast<std::uint64_t>(epoch));
      std::shuffle(order.begin(), order.end(), rng);

      double epoch_loss = 0.0;
      size_t seen = 0;
      for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
        std::vector<Items::Item> chunk(
            order.begin() + static_cast<std::ptrdiff_t>(at),
            order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                order.size(), at + static_cast<size_t>(batch_size))));
        FloatBatch b = make_batch(pc, net, scaler, chunk);
        double loss = net.loss_and_grad(b, kind, static_cast<float>(delta), &grad,
                                        phase.update_bn);
        opt.step(net.params().flat, grad, phase.trainable);
        epoch_loss += loss * double(chunk.size());
        seen += chunk.size();
      }
      epoch_loss /= double(std::max<size_t>(seen, 1));
      if (!std::isfinite(epoch_loss))
        throw std::runtime_error("training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));

      double val = eval_loss(net, pc, scaler, items.val, kind, delta);
      hist.train_loss.push_back(epoch_loss);
      hist.val_loss.push_back(val);
      hist.lr.push_back(opt.lr());
      hist.epoch_seconds.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count());
      if (val < best.val) {
        best.val = val;
        best.epoch = epoch;
        best.flat = net.params().flat;
        best.bn_mean = net.bn_running_mean();
        best.bn_var = net.bn_running_var();
      }
    }
  }
  hist.best_epoch = best.epoch;
  hist.best_val = best.val;
}

std::vector<std::pair<Eigen::Index, Eigen::Index>> all_range(const FloatNet& net) {
  return {{0, net.params().layout.total}};
}

void restore_best(FloatNet& net, const BestState& best) {
  if (best.epoch < 0) return;
  net.params().flat = best.flat;
  net.bn_running_mean() = best.bn_mean;
  net.bn_running_var() = best.bn_var;
}

}  // namespace

FitResult train(const ProcessedCohort& pc, const SplitAssignment& split,
                const TrainConfig& cfg, Mode mode,
                const model::ModelConfig& mcfg_in) {
  cfg.validate();
  if (pc.subjects.empty()) throw ValidationError("train: empty cohort");
  model::ModelConfig mcfg = fit_config(mcfg_in, pc);

  std::vector<std::string> subjects;
  for (const auto& s : pc.subjects) subjects.push_back(s.id);
  FloatNet net(mcfg, subjects);
  net.init(derive_seed(cfg.seed, 42));

  Items items = collect_items(pc, split);
  if (items.train.empty()) throw ValidationError("train: no training trials");
  model::TargetScaler scaler = fit_scaler(pc, items.train);

  TrainHistory hist;
  hist.loss = LossKind::huber;
  BestState best;
  Phase phase{0, cfg.epochs, all_range(net), true};
  const int batch =
      mode == Mode::multi_subject ? cfg.batch_multi : cfg.batch_single;
  run_phases(net, pc, scaler, items, cfg, mode, batch, LossKind::huber, {phase},
             hist, best);
  restore_best(net, best);
  return {std::move(net), std::move(hist), scaler};
}

FitResult finetune(const FloatNet& pretrained, const model::TargetScaler& scaler,
                   const ProcessedCohort& pc, const std::string& subject,
                   const SplitAssignment& split, const TrainConfig& cfg) {
  cfg.validate();
  if (!pretrained.params().head_index.count(subject))
    throw ValidationError("finetune: subject " + subject +
                          " has no head in the pretrained model");
  ProcessedCohort one = subset(pc, subject);
  FloatNet net = pretrained;  // all weights update from epoch 0

  Items items = collect_items(one, split);
  TrainHistory hist;
  hist.loss = LossKind::mse;
  BestState best;
  Phase phase{0, cfg.epochs, all_range(net), true};
  run_phases(net, one, scaler, items, cfg, Mode::single_subject,
             cfg.batch_single, LossKind::mse, {phase}, hist, best);
  restore_best(net, best);
  return {std::move(net), std::move(hist), scaler};
}

namespace {

/// Extends a trained net with a freshly initialized head for `subject`.
FloatNet extend_with_head(const FloatNet& pretrained, const std::string& subject,
                          std::uint64_t seed) {
  if (pretrained.config().ablate.rh)
    throw ValidationError("transfer: shared-head model cannot take a new head");
  std::vector<std::string> subjects = pretrained.params().head_subjects;
  subjects.push_back(subject);
  FloatNet net(pretrained.config(), subjects);
  net.init(derive_seed(seed, 4242));  // new head entries; rest overwritten below
  for (const auto& e : pretrained.params().layout.entries) {
    const auto& ne = net.params().layout.at(e.name);
    net.params().flat.segment(ne.offset, ne.size()) =
        pretrained.params().flat.segment(e.offset, e.size());
  }
  net.bn_running_mean() = pretrained.bn_running_mean();
  net.bn_running_var() = pretrained.bn_running_var();
  return net;
}

}  // namespace

TransferResult transfer(const FloatNet& pretrained,
                        const model::TargetScaler& scaler,
                        const ProcessedCohort& pc, const std::string& subject,
                        const SplitAssignment& split, const TrainConfig& cfg) {
  cfg.validate();
  if (pretrained.params().head_index.count(subject))
    throw ValidationError("transfer: subject " + subject +
                          " already has a head; use finetune");

  FloatNet net = extend_with_head(pretrained, subject, cfg.seed);
  const int head = net.params().head_index.at(subject);
  const auto [hlo, hhi] = net.params().head_range(head);

  ProcessedCohort one = subset(pc, subject);
  Items items = collect_items(one, split);

  TrainHistory hist;
  hist.loss = LossKind::huber;
  BestState best;
  VecXf at_start = net.params().flat;

  // phase 1: new head only; batch-norm statistics frozen with the trunk
  Phase head_only{0, cfg.unfreeze_epoch, {{hlo, hhi}}, false};
  run_phases(net, one, scaler, items, cfg, Mode::single_subject,
             cfg.batch_single, LossKind::huber, {head_only}, hist, best);

  long long changed_in_head = 0, changed_outside_head = 0;
  for (Eigen::Index i = 0; i < net.params().layout.total; ++i) {
    if (net.params().flat[i] != at_start[i]) {
      if (i >= hlo && i < hhi)
        ++changed_in_head;
      else
        ++changed_outside_head;
    }
  }

  // phase 2: everything
  Phase full{cfg.unfreeze_epoch, cfg.epochs, all_range(net), true};
  run_phases(net, one, scaler, items, cfg, Mode::single_subject,
             cfg.batch_single, LossKind::huber, {full}, hist, best);
  restore_best(net, best);
  return TransferResult{{std::move(net), std::move(hist), scaler},
                        changed_outside_head, changed_in_head, hhi - hlo};
}

namespace {

double r2_of(const VecXd& pred, const VecXd& target) {
  const double mu = target.mean();
  const double ss_tot = (target.array() - mu).square().sum();
  const double ss_res = (pred - target).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

VecXd predict_ms(FloatNet& net, const model::TargetScaler& scaler,
                 const ProcessedCohort& pc,
                 const std::vector<Items::Item>& items) {
  FloatBatch b = make_batch(pc, net, scaler, items);
  VecXf preds = net.predict(b);
  VecXd out(preds.size());
  for (Eigen::Index i = 0; i < preds.size(); ++i)
    out[i] = scaler.to_ms(double(preds[i]));
  return out;
}

}  // namespace

LooReport loo_workflow(const ProcessedCohort& pc, const SplitAssignment& split,
                       const TrainConfig& cfg, const model::ModelConfig& mcfg) {
  if (pc.subjects.size() < 3)
    throw ValidationError("loo_workflow: need at least 3 subjects");
  LooReport report;
  for (const auto& sub : pc.subjects) {
    ProcessedCohort rest = drop_subject(pc, sub.id);
    FitResult pre = train(rest, split, cfg, Mode::multi_subject, mcfg);

    Items rest_items = collect_items(rest, split);
    VecXd pre_pred = predict_ms(pre.net, pre.scaler, rest, rest_items.test);
    VecXd pre_target(rest_items.test.size());
    for (size_t i = 0; i < rest_items.test.size(); ++i)
      pre_target[static_cast<Eigen::Index>(i)] =
          rest.subjects[static_cast<size_t>(rest_items.test[i].subject)]
              .rt_ms[rest_items.test[i].trial];

    TransferResult tr = transfer(pre.net, pre.scaler, pc, sub.id, split, cfg);
    ProcessedCohort one = subset(pc, sub.id);
    Items one_items = collect_items(one, split);
    VecXd pred = predict_ms(tr.fit.net, tr.fit.scaler, one, one_items.test);
    VecXd target(one_items.test.size());
    for (size_t i = 0; i < one_items.test.size(); ++i)
      target[static_cast<Eigen::Index>(i)] = one.subjects[0].rt_ms[one_items.test[i].trial];

    LooReport::Fold fold;
    fold.subject = sub.id;
    fold.pretrain_pooled_r2 = r2_of(pre_pred, pre_target);
    fold.transfer_r2 = r2_of(pred, target);
    fold.transfer_rmse_ms = std::sqrt((pred - target).squaredNorm() / target.size());
    report.folds.push_back(fold);
  }
  return report;
}

Averaged multi_split_average(const std::function<double(std::uint64_t)>& run,
                             int n_splits) {
  if (n_splits < 1) throw std::invalid_argument("multi_split_average: n >= 1");
  Averaged out;
  for (int s = 0; s < n_splits; ++s)
    out.values.push_back(run(static_cast<std::uint64_t>(s)));
  double sum = 0.0;
  for (double v : out.values) sum += v;
  out.mean = sum / n_splits;
  if (n_splits > 1) {
    double sq = 0.0;
    for (double v : out.values) sq += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(sq / (n_splits - 1));
    out.sem = sd / std::sqrt(double(n_splits));
    out.sem_defined = true;
  }
  return out;
}

ProcessedCohort subset(const ProcessedCohort& pc, const std::string& subject) {
  ProcessedCohort out;
  out.sampling_rate = pc.sampling_rate;
  out.n_samples = pc.n_samples;
  out.seed = pc.seed;
  for (const auto& s : pc.subjects)
    if (s.id == subject) out.subjects.push_back(s);
  if (out.subjects.empty())
    throw ValidationError("subject " + subject + " not in cohort");
  return out;
}

ProcessedCohort drop_subject(const ProcessedCohort& pc, const std::string& subject) {
  ProcessedCohort out;
  out.sampling_rate = pc.sampling_rate;
  out.n_samples = pc.n_samples;
  out.seed = pc.seed;
  for (const auto& s : pc.subjects)
    if (s.id != subject) out.subjects.push_back(s);
  if (out.subjects.size() == pc.subjects.size())
    throw ValidationError("subject " + subject + " not in cohort");
  return out;
}

}  // namespace seeg::train
