#pragma once

// Optimization recipes and workflows: AdamW with step-decayed learning rate,
// single-/multi-subject training, whole-model finetuning, and head-first
// gradual-unfreeze transfer to unseen subjects.

#include <seeg/model/checkpoint.hpp>
#include <seeg/model/net.hpp>
#include <seeg/pipeline.hpp>

#include <functional>

namespace seeg::train {

enum class Mode { single_subject, multi_subject };

struct TrainConfig {
  int epochs = 1000;
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double huber_delta = 1.0;
  int batch_single = 64;
  int batch_multi = 1024;
  int unfreeze_epoch = 400;  // transfer: head-only phase length
  int n_splits = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train: lr > 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs >= 1");
    if (unfreeze_epoch >= epochs)
      throw std::invalid_argument("train: unfreeze_epoch < epochs");
    if (batch_single < 1 || batch_multi < 1)
      throw std::invalid_argument("train: batch sizes >= 1");
  }

  /// step decay: x0.5 every 200 epochs (single subject), x0.9 every 100
  /// (multi subject); finetune/transfer follow the single-subject schedule
  double lr_at(int epoch, Mode mode) const {
    const double gamma = mode == Mode::multi_subject ? 0.9 : 0.5;
    const int period = mode == Mode::multi_subject ? 100 : 200;
    return lr * std::pow(gamma, epoch / period);
  }

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainHistory {
  std::vector<double> train_loss, val_loss, lr;
  std::vector<double> epoch_seconds;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  model::LossKind loss = model::LossKind::huber;

  void write_csv(const std::filesystem::path& file) const;
};

/// Decoupled-decay Adam on the flat parameter vector; updates are restricted
/// to the given index ranges (everything else is untouched, bit for bit).
class AdamW {
 public:
  AdamW(double lr, double beta1, double beta2, double weight_decay,
        Eigen::Index n)
      : lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay),
        m_(VecXf::Zero(n)), v_(VecXf::Zero(n)) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(VecXf& params, const VecXf& grad,
            const std::vector<std::pair<Eigen::Index, Eigen::Index>>& ranges);

 private:
  double lr_, beta1_, beta2_, wd_;
  double eps_ = 1e-8;
  VecXf m_, v_;
  long long t_ = 0;
};

using FloatNet = model::Net<float>;
using FloatBatch = model::TrialBatch<float>;

/// View of the processed cohort as (subject, trial) items with split labels.
struct Items {
  struct Item {
    int subject;
    int trial;
  };
  std::vector<Item> train, val, test;
};

Items collect_items(const ProcessedCohort& pc, const SplitAssignment& split);

/// Assembles a padded/masked batch in model input layout; targets scaled.
FloatBatch make_batch(const ProcessedCohort& pc, const FloatNet& net,
                      const model::TargetScaler& scaler,
                      const std::vector<Items::Item>& items);

struct FitResult {
  FloatNet net;
  TrainHistory history;
  model::TargetScaler scaler;
};

/// Resolves e_max = 0 to the cohort's widest subject.
model::ModelConfig fit_config(model::ModelConfig cfg, const ProcessedCohort& pc);

/// Best-validation-checkpoint training with the mode's batch size and
/// schedule. Huber objective; deterministic given cfg.seed.
FitResult train(const ProcessedCohort& pc, const SplitAssignment& split,
                const TrainConfig& cfg, Mode mode,
                const model::ModelConfig& mcfg);

/// Whole-model finetuning of a pretrained net on one subject (MSE objective,
/// single-subject recipe). The pretrained target scaler is kept.
FitResult finetune(const FloatNet& pretrained, const model::TargetScaler& scaler,
                   const ProcessedCohort& pc, const std::string& subject,
                   const SplitAssignment& split, const TrainConfig& cfg);

struct TransferResult {
  FitResult fit;
  long long phase1_changed_outside_head = 0;  // must stay 0
  long long phase1_changed_in_head = 0;
  Eigen::Index head_size = 0;
};

/// Gradual unfreezing: a fresh head for `subject` is trained alone for
/// cfg.unfreeze_epoch epochs (trunk and batch-norm state frozen), then all
/// parameters train. Huber objective, single-subject recipe.
TransferResult transfer(const FloatNet& pretrained,
                        const model::TargetScaler& scaler,
                        const ProcessedCohort& pc, const std::string& subject,
                        const SplitAssignment& split, const TrainConfig& cfg);

struct LooReport {
  struct Fold {
    std::string subject;
    double pretrain_pooled_r2 = 0.0;  // on the held-in subjects
    double transfer_r2 = 0.0;         // held-out subject, test split
    double transfer_rmse_ms = 0.0;
  };
  std::vector<Fold> folds;
};

/// Leave-one-out: multi-subject pretrain on all but S, transfer to S.
LooReport loo_workflow(const ProcessedCohort& pc, const SplitAssignment& split,
                       const TrainConfig& cfg, const model::ModelConfig& mcfg);

struct Averaged {
  double mean = 0.0;
  double sem = 0.0;
  bool sem_defined = false;
  std::vector<double> values;
};

/// Runs `run(split_seed)` for split seeds 0..n-1; sem = sd/sqrt(n)
/// (reported as 0 with sem_defined=false when n = 1).
Averaged multi_split_average(const std::function<double(std::uint64_t)>& run,
                             int n_splits = 5);

/// Restricts a processed cohort to one subject.
ProcessedCohort subset(const ProcessedCohort& pc, const std::string& subject);
/// Drops one subject.
ProcessedCohort drop_subject(const ProcessedCohort& pc, const std::string& subject);

}  // namespace seeg::train
