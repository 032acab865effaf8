#pragma once

// Metrics, per-subject evaluation reports, classical and small deep
// baselines, the ablation harness, and inference-latency measurement.

#include <seeg/train.hpp>

namespace seeg::eval {

/// 1 - SS_res/SS_tot about the target mean. Requires nonzero target variance.
double r2(const Eigen::Ref<const VecXd>& pred, const Eigen::Ref<const VecXd>& target);

double rmse(const Eigen::Ref<const VecXd>& pred, const Eigen::Ref<const VecXd>& target);

struct SubjectScore {
  std::string id;
  double r2 = 0.0;
  double rmse_ms = 0.0;
  int n_test = 0;
};

struct EvalReport {
  double pooled_r2 = 0.0;
  double pooled_rmse_ms = 0.0;
  std::vector<SubjectScore> per_subject;
  double mean_r2 = 0.0;
  double sem_r2 = 0.0;
  std::uint64_t config_hash = 0;
  std::uint64_t split_seed = 0;

  std::string to_json() const;
  std::string to_csv() const;  // one row per subject
};

/// Test-split evaluation in milliseconds (predictions de-scaled).
EvalReport evaluate(train::FloatNet& net, const model::TargetScaler& scaler,
                    const ProcessedCohort& pc, const SplitAssignment& split,
                    SplitLabel which = SplitLabel::test);

// ---------------------------------------------------------------------------
// Baselines (single subject): standardize -> PCA -> regressor for the
// classical kinds; small deep nets trained with the single-subject recipe.

enum class BaselineKind { wiener, ridge, lasso, mlp, cnn_mlp };

BaselineKind baseline_kind_from(const std::string& name);
std::string to_string(BaselineKind k);

struct Pca {
  VecXd mean, scale;   // per-feature standardization
  MatXd components;    // [n_components x d]
  VecXd explained;     // variance per retained component
  MatXd transform(const Eigen::Ref<const MatXd>& x) const;
  MatXd inverse(const Eigen::Ref<const MatXd>& scores) const;  // standardized units
};

/// Snapshot-method PCA on standardized features, keeping the smallest number
/// of components explaining `var_keep` of the variance.
Pca fit_pca(const Eigen::Ref<const MatXd>& x, double var_keep = 0.95);

struct BaselineResult {
  BaselineKind kind;
  double test_r2 = 0.0;
  double test_rmse_ms = 0.0;
  double alpha = 0.0;     // chosen ridge/lasso penalty
  int n_components = 0;   // retained PCA components
  VecXd coef;             // regressor weights in PCA space (classical kinds)
};

BaselineResult baseline(BaselineKind kind, const ProcessedSubject& subject,
                        const std::vector<SplitLabel>& labels,
                        const train::TrainConfig& cfg);

/// Plain coordinate-descent lasso on (already standardized) features;
/// objective (1/2n)||y - Xw||^2 + alpha ||w||_1.
VecXd lasso_fit(const Eigen::Ref<const MatXd>& x, const Eigen::Ref<const VecXd>& y,
                double alpha, int max_iter = 1000, double tol = 1e-8);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string variant;  // full, -AT, -PE, -AS, -RH, 2D
  double pooled_r2 = 0.0;
  double mean_r2 = 0.0;
  std::vector<SubjectScore> per_subject;
  long long attn_flops_per_trial = 0;
  long long head_param_total = 0;
  double train_seconds = 0.0;
};

/// Trains the six variants with identical hyperparameters and reports
/// per-subject scores with attention-cost accounting.
std::vector<AblationRow> ablation_suite(const ProcessedCohort& pc,
                                        const SplitAssignment& split,
                                        const train::TrainConfig& cfg,
                                        const model::ModelConfig& mcfg);

std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Latency

struct LatencyStats {
  double median_ms = 0.0;
  double p95_ms = 0.0;
  int n = 0;
};

/// Wall-clock per single-trial eval-mode forward after warmup.
LatencyStats measure_latency(const train::FloatNet& net,
                             const train::FloatBatch& one_trial, int n_warm = 10,
                             int n_meas = 100);

// ---------------------------------------------------------------------------
// Rank-sum utility

struct RankSum {
  double statistic = 0.0;  // normal approximation z
  double p_value = 1.0;    // two-sided
};

RankSum wilcoxon_rank_sum(const Eigen::Ref<const VecXd>& x,
                          const Eigen::Ref<const VecXd>& y);

}  // namespace seeg::eval
