#pragma once

#include <seeg/common.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace seeg {

struct ElectrodeMeta {
  std::string id;
  Vec3d mni = Vec3d::Zero();  // millimeters
  bool selected = false;
};

struct TrialEvent {
  std::int64_t stim_onset = 0;    // sample index into the session signal
  std::int64_t color_change = 0;  // sample index into the session signal
  double rt_ms = 0.0;             // color change to button press
};

struct Session {
  std::string subject_id;
  double sampling_rate = 0.0;  // Hz; 512 or 1024 raw, 400 after processing
  MatXf signals;               // [electrodes x samples]
  std::vector<TrialEvent> events;
};

struct Subject {
  std::string id;
  std::vector<ElectrodeMeta> electrodes;
  std::vector<Session> sessions;
  // contact chains on one shank, as indices into `electrodes`; adjacent
  // entries are referenced pairwise by the bipolar montage. Empty when the
  // recording is already referenced.
  std::vector<std::vector<int>> shanks;
  // synthetic-data ground truth (electrode ids carrying task-locked bursts);
  // empty for real recordings.
  std::vector<std::string> gt_responsive;
};

struct Cohort {
  std::vector<Subject> subjects;
  std::uint64_t seed = 0;
  std::string provenance;
};

/// Full invariant check; throws ValidationError naming the offending
/// subject/session.
void validate(const Cohort& cohort);

// ---------------------------------------------------------------------------
// Train/val/test splitting

enum class SplitLabel : std::uint8_t { train = 0, val = 1, test = 2 };

struct SplitAssignment {
  std::map<std::string, std::vector<SplitLabel>> labels;  // subject -> trial
  std::uint64_t seed = 0;

  int count(const std::string& subject, SplitLabel l) const {
    int c = 0;
    for (auto v : labels.at(subject))
      if (v == l) ++c;
    return c;
  }
};

/// Stratified per subject; counts follow the largest-remainder rule so each
/// class is within one trial of its exact quota. Deterministic given seed.
SplitAssignment split_trials(const std::map<std::string, int>& trials_per_subject,
                             std::array<double, 3> ratios, std::uint64_t seed);

SplitAssignment split_trials(const Cohort& cohort, std::array<double, 3> ratios,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic cohorts

struct SynthConfig {
  int n_subjects = 8;
  int electrodes_min = 3;
  int electrodes_max = 28;
  double responsive_fraction = 0.5;
  int trials_per_subject = 200;
  int sessions_per_subject = 1;
  // response times: per-subject lognormal; each subject's log-mean is drawn
  // uniformly in rt_log_mu +- rt_log_mu_spread
  double rt_log_mu = 5.9915;  // log(400 ms)
  double rt_log_mu_spread = 0.15;
  double rt_log_sigma = 0.25;
  double burst_snr = 3.0;      // burst amplitude over high-gamma noise SD
  double noise_exponent = 1.0; // 1/f^a background slope
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthGroundTruth {
  struct SubjectTruth {
    std::vector<int> responsive;  // indices into Subject::electrodes
    double latency_offset_ms = 0.0;
    double latency_slope = 0.0;
    // realized burst-onset latency (ms after color change) per [trial x
    // electrode]; NaN where the electrode carries no burst
    MatXd latencies_ms;
  };
  std::vector<SubjectTruth> subjects;
};

Cohort generate_synthetic(const SynthConfig& cfg,
                          SynthGroundTruth* truth = nullptr);

}  // namespace seeg
