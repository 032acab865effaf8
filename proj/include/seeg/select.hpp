#pragma once

// Task-responsive electrode selection: high-gamma SNR statistic, per-trial
// label-shuffling bootstrap, and Benjamini-Hochberg adjustment pooled across
// the whole cohort.

#include <seeg/cohort.hpp>
#include <seeg/dsp.hpp>

#include <utility>

namespace seeg {

/// Trials epoched around the color change; trials[t] is [electrodes x samples].
struct EpochSet {
  std::vector<MatXd> trials;
  double window_start_ms = 0.0;  // relative to color change
  double window_end_ms = 0.0;
  double sampling_rate = 0.0;

  Eigen::Index n_trials() const { return static_cast<Eigen::Index>(trials.size()); }
  Eigen::Index n_electrodes() const { return trials.empty() ? 0 : trials[0].rows(); }
  Eigen::Index n_samples() const { return trials.empty() ? 0 : trials[0].cols(); }
};

/// Cuts [start_ms, end_ms) windows around each event's color change.
/// Throws when a window would leave the signal.
EpochSet epoch_around_color_change(const Eigen::Ref<const MatXd>& signals,
                                   const std::vector<TrialEvent>& events,
                                   double fs, double start_ms, double end_ms);

struct MontageResult {
  Session session;  // virtual bipolar electrodes
  std::vector<ElectrodeMeta> electrodes;
};

/// Differences immediately adjacent contacts; the virtual electrode sits at
/// the pair's MNI midpoint.
MontageResult bipolar_montage(const Session& session,
                              const std::vector<ElectrodeMeta>& electrodes,
                              const std::vector<std::pair<int, int>>& pairs);

/// Builds adjacent-contact pairs from per-shank contact chains.
std::vector<std::pair<int, int>> shank_pairs(const std::vector<std::vector<int>>& shanks);

/// Welch band-power ratio (58-62 Hz over 18-22 Hz); > 1 flags mains pickup.
double line_noise_ratio(const Eigen::Ref<const VecXd>& x, double fs);

/// Per-trial rejection on raw voltage epochs: amplifier-saturation runs at
/// the rail value, or |mean|+SD above 10x its across-trial average on any
/// electrode. `rail` defaults to the largest |value| seen in the epochs.
std::vector<bool> reject_bad_trials(const EpochSet& raw, double rail = -1.0);

/// Zero-phase 4th-order Butterworth bandpass to the 70-150 Hz band.
inline VecXd bandpass_hg(const Eigen::Ref<const VecXd>& x, double fs) {
  if (fs <= 300.0)
    throw std::invalid_argument("bandpass_hg: fs too low for the 70-150 Hz band");
  return dsp::filtfilt(dsp::butter_bandpass(4, 70.0, 150.0, fs), x);
}

using dsp::hilbert_envelope;

/// Variance of the pointwise across-trial median of the task window over the
/// same for the baseline window, per electrode. A constant baseline median
/// yields the +infinity sentinel.
VecXd snr_statistic(const EpochSet& task, const EpochSet& baseline);

/// Per-trial label-shuffling bootstrap. The task window must span an integer
/// multiple of the baseline window; each trial's task window is cut into
/// baseline-sized units and one of the trial's units is drawn into the
/// baseline slot per iteration (the classic task/baseline swap when the
/// windows have equal length). Returns the fraction of shuffled SNR values
/// >= the observed one, per electrode. Deterministic given seed.
VecXd bootstrap_test(const EpochSet& task, const EpochSet& baseline,
                     int n_iter = 10000, std::uint64_t seed = 0);

struct FdrResult {
  VecXd p_adjusted;
  std::vector<bool> reject;
};

/// Benjamini-Hochberg step-up adjustment; reject where adjusted < alpha.
FdrResult bh_fdr(const Eigen::Ref<const VecXd>& p_values, double alpha = 0.05);

/// Per-electrode selection outcome for one subject.
struct SnrResult {
  std::vector<std::string> electrode_ids;
  VecXd snr;         // +inf sentinel for zero baseline variance
  VecXd p_value;
  VecXd p_adjusted;
  std::vector<bool> selected;
  std::vector<bool> tested;             // false when excluded pre-test
  std::vector<std::string> exclusion;   // "", "line_noise", "disconnected"
};

}  // namespace seeg
