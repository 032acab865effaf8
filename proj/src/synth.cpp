#include <seeg/cohort.hpp>
#include <seeg/dsp.hpp>

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <vector>

namespace seeg {

namespace {

constexpr double kBurstFreqHz = 110.0;
constexpr double kBurstSigmaMs = 50.0;   // Morlet-like Gaussian envelope
constexpr double kSlowSigmaMs = 70.0;    // evoked deflection riding with it
constexpr double kSlowGain = 2.5;        // deflection amplitude / burst amplitude
constexpr double kLatencyOffsetMs = 80.0;
constexpr double kLatencySlope = 0.45;
constexpr double kLatencyJitterMs = 8.0;
constexpr double kNoiseFloorHz = 0.5;    // flatten 1/f below this

struct NoiseSpec {
  std::vector<double> weights;  // per-bin spectral amplitude, k = 0..m/2
  Eigen::Index m = 0;
  double fs = 0.0;

  // exact variance of the synthesized signal restricted to [lo, hi] Hz
  double band_variance(double lo, double hi) const {
    double acc = 0.0;
    for (Eigen::Index k = 1; k <= m / 2; ++k) {
      double f = fs * double(k) / double(m);
      if (f < lo || f > hi) continue;
      double mult = (k == m / 2 && m % 2 == 0) ? 1.0 : 2.0;
      acc += mult * weights[k] * weights[k];
    }
    return acc / double(m) / double(m);
  }
};

NoiseSpec make_noise_spec(Eigen::Index n, double fs, double exponent) {
  NoiseSpec spec;
  spec.m = dsp::next_fast_len(n);
  spec.fs = fs;
  spec.weights.assign(static_cast<size_t>(spec.m / 2 + 1), 0.0);
  for (Eigen::Index k = 1; k <= spec.m / 2; ++k) {
    double f = fs * double(k) / double(spec.m);
    double fe = std::max(f, kNoiseFloorHz);
    spec.weights[k] = std::pow(fe, -exponent / 2.0);
  }
  double var = spec.band_variance(0.0, fs / 2.0);
  double scale = 1.0 / std::sqrt(var);  // unit total variance
  for (auto& w : spec.weights) w *= scale;
  return spec;
}

// Hermitian spectral synthesis of one noise trace (unit variance by
// construction of `spec`).
VecXd synth_noise(const NoiseSpec& spec, Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Index m = spec.m;
  std::vector<std::complex<double>> freq(static_cast<size_t>(m),
                                         std::complex<double>(0.0, 0.0));
  for (Eigen::Index k = 1; k < (m + 1) / 2; ++k) {
    // unit-variance complex gaussian (a + ib)/sqrt(2), hermitian mirror
    double a = gauss(rng), b = gauss(rng);
    freq[k] = spec.weights[k] * std::complex<double>(a, b) / std::numbers::sqrt2;
    freq[m - k] = std::conj(freq[k]);
  }
  if (m % 2 == 0) freq[m / 2] = spec.weights[m / 2] * gauss(rng);

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> time;
  fft.inv(time, freq);  // scales by 1/m, matching band_variance accounting
  VecXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = time[static_cast<size_t>(i)].real();
  return out;
}

}  // namespace

Cohort generate_synthetic(const SynthConfig& cfg, SynthGroundTruth* truth) {
  cfg.validate();
  Cohort cohort;
  cohort.seed = cfg.seed;
  cohort.provenance = "synthetic";
  if (truth) truth->subjects.clear();

  for (int s = 0; s < cfg.n_subjects; ++s) {
    auto sub_rng = make_rng(cfg.seed, 1000 + s);
    Subject sub;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "S%02d", s);
    sub.id = buf;

    const double fs = (s % 2 == 0) ? 1024.0 : 512.0;

    std::uniform_int_distribution<int> e_dist(cfg.electrodes_min, cfg.electrodes_max);
    const int n_elec = e_dist(sub_rng);
    std::uniform_real_distribution<double> ux(-90.0, 90.0), uy(-120.0, 90.0),
        uz(-70.0, 80.0);
    for (int e = 0; e < n_elec; ++e) {
      ElectrodeMeta meta;
      std::snprintf(buf, sizeof(buf), "E%02d", e);
      meta.id = buf;
      meta.mni = Vec3d(ux(sub_rng), uy(sub_rng), uz(sub_rng));
      sub.electrodes.push_back(std::move(meta));
    }

    // responsive subset: round(fraction * E) electrodes, chosen at random
    int n_resp = static_cast<int>(std::lround(cfg.responsive_fraction * n_elec));
    std::vector<int> perm(n_elec);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), sub_rng);
    std::vector<int> responsive(perm.begin(), perm.begin() + n_resp);
    std::sort(responsive.begin(), responsive.end());
    for (int e : responsive) sub.gt_responsive.push_back(sub.electrodes[e].id);

    // per-subject response time distribution
    std::uniform_real_distribution<double> mu_dist(cfg.rt_log_mu - cfg.rt_log_mu_spread,
                                                   cfg.rt_log_mu + cfg.rt_log_mu_spread);
    const double log_mu = mu_dist(sub_rng);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int n_trials = cfg.trials_per_subject;
    std::vector<double> rt_ms(n_trials);
    std::vector<double> foreperiod_ms(n_trials);
    for (int i = 0; i < n_trials; ++i) {
      double rt = 0.0;
      for (int attempt = 0; attempt < 16; ++attempt) {
        rt = std::exp(log_mu + cfg.rt_log_sigma * gauss(sub_rng));
        if (rt >= 150.0 && rt <= 1200.0) break;
      }
      rt_ms[i] = std::clamp(rt, 150.0, 1200.0);
      foreperiod_ms[i] = (sub_rng() & 1) ? 1500.0 : 500.0;
    }

    SynthGroundTruth::SubjectTruth st;
    st.responsive = responsive;
    st.latency_offset_ms = kLatencyOffsetMs;
    st.latency_slope = kLatencySlope;
    st.latencies_ms =
        MatXd::Constant(n_trials, n_elec, std::numeric_limits<double>::quiet_NaN());
    std::vector<bool> is_resp(n_elec, false);
    for (int e : responsive) is_resp[e] = true;
    for (int i = 0; i < n_trials; ++i)
      for (int e = 0; e < n_elec; ++e)
        if (is_resp[e])
          st.latencies_ms(i, e) = kLatencyOffsetMs + kLatencySlope * rt_ms[i] +
                                  kLatencyJitterMs * gauss(sub_rng);

    // distribute trials across sessions (front-loaded remainder)
    const int n_sessions = cfg.sessions_per_subject;
    std::vector<int> per_session(n_sessions, n_trials / n_sessions);
    for (int k = 0; k < n_trials % n_sessions; ++k) per_session[k] += 1;

    int trial_cursor = 0;
    for (int si = 0; si < n_sessions; ++si) {
      Session sess;
      sess.subject_id = sub.id;
      sess.sampling_rate = fs;

      // lay out trials on a session timeline
      const double lead_s = 1.0, iti_s = 0.7, post_cc_s = 2.0;
      std::vector<double> cc_s(per_session[si]);
      double cursor = lead_s;
      std::vector<TrialEvent> events(per_session[si]);
      for (int t = 0; t < per_session[si]; ++t) {
        int gi = trial_cursor + t;
        double onset = cursor;
        double cc = onset + foreperiod_ms[gi] / 1000.0;
        events[t].stim_onset = static_cast<std::int64_t>(std::llround(onset * fs));
        events[t].color_change = static_cast<std::int64_t>(std::llround(cc * fs));
        events[t].rt_ms = rt_ms[gi];
        cc_s[t] = cc;
        cursor = cc + post_cc_s + iti_s;
      }
      sess.events = std::move(events);
      const Eigen::Index n_samples =
          static_cast<Eigen::Index>(std::llround((cursor + 1.5) * fs));

      NoiseSpec spec = make_noise_spec(n_samples, fs, cfg.noise_exponent);
      const double sigma_hg = std::sqrt(spec.band_variance(70.0, 150.0));
      const double burst_amp = cfg.burst_snr * sigma_hg;
      const double slow_amp = kSlowGain * burst_amp;

      sess.signals.resize(n_elec, n_samples);
      for (int e = 0; e < n_elec; ++e) {
        auto noise_rng = make_rng(cfg.seed, splitmix64(2'000'000 + s) +
                                                splitmix64(1000 * si + e));
        VecXd x = synth_noise(spec, n_samples, noise_rng);
        if (is_resp[e]) {
          for (int t = 0; t < per_session[si]; ++t) {
            int gi = trial_cursor + t;
            double t0 = cc_s[t] + st.latencies_ms(gi, e) / 1000.0;
            double tau_b = kBurstSigmaMs / 1000.0, tau_s = kSlowSigmaMs / 1000.0;
            Eigen::Index i_lo = std::max<Eigen::Index>(
                0, static_cast<Eigen::Index>((t0 - 5.0 * tau_s) * fs));
            Eigen::Index i_hi = std::min<Eigen::Index>(
                n_samples - 1, static_cast<Eigen::Index>((t0 + 5.0 * tau_s) * fs));
            for (Eigen::Index i = i_lo; i <= i_hi; ++i) {
              double dt = double(i) / fs - t0;
              double g_b = std::exp(-dt * dt / (2.0 * tau_b * tau_b));
              double g_s = std::exp(-dt * dt / (2.0 * tau_s * tau_s));
              x[i] += burst_amp * g_b *
                          std::cos(2.0 * std::numbers::pi * kBurstFreqHz * dt) +
                      slow_amp * g_s;
            }
          }
        }
        sess.signals.row(e) = x.cast<float>().transpose();
      }
      sub.sessions.push_back(std::move(sess));
      trial_cursor += per_session[si];
    }

    if (truth) truth->subjects.push_back(std::move(st));
    cohort.subjects.push_back(std::move(sub));
  }

  validate(cohort);
  return cohort;
}

}  // namespace seeg
