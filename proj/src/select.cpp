#include <seeg/select.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace seeg {

EpochSet epoch_around_color_change(const Eigen::Ref<const MatXd>& signals,
                                   const std::vector<TrialEvent>& events,
                                   double fs, double start_ms, double end_ms) {
  if (end_ms <= start_ms) throw std::invalid_argument("epoch: empty window");
  EpochSet out;
  out.window_start_ms = start_ms;
  out.window_end_ms = end_ms;
  out.sampling_rate = fs;
  const auto off = static_cast<Eigen::Index>(std::llround(start_ms * fs / 1000.0));
  const auto len =
      static_cast<Eigen::Index>(std::llround((end_ms - start_ms) * fs / 1000.0));
  for (size_t t = 0; t < events.size(); ++t) {
    Eigen::Index lo = events[t].color_change + off;
    if (lo < 0 || lo + len > signals.cols())
      throw ValidationError("trial " + std::to_string(t) +
                            ": epoch window outside recorded signal");
    out.trials.push_back(signals.middleCols(lo, len));
  }
  return out;
}

MontageResult bipolar_montage(const Session& session,
                              const std::vector<ElectrodeMeta>& electrodes,
                              const std::vector<std::pair<int, int>>& pairs) {
  MontageResult out;
  out.session.subject_id = session.subject_id;
  out.session.sampling_rate = session.sampling_rate;
  out.session.events = session.events;
  out.session.signals.resize(static_cast<Eigen::Index>(pairs.size()),
                             session.signals.cols());
  for (size_t i = 0; i < pairs.size(); ++i) {
    auto [a, b] = pairs[i];
    if (a < 0 || b < 0 || a >= session.signals.rows() || b >= session.signals.rows() ||
        static_cast<size_t>(a) >= electrodes.size() ||
        static_cast<size_t>(b) >= electrodes.size())
      throw ValidationError("montage pair references unknown contact (" +
                            std::to_string(a) + "," + std::to_string(b) + ")");
    out.session.signals.row(static_cast<Eigen::Index>(i)) =
        session.signals.row(a) - session.signals.row(b);
    ElectrodeMeta meta;
    meta.id = electrodes[a].id + "-" + electrodes[b].id;
    meta.mni = 0.5 * (electrodes[a].mni + electrodes[b].mni);
    out.electrodes.push_back(std::move(meta));
  }
  return out;
}

std::vector<std::pair<int, int>> shank_pairs(
    const std::vector<std::vector<int>>& shanks) {
  std::vector<std::pair<int, int>> pairs;
  for (const auto& chain : shanks)
    for (size_t i = 0; i + 1 < chain.size(); ++i)
      pairs.emplace_back(chain[i], chain[i + 1]);
  return pairs;
}

double line_noise_ratio(const Eigen::Ref<const VecXd>& x, double fs) {
  if (fs <= 124.0) throw std::invalid_argument("line_noise_ratio: fs must exceed 124 Hz");
  if (x.size() < static_cast<Eigen::Index>(2.0 * fs))
    throw std::invalid_argument("line_noise_ratio: need at least 2 s of data");
  double mains = dsp::welch_band_power(x, fs, 58.0, 62.0);
  double ref = dsp::welch_band_power(x, fs, 18.0, 22.0);
  if (ref <= 0.0) return std::numeric_limits<double>::infinity();
  return mains / ref;
}

namespace {

bool has_rail_run(const Eigen::Ref<const Eigen::RowVectorXd>& x, double rail,
                  int min_run) {
  int run = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) == rail) {
      if (++run >= min_run) return true;
    } else {
      run = 0;
    }
  }
  return false;
}

}  // namespace

std::vector<bool> reject_bad_trials(const EpochSet& raw, double rail) {
  const Eigen::Index n_trials = raw.n_trials();
  if (n_trials < 2) throw std::invalid_argument("reject_bad_trials: need >= 2 trials");
  const Eigen::Index n_elec = raw.n_electrodes();
  constexpr int kSaturationRun = 32;

  if (rail < 0.0) {
    rail = 0.0;
    for (const auto& tr : raw.trials)
      rail = std::max(rail, tr.cwiseAbs().maxCoeff());
  }

  std::vector<bool> reject(static_cast<size_t>(n_trials), false);
  for (Eigen::Index e = 0; e < n_elec; ++e) {
    // |mean| + SD per trial, against 10x its across-trial average
    VecXd spread(n_trials);
    for (Eigen::Index t = 0; t < n_trials; ++t) {
      auto row = raw.trials[static_cast<size_t>(t)].row(e);
      double mu = row.mean();
      double sd = std::sqrt((row.array() - mu).square().mean());
      spread[t] = std::abs(mu) + sd;
    }
    double limit = 10.0 * spread.mean();
    for (Eigen::Index t = 0; t < n_trials; ++t) {
      if (spread[t] > limit) reject[static_cast<size_t>(t)] = true;
      if (rail > 0.0 &&
          has_rail_run(raw.trials[static_cast<size_t>(t)].row(e), rail,
                       kSaturationRun))
        reject[static_cast<size_t>(t)] = true;
    }
  }
  return reject;
}

namespace {

double variance(const Eigen::Ref<const VecXd>& x) {
  if (x.size() < 2) return 0.0;
  double mu = x.mean();
  return (x.array() - mu).square().sum() / double(x.size() - 1);
}

double median_of(std::vector<double>& scratch) {
  const size_t n = scratch.size();
  auto mid = scratch.begin() + n / 2;
  std::nth_element(scratch.begin(), mid, scratch.end());
  double hi = *mid;
  if (n % 2 == 1) return hi;
  double lo = *std::max_element(scratch.begin(), mid);
  return 0.5 * (lo + hi);
}

}  // namespace

VecXd snr_statistic(const EpochSet& task, const EpochSet& baseline) {
  if (task.n_trials() != baseline.n_trials())
    throw std::invalid_argument("snr: task/baseline trial counts differ");
  if (task.n_trials() < 2) throw std::invalid_argument("snr: need >= 2 trials");
  if (task.n_electrodes() != baseline.n_electrodes())
    throw std::invalid_argument("snr: electrode counts differ");

  const Eigen::Index n_elec = task.n_electrodes();
  const Eigen::Index n_trials = task.n_trials();
  VecXd snr(n_elec);
  std::vector<double> scratch(static_cast<size_t>(n_trials));
  for (Eigen::Index e = 0; e < n_elec; ++e) {
    VecXd med_task(task.n_samples()), med_base(baseline.n_samples());
    for (Eigen::Index j = 0; j < task.n_samples(); ++j) {
      for (Eigen::Index t = 0; t < n_trials; ++t)
        scratch[static_cast<size_t>(t)] = task.trials[static_cast<size_t>(t)](e, j);
      med_task[j] = median_of(scratch);
    }
    for (Eigen::Index j = 0; j < baseline.n_samples(); ++j) {
      for (Eigen::Index t = 0; t < n_trials; ++t)
        scratch[static_cast<size_t>(t)] =
            baseline.trials[static_cast<size_t>(t)](e, j);
      med_base[j] = median_of(scratch);
    }
    double num = variance(med_task), den = variance(med_base);
    snr[e] = den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
  }
  return snr;
}

VecXd bootstrap_test(const EpochSet& task, const EpochSet& baseline, int n_iter,
                     std::uint64_t seed) {
  if (n_iter < 100) throw std::invalid_argument("bootstrap: n_iter >= 100 required");
  const Eigen::Index lb = baseline.n_samples();
  const Eigen::Index lt = task.n_samples();
  if (lb <= 0 || lt <= 0 || lt % lb != 0)
    throw std::invalid_argument(
        "bootstrap: task window must be an integer multiple of the baseline window");
  const int q = static_cast<int>(lt / lb);  // task units per trial
  const Eigen::Index n_trials = task.n_trials();
  const Eigen::Index n_elec = task.n_electrodes();

  VecXd observed = snr_statistic(task, baseline);
  VecXd p(n_elec);

  std::vector<double> scratch(static_cast<size_t>(n_trials));
  std::vector<int> base_unit(static_cast<size_t>(n_trials));
  for (Eigen::Index e = 0; e < n_elec; ++e) {
    auto rng = make_rng(seed, 77'000 + static_cast<std::uint64_t>(e));
    std::uniform_int_distribution<int> unit_dist(0, q);
    int count_ge = 0;

    // unit u of trial t: u = 0 is the baseline window, u >= 1 is task slice
    // [(u-1)*lb, u*lb)
    auto unit_value = [&](Eigen::Index t, int u, Eigen::Index j) {
      return u == 0 ? baseline.trials[static_cast<size_t>(t)](e, j)
                    : task.trials[static_cast<size_t>(t)](e, (u - 1) * lb + j);
    };

    for (int it = 0; it < n_iter; ++it) {
      for (Eigen::Index t = 0; t < n_trials; ++t)
        base_unit[static_cast<size_t>(t)] = unit_dist(rng);

      VecXd med_base(lb), med_task(lt);
      for (Eigen::Index j = 0; j < lb; ++j) {
        for (Eigen::Index t = 0; t < n_trials; ++t)
          scratch[static_cast<size_t>(t)] =
              unit_value(t, base_unit[static_cast<size_t>(t)], j);
        med_base[j] = median_of(scratch);
      }
      for (int s = 0; s < q; ++s) {
        for (Eigen::Index j = 0; j < lb; ++j) {
          for (Eigen::Index t = 0; t < n_trials; ++t) {
            int u = s + (s >= base_unit[static_cast<size_t>(t)] ? 1 : 0);
            scratch[static_cast<size_t>(t)] = unit_value(t, u, j);
          }
          med_task[s * lb + j] = median_of(scratch);
        }
      }
      double num = variance(med_task), den = variance(med_base);
      double null_snr = den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
      if (null_snr >= observed[e]) ++count_ge;
    }
    p[e] = double(count_ge) / double(n_iter);
  }
  return p;
}

FdrResult bh_fdr(const Eigen::Ref<const VecXd>& p_values, double alpha) {
  const Eigen::Index m = p_values.size();
  if (m == 0) throw std::invalid_argument("bh_fdr: empty input");
  for (Eigen::Index i = 0; i < m; ++i)
    if (!(p_values[i] >= 0.0 && p_values[i] <= 1.0))
      throw std::invalid_argument("bh_fdr: p-value outside [0,1]");

  std::vector<Eigen::Index> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return p_values[a] < p_values[b]; });

  FdrResult out;
  out.p_adjusted.resize(m);
  out.reject.assign(static_cast<size_t>(m), false);
  double running = 1.0;
  for (Eigen::Index r = m - 1; r >= 0; --r) {
    double candidate = double(m) / double(r + 1) * p_values[order[static_cast<size_t>(r)]];
    running = std::min(running, candidate);
    out.p_adjusted[order[static_cast<size_t>(r)]] = running;
  }
  for (Eigen::Index i = 0; i < m; ++i)
    out.reject[static_cast<size_t>(i)] = out.p_adjusted[i] < alpha;
  return out;
}

}  // namespace seeg
