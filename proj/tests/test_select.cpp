#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <seeg/select.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace seeg;

namespace {

// Independent step-up oracle: for every rank r, the BH adjusted value is
// min over ranks >= r of m*p/(rank), capped at 1 (quadratic scan).
VecXd bh_oracle(const VecXd& p) {
  const Eigen::Index m = p.size();
  std::vector<Eigen::Index> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return p[a] < p[b]; });
  VecXd adj(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    double best = 1.0;
    for (Eigen::Index j = r; j < m; ++j)
      best = std::min(best, double(m) / double(j + 1) * p[order[size_t(j)]]);
    adj[order[size_t(r)]] = best;
  }
  return adj;
}

EpochSet noise_epochs(int trials, int electrodes, int samples, double fs,
                      std::uint64_t seed, double start_ms, double end_ms) {
  EpochSet out;
  out.sampling_rate = fs;
  out.window_start_ms = start_ms;
  out.window_end_ms = end_ms;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  for (int t = 0; t < trials; ++t) {
    MatXd m(electrodes, samples);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    out.trials.push_back(std::move(m));
  }
  return out;
}

double ks_vs_uniform(VecXd p) {
  std::sort(p.data(), p.data() + p.size());
  const auto n = p.size();
  double d = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    d = std::max(d, std::abs(double(i + 1) / n - p[i]));
    d = std::max(d, std::abs(double(i) / n - p[i]));
  }
  return d;
}

}  // namespace

TEST_CASE("bipolar montage: identical contacts difference to zero") {
  Session sess;
  sess.subject_id = "S";
  sess.sampling_rate = 512.0;
  sess.signals.resize(2, 100);
  for (Eigen::Index i = 0; i < 100; ++i)
    sess.signals(0, i) = sess.signals(1, i) =
        std::sin(2.0 * std::numbers::pi * 5.0 * i / 512.0);
  std::vector<ElectrodeMeta> metas(2);
  metas[0] = {"A1", Vec3d(0, 0, 0), false};
  metas[1] = {"A2", Vec3d(5, 0, 0), false};
  auto r = bipolar_montage(sess, metas, {{0, 1}});
  CHECK(r.session.signals.row(0).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(r.electrodes[0].id == "A1-A2");
  CHECK(r.electrodes[0].mni == Vec3d(2.5, 0, 0));
}

TEST_CASE("bipolar montage: 4-contact shank yields 3 virtual electrodes") {
  Session sess;
  sess.subject_id = "S";
  sess.sampling_rate = 512.0;
  sess.signals = MatXf::Random(4, 50);
  std::vector<ElectrodeMeta> metas(4);
  for (int i = 0; i < 4; ++i)
    metas[size_t(i)] = {"A" + std::to_string(i + 1), Vec3d(5.0 * i, 0, 0), false};
  auto pairs = shank_pairs({{0, 1, 2, 3}});
  REQUIRE(pairs.size() == 3);
  auto r = bipolar_montage(sess, metas, pairs);
  CHECK(r.session.signals.rows() == 3);
  CHECK(r.electrodes.size() == 3);
  for (int i = 0; i < 3; ++i)
    CHECK((r.session.signals.row(i) -
           (sess.signals.row(i) - sess.signals.row(i + 1)))
              .cwiseAbs()
              .maxCoeff() == 0.0f);
}

TEST_CASE("bipolar montage rejects unknown contacts") {
  Session sess;
  sess.subject_id = "S";
  sess.sampling_rate = 512.0;
  sess.signals = MatXf::Random(2, 50);
  std::vector<ElectrodeMeta> metas(2);
  metas[0] = {"A1", Vec3d(0, 0, 0), false};
  metas[1] = {"A2", Vec3d(5, 0, 0), false};
  CHECK_THROWS_AS(bipolar_montage(sess, metas, {{0, 7}}), ValidationError);
}

TEST_CASE("line noise ratio flags 60 Hz contamination only") {
  const double fs = 1024.0;
  const auto n = static_cast<Eigen::Index>(20.0 * fs);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 0.01);
  VecXd mains(n), clean(n), white(static_cast<Eigen::Index>(60.0 * fs));
  for (Eigen::Index i = 0; i < n; ++i) {
    mains[i] = std::sin(2.0 * std::numbers::pi * 60.0 * i / fs) + g(rng);
    clean[i] = std::sin(2.0 * std::numbers::pi * 20.0 * i / fs) + g(rng);
  }
  std::normal_distribution<double> unit;
  for (Eigen::Index i = 0; i < white.size(); ++i) white[i] = unit(rng);

  CHECK(line_noise_ratio(mains, fs) > 10.0);
  CHECK(line_noise_ratio(clean, fs) < 0.1);
  CHECK(line_noise_ratio(white, fs) == doctest::Approx(1.0).epsilon(0.2));
  CHECK_THROWS_AS(line_noise_ratio(white.head(100), fs), std::invalid_argument);
}

TEST_CASE("trial rejection flags amplitude outliers and saturation") {
  EpochSet epochs = noise_epochs(20, 2, 400, 512.0, 3, -500, 281.25);

  SUBCASE("100x spike is rejected") {
    epochs.trials[7].row(0) *= 100.0;
    auto rej = reject_bad_trials(epochs);
    CHECK(rej[7]);
    CHECK(std::count(rej.begin(), rej.end(), true) == 1);
  }

  SUBCASE("all-identical benign trials pass") {
    for (auto& t : epochs.trials) t = epochs.trials[0];
    auto rej = reject_bad_trials(epochs);
    CHECK(std::count(rej.begin(), rej.end(), true) == 0);
  }

  SUBCASE("a 50-sample flat-line at the rail is rejected as saturation") {
    double rail = 0.0;
    for (const auto& t : epochs.trials)
      rail = std::max(rail, t.cwiseAbs().maxCoeff());
    rail *= 1.5;
    epochs.trials[3].row(1).segment(100, 50).setConstant(rail);
    auto rej = reject_bad_trials(epochs);
    CHECK(rej[3]);
  }

  SUBCASE("fewer than two trials is an error") {
    EpochSet one;
    one.trials.push_back(MatXd::Random(2, 100));
    CHECK_THROWS_AS(reject_bad_trials(one), std::invalid_argument);
  }
}

TEST_CASE("snr statistic: constant task median gives zero") {
  EpochSet task = noise_epochs(10, 1, 64, 512.0, 1, 0, 125);
  EpochSet base = noise_epochs(10, 1, 64, 512.0, 2, -125, 0);
  for (auto& t : task.trials) t.setConstant(3.0);  // median constant over time
  VecXd snr = snr_statistic(task, base);
  CHECK(snr[0] == 0.0);
}

TEST_CASE("snr statistic: zero baseline variance reports +inf sentinel") {
  EpochSet task = noise_epochs(10, 1, 64, 512.0, 1, 0, 125);
  EpochSet base = noise_epochs(10, 1, 64, 512.0, 2, -125, 0);
  for (auto& t : base.trials) t.setConstant(1.0);
  VecXd snr = snr_statistic(task, base);
  CHECK(std::isinf(snr[0]));
}

TEST_CASE("snr statistic is about 1 under an exchangeable null") {
  // empirical mean over 1000 independent draws
  double acc = 0.0;
  const int reps = 1000;
  for (int r = 0; r < reps; ++r) {
    EpochSet task = noise_epochs(12, 1, 50, 512.0, 1000 + r, 0, 97.6);
    EpochSet base = noise_epochs(12, 1, 50, 512.0, 9000 + r, -97.6, 0);
    acc += snr_statistic(task, base)[0];
  }
  CHECK(acc / reps == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("bootstrap: observed above all null draws reports p = 0") {
  // a strong artificial activation: task variance flat-out dominates
  EpochSet task = noise_epochs(14, 1, 60, 512.0, 3, 0, 117.2);
  EpochSet base = noise_epochs(14, 1, 60, 512.0, 4, -117.2, 0);
  for (auto& t : task.trials)
    for (Eigen::Index j = 0; j < t.cols(); ++j) t(0, j) += 30.0 * std::sin(0.3 * j);
  VecXd p = bootstrap_test(task, base, 500, 11);
  CHECK(p[0] == 0.0);
}

TEST_CASE("bootstrap is deterministic given the seed") {
  EpochSet task = noise_epochs(10, 3, 48, 512.0, 5, 0, 93.75);
  EpochSet base = noise_epochs(10, 3, 48, 512.0, 6, -93.75, 0);
  VecXd a = bootstrap_test(task, base, 300, 17);
  VecXd b = bootstrap_test(task, base, 300, 17);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  VecXd c = bootstrap_test(task, base, 300, 18);
  CHECK((a - c).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("bootstrap rejects too few iterations and indivisible windows") {
  EpochSet task = noise_epochs(10, 1, 50, 512.0, 5, 0, 97.6);
  EpochSet base = noise_epochs(10, 1, 50, 512.0, 6, -97.6, 0);
  CHECK_THROWS_AS(bootstrap_test(task, base, 99, 1), std::invalid_argument);
  EpochSet bad_base = noise_epochs(10, 1, 33, 512.0, 6, -64.4, 0);
  CHECK_THROWS_AS(bootstrap_test(task, bad_base, 200, 1), std::invalid_argument);
}

TEST_CASE("bootstrap null p-values are uniform (KS)") {
  // equal-length exchangeable windows; 500 electrodes, few iterations each
  const int n_elec = 500;
  EpochSet task = noise_epochs(10, n_elec, 40, 512.0, 21, 0, 78.1);
  EpochSet base = noise_epochs(10, n_elec, 40, 512.0, 22, -78.1, 0);
  VecXd p = bootstrap_test(task, base, 400, 77);
  CHECK(ks_vs_uniform(p) < 0.05);
}

TEST_CASE("bootstrap with a 3:1 task:baseline window is calibrated too") {
  const int n_elec = 300;
  EpochSet task = noise_epochs(12, n_elec, 90, 512.0, 31, 0, 175.8);
  EpochSet base = noise_epochs(12, n_elec, 30, 512.0, 32, -58.6, 0);
  VecXd p = bootstrap_test(task, base, 300, 99);
  CHECK(ks_vs_uniform(p) < 0.08);
}

TEST_CASE("bh_fdr matches the frozen worked example") {
  VecXd p(4);
  p << 0.01, 0.02, 0.04, 0.5;
  auto r = bh_fdr(p, 0.05);
  CHECK(r.p_adjusted[0] == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(r.p_adjusted[1] == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(r.p_adjusted[2] == doctest::Approx(4.0 * 0.04 / 3.0).epsilon(1e-12));
  CHECK(r.p_adjusted[3] == doctest::Approx(0.5).epsilon(1e-12));
  // step-up rule: adjusted < 0.05 holds for the first two ranks only
  CHECK(std::count(r.reject.begin(), r.reject.end(), true) == 2);
}

TEST_CASE("bh_fdr edge cases") {
  VecXd ones = VecXd::Ones(5);
  auto r = bh_fdr(ones, 0.05);
  CHECK(r.p_adjusted.maxCoeff() == 1.0);
  CHECK(std::count(r.reject.begin(), r.reject.end(), true) == 0);

  VecXd single(1);
  single << 0.03;
  auto s = bh_fdr(single, 0.05);
  CHECK(s.p_adjusted[0] == doctest::Approx(0.03).epsilon(1e-15));
  CHECK(s.reject[0]);

  CHECK_THROWS_AS(bh_fdr(VecXd(), 0.05), std::invalid_argument);
  VecXd bad(2);
  bad << 0.5, 1.5;
  CHECK_THROWS_AS(bh_fdr(bad, 0.05), std::invalid_argument);
}

TEST_CASE("bh_fdr equals the brute-force oracle on 1000 random vectors") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> len(1, 40);
  for (int rep = 0; rep < 1000; ++rep) {
    VecXd p(len(rng));
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      double v = u(rng);
      p[i] = u(rng) < 0.3 ? v * 0.05 : v;  // mix of small and large
    }
    auto got = bh_fdr(p, 0.05);
    VecXd want = bh_oracle(p);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      CHECK(got.p_adjusted[i] == want[i]);  // exact match required
      CHECK(got.p_adjusted[i] >= p[i]);
      CHECK(got.reject[size_t(i)] == (want[i] < 0.05));
    }
  }
}

TEST_CASE("bootstrap detects synthetic bursts with small p") {
  SynthConfig cfg;
  cfg.n_subjects = 1;
  cfg.trials_per_subject = 40;
  cfg.electrodes_min = 4;
  cfg.electrodes_max = 4;
  cfg.responsive_fraction = 0.5;
  cfg.burst_snr = 5.0;
  cfg.seed = 2;
  SynthGroundTruth truth;
  Cohort c = generate_synthetic(cfg, &truth);
  const auto& sess = c.subjects[0].sessions[0];
  const double fs = sess.sampling_rate;

  MatXd env(sess.signals.rows(), sess.signals.cols());
  for (Eigen::Index e = 0; e < sess.signals.rows(); ++e)
    env.row(e) =
        hilbert_envelope(bandpass_hg(sess.signals.row(e).cast<double>(), fs))
            .transpose();
  EpochSet task = epoch_around_color_change(env, sess.events, fs, 0, 1500);
  EpochSet base = epoch_around_color_change(env, sess.events, fs, -500, 0);

  VecXd snr = snr_statistic(task, base);
  VecXd p = bootstrap_test(task, base, 400, 5);
  for (int e : truth.subjects[0].responsive) {
    CHECK(snr[e] > 2.0);  // generator-known modulation
    CHECK(p[e] <= 0.01);
  }
}
