#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <seeg/bundle.hpp>
#include <seeg/select.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace seeg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("seeg_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Cohort tiny_cohort(int subjects = 2, int sessions = 1) {
  Cohort c;
  c.seed = 5;
  c.provenance = "handmade";
  std::mt19937_64 rng(11);
  std::normal_distribution<float> g;
  for (int s = 0; s < subjects; ++s) {
    Subject sub;
    sub.id = "S" + std::to_string(s);
    for (int e = 0; e < 3; ++e) {
      ElectrodeMeta m;
      m.id = "E" + std::to_string(e);
      m.mni = Vec3d(10.0 * e, -20.0, 5.0 + s);
      sub.electrodes.push_back(m);
    }
    const int n_sessions = (s == 0) ? sessions : 1;
    for (int i = 0; i < n_sessions; ++i) {
      Session sess;
      sess.subject_id = sub.id;
      sess.sampling_rate = 512.0;
      sess.signals.resize(3, 6000);
      for (Eigen::Index k = 0; k < sess.signals.size(); ++k)
        sess.signals.data()[k] = g(rng);
      sess.events.push_back({512, 1024, 350.0});
      sess.events.push_back({2048, 2900, 420.5});
      sub.sessions.push_back(std::move(sess));
    }
    c.subjects.push_back(std::move(sub));
  }
  return c;
}

double pearson(const VecXd& a, const VecXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const double num = ((a.array() - ma) * (b.array() - mb)).sum();
  return num / std::sqrt((a.array() - ma).square().sum() *
                         (b.array() - mb).square().sum());
}

}  // namespace

TEST_CASE("bundle round-trip is exact on signals, events, coordinates") {
  auto dir = temp_dir("roundtrip");
  Cohort c = tiny_cohort(2, 2);
  write_bundle(c, dir);
  Cohort r = load_bundle(dir);
  REQUIRE(r.subjects.size() == 2);
  CHECK(r.subjects[0].sessions.size() == 2);
  CHECK(r.seed == c.seed);
  for (size_t s = 0; s < c.subjects.size(); ++s) {
    for (size_t e = 0; e < c.subjects[s].electrodes.size(); ++e)
      CHECK(r.subjects[s].electrodes[e].mni == c.subjects[s].electrodes[e].mni);
    for (size_t i = 0; i < c.subjects[s].sessions.size(); ++i) {
      const auto& a = c.subjects[s].sessions[i];
      const auto& b = r.subjects[s].sessions[i];
      REQUIRE(a.signals.rows() == b.signals.rows());
      REQUIRE(a.signals.cols() == b.signals.cols());
      // bit-exact float storage
      CHECK(std::memcmp(a.signals.data(), b.signals.data(),
                        sizeof(float) * size_t(a.signals.size())) == 0);
      REQUIRE(a.events.size() == b.events.size());
      for (size_t t = 0; t < a.events.size(); ++t) {
        CHECK(a.events[t].stim_onset == b.events[t].stim_onset);
        CHECK(a.events[t].color_change == b.events[t].color_change);
        CHECK(a.events[t].rt_ms == b.events[t].rt_ms);
      }
    }
  }
}

TEST_CASE("empty cohort round-trips to a valid manifest with no session files") {
  auto dir = temp_dir("empty");
  Cohort c;
  c.provenance = "empty";
  write_bundle(c, dir);
  CHECK(fs::exists(dir / "manifest.json"));
  Cohort r = load_bundle(dir);
  CHECK(r.subjects.empty());
}

TEST_CASE("manifest referencing an absent signals file is a structured error") {
  auto dir = temp_dir("missing");
  write_bundle(tiny_cohort(1), dir);
  fs::remove(dir / "S0" / "sess0.signals.bin");
  CHECK_THROWS_WITH_AS(load_bundle(dir), doctest::Contains("missing file"),
                       ValidationError);
}

TEST_CASE("signals row count different from electrode count is a shape error") {
  auto dir = temp_dir("shape");
  Cohort c = tiny_cohort(1);
  write_bundle(c, dir);
  // rewrite the signals file with one fewer row
  {
    std::ofstream out(dir / "S0" / "sess0.signals.bin", std::ios::binary);
    const char magic[8] = {'S', 'E', 'E', 'G', 'B', 'N', 'D', 'L'};
    out.write(magic, 8);
    std::uint32_t rows = 2, cols = 6000;
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    std::vector<float> z(2 * 6000, 0.1f);
    out.write(reinterpret_cast<const char*>(z.data()),
              std::streamsize(z.size() * sizeof(float)));
  }
  CHECK_THROWS_WITH_AS(load_bundle(dir), doctest::Contains("shape mismatch"),
                       ValidationError);
}

TEST_CASE("event sample index out of range is rejected with context") {
  Cohort c = tiny_cohort(1);
  c.subjects[0].sessions[0].events[0].color_change = 999999;
  CHECK_THROWS_WITH_AS(validate(c), doctest::Contains("out of range"),
                       ValidationError);
}

TEST_CASE("synthetic generator is deterministic given the seed") {
  SynthConfig cfg;
  cfg.n_subjects = 2;
  cfg.trials_per_subject = 20;
  cfg.electrodes_min = 3;
  cfg.electrodes_max = 5;
  cfg.seed = 7;
  Cohort a = generate_synthetic(cfg);
  Cohort b = generate_synthetic(cfg);
  REQUIRE(a.subjects.size() == b.subjects.size());
  for (size_t s = 0; s < a.subjects.size(); ++s) {
    REQUIRE(a.subjects[s].sessions.size() == b.subjects[s].sessions.size());
    const auto& sa = a.subjects[s].sessions[0].signals;
    const auto& sb = b.subjects[s].sessions[0].signals;
    REQUIRE(sa.rows() == sb.rows());
    CHECK(std::memcmp(sa.data(), sb.data(), sizeof(float) * size_t(sa.size())) == 0);
    for (size_t t = 0; t < a.subjects[s].sessions[0].events.size(); ++t)
      CHECK(a.subjects[s].sessions[0].events[t].rt_ms ==
            b.subjects[s].sessions[0].events[t].rt_ms);
  }
}

TEST_CASE("responsive_fraction 0 marks no electrode as responsive") {
  SynthConfig cfg;
  cfg.n_subjects = 3;
  cfg.trials_per_subject = 20;
  cfg.responsive_fraction = 0.0;
  cfg.seed = 3;
  SynthGroundTruth truth;
  Cohort c = generate_synthetic(cfg, &truth);
  for (const auto& st : truth.subjects) CHECK(st.responsive.empty());
  for (const auto& sub : c.subjects) CHECK(sub.gt_responsive.empty());
}

TEST_CASE("burst latency correlates with response time in the generator") {
  SynthConfig cfg;
  cfg.n_subjects = 2;
  cfg.trials_per_subject = 60;
  cfg.electrodes_min = 4;
  cfg.electrodes_max = 6;
  cfg.responsive_fraction = 0.5;
  cfg.burst_snr = 5.0;
  cfg.seed = 11;
  SynthGroundTruth truth;
  Cohort c = generate_synthetic(cfg, &truth);
  for (size_t s = 0; s < c.subjects.size(); ++s) {
    VecXd rt(cfg.trials_per_subject);
    int i = 0;
    for (const auto& sess : c.subjects[s].sessions)
      for (const auto& ev : sess.events) rt[i++] = ev.rt_ms;
    REQUIRE(!truth.subjects[s].responsive.empty());
    for (int e : truth.subjects[s].responsive) {
      VecXd lat = truth.subjects[s].latencies_ms.col(e);
      CHECK(pearson(lat, rt) >= 0.9);
    }
  }
}

TEST_CASE("synthetic responsiveness: task high-gamma variance beats baseline") {
  // sign test over >= 50 responsive electrodes at burst_snr >= 3
  SynthConfig cfg;
  cfg.n_subjects = 8;
  cfg.trials_per_subject = 24;
  cfg.electrodes_min = 7;
  cfg.electrodes_max = 9;
  cfg.responsive_fraction = 1.0;
  cfg.burst_snr = 3.0;
  cfg.seed = 23;
  SynthGroundTruth truth;
  Cohort c = generate_synthetic(cfg, &truth);

  int wins = 0, total = 0;
  for (size_t s = 0; s < c.subjects.size(); ++s) {
    const auto& sess = c.subjects[s].sessions[0];
    const double fs = sess.sampling_rate;
    for (int e : truth.subjects[s].responsive) {
      VecXd x = sess.signals.row(e).cast<double>();
      VecXd env = hilbert_envelope(bandpass_hg(x, fs));
      MatXd envm = env.transpose();
      EpochSet task = epoch_around_color_change(envm, sess.events, fs, 0, 1500);
      EpochSet base = epoch_around_color_change(envm, sess.events, fs, -500, 0);
      double vt = 0, vb = 0;
      for (Eigen::Index t = 0; t < task.n_trials(); ++t) {
        auto tv = task.trials[size_t(t)].row(0);
        auto bv = base.trials[size_t(t)].row(0);
        vt += (tv.array() - tv.mean()).square().sum() / double(tv.size() - 1);
        vb += (bv.array() - bv.mean()).square().sum() / double(bv.size() - 1);
      }
      ++total;
      if (vt > vb) ++wins;
    }
  }
  REQUIRE(total >= 50);
  // normal-approximation sign test; z > 2.33 corresponds to p < 0.01
  double z = (wins - total / 2.0) / std::sqrt(total / 4.0);
  CHECK(z > 2.33);
}

TEST_CASE("split counts follow the largest-remainder rule") {
  std::map<std::string, int> counts{{"A", 100}};
  auto split = split_trials(counts, {0.70, 0.15, 0.15}, 1);
  CHECK(split.count("A", SplitLabel::train) == 70);
  CHECK(split.count("A", SplitLabel::val) == 15);
  CHECK(split.count("A", SplitLabel::test) == 15);

  counts["A"] = 10;
  auto s10 = split_trials(counts, {0.70, 0.15, 0.15}, 1);
  CHECK(s10.count("A", SplitLabel::train) == 7);
  const int v = s10.count("A", SplitLabel::val);
  const int t = s10.count("A", SplitLabel::test);
  CHECK(v + t == 3);
  CHECK(std::min(v, t) == 1);
  CHECK(std::max(v, t) == 2);
}

TEST_CASE("split is a deterministic partition, stratified per subject") {
  std::map<std::string, int> counts{{"A", 53}, {"B", 21}, {"C", 7}};
  auto a = split_trials(counts, {0.70, 0.15, 0.15}, 9);
  auto b = split_trials(counts, {0.70, 0.15, 0.15}, 9);
  CHECK(a.labels == b.labels);
  auto c = split_trials(counts, {0.70, 0.15, 0.15}, 10);
  CHECK(a.labels != c.labels);
  for (const auto& [sid, n] : counts) {
    CHECK(static_cast<int>(a.labels.at(sid).size()) == n);
    CHECK(std::abs(a.count(sid, SplitLabel::train) - 0.70 * n) <= 1.0);
    CHECK(std::abs(a.count(sid, SplitLabel::val) - 0.15 * n) <= 1.0);
    CHECK(std::abs(a.count(sid, SplitLabel::test) - 0.15 * n) <= 1.0);
  }
}

TEST_CASE("split rejects subjects with fewer than 7 trials") {
  std::map<std::string, int> counts{{"A", 6}};
  CHECK_THROWS_AS(split_trials(counts, {0.70, 0.15, 0.15}, 1), ValidationError);
}

TEST_CASE("synth config validation") {
  SynthConfig cfg;
  cfg.trials_per_subject = 10;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.electrodes_max = 40;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
