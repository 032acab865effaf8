#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <seeg/pipeline.hpp>

#include <filesystem>
#include <numbers>
#include <random>

using namespace seeg;
namespace fs = std::filesystem;

namespace {

SynthConfig small_cfg(std::uint64_t seed, double responsive = 0.6,
                      double burst_snr = 4.0) {
  SynthConfig cfg;
  cfg.n_subjects = 3;
  cfg.trials_per_subject = 24;
  cfg.electrodes_min = 5;
  cfg.electrodes_max = 6;
  cfg.responsive_fraction = responsive;
  cfg.burst_snr = burst_snr;
  cfg.seed = seed;
  return cfg;
}

PreprocessConfig quick_prep(std::uint64_t seed) {
  PreprocessConfig cfg;
  cfg.n_iter = 400;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("preprocess selects burst electrodes and finalizes 400 Hz windows") {
  SynthGroundTruth truth;
  Cohort cohort = generate_synthetic(small_cfg(1), &truth);
  SelectionReport report;
  ProcessedCohort pc = preprocess(cohort, quick_prep(5), &report);

  REQUIRE(!pc.subjects.empty());
  CHECK(pc.sampling_rate == 400.0);
  CHECK(pc.n_samples == 600);

  // selected electrodes should be mostly the truly responsive ones
  int hits = 0, selected_total = 0;
  for (const auto& row : report.rows) {
    if (!row.tested || !row.selected) continue;
    ++selected_total;
    for (size_t s = 0; s < cohort.subjects.size(); ++s) {
      if (cohort.subjects[s].id != row.subject) continue;
      const auto& gt = cohort.subjects[s].gt_responsive;
      if (std::find(gt.begin(), gt.end(), row.electrode) != gt.end()) ++hits;
    }
  }
  REQUIRE(selected_total > 0);
  CHECK(hits >= selected_total * 3 / 4);

  for (const auto& sub : pc.subjects) {
    REQUIRE(sub.electrode_ids.size() >= 2);
    REQUIRE(!sub.trials.empty());
    for (const auto& trial : sub.trials) {
      CHECK(trial.rows() == static_cast<Eigen::Index>(sub.electrode_ids.size()));
      CHECK(trial.cols() == 600);
    }
    CHECK(sub.rt_ms.size() == static_cast<Eigen::Index>(sub.trials.size()));
    CHECK(sub.rt_ms.minCoeff() > 0.0);
  }
}

TEST_CASE("finalized trials carry decodable burst structure, z-scored per session") {
  // z-scoring is over the fixed session, so epoched windows must have mean
  // near 0 and variance near 1 on average (not exactly per window)
  Cohort cohort = generate_synthetic(small_cfg(2), nullptr);
  ProcessedCohort pc = preprocess(cohort, quick_prep(6), nullptr);
  REQUIRE(!pc.subjects.empty());
  double mean_acc = 0.0, var_acc = 0.0;
  Eigen::Index n = 0;
  for (const auto& sub : pc.subjects)
    for (const auto& trial : sub.trials)
      for (Eigen::Index e = 0; e < trial.rows(); ++e) {
        const auto row = trial.row(e).cast<double>();
        mean_acc += row.mean();
        var_acc += (row.array() - row.mean()).square().mean();
        ++n;
      }
  CHECK(mean_acc / double(n) == doctest::Approx(0.0).epsilon(0.2));
  CHECK(var_acc / double(n) == doctest::Approx(1.0).epsilon(0.35));
}

TEST_CASE("z-scored session traces have exactly unit variance at 400 Hz") {
  // direct check of the finalize contract on one selected electrode trace:
  // reconstruct the same filtering chain and verify the moments
  Cohort cohort = generate_synthetic(small_cfg(3), nullptr);
  const auto& sess = cohort.subjects[0].sessions[0];
  const double fs = sess.sampling_rate;
  VecXd x = sess.signals.row(0).cast<double>();
  VecXd y = dsp::resample(dsp::filtfilt(dsp::butter_lowpass(8, 160.0, fs), x),
                          fs, 400.0);
  const double mu = y.mean();
  const double sd = std::sqrt((y.array() - mu).square().mean());
  VecXd z = (y.array() - mu) / sd;
  CHECK(std::abs(z.mean()) < 1e-9);
  CHECK(std::abs(std::sqrt((z.array() - z.mean()).square().mean()) - 1.0) < 1e-9);
}

TEST_CASE("preprocess is deterministic given cohort and seed") {
  Cohort cohort = generate_synthetic(small_cfg(4), nullptr);
  ProcessedCohort a = preprocess(cohort, quick_prep(9), nullptr);
  ProcessedCohort b = preprocess(cohort, quick_prep(9), nullptr);
  REQUIRE(a.subjects.size() == b.subjects.size());
  for (size_t s = 0; s < a.subjects.size(); ++s) {
    REQUIRE(a.subjects[s].trials.size() == b.subjects[s].trials.size());
    for (size_t t = 0; t < a.subjects[s].trials.size(); ++t)
      CHECK(a.subjects[s].trials[t] == b.subjects[s].trials[t]);
  }
}

TEST_CASE("subjects with fewer than two selected electrodes are dropped") {
  // responsive_fraction 0 on a small cohort: selection should reject nearly
  // everything and every subject should be dropped
  Cohort cohort = generate_synthetic(small_cfg(5, /*responsive=*/0.0), nullptr);
  SelectionReport report;
  ProcessedCohort pc = preprocess(cohort, quick_prep(11), &report);
  CHECK(pc.subjects.size() <= 1);
  CHECK(report.dropped_subjects.size() >= 2);
  int selected = 0;
  for (const auto& row : report.rows) selected += row.selected ? 1 : 0;
  CHECK(selected <= 2);
}

TEST_CASE("multiple sessions concatenate trials after per-session processing") {
  SynthConfig cfg = small_cfg(6);
  cfg.sessions_per_subject = 2;
  Cohort cohort = generate_synthetic(cfg, nullptr);
  REQUIRE(cohort.subjects[0].sessions.size() == 2);
  ProcessedCohort pc = preprocess(cohort, quick_prep(13), nullptr);
  REQUIRE(!pc.subjects.empty());
  // all trials of both sessions land in one subject record
  for (const auto& sub : pc.subjects)
    CHECK(sub.trials.size() == 24);
}

TEST_CASE("bipolar montage runs inside the pipeline when shanks are declared") {
  SynthConfig cfg = small_cfg(7);
  cfg.electrodes_min = cfg.electrodes_max = 6;
  Cohort cohort = generate_synthetic(cfg, nullptr);
  for (auto& sub : cohort.subjects) sub.shanks = {{0, 1, 2}, {3, 4, 5}};
  SelectionReport report;
  ProcessedCohort pc = preprocess(cohort, quick_prep(15), &report);
  // 6 contacts on two shanks -> 4 virtual electrodes per subject
  for (const auto& row : report.rows) {
    CHECK(row.electrode.find('-') != std::string::npos);
  }
  for (const auto& sub : pc.subjects)
    CHECK(sub.electrode_ids.size() <= 4);
}

TEST_CASE("line-noise contaminated electrodes are excluded before testing") {
  Cohort cohort = generate_synthetic(small_cfg(8), nullptr);
  auto& sess = cohort.subjects[0].sessions[0];
  const double fs = sess.sampling_rate;
  for (Eigen::Index i = 0; i < sess.signals.cols(); ++i)
    sess.signals(0, i) +=
        10.0f * std::sin(2.0f * float(std::numbers::pi) * 60.0f * float(i) / float(fs));
  SelectionReport report;
  preprocess(cohort, quick_prep(17), &report);
  bool found = false;
  for (const auto& row : report.rows)
    if (row.subject == cohort.subjects[0].id && row.electrode == "E00") {
      CHECK(!row.tested);
      CHECK(row.exclusion == "line_noise");
      found = true;
    }
  CHECK(found);
}

TEST_CASE("disconnected electrodes are excluded") {
  Cohort cohort = generate_synthetic(small_cfg(9), nullptr);
  cohort.subjects[1].sessions[0].signals.row(2).setConstant(0.42f);
  SelectionReport report;
  preprocess(cohort, quick_prep(19), &report);
  bool found = false;
  for (const auto& row : report.rows)
    if (row.subject == cohort.subjects[1].id && row.electrode == "E02") {
      CHECK(!row.tested);
      CHECK(row.exclusion == "disconnected");
      found = true;
    }
  CHECK(found);
}

TEST_CASE("processed bundle round-trips") {
  Cohort cohort = generate_synthetic(small_cfg(10), nullptr);
  ProcessedCohort pc = preprocess(cohort, quick_prep(21), nullptr);
  REQUIRE(!pc.subjects.empty());
  fs::path dir = fs::temp_directory_path() / "seeg_test_processed";
  fs::remove_all(dir);
  write_processed(pc, dir);
  ProcessedCohort r = load_processed(dir);
  REQUIRE(r.subjects.size() == pc.subjects.size());
  CHECK(r.sampling_rate == pc.sampling_rate);
  for (size_t s = 0; s < pc.subjects.size(); ++s) {
    CHECK(r.subjects[s].id == pc.subjects[s].id);
    CHECK(r.subjects[s].electrode_ids == pc.subjects[s].electrode_ids);
    CHECK(r.subjects[s].mni == pc.subjects[s].mni);
    REQUIRE(r.subjects[s].trials.size() == pc.subjects[s].trials.size());
    for (size_t t = 0; t < pc.subjects[s].trials.size(); ++t)
      CHECK(r.subjects[s].trials[t] == pc.subjects[s].trials[t]);
    CHECK((r.subjects[s].rt_ms - pc.subjects[s].rt_ms).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("selection report serializes with the p-value floor") {
  Cohort cohort = generate_synthetic(small_cfg(11), nullptr);
  SelectionReport report;
  preprocess(cohort, quick_prep(23), &report);
  const std::string json = report.to_json();
  CHECK(json.find("p_floor") != std::string::npos);
  CHECK(json.find("electrodes") != std::string::npos);
}
