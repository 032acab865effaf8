#pragma once

// End-to-end preprocessing: montage (when shank layout is present),
// line-noise/disconnected exclusion, trial rejection, high-gamma envelope SNR
// with bootstrap + BH-FDR pooled across the cohort, and finalization of the
// 400 Hz z-scored decoding windows.

#include <seeg/cohort.hpp>
#include <seeg/select.hpp>

#include <filesystem>
#include <optional>

namespace seeg {

struct ProcessedSubject {
  std::string id;
  std::vector<std::string> electrode_ids;  // selected (virtual ids when montaged)
  MatXd mni;                               // [E x 3] millimeters
  std::vector<MatXf> trials;               // each [E x n_samples], z-scored units
  VecXd rt_ms;
};

struct ProcessedCohort {
  std::vector<ProcessedSubject> subjects;
  double sampling_rate = 400.0;
  int n_samples = 600;  // [0, 1500) ms window
  std::uint64_t seed = 0;

  int max_electrodes() const {
    int m = 0;
    for (const auto& s : subjects)
      m = std::max<int>(m, static_cast<int>(s.electrode_ids.size()));
    return m;
  }
};

struct PreprocessConfig {
  double alpha = 0.05;
  int n_iter = 10000;
  std::uint64_t seed = 0;
  int min_selected = 2;  // subjects with fewer selected electrodes are dropped
};

struct SelectionReport {
  struct Row {
    std::string subject;
    std::string electrode;
    double snr = 0.0;
    double p = 1.0;
    double p_adjusted = 1.0;
    bool selected = false;
    bool tested = false;
    std::string exclusion;  // "", "line_noise", "disconnected"
  };
  std::vector<Row> rows;
  std::vector<std::string> dropped_subjects;
  std::vector<std::string> warnings;
  double alpha = 0.05;
  int n_iter = 0;
  std::uint64_t seed = 0;

  std::string to_json() const;
};

ProcessedCohort preprocess(const Cohort& cohort, const PreprocessConfig& cfg,
                           SelectionReport* report = nullptr);

void write_processed(const ProcessedCohort& pc, const std::filesystem::path& dir);
ProcessedCohort load_processed(const std::filesystem::path& dir);

}  // namespace seeg
