#include <seeg/cohort.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace seeg {

namespace {

[[noreturn]] void fail(const std::string& ctx, const std::string& msg) {
  throw ValidationError(ctx + ": " + msg);
}

}  // namespace

void validate(const Cohort& cohort) {
  std::set<std::string> subject_ids;
  for (const auto& sub : cohort.subjects) {
    if (sub.id.empty()) fail("cohort", "subject with empty id");
    if (!subject_ids.insert(sub.id).second)
      fail("subject " + sub.id, "duplicate subject id");

    std::set<std::string> electrode_ids;
    for (const auto& e : sub.electrodes) {
      if (!electrode_ids.insert(e.id).second)
        fail("subject " + sub.id, "duplicate electrode id '" + e.id + "'");
      if (!e.mni.allFinite())
        fail("subject " + sub.id, "non-finite MNI for electrode '" + e.id + "'");
      for (int k = 0; k < 3; ++k)
        if (std::abs(e.mni[k]) > 120.0)
          fail("subject " + sub.id,
               "MNI coordinate out of [-120,120] mm for electrode '" + e.id + "'");
    }
    if (sub.sessions.empty()) fail("subject " + sub.id, "no sessions");

    for (size_t si = 0; si < sub.sessions.size(); ++si) {
      const auto& sess = sub.sessions[si];
      std::string ctx = "subject " + sub.id + " session " + std::to_string(si);
      if (sess.subject_id != sub.id) fail(ctx, "session subject_id mismatch");
      if (sess.sampling_rate != 512.0 && sess.sampling_rate != 1024.0 &&
          sess.sampling_rate != 400.0)
        fail(ctx, "unsupported sampling rate " + std::to_string(sess.sampling_rate));
      if (static_cast<size_t>(sess.signals.rows()) != sub.electrodes.size())
        fail(ctx, "shape mismatch: " + std::to_string(sess.signals.rows()) +
                      " signal rows vs " + std::to_string(sub.electrodes.size()) +
                      " electrodes");
      if (!sess.signals.allFinite()) fail(ctx, "non-finite samples");
      const auto n = sess.signals.cols();
      for (size_t ti = 0; ti < sess.events.size(); ++ti) {
        const auto& ev = sess.events[ti];
        if (ev.stim_onset < 0 || ev.stim_onset >= n || ev.color_change < 0 ||
            ev.color_change >= n)
          fail(ctx, "event " + std::to_string(ti) + " sample index out of range");
        if (!(ev.rt_ms > 0.0))
          fail(ctx, "event " + std::to_string(ti) + " has non-positive rt_ms");
      }
    }
    for (const auto& shank : sub.shanks)
      for (int idx : shank)
        if (idx < 0 || static_cast<size_t>(idx) >= sub.electrodes.size())
          fail("subject " + sub.id, "shank references unknown contact index " +
                                        std::to_string(idx));
  }
}

SplitAssignment split_trials(const std::map<std::string, int>& trials_per_subject,
                             std::array<double, 3> ratios, std::uint64_t seed) {
  double rsum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1");

  SplitAssignment out;
  out.seed = seed;
  std::uint64_t subject_stream = 0;
  for (const auto& [subject, n] : trials_per_subject) {
    if (n < 7)
      throw ValidationError("subject " + subject + ": needs >= 7 trials to split, has " +
                            std::to_string(n));
    // largest-remainder apportionment; ties resolved test > val > train so a
    // leftover trial lands in the smallest class last
    std::array<double, 3> quota{ratios[0] * n, ratios[1] * n, ratios[2] * n};
    std::array<int, 3> counts{int(quota[0]), int(quota[1]), int(quota[2])};
    int assigned = counts[0] + counts[1] + counts[2];
    std::array<int, 3> order{2, 1, 0};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return quota[a] - counts[a] > quota[b] - counts[b];
    });
    for (int i = 0; assigned < n; ++i, ++assigned) counts[order[i % 3]] += 1;

    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = make_rng(seed, splitmix64(std::hash<std::string>{}(subject)) +
                                  subject_stream);
    std::shuffle(idx.begin(), idx.end(), rng);

    std::vector<SplitLabel> labels(n);
    int pos = 0;
    for (int c = 0; c < counts[0]; ++c) labels[idx[pos++]] = SplitLabel::train;
    for (int c = 0; c < counts[1]; ++c) labels[idx[pos++]] = SplitLabel::val;
    for (int c = 0; c < counts[2]; ++c) labels[idx[pos++]] = SplitLabel::test;
    out.labels.emplace(subject, std::move(labels));
    ++subject_stream;
  }
  return out;
}

SplitAssignment split_trials(const Cohort& cohort, std::array<double, 3> ratios,
                             std::uint64_t seed) {
  std::map<std::string, int> counts;
  for (const auto& sub : cohort.subjects) {
    int n = 0;
    for (const auto& sess : sub.sessions) n += static_cast<int>(sess.events.size());
    counts[sub.id] = n;
  }
  return split_trials(counts, ratios, seed);
}

void SynthConfig::validate() const {
  if (n_subjects < 1) throw std::invalid_argument("synth: n_subjects >= 1");
  if (electrodes_min < 1 || electrodes_max > 28 || electrodes_min > electrodes_max)
    throw std::invalid_argument("synth: electrodes_per_subject within [1, 28]");
  if (trials_per_subject < 20)
    throw std::invalid_argument("synth: trials_per_subject >= 20");
  if (sessions_per_subject < 1 || sessions_per_subject > trials_per_subject)
    throw std::invalid_argument("synth: bad sessions_per_subject");
  if (!(responsive_fraction >= 0.0 && responsive_fraction <= 1.0))
    throw std::invalid_argument("synth: responsive_fraction in [0, 1]");
  if (!(burst_snr >= 0.0)) throw std::invalid_argument("synth: burst_snr >= 0");
  if (!(rt_log_sigma > 0.0)) throw std::invalid_argument("synth: rt_log_sigma > 0");
}

}  // namespace seeg
