#include <seeg/pipeline.hpp>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <set>

namespace seeg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kSelStartMs = -500.0, kSelSplitMs = 0.0, kSelEndMs = 1500.0;
constexpr double kDecStartMs = 0.0, kDecEndMs = 1500.0;
constexpr double kTargetRate = 400.0;
constexpr double kAntiAliasHz = 160.0;
constexpr int kAntiAliasOrder = 8;

struct SubjectWork {
  // per retained (not pre-excluded) electrode, across-session concatenated
  // envelope epochs
  EpochSet task, baseline;
  std::vector<int> tested_idx;            // indices into the electrode list
  std::vector<ElectrodeMeta> electrodes;  // post-montage list
  std::vector<std::string> exclusion;     // per electrode
  std::vector<Session> sessions;          // post-montage sessions
  std::vector<std::vector<bool>> keep;    // per session, per trial
};

SubjectWork analyze_subject(const Subject& sub) {
  SubjectWork w;

  // montage if a shank layout is declared, otherwise take signals as given
  if (!sub.shanks.empty()) {
    auto pairs = shank_pairs(sub.shanks);
    for (const auto& sess : sub.sessions) {
      auto mr = bipolar_montage(sess, sub.electrodes, pairs);
      if (w.electrodes.empty()) w.electrodes = mr.electrodes;
      w.sessions.push_back(std::move(mr.session));
    }
  } else {
    w.electrodes = sub.electrodes;
    for (const auto& sess : sub.sessions) w.sessions.push_back(sess);
  }

  const double fs = w.sessions.front().sampling_rate;
  for (const auto& sess : w.sessions)
    if (sess.sampling_rate != fs)
      throw ValidationError("subject " + sub.id +
                            ": sessions with mixed sampling rates are not supported");

  const Eigen::Index n_elec = w.electrodes.size();
  w.exclusion.assign(static_cast<size_t>(n_elec), "");
  for (Eigen::Index e = 0; e < n_elec; ++e) {
    for (const auto& sess : w.sessions) {
      VecXd x = sess.signals.row(e).cast<double>();
      double sd = std::sqrt((x.array() - x.mean()).square().mean());
      if (sd == 0.0) {
        w.exclusion[static_cast<size_t>(e)] = "disconnected";
        break;
      }
      if (line_noise_ratio(x, fs) > 1.0) {
        w.exclusion[static_cast<size_t>(e)] = "line_noise";
        break;
      }
    }
  }
  for (Eigen::Index e = 0; e < n_elec; ++e)
    if (w.exclusion[static_cast<size_t>(e)].empty())
      w.tested_idx.push_back(static_cast<int>(e));

  // trial rejection on raw voltage epochs, per session
  for (const auto& sess : w.sessions) {
    MatXd raw = sess.signals.cast<double>();
    EpochSet raw_epochs =
        epoch_around_color_change(raw, sess.events, fs, kSelStartMs, kSelEndMs);
    auto rejected = reject_bad_trials(raw_epochs);
    std::vector<bool> keep(rejected.size());
    for (size_t i = 0; i < rejected.size(); ++i) keep[i] = !rejected[i];
    w.keep.push_back(std::move(keep));
  }

  // high-gamma envelopes for tested electrodes, epoched and concatenated
  w.task.sampling_rate = w.baseline.sampling_rate = fs;
  w.task.window_start_ms = kSelSplitMs;
  w.task.window_end_ms = kSelEndMs;
  w.baseline.window_start_ms = kSelStartMs;
  w.baseline.window_end_ms = kSelSplitMs;

  const auto n_tested = static_cast<Eigen::Index>(w.tested_idx.size());
  for (size_t si = 0; si < w.sessions.size(); ++si) {
    const auto& sess = w.sessions[si];
    MatXd env(n_tested, sess.signals.cols());
    for (Eigen::Index te = 0; te < n_tested; ++te) {
      VecXd x = sess.signals.row(w.tested_idx[static_cast<size_t>(te)]).cast<double>();
      env.row(te) = hilbert_envelope(bandpass_hg(x, fs)).transpose();
    }
    EpochSet t = epoch_around_color_change(env, sess.events, fs, kSelSplitMs, kSelEndMs);
    EpochSet b = epoch_around_color_change(env, sess.events, fs, kSelStartMs, kSelSplitMs);
    for (size_t ti = 0; ti < t.trials.size(); ++ti) {
      if (!w.keep[si][ti]) continue;
      w.task.trials.push_back(std::move(t.trials[ti]));
      w.baseline.trials.push_back(std::move(b.trials[ti]));
    }
  }
  return w;
}

}  // namespace

ProcessedCohort preprocess(const Cohort& cohort, const PreprocessConfig& cfg,
                           SelectionReport* report) {
  validate(cohort);
  if (cfg.n_iter < 100) throw std::invalid_argument("preprocess: n_iter >= 100");

  SelectionReport local;
  SelectionReport& rep = report ? *report : local;
  rep.rows.clear();
  rep.dropped_subjects.clear();
  rep.warnings.clear();
  rep.alpha = cfg.alpha;
  rep.n_iter = cfg.n_iter;
  rep.seed = cfg.seed;

  // pass 1: per-subject statistics
  std::vector<SubjectWork> work;
  std::vector<VecXd> snr_all, p_all;
  for (size_t s = 0; s < cohort.subjects.size(); ++s) {
    SubjectWork w = analyze_subject(cohort.subjects[s]);
    if (w.task.n_trials() < 2)
      throw ValidationError("subject " + cohort.subjects[s].id +
                            ": fewer than 2 trials survive rejection");
    VecXd snr = snr_statistic(w.task, w.baseline);
    VecXd p = bootstrap_test(w.task, w.baseline, cfg.n_iter,
                             derive_seed(cfg.seed, 500 + s));
    for (Eigen::Index te = 0; te < snr.size(); ++te)
      if (std::isinf(snr[te]))
        rep.warnings.push_back("subject " + cohort.subjects[s].id + " electrode " +
                               w.electrodes[w.tested_idx[te]].id +
                               ": zero baseline variance, SNR set to +inf");
    snr_all.push_back(std::move(snr));
    p_all.push_back(std::move(p));
    work.push_back(std::move(w));
  }

  // pass 2: BH adjustment pooled over all tested electrodes of all subjects
  Eigen::Index total = 0;
  for (const auto& p : p_all) total += p.size();
  VecXd pooled(total);
  Eigen::Index at = 0;
  for (const auto& p : p_all) {
    pooled.segment(at, p.size()) = p;
    at += p.size();
  }
  FdrResult fdr = bh_fdr(pooled, cfg.alpha);

  // pass 3: finalize subjects
  ProcessedCohort out;
  out.seed = cfg.seed;
  at = 0;
  auto lowpass = [](double fs) {
    return dsp::butter_lowpass(kAntiAliasOrder, kAntiAliasHz, fs);
  };
  for (size_t s = 0; s < cohort.subjects.size(); ++s) {
    SubjectWork& w = work[s];
    const auto& sub = cohort.subjects[s];
    std::vector<int> selected;
    for (size_t te = 0; te < w.tested_idx.size(); ++te) {
      SelectionReport::Row row;
      row.subject = sub.id;
      row.electrode = w.electrodes[static_cast<size_t>(w.tested_idx[te])].id;
      row.snr = snr_all[s][static_cast<Eigen::Index>(te)];
      row.p = p_all[s][static_cast<Eigen::Index>(te)];
      row.p_adjusted = fdr.p_adjusted[at + static_cast<Eigen::Index>(te)];
      row.selected = fdr.reject[static_cast<size_t>(at) + te];
      row.tested = true;
      rep.rows.push_back(row);
      if (row.selected) selected.push_back(w.tested_idx[te]);
    }
    for (size_t e = 0; e < w.electrodes.size(); ++e) {
      if (w.exclusion[e].empty()) continue;
      SelectionReport::Row row;
      row.subject = sub.id;
      row.electrode = w.electrodes[e].id;
      row.tested = false;
      row.exclusion = w.exclusion[e];
      rep.rows.push_back(row);
    }
    at += static_cast<Eigen::Index>(w.tested_idx.size());

    if (static_cast<int>(selected.size()) < cfg.min_selected) {
      rep.dropped_subjects.push_back(sub.id);
      continue;
    }

    ProcessedSubject ps;
    ps.id = sub.id;
    ps.mni.resize(static_cast<Eigen::Index>(selected.size()), 3);
    for (size_t i = 0; i < selected.size(); ++i) {
      ps.electrode_ids.push_back(w.electrodes[static_cast<size_t>(selected[i])].id);
      ps.mni.row(static_cast<Eigen::Index>(i)) =
          w.electrodes[static_cast<size_t>(selected[i])].mni.transpose();
    }

    const double fs = w.sessions.front().sampling_rate;
    if (fs != std::floor(fs))
      throw ValidationError("subject " + sub.id + ": non-integral sampling rate");
    dsp::Sos aa = lowpass(fs);
    const auto n_dec = static_cast<Eigen::Index>(
        std::llround((kDecEndMs - kDecStartMs) * kTargetRate / 1000.0));
    std::vector<double> rts;
    for (size_t si = 0; si < w.sessions.size(); ++si) {
      const auto& sess = w.sessions[si];
      // lowpass -> resample -> z-score per electrode over the session
      MatXd resampled;
      for (size_t i = 0; i < selected.size(); ++i) {
        VecXd x = sess.signals.row(selected[i]).cast<double>();
        VecXd y = dsp::resample(dsp::filtfilt(aa, x), fs, kTargetRate);
        if (resampled.size() == 0)
          resampled.resize(static_cast<Eigen::Index>(selected.size()), y.size());
        double mu = y.mean();
        double sd = std::sqrt((y.array() - mu).square().mean());
        if (sd == 0.0)
          throw ValidationError("subject " + sub.id + ": constant selected electrode");
        resampled.row(static_cast<Eigen::Index>(i)) =
            ((y.array() - mu) / sd).transpose();
      }
      for (size_t ti = 0; ti < sess.events.size(); ++ti) {
        if (!w.keep[si][ti]) continue;
        const auto cc400 = static_cast<Eigen::Index>(std::llround(
            double(sess.events[ti].color_change) / fs * kTargetRate));
        if (cc400 + n_dec > resampled.cols())
          throw ValidationError("subject " + sub.id +
                                ": decoding window outside resampled signal");
        ps.trials.emplace_back(resampled.middleCols(cc400, n_dec).cast<float>());
        rts.push_back(sess.events[ti].rt_ms);
      }
    }
    ps.rt_ms = Eigen::Map<VecXd>(rts.data(), static_cast<Eigen::Index>(rts.size()));
    out.subjects.push_back(std::move(ps));
  }
  return out;
}

std::string SelectionReport::to_json() const {
  json j;
  j["alpha"] = alpha;
  j["n_iter"] = n_iter;
  j["seed"] = seed;
  j["p_floor"] = n_iter > 0 ? 1.0 / n_iter : 0.0;
  j["dropped_subjects"] = dropped_subjects;
  j["warnings"] = warnings;
  j["electrodes"] = json::array();
  for (const auto& r : rows) {
    json e;
    e["subject"] = r.subject;
    e["electrode"] = r.electrode;
    e["tested"] = r.tested;
    if (r.tested) {
      e["snr"] = std::isinf(r.snr) ? json("inf") : json(r.snr);
      e["p"] = r.p;
      e["p_adjusted"] = r.p_adjusted;
      e["selected"] = r.selected;
    } else {
      e["exclusion"] = r.exclusion;
    }
    j["electrodes"].push_back(std::move(e));
  }
  return j.dump(2);
}

namespace {

constexpr char kProcMagic[8] = {'S', 'E', 'E', 'G', 'P', 'R', 'C', '1'};

}  // namespace

void write_processed(const ProcessedCohort& pc, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create " + dir.string());

  json manifest;
  manifest["format"] = "seeg-processed-v1";
  manifest["sampling_rate"] = pc.sampling_rate;
  manifest["n_samples"] = pc.n_samples;
  manifest["seed"] = pc.seed;
  manifest["subjects"] = json::array();

  for (const auto& sub : pc.subjects) {
    fs::create_directories(dir / sub.id, ec);
    json js;
    js["id"] = sub.id;
    js["electrodes"] = json::array();
    for (size_t e = 0; e < sub.electrode_ids.size(); ++e)
      js["electrodes"].push_back(
          {{"id", sub.electrode_ids[e]},
           {"mni", {sub.mni(static_cast<Eigen::Index>(e), 0),
                    sub.mni(static_cast<Eigen::Index>(e), 1),
                    sub.mni(static_cast<Eigen::Index>(e), 2)}}});
    js["trials"] = sub.id + "/trials.bin";
    js["rt"] = sub.id + "/rt.csv";
    js["n_trials"] = sub.trials.size();
    manifest["subjects"].push_back(std::move(js));

    std::ofstream bin(dir / sub.id / "trials.bin", std::ios::binary);
    if (!bin) throw ValidationError("cannot write trials for " + sub.id);
    bin.write(kProcMagic, 8);
    std::uint32_t nt = static_cast<std::uint32_t>(sub.trials.size());
    std::uint32_t ne = static_cast<std::uint32_t>(sub.electrode_ids.size());
    std::uint32_t ns = static_cast<std::uint32_t>(pc.n_samples);
    bin.write(reinterpret_cast<const char*>(&nt), 4);
    bin.write(reinterpret_cast<const char*>(&ne), 4);
    bin.write(reinterpret_cast<const char*>(&ns), 4);
    for (const auto& tr : sub.trials) {
      MatRM<float> rm = tr;
      bin.write(reinterpret_cast<const char*>(rm.data()),
                std::streamsize(sizeof(float)) * rm.size());
    }

    std::ofstream rt(dir / sub.id / "rt.csv");
    rt << "rt_ms\n";
    rt.precision(17);
    for (Eigen::Index i = 0; i < sub.rt_ms.size(); ++i) rt << sub.rt_ms[i] << '\n';
  }

  std::ofstream out(dir / "manifest.json");
  if (!out) throw ValidationError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

ProcessedCohort load_processed(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ValidationError("missing file " + (dir / "manifest.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError("malformed processed manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "seeg-processed-v1")
    throw ValidationError("not a processed bundle: " + dir.string());

  ProcessedCohort pc;
  pc.sampling_rate = manifest.at("sampling_rate").get<double>();
  pc.n_samples = manifest.at("n_samples").get<int>();
  pc.seed = manifest.value("seed", 0ULL);

  for (const auto& js : manifest.at("subjects")) {
    ProcessedSubject sub;
    sub.id = js.at("id").get<std::string>();
    const std::string ctx = "subject " + sub.id;
    const auto& eles = js.at("electrodes");
    sub.mni.resize(static_cast<Eigen::Index>(eles.size()), 3);
    for (size_t e = 0; e < eles.size(); ++e) {
      sub.electrode_ids.push_back(eles[e].at("id").get<std::string>());
      for (int k = 0; k < 3; ++k)
        sub.mni(static_cast<Eigen::Index>(e), k) = eles[e].at("mni").at(k).get<double>();
    }

    std::ifstream bin(dir / js.at("trials").get<std::string>(), std::ios::binary);
    if (!bin) throw ValidationError(ctx + ": missing trials file");
    char magic[8];
    std::uint32_t nt = 0, ne = 0, ns = 0;
    bin.read(magic, 8);
    bin.read(reinterpret_cast<char*>(&nt), 4);
    bin.read(reinterpret_cast<char*>(&ne), 4);
    bin.read(reinterpret_cast<char*>(&ns), 4);
    if (!bin || std::memcmp(magic, kProcMagic, 8) != 0)
      throw ValidationError(ctx + ": bad trials header");
    if (ne != sub.electrode_ids.size() || ns != static_cast<std::uint32_t>(pc.n_samples))
      throw ValidationError(ctx + ": trials shape mismatch with manifest");
    for (std::uint32_t t = 0; t < nt; ++t) {
      MatRM<float> rm(ne, ns);
      bin.read(reinterpret_cast<char*>(rm.data()),
               std::streamsize(sizeof(float)) * rm.size());
      if (!bin) throw ValidationError(ctx + ": truncated trials file");
      sub.trials.emplace_back(rm);
    }

    std::ifstream rt(dir / js.at("rt").get<std::string>());
    if (!rt) throw ValidationError(ctx + ": missing rt file");
    std::string line;
    std::getline(rt, line);
    std::vector<double> rts;
    while (std::getline(rt, line))
      if (!line.empty()) rts.push_back(std::stod(line));
    if (rts.size() != nt) throw ValidationError(ctx + ": rt count mismatch");
    sub.rt_ms = Eigen::Map<VecXd>(rts.data(), static_cast<Eigen::Index>(rts.size()));
    pc.subjects.push_back(std::move(sub));
  }
  return pc;
}

}  // namespace seeg
