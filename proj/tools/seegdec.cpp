// seegdec: synthetic cohorts, preprocessing, model training/transfer, and
// evaluation from one binary. Errors leave as machine-readable JSON on
// stderr with a nonzero exit code.

#include <seeg/bundle.hpp>
#include <seeg/eval.hpp>
#include <seeg/model/checkpoint.hpp>
#include <seeg/pipeline.hpp>
#include <seeg/runio.hpp>
#include <seeg/train.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace seeg;
using nlohmann::json;

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int splits = 1;
  std::vector<std::string> ablate;
  bool variant_2d = false;
  std::string pe = "";
  int e_max = 0;  // 0 = fit to cohort
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON config file");
  cmd->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  cmd->add_option("--splits", o.splits, "number of data splits to average");
  cmd->add_option("--ablate", o.ablate, "ablate component (at, pe, as, rh)")
      ->check(CLI::IsMember({"at", "pe", "as", "rh"}));
  cmd->add_flag("--variant-2d", o.variant_2d, "single 2D attention variant");
  cmd->add_option("--pe", o.pe, "positional encoding scheme")
      ->check(CLI::IsMember({"rbf", "fourier_mni", "sinusoidal_index", "none"}));
  cmd->add_option("--e-max", o.e_max, "electrode padding width (0 = fit data)");
}

std::pair<train::TrainConfig, model::ModelConfig> load_configs(const CommonOpts& o) {
  train::TrainConfig tc;
  model::ModelConfig mc;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ValidationError("cannot open config " + o.config_path);
    json j;
    in >> j;
    if (j.contains("train") || j.contains("model")) {
      if (j.contains("train")) tc = train::TrainConfig::from_json(j["train"]);
      if (j.contains("model")) mc = model::ModelConfig::from_json(j["model"]);
    } else {
      tc = train::TrainConfig::from_json(j);
    }
  }
  if (o.seed_set) tc.seed = o.seed;
  if (o.splits > 0) tc.n_splits = o.splits;
  for (const auto& a : o.ablate) {
    if (a == "at") mc.ablate.at = true;
    if (a == "pe") mc.ablate.pe = true;
    if (a == "as") mc.ablate.as = true;
    if (a == "rh") mc.ablate.rh = true;
  }
  if (o.variant_2d) mc.variant_2d = true;
  if (!o.pe.empty()) mc.pe = model::pe_scheme_from(o.pe);
  mc.e_max = o.e_max;
  return {tc, mc};
}

SplitAssignment make_split(const ProcessedCohort& pc, std::uint64_t split_seed) {
  std::map<std::string, int> counts;
  for (const auto& s : pc.subjects)
    counts[s.id] = static_cast<int>(s.trials.size());
  return split_trials(counts, {0.70, 0.15, 0.15}, split_seed);
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::error_code ec;
  std::filesystem::create_directories(file.parent_path(), ec);
  std::ofstream out(file);
  if (!out) throw ValidationError("cannot write " + file.string());
  out << text;
}

void finish_manifest(runio::RunManifest manifest, const std::string& out_dir,
                     const runio::Stopwatch& watch) {
  manifest.seconds = watch.seconds();
  for (const auto& path : manifest.outputs) {
    if (std::filesystem::is_directory(path))
      manifest.artifact_hashes[path] =
          std::to_string(runio::hash_tree(path));
    else if (std::filesystem::is_regular_file(path))
      manifest.artifact_hashes[path] =
          std::to_string(runio::hash_file(path));
  }
  manifest.write(out_dir);
}

// ---------------------------------------------------------------------------

int cmd_synth(const CommonOpts& common, SynthConfig scfg, const std::string& out) {
  runio::Stopwatch watch;
  scfg.seed = common.seed;
  SynthGroundTruth truth;
  Cohort cohort = generate_synthetic(scfg, &truth);
  write_bundle(cohort, out);
  runio::log_event("synth_done", {{"subjects", cohort.subjects.size()},
                                  {"out", out}});
  runio::RunManifest man;
  man.command = "synth";
  man.seed = scfg.seed;
  man.config = {{"n_subjects", scfg.n_subjects},
                {"trials_per_subject", scfg.trials_per_subject},
                {"responsive_fraction", scfg.responsive_fraction},
                {"burst_snr", scfg.burst_snr},
                {"noise_exponent", scfg.noise_exponent}};
  man.outputs = {out};
  finish_manifest(std::move(man), out, watch);
  return 0;
}

int cmd_preprocess(const CommonOpts& common, const std::string& in,
                   const std::string& out, double alpha, int n_iter,
                   std::string report_path) {
  runio::Stopwatch watch;
  Cohort cohort = load_bundle(in);
  PreprocessConfig cfg;
  cfg.alpha = alpha;
  cfg.n_iter = n_iter;
  cfg.seed = common.seed;
  SelectionReport report;
  ProcessedCohort pc = preprocess(cohort, cfg, &report);
  write_processed(pc, out);
  if (report_path.empty())
    report_path = (std::filesystem::path(out) / "selection_report.json").string();
  write_text(report_path, report.to_json() + "\n");
  runio::log_event("preprocess_done",
                   {{"subjects_kept", pc.subjects.size()},
                    {"subjects_dropped", report.dropped_subjects.size()}});
  runio::RunManifest man;
  man.command = "preprocess";
  man.seed = cfg.seed;
  man.config = {{"alpha", alpha}, {"n_iter", n_iter}};
  man.inputs = {in};
  man.outputs = {out};
  finish_manifest(std::move(man), out, watch);
  return 0;
}

void save_fit(const train::FitResult& fit, const std::string& out,
              std::uint64_t seed) {
  model::CheckpointMeta meta;
  meta.seed = seed;
  meta.epoch = fit.history.best_epoch;
  meta.scaler = fit.scaler;
  model::save_checkpoint(fit.net, out, meta);
  fit.history.write_csv(std::filesystem::path(out) / "history.csv");
}

int cmd_train(const CommonOpts& common, const std::string& mode_name,
              const std::string& data, const std::string& out,
              const std::string& subject) {
  runio::Stopwatch watch;
  auto [tcfg, mcfg] = load_configs(common);
  ProcessedCohort pc = load_processed(data);
  const train::Mode mode = mode_name == "multi" ? train::Mode::multi_subject
                                                : train::Mode::single_subject;
  if (mode == train::Mode::single_subject) {
    if (subject.empty())
      throw ValidationError("train --mode single requires --subject");
    pc = train::subset(pc, subject);
  }

  std::vector<double> pooled;
  for (int split_idx = 0; split_idx < tcfg.n_splits; ++split_idx) {
    SplitAssignment split = make_split(pc, static_cast<std::uint64_t>(split_idx));
    train::FitResult fit = train::train(pc, split, tcfg, mode, mcfg);
    eval::EvalReport rep = eval::evaluate(fit.net, fit.scaler, pc, split);
    pooled.push_back(rep.pooled_r2);
    const std::string dir =
        tcfg.n_splits == 1 ? out : out + "/split" + std::to_string(split_idx);
    save_fit(fit, dir, tcfg.seed);
    write_text(std::filesystem::path(dir) / "eval.json", rep.to_json() + "\n");
    runio::log_event("train_split_done", {{"split", split_idx},
                                          {"pooled_r2", rep.pooled_r2},
                                          {"best_epoch", fit.history.best_epoch}});
  }
  if (tcfg.n_splits > 1) {
    train::Averaged avg;
    avg.values = pooled;
    double sum = 0;
    for (double v : pooled) sum += v;
    avg.mean = sum / pooled.size();
    double sq = 0;
    for (double v : pooled) sq += (v - avg.mean) * (v - avg.mean);
    avg.sem = std::sqrt(sq / (pooled.size() - 1)) / std::sqrt(double(pooled.size()));
    write_text(std::filesystem::path(out) / "splits_summary.json",
               json({{"pooled_r2_mean", avg.mean},
                     {"pooled_r2_sem", avg.sem},
                     {"values", avg.values}})
                       .dump(2) +
                   "\n");
  }
  runio::RunManifest man;
  man.command = "train";
  man.seed = tcfg.seed;
  man.config = tcfg.to_json();
  man.config["mode"] = mode_name;
  man.inputs = {data};
  man.outputs = {out};
  finish_manifest(std::move(man), out, watch);
  return 0;
}

int cmd_finetune(const CommonOpts& common, const std::string& checkpoint,
                 const std::string& data, const std::string& out,
                 const std::string& subject, bool is_transfer) {
  runio::Stopwatch watch;
  auto [tcfg, mcfg] = load_configs(common);
  (void)mcfg;  // architecture comes from the checkpoint
  ProcessedCohort pc = load_processed(data);
  model::CheckpointMeta meta;
  train::FloatNet net = model::load_checkpoint<float>(checkpoint, &meta);
  SplitAssignment split = make_split(pc, 0);

  if (is_transfer) {
    train::TransferResult res =
        train::transfer(net, meta.scaler, pc, subject, split, tcfg);
    save_fit(res.fit, out, tcfg.seed);
    ProcessedCohort one = train::subset(pc, subject);
    eval::EvalReport rep = eval::evaluate(res.fit.net, res.fit.scaler, one, split);
    write_text(std::filesystem::path(out) / "eval.json", rep.to_json() + "\n");
    runio::log_event("transfer_done",
                     {{"subject", subject},
                      {"phase1_changed_in_head", res.phase1_changed_in_head},
                      {"phase1_changed_outside_head", res.phase1_changed_outside_head},
                      {"r2", rep.pooled_r2}});
  } else {
    train::FitResult fit =
        train::finetune(net, meta.scaler, pc, subject, split, tcfg);
    save_fit(fit, out, tcfg.seed);
    ProcessedCohort one = train::subset(pc, subject);
    eval::EvalReport rep = eval::evaluate(fit.net, fit.scaler, one, split);
    write_text(std::filesystem::path(out) / "eval.json", rep.to_json() + "\n");
    runio::log_event("finetune_done", {{"subject", subject},
                                       {"loss", to_string(fit.history.loss)},
                                       {"r2", rep.pooled_r2}});
  }
  runio::RunManifest man;
  man.command = is_transfer ? "transfer" : "finetune";
  man.seed = tcfg.seed;
  man.config = tcfg.to_json();
  man.inputs = {checkpoint, data};
  man.outputs = {out};
  finish_manifest(std::move(man), out, watch);
  return 0;
}

int cmd_loo(const CommonOpts& common, const std::string& data,
            const std::string& out) {
  runio::Stopwatch watch;
  auto [tcfg, mcfg] = load_configs(common);
  ProcessedCohort pc = load_processed(data);
  SplitAssignment split = make_split(pc, 0);
  train::LooReport rep = train::loo_workflow(pc, split, tcfg, mcfg);
  json j = json::array();
  for (const auto& f : rep.folds)
    j.push_back({{"subject", f.subject},
                 {"pretrain_pooled_r2", f.pretrain_pooled_r2},
                 {"transfer_r2", f.transfer_r2},
                 {"transfer_rmse_ms", f.transfer_rmse_ms}});
  write_text(std::filesystem::path(out) / "loo_report.json", j.dump(2) + "\n");
  runio::RunManifest man;
  man.command = "loo";
  man.seed = tcfg.seed;
  man.config = tcfg.to_json();
  man.inputs = {data};
  man.outputs = {out};
  finish_manifest(std::move(man), out, watch);
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& checkpoint,
             const std::string& data, const std::string& out,
             std::uint64_t split_seed) {
  runio::Stopwatch watch;
  (void)common;
  ProcessedCohort pc = load_processed(data);
  model::CheckpointMeta meta;
  train::FloatNet net = model::load_checkpoint<float>(checkpoint, &meta);
  SplitAssignment split = make_split(pc, split_seed);
  eval::EvalReport rep = eval::evaluate(net, meta.scaler, pc, split);
  write_text(std::filesystem::path(out) / "eval.json", rep.to_json() + "\n");
  write_text(std::filesystem::path(out) / "per_subject.csv", rep.to_csv());
  std::cout << rep.to_json() << std::endl;
  runio::RunManifest man;
  man.command = "eval";
  man.seed = split_seed;
  man.inputs = {checkpoint, data};
  man.outputs = {out};
  finish_manifest(std::move(man), out, watch);
  return 0;
}

int cmd_ablate(const CommonOpts& common, const std::string& data,
               const std::string& out) {
  runio::Stopwatch watch;
  auto [tcfg, mcfg] = load_configs(common);
  ProcessedCohort pc = load_processed(data);
  SplitAssignment split = make_split(pc, 0);
  auto rows = eval::ablation_suite(pc, split, tcfg, mcfg);
  write_text(out, eval::ablation_csv(rows));
  runio::RunManifest man;
  man.command = "ablate";
  man.seed = tcfg.seed;
  man.config = tcfg.to_json();
  man.inputs = {data};
  man.outputs = {out};
  finish_manifest(std::move(man),
                  std::filesystem::path(out).parent_path().string(), watch);
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& data,
              const std::string& subject, int trial) {
  ProcessedCohort pc = load_processed(data);
  model::CheckpointMeta meta;
  train::FloatNet net = model::load_checkpoint<float>(checkpoint, &meta);
  if (pc.n_samples != net.config().t_trial)
    throw ValidationError("data sample count does not match checkpoint config");
  if (!net.params().head_index.count(subject))
    throw ValidationError("no head for subject " + subject +
                          "; train one with `seegdec transfer`");
  ProcessedCohort one = train::subset(pc, subject);
  const auto n = one.subjects[0].trials.size();
  std::vector<train::Items::Item> items;
  if (trial >= 0) {
    if (static_cast<size_t>(trial) >= n)
      throw ValidationError("trial index out of range");
    items.push_back({0, trial});
  } else {
    for (size_t t = 0; t < n; ++t) items.push_back({0, static_cast<int>(t)});
  }
  for (const auto& item : items) {
    train::FloatBatch b = train::make_batch(one, net, meta.scaler, {item});
    runio::Stopwatch watch;
    VecXf pred = net.predict(b);
    const double ms = watch.seconds() * 1e3;
    json j = {{"subject", subject},
              {"trial", item.trial},
              {"predicted_rt_ms", meta.scaler.to_ms(double(pred[0]))},
              {"target_rt_ms", one.subjects[0].rt_ms[item.trial]},
              {"latency_ms", ms}};
    std::cout << j.dump() << '\n';
  }
  return 0;
}

int cmd_latency(const std::string& checkpoint, int n_meas) {
  model::CheckpointMeta meta;
  train::FloatNet net = model::load_checkpoint<float>(checkpoint, &meta);
  const auto& cfg = net.config();
  train::FloatBatch b;
  b.n_trials = 1;
  b.e_max = cfg.e_max;
  b.voltages = MatRM<float>::Zero(cfg.e_max, cfg.t_trial);
  std::mt19937_64 rng(7);
  std::normal_distribution<float> gauss(0.f, 1.f);
  for (Eigen::Index i = 0; i < b.voltages.size(); ++i)
    b.voltages.data()[i] = gauss(rng);
  b.mni = MatX<float>::Zero(cfg.e_max, 3);
  b.mask.assign(static_cast<size_t>(cfg.e_max), 1);
  b.electrode_index.resize(static_cast<size_t>(cfg.e_max));
  for (int e = 0; e < cfg.e_max; ++e) b.electrode_index[static_cast<size_t>(e)] = e;
  b.head_of_trial = {0};
  b.targets = VecXf::Zero(1);
  eval::LatencyStats st = eval::measure_latency(net, b, 10, n_meas);
  json j = {{"median_ms", st.median_ms}, {"p95_ms", st.p95_ms}, {"n", st.n}};
  std::cout << j.dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sEEG response-time decoding pipeline"};
  app.require_subcommand(1);

  CommonOpts common;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort bundle");
  SynthConfig scfg;
  std::string out_dir, in_dir, data_dir, checkpoint, subject, mode = "multi";
  std::string report_path;
  double alpha = 0.05;
  int n_iter = 10000;
  synth->add_option("--subjects", scfg.n_subjects);
  synth->add_option("--trials", scfg.trials_per_subject);
  synth->add_option("--sessions", scfg.sessions_per_subject);
  synth->add_option("--electrodes-min", scfg.electrodes_min);
  synth->add_option("--electrodes-max", scfg.electrodes_max);
  synth->add_option("--responsive-frac", scfg.responsive_fraction);
  synth->add_option("--burst-snr", scfg.burst_snr);
  synth->add_option("--noise-exponent", scfg.noise_exponent);
  synth->add_option("--out", out_dir)->required();
  add_common(synth, common);

  auto* prep = app.add_subcommand("preprocess", "select electrodes, z-score, 400 Hz");
  prep->add_option("--in", in_dir)->required();
  prep->add_option("--out", out_dir)->required();
  prep->add_option("--alpha", alpha);
  prep->add_option("--n-iter", n_iter);
  prep->add_option("--report", report_path);
  add_common(prep, common);

  auto* tr = app.add_subcommand("train", "train single- or multi-subject models");
  tr->add_option("--mode", mode)->check(CLI::IsMember({"single", "multi"}));
  tr->add_option("--data", data_dir)->required();
  tr->add_option("--out", out_dir)->required();
  tr->add_option("--subject", subject);
  add_common(tr, common);

  auto* ft = app.add_subcommand("finetune", "finetune all weights on one subject");
  ft->add_option("--checkpoint", checkpoint)->required();
  ft->add_option("--data", data_dir)->required();
  ft->add_option("--out", out_dir)->required();
  ft->add_option("--subject", subject)->required();
  add_common(ft, common);

  auto* tf = app.add_subcommand("transfer", "head-first transfer to a new subject");
  tf->add_option("--checkpoint", checkpoint)->required();
  tf->add_option("--data", data_dir)->required();
  tf->add_option("--out", out_dir)->required();
  tf->add_option("--subject", subject)->required();
  add_common(tf, common);

  auto* loo = app.add_subcommand("loo", "leave-one-out pretrain + transfer");
  loo->add_option("--data", data_dir)->required();
  loo->add_option("--out", out_dir)->required();
  add_common(loo, common);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::uint64_t split_seed = 0;
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--out", out_dir)->required();
  ev->add_option("--split-seed", split_seed);
  add_common(ev, common);

  auto* ab = app.add_subcommand("ablate", "train and score the model variants");
  ab->add_option("--data", data_dir)->required();
  ab->add_option("--out", out_dir)->required();
  add_common(ab, common);

  auto* inf = app.add_subcommand("infer", "predict response times for a subject");
  int trial = -1;
  inf->add_option("--checkpoint", checkpoint)->required();
  inf->add_option("--data", data_dir)->required();
  inf->add_option("--subject", subject)->required();
  inf->add_option("--trial", trial, "trial index (default: all)");

  auto* lat = app.add_subcommand("latency", "single-trial forward latency");
  int n_meas = 100;
  lat->add_option("--checkpoint", checkpoint)->required();
  lat->add_option("--n", n_meas);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(common, scfg, out_dir);
    if (prep->parsed())
      return cmd_preprocess(common, in_dir, out_dir, alpha, n_iter, report_path);
    if (tr->parsed()) return cmd_train(common, mode, data_dir, out_dir, subject);
    if (ft->parsed())
      return cmd_finetune(common, checkpoint, data_dir, out_dir, subject, false);
    if (tf->parsed())
      return cmd_finetune(common, checkpoint, data_dir, out_dir, subject, true);
    if (loo->parsed()) return cmd_loo(common, data_dir, out_dir);
    if (ev->parsed())
      return cmd_eval(common, checkpoint, data_dir, out_dir, split_seed);
    if (ab->parsed()) return cmd_ablate(common, data_dir, out_dir);
    if (inf->parsed()) return cmd_infer(checkpoint, data_dir, subject, trial);
    if (lat->parsed()) return cmd_latency(checkpoint, n_meas);
  } catch (const seeg::ValidationError& e) {
    std::cerr << nlohmann::json({{"error", e.what()}, {"type", "validation"}}).dump()
              << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json({{"error", e.what()}, {"type", "runtime"}}).dump()
              << std::endl;
    return 1;
  }
  return 0;
}
