#include <seeg/bundle.hpp>

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace seeg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'E', 'E', 'G', 'B', 'N', 'D', 'L'};

void write_signals(const fs::path& file, const MatXf& m) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + file.string());
  out.write(kMagic, 8);
  std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
  std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  MatRM<float> rm = m;  // row-major on disk
  out.write(reinterpret_cast<const char*>(rm.data()),
            std::streamsize(sizeof(float)) * rm.size());
  if (!out) throw ValidationError("short write to " + file.string());
}

MatXf read_signals(const fs::path& file, const std::string& ctx) {
  std::ifstream in(file, std::ios::binary);
  if (!in)
    throw ValidationError(ctx + ": missing file " + file.string());
  char magic[8];
  std::uint32_t rows = 0, cols = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw ValidationError(ctx + ": bad signals header in " + file.string());
  MatRM<float> rm(rows, cols);
  in.read(reinterpret_cast<char*>(rm.data()),
          std::streamsize(sizeof(float)) * rm.size());
  if (!in)
    throw ValidationError(ctx + ": truncated signals file " + file.string());
  return rm;
}

void write_events(const fs::path& file, const std::vector<TrialEvent>& events) {
  std::ofstream out(file);
  if (!out) throw ValidationError("cannot write " + file.string());
  out << "stim_onset,color_change,rt_ms\n";
  out.precision(17);
  for (const auto& ev : events)
    out << ev.stim_onset << ',' << ev.color_change << ',' << ev.rt_ms << '\n';
}

std::vector<TrialEvent> read_events(const fs::path& file, const std::string& ctx) {
  std::ifstream in(file);
  if (!in) throw ValidationError(ctx + ": missing file " + file.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("stim_onset,color_change,rt_ms", 0) != 0)
    throw ValidationError(ctx + ": bad events header in " + file.string());
  std::vector<TrialEvent> events;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    TrialEvent ev;
    char c1 = 0, c2 = 0;
    if (!(ss >> ev.stim_onset >> c1 >> ev.color_change >> c2 >> ev.rt_ms) ||
        c1 != ',' || c2 != ',')
      throw ValidationError(ctx + ": malformed events row '" + line + "'");
    events.push_back(ev);
  }
  return events;
}

}  // namespace

void write_bundle(const Cohort& cohort, const fs::path& dir) {
  validate(cohort);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create " + dir.string());

  json manifest;
  manifest["format"] = "seeg-bundle-v1";
  manifest["seed"] = cohort.seed;
  manifest["provenance"] = cohort.provenance;
  manifest["subjects"] = json::array();

  for (const auto& sub : cohort.subjects) {
    fs::create_directories(dir / sub.id, ec);
    json js;
    js["id"] = sub.id;
    js["electrodes"] = json::array();
    for (const auto& e : sub.electrodes)
      js["electrodes"].push_back(
          {{"id", e.id}, {"mni", {e.mni[0], e.mni[1], e.mni[2]}}});
    if (!sub.shanks.empty()) js["shanks"] = sub.shanks;
    if (!sub.gt_responsive.empty()) js["gt_responsive"] = sub.gt_responsive;
    js["sessions"] = json::array();
    for (size_t si = 0; si < sub.sessions.size(); ++si) {
      const auto& sess = sub.sessions[si];
      std::string base = sub.id + "/sess" + std::to_string(si);
      write_signals(dir / (base + ".signals.bin"), sess.signals);
      write_events(dir / (base + ".events.csv"), sess.events);
      js["sessions"].push_back({{"sampling_rate", sess.sampling_rate},
                                {"signals", base + ".signals.bin"},
                                {"events", base + ".events.csv"}});
    }
    manifest["subjects"].push_back(std::move(js));
  }

  std::ofstream out(dir / "manifest.json");
  if (!out) throw ValidationError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Cohort load_bundle(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw ValidationError("missing file " + (dir / "manifest.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest.json: " + std::string(e.what()));
  }

  Cohort cohort;
  try {
    cohort.seed = manifest.value("seed", 0ULL);
    cohort.provenance = manifest.value("provenance", "");
    for (const auto& js : manifest.at("subjects")) {
      Subject sub;
      sub.id = js.at("id").get<std::string>();
      const std::string ctx = "subject " + sub.id;
      for (const auto& je : js.at("electrodes")) {
        ElectrodeMeta e;
        e.id = je.at("id").get<std::string>();
        auto m = je.at("mni");
        e.mni = Vec3d(m.at(0).get<double>(), m.at(1).get<double>(),
                      m.at(2).get<double>());
        sub.electrodes.push_back(std::move(e));
      }
      if (js.contains("shanks"))
        sub.shanks = js["shanks"].get<std::vector<std::vector<int>>>();
      if (js.contains("gt_responsive"))
        sub.gt_responsive = js["gt_responsive"].get<std::vector<std::string>>();
      for (size_t si = 0; si < js.at("sessions").size(); ++si) {
        const auto& js_sess = js["sessions"][si];
        Session sess;
        sess.subject_id = sub.id;
        sess.sampling_rate = js_sess.at("sampling_rate").get<double>();
        std::string sctx = ctx + " session " + std::to_string(si);
        sess.signals =
            read_signals(dir / js_sess.at("signals").get<std::string>(), sctx);
        sess.events =
            read_events(dir / js_sess.at("events").get<std::string>(), sctx);
        sub.sessions.push_back(std::move(sess));
      }
      cohort.subjects.push_back(std::move(sub));
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest.json schema error: " + std::string(e.what()));
  }

  validate(cohort);
  return cohort;
}

}  // namespace seeg
