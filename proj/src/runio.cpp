#include <seeg/runio.hpp>

#include <seeg/common.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>

namespace seeg::runio {

namespace fs = std::filesystem;

std::uint64_t hash_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ValidationError("cannot hash missing file " + file.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t hash_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const std::uint64_t fh = hash_file(f);
    h ^= fh + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return h;
}

void RunManifest::write(const fs::path& dir) const {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = config;
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["artifact_hashes"] = artifact_hashes;
  j["seconds"] = seconds;

  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path tmp = dir / ".run_manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ValidationError("cannot write manifest in " + dir.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, dir / "run_manifest.json");
}

void log_event(const std::string& event, const nlohmann::json& fields) {
  nlohmann::json j = fields;
  j["event"] = event;
  std::cerr << j.dump() << '\n';
}

}  // namespace seeg::runio
