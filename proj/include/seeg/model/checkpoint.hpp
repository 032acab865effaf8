#pragma once

// Checkpoint bundle: meta.json (config, head map, seed/epoch, target scaler,
// blob index) + params.bin holding one little-endian float32 blob per named
// tensor, in index order. Batch-norm running statistics ride along as
// "state.*" blobs.

#include <seeg/model/net.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace seeg::model {

/// Affine map between milliseconds and the scaled units the net is
/// trained on (fit on the training split).
struct TargetScaler {
  double mean_ms = 0.0;
  double sd_ms = 1.0;

  double to_scaled(double ms) const { return (ms - mean_ms) / sd_ms; }
  double to_ms(double scaled) const { return scaled * sd_ms + mean_ms; }
};

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  TargetScaler scaler;
};

template <typename S>
void save_checkpoint(const Net<S>& net, const std::filesystem::path& dir,
                     const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create " + dir.string());

  nlohmann::json j;
  j["format"] = "seeg-checkpoint-v1";
  j["config"] = net.config().to_json();
  j["seed"] = meta.seed;
  j["epoch"] = meta.epoch;
  j["target_scaler"] = {{"mean_ms", meta.scaler.mean_ms},
                        {"sd_ms", meta.scaler.sd_ms}};
  j["heads"] = net.params().head_subjects;

  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw ValidationError("cannot write params.bin in " + dir.string());
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto write_blob = [&](const std::string& name, const float* data,
                        Eigen::Index rows, Eigen::Index cols) {
    bin.write(reinterpret_cast<const char*>(data),
              std::streamsize(sizeof(float)) * rows * cols);
    index.push_back({{"name", name}, {"rows", rows}, {"cols", cols},
                     {"offset", offset}});
    offset += static_cast<std::uint64_t>(sizeof(float)) * rows * cols;
  };

  for (const auto& e : net.params().layout.entries) {
    VecX<float> blob =
        net.params().flat.segment(e.offset, e.size()).template cast<float>();
    write_blob(e.name, blob.data(), e.rows, e.cols);
  }
  VecX<float> rm = net.bn_running_mean().template cast<float>();
  write_blob("state.bn.running_mean", rm.data(), rm.size(), 1);
  VecX<float> rv = net.bn_running_var().template cast<float>();
  write_blob("state.bn.running_var", rv.data(), rv.size(), 1);

  j["blobs"] = std::move(index);
  std::ofstream out(dir / "meta.json");
  if (!out) throw ValidationError("cannot write meta.json in " + dir.string());
  out << j.dump(2) << '\n';
}

template <typename S>
Net<S> load_checkpoint(const std::filesystem::path& dir,
                       CheckpointMeta* meta = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream in(dir / "meta.json");
  if (!in) throw ValidationError("missing file " + (dir / "meta.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed checkpoint meta: " + std::string(e.what()));
  }
  if (j.value("format", "") != "seeg-checkpoint-v1")
    throw ValidationError("not a checkpoint: " + dir.string());

  ModelConfig cfg = ModelConfig::from_json(j.at("config"));
  std::vector<std::string> heads = j.at("heads").get<std::vector<std::string>>();
  std::vector<std::string> subjects = cfg.ablate.rh ? std::vector<std::string>{} : heads;
  Net<S> net(cfg, subjects);

  if (meta) {
    meta->seed = j.value("seed", 0ULL);
    meta->epoch = j.value("epoch", 0);
    if (j.contains("target_scaler")) {
      meta->scaler.mean_ms = j["target_scaler"].value("mean_ms", 0.0);
      meta->scaler.sd_ms = j["target_scaler"].value("sd_ms", 1.0);
    }
  }

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw ValidationError("missing file " + (dir / "params.bin").string());
  for (const auto& jb : j.at("blobs")) {
    const std::string name = jb.at("name").get<std::string>();
    const auto rows = jb.at("rows").get<Eigen::Index>();
    const auto cols = jb.at("cols").get<Eigen::Index>();
    const auto offset = jb.at("offset").get<std::uint64_t>();
    VecX<float> blob(rows * cols);
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(blob.data()),
             std::streamsize(sizeof(float)) * blob.size());
    if (!bin) throw ValidationError("truncated params.bin at blob '" + name + "'");

    if (name == "state.bn.running_mean") {
      if (rows != cfg.token_dim)
        throw ValidationError("checkpoint: bn state shape mismatch");
      net.bn_running_mean() = blob.template cast<S>();
    } else if (name == "state.bn.running_var") {
      net.bn_running_var() = blob.template cast<S>();
    } else {
      if (!net.params().layout.has(name))
        throw ValidationError("checkpoint: unexpected tensor '" + name + "'");
      const auto& e = net.params().layout.at(name);
      if (e.rows != rows || e.cols != cols)
        throw ValidationError("checkpoint: shape mismatch for '" + name + "' (" +
                              std::to_string(rows) + "x" + std::to_string(cols) +
                              " vs " + std::to_string(e.rows) + "x" +
                              std::to_string(e.cols) + ")");
      net.params().flat.segment(e.offset, e.size()) = blob.template cast<S>();
    }
  }
  return net;
}

}  // namespace seeg::model
