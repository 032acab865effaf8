#pragma once

#include <seeg/common.hpp>

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace seeg::model {

enum class PeScheme { rbf, fourier_mni, sinusoidal_index, none };

inline std::string to_string(PeScheme s) {
  switch (s) {
    case PeScheme::rbf: return "rbf";
    case PeScheme::fourier_mni: return "fourier_mni";
    case PeScheme::sinusoidal_index: return "sinusoidal_index";
    case PeScheme::none: return "none";
  }
  return "rbf";
}

inline PeScheme pe_scheme_from(const std::string& s) {
  if (s == "rbf") return PeScheme::rbf;
  if (s == "fourier_mni") return PeScheme::fourier_mni;
  if (s == "sinusoidal_index") return PeScheme::sinusoidal_index;
  if (s == "none") return PeScheme::none;
  throw std::invalid_argument("unknown positional encoding scheme '" + s + "'");
}

struct Ablation {
  bool at = false;  // attention in time
  bool pe = false;  // positional encoding
  bool as = false;  // attention in space
  bool rh = false;  // per-subject regression heads -> one shared head
};

struct ModelConfig {
  int token_dim = 2;     // K
  int t_trial = 600;     // input samples per electrode
  int pool_window = 80;
  int pool_stride = 5;
  int conv_kernel = 11;  // odd, "same" padding
  int n_blocks = 1;
  int e_max = 28;
  PeScheme pe = PeScheme::rbf;
  std::vector<double> rbf_centers = {-90, -70, -50, -30, -10, 10, 30, 50, 70};
  std::vector<double> rbf_variances = {1, 2, 4, 8, 16, 32, 64};
  int fourier_n_freq = 8;      // sin/cos per coordinate
  int sinusoidal_dim = 48;     // even
  int feature_dim = 128;       // d
  int head_hidden = 16;
  Ablation ablate;
  bool variant_2d = false;  // one joint attention over E*T tokens, PE off

  int n_tokens() const { return (t_trial - pool_window) / pool_stride + 1; }
  int flat_dim() const { return e_max * n_tokens() * token_dim; }
  int ffn_dim() const { return 4 * token_dim; }

  bool pe_active() const {
    return !variant_2d && !ablate.pe && pe != PeScheme::none;
  }

  int pe_dim() const {
    switch (pe) {
      case PeScheme::rbf:
        return 3 * static_cast<int>(rbf_centers.size()) *
               static_cast<int>(rbf_variances.size());
      case PeScheme::fourier_mni: return 3 * 2 * fourier_n_freq;
      case PeScheme::sinusoidal_index: return sinusoidal_dim;
      case PeScheme::none: return 0;
    }
    return 0;
  }

  void validate() const {
    if (token_dim < 1 || t_trial < 1 || feature_dim < 1 || head_hidden < 1 ||
        n_blocks < 1 || e_max < 1)
      throw std::invalid_argument("model config: dimensions must be positive");
    if (pool_window < 1 || pool_stride < 1 || pool_window > t_trial)
      throw std::invalid_argument("model config: bad pooling geometry");
    if (conv_kernel < 1 || conv_kernel % 2 == 0)
      throw std::invalid_argument("model config: conv kernel must be odd");
    if (sinusoidal_dim % 2 != 0)
      throw std::invalid_argument("model config: sinusoidal_dim must be even");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["token_dim"] = token_dim;
    j["t_trial"] = t_trial;
    j["pool_window"] = pool_window;
    j["pool_stride"] = pool_stride;
    j["conv_kernel"] = conv_kernel;
    j["n_blocks"] = n_blocks;
    j["e_max"] = e_max;
    j["pe"] = to_string(pe);
    j["rbf_centers"] = rbf_centers;
    j["rbf_variances"] = rbf_variances;
    j["fourier_n_freq"] = fourier_n_freq;
    j["sinusoidal_dim"] = sinusoidal_dim;
    j["feature_dim"] = feature_dim;
    j["head_hidden"] = head_hidden;
    j["ablate"] = {{"at", ablate.at}, {"pe", ablate.pe}, {"as", ablate.as},
                   {"rh", ablate.rh}};
    j["variant_2d"] = variant_2d;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.token_dim = j.value("token_dim", c.token_dim);
    c.t_trial = j.value("t_trial", c.t_trial);
    c.pool_window = j.value("pool_window", c.pool_window);
    c.pool_stride = j.value("pool_stride", c.pool_stride);
    c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.e_max = j.value("e_max", c.e_max);
    if (j.contains("pe")) c.pe = pe_scheme_from(j["pe"].get<std::string>());
    if (j.contains("rbf_centers"))
      c.rbf_centers = j["rbf_centers"].get<std::vector<double>>();
    if (j.contains("rbf_variances"))
      c.rbf_variances = j["rbf_variances"].get<std::vector<double>>();
    c.fourier_n_freq = j.value("fourier_n_freq", c.fourier_n_freq);
    c.sinusoidal_dim = j.value("sinusoidal_dim", c.sinusoidal_dim);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    if (j.contains("ablate")) {
      c.ablate.at = j["ablate"].value("at", false);
      c.ablate.pe = j["ablate"].value("pe", false);
      c.ablate.as = j["ablate"].value("as", false);
      c.ablate.rh = j["ablate"].value("rh", false);
    }
    c.variant_2d = j.value("variant_2d", c.variant_2d);
    c.validate();
    return c;
  }

  std::uint64_t hash() const {
    // FNV-1a over the canonical JSON encoding
    std::string s = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

/// Attention score/apply cost per batch of B trials (closed forms; counts
/// multiply-accumulates of QK^T and AV only).
inline long long attention_flops_factorized(const ModelConfig& c, long long b) {
  const long long e = c.e_max, t = c.n_tokens(), k = c.token_dim;
  return c.n_blocks * b * (e * t * t * k + t * e * e * k);
}

inline long long attention_flops_2d(const ModelConfig& c, long long b) {
  const long long e = c.e_max, t = c.n_tokens(), k = c.token_dim;
  return c.n_blocks * b * (e * t) * (e * t) * k;
}

inline long long attention_flops(const ModelConfig& c, long long b) {
  return c.variant_2d ? attention_flops_2d(c, b) : attention_flops_factorized(c, b);
}

}  // namespace seeg::model
