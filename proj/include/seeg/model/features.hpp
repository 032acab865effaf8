#pragma once

// Positional-encoding feature vectors. All schemes produce a fixed-length
// feature per electrode that a learned linear layer projects to token_dim.

#include <seeg/model/config.hpp>

#include <cmath>
#include <numbers>

namespace seeg::model {

/// Gaussian bumps over each MNI coordinate: for every (center mu_i,
/// variance s2_j) grid point, f = exp(-(s-mu)^2 / (2 s2)) / sqrt(2 pi s2).
/// Layout: x features (center-major, variance-minor), then y, then z.
template <typename S>
VecX<S> rbf_features(const Eigen::Matrix<S, 3, 1>& mni,
                     const std::vector<double>& centers,
                     const std::vector<double>& variances) {
  const int n = static_cast<int>(centers.size());
  const int m = static_cast<int>(variances.size());
  VecX<S> f(3 * n * m);
  int at = 0;
  for (int c = 0; c < 3; ++c) {
    const double s = static_cast<double>(mni[c]);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        const double s2 = variances[static_cast<size_t>(j)];
        const double d = s - centers[static_cast<size_t>(i)];
        f[at++] = static_cast<S>(std::exp(-d * d / (2.0 * s2)) /
                                 std::sqrt(2.0 * std::numbers::pi * s2));
      }
    }
  }
  return f;
}

/// sin/cos of each coordinate at geometric frequencies w_j = 2*pi/200 * 2^j.
/// Layout per coordinate: (sin w0 s, cos w0 s, sin w1 s, ...).
template <typename S>
VecX<S> fourier_mni_features(const Eigen::Matrix<S, 3, 1>& mni, int n_freq) {
  VecX<S> f(3 * 2 * n_freq);
  int at = 0;
  for (int c = 0; c < 3; ++c) {
    const double s = static_cast<double>(mni[c]);
    for (int j = 0; j < n_freq; ++j) {
      const double w = 2.0 * std::numbers::pi / 200.0 * std::pow(2.0, j);
      f[at++] = static_cast<S>(std::sin(w * s));
      f[at++] = static_cast<S>(std::cos(w * s));
    }
  }
  return f;
}

/// Order-of-sequence encoding of the electrode index (interleaved sin/cos at
/// geometric wavelengths, as in the original transformer).
template <typename S>
VecX<S> sinusoidal_index_features(int index, int dim) {
  VecX<S> f(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double w = std::pow(10000.0, -2.0 * i / double(dim));
    f[2 * i] = static_cast<S>(std::sin(index * w));
    f[2 * i + 1] = static_cast<S>(std::cos(index * w));
  }
  return f;
}

template <typename S>
VecX<S> pe_features(const ModelConfig& cfg, const Eigen::Matrix<S, 3, 1>& mni,
                    int electrode_index) {
  switch (cfg.pe) {
    case PeScheme::rbf:
      return rbf_features<S>(mni, cfg.rbf_centers, cfg.rbf_variances);
    case PeScheme::fourier_mni:
      return fourier_mni_features<S>(mni, cfg.fourier_n_freq);
    case PeScheme::sinusoidal_index:
      return sinusoidal_index_features<S>(electrode_index, cfg.sinusoidal_dim);
    case PeScheme::none: return VecX<S>();
  }
  return VecX<S>();
}

}  // namespace seeg::model
