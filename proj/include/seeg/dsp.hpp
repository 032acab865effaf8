#pragma once

// Signal-processing primitives used by the preprocessing pipeline.
// Filtering runs in double regardless of storage scalar; filters are
// designed as analog Butterworth prototypes, bilinear-transformed and
// split into second-order sections.

#include <seeg/common.hpp>

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace seeg::dsp {

using cplx = std::complex<double>;

/// Cascade of biquads; row = [b0 b1 b2 a1 a2] with a0 normalized to 1.
struct Sos {
  Eigen::Matrix<double, Eigen::Dynamic, 5> sections;
  int order() const { return 2 * static_cast<int>(sections.rows()); }
};

namespace detail {

// Analog lowpass prototype poles (unit cutoff), left half-plane.
// Even orders only; all filters in this project are even-order.
inline std::vector<cplx> butter_prototype(int order) {
  if (order < 2 || order % 2 != 0)
    throw std::invalid_argument("butterworth: even order >= 2 required");
  std::vector<cplx> poles;
  poles.reserve(order);
  for (int k = 0; k < order; ++k) {
    double theta = std::numbers::pi * (2.0 * k + 1.0) / (2.0 * order) +
                   std::numbers::pi / 2.0;
    poles.emplace_back(std::cos(theta), std::sin(theta));
  }
  return poles;
}

inline cplx bilinear_pole(cplx s, double fs) {
  double k = 2.0 * fs;
  return (k + s) / (k - s);
}

// Conjugate pairs adjacent, descending |imag|.
inline void sort_conjugate_pairs(std::vector<cplx>& p) {
  std::sort(p.begin(), p.end(), [](const cplx& a, const cplx& b) {
    double ia = std::abs(a.imag()), ib = std::abs(b.imag());
    if (ia != ib) return ia > ib;
    return a.imag() > b.imag();
  });
}

inline cplx cascade_response(const Sos& sos, double freq_hz, double fs) {
  cplx z = std::polar(1.0, 2.0 * std::numbers::pi * freq_hz / fs);
  cplx zi = 1.0 / z;
  cplx h(1.0, 0.0);
  for (Eigen::Index r = 0; r < sos.sections.rows(); ++r) {
    const auto& s = sos.sections.row(r);
    h *= (s[0] + s[1] * zi + s[2] * zi * zi) /
         (1.0 + s[3] * zi + s[4] * zi * zi);
  }
  return h;
}

// Normalize so |H| = 1 at the reference frequency, spreading the gain
// evenly across sections.
inline void normalize_at(Sos& sos, double freq_hz, double fs) {
  double mag = std::abs(cascade_response(sos, freq_hz, fs));
  if (!(mag > 0.0)) throw std::runtime_error("filter gain normalization failed");
  double per_section = std::pow(1.0 / mag, 1.0 / double(sos.sections.rows()));
  for (Eigen::Index r = 0; r < sos.sections.rows(); ++r)
    sos.sections.row(r).head<3>() *= per_section;
}

}  // namespace detail

/// Digital Butterworth lowpass (even order) at cutoff_hz.
inline Sos butter_lowpass(int order, double cutoff_hz, double fs) {
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0))
    throw std::invalid_argument("butter_lowpass: cutoff outside (0, fs/2)");
  auto proto = detail::butter_prototype(order);
  double warped = 2.0 * fs * std::tan(std::numbers::pi * cutoff_hz / fs);
  std::vector<cplx> poles;
  for (auto p : proto) poles.push_back(p * warped);
  detail::sort_conjugate_pairs(poles);

  Sos sos;
  sos.sections.resize(order / 2, 5);
  for (int i = 0; i < order / 2; ++i) {
    cplx z1 = detail::bilinear_pole(poles[2 * i], fs);
    cplx z2 = detail::bilinear_pole(poles[2 * i + 1], fs);
    // zeros at z = -1 from the s = infinity pair
    sos.sections.row(i) << 1.0, 2.0, 1.0, -(z1 + z2).real(), (z1 * z2).real();
  }
  detail::normalize_at(sos, 0.0, fs);
  return sos;
}

/// Digital Butterworth bandpass; `order` is the prototype order, so the
/// digital filter has 2*order poles (order-4 gives the usual 8-pole cascade).
inline Sos butter_bandpass(int order, double lo_hz, double hi_hz, double fs) {
  if (!(lo_hz > 0.0 && hi_hz > lo_hz && hi_hz < fs / 2.0))
    throw std::invalid_argument("butter_bandpass: band outside (0, fs/2)");
  auto proto = detail::butter_prototype(order);
  double w1 = 2.0 * fs * std::tan(std::numbers::pi * lo_hz / fs);
  double w2 = 2.0 * fs * std::tan(std::numbers::pi * hi_hz / fs);
  double bw = w2 - w1;
  double w0sq = w1 * w2;

  std::vector<cplx> poles;
  for (auto p : proto) {
    cplx pb = p * bw;
    cplx disc = std::sqrt(pb * pb - 4.0 * w0sq);
    poles.push_back((pb + disc) / 2.0);
    poles.push_back((pb - disc) / 2.0);
  }
  detail::sort_conjugate_pairs(poles);

  Sos sos;
  sos.sections.resize(order, 5);
  for (int i = 0; i < order; ++i) {
    cplx z1 = detail::bilinear_pole(poles[2 * i], fs);
    cplx z2 = detail::bilinear_pole(poles[2 * i + 1], fs);
    // one zero at z = +1 (s = 0) and one at z = -1 (s = infinity) per section
    sos.sections.row(i) << 1.0, 0.0, -1.0, -(z1 + z2).real(), (z1 * z2).real();
  }
  double f_center = fs / std::numbers::pi *
                    std::atan(std::sqrt(w0sq) / (2.0 * fs));
  detail::normalize_at(sos, f_center, fs);
  return sos;
}

/// Single-pass causal filtering (direct form II transposed).
/// `zi` holds per-section initial state, scaled by the caller.
inline VecXd sosfilt(const Sos& sos, const Eigen::Ref<const VecXd>& x,
                     MatXd* zi = nullptr) {
  const Eigen::Index ns = sos.sections.rows();
  VecXd y = x;
  for (Eigen::Index s = 0; s < ns; ++s) {
    const double b0 = sos.sections(s, 0), b1 = sos.sections(s, 1),
                 b2 = sos.sections(s, 2), a1 = sos.sections(s, 3),
                 a2 = sos.sections(s, 4);
    double z1 = zi ? (*zi)(s, 0) : 0.0;
    double z2 = zi ? (*zi)(s, 1) : 0.0;
    for (Eigen::Index n = 0; n < y.size(); ++n) {
      double xn = y[n];
      double yn = b0 * xn + z1;
      z1 = b1 * xn - a1 * yn + z2;
      z2 = b2 * xn - a2 * yn;
      y[n] = yn;
    }
  }
  return y;
}

namespace detail {

// Per-section steady-state (unit step) initial conditions, propagated
// through the cascade dc gains; suppresses startup transients.
inline MatXd steady_state_zi(const Sos& sos, double x0) {
  const Eigen::Index ns = sos.sections.rows();
  MatXd zi(ns, 2);
  double level = x0;
  for (Eigen::Index s = 0; s < ns; ++s) {
    const double b0 = sos.sections(s, 0), b1 = sos.sections(s, 1),
                 b2 = sos.sections(s, 2), a1 = sos.sections(s, 3),
                 a2 = sos.sections(s, 4);
    double dc = (b0 + b1 + b2) / (1.0 + a1 + a2);
    zi(s, 0) = (dc - b0) * level;
    zi(s, 1) = (b2 - a2 * dc) * level;
    level *= dc;
  }
  return zi;
}

}  // namespace detail

/// Zero-phase (forward-backward) filtering with odd-reflection padding.
/// Effective magnitude response is |H|^2; phase is identically zero.
inline VecXd filtfilt(const Sos& sos, const Eigen::Ref<const VecXd>& x) {
  const Eigen::Index n = x.size();
  const Eigen::Index pad =
      std::min<Eigen::Index>(3 * (2 * sos.sections.rows() + 1), n - 1);
  if (n < 2) throw std::invalid_argument("filtfilt: signal too short");

  VecXd ext(n + 2 * pad);
  for (Eigen::Index i = 0; i < pad; ++i)
    ext[i] = 2.0 * x[0] - x[pad - i];
  ext.segment(pad, n) = x;
  for (Eigen::Index i = 0; i < pad; ++i)
    ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  MatXd zi = detail::steady_state_zi(sos, ext[0]);
  VecXd fwd = sosfilt(sos, ext, &zi);
  VecXd rev = fwd.reverse();
  zi = detail::steady_state_zi(sos, rev[0]);
  VecXd bwd = sosfilt(sos, rev, &zi);
  return bwd.reverse().segment(pad, n);
}

/// Smallest 5-smooth integer >= n (fast FFT length).
inline Eigen::Index next_fast_len(Eigen::Index n) {
  if (n <= 2) return std::max<Eigen::Index>(n, 1);
  while (true) {
    Eigen::Index m = n;
    for (int p : {2, 3, 5})
      while (m % p == 0) m /= p;
    if (m == 1) return n;
    ++n;
  }
}

/// Magnitude of the analytic signal (FFT construction). The signal is
/// even-reflection padded up to a fast length; only edge neighborhoods
/// inherit any padding artifact.
inline VecXd hilbert_envelope(const Eigen::Ref<const VecXd>& x) {
  const Eigen::Index n = x.size();
  if (n == 0) return VecXd();
  if (!x.allFinite()) throw std::invalid_argument("hilbert: non-finite input");
  const Eigen::Index m = next_fast_len(n);

  std::vector<double> buf(static_cast<size_t>(m));
  for (Eigen::Index i = 0; i < n; ++i) buf[i] = x[i];
  for (Eigen::Index i = n; i < m; ++i) {
    Eigen::Index r = 2 * n - 2 - i;  // even reflection about the last sample
    buf[i] = (r >= 0 && r < n) ? x[r] : x[n - 1];
  }

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, buf);
  // analytic-signal weights: dc and Nyquist kept, positive freqs doubled
  for (Eigen::Index k = 1; k < (m + 1) / 2; ++k) spec[k] *= 2.0;
  if (m % 2 == 0) { /* spec[m/2] stays */ }
  for (Eigen::Index k = m / 2 + 1; k < m; ++k) spec[k] = 0.0;

  std::vector<std::complex<double>> analytic;
  fft.inv(analytic, spec);
  VecXd env(n);
  for (Eigen::Index i = 0; i < n; ++i) env[i] = std::abs(analytic[i]);
  return env;
}

/// Welch PSD band power: Hann windows of `win` samples, 50% overlap.
/// Returns mean power spectral density integrated over [f_lo, f_hi].
inline double welch_band_power(const Eigen::Ref<const VecXd>& x, double fs,
                               double f_lo, double f_hi,
                               Eigen::Index win = 0) {
  if (win <= 0) win = static_cast<Eigen::Index>(2.0 * fs);
  if (x.size() < win)
    throw std::invalid_argument("welch: signal shorter than one window");
  const Eigen::Index hop = win / 2;

  VecXd w(win);
  for (Eigen::Index i = 0; i < win; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (win - 1));
  const double wnorm = w.squaredNorm();

  Eigen::FFT<double> fft;
  VecXd psd = VecXd::Zero(win / 2 + 1);
  Eigen::Index nseg = 0;
  std::vector<double> seg(static_cast<size_t>(win));
  std::vector<std::complex<double>> spec;
  for (Eigen::Index start = 0; start + win <= x.size(); start += hop, ++nseg) {
    for (Eigen::Index i = 0; i < win; ++i) seg[i] = x[start + i] * w[i];
    fft.fwd(spec, seg);
    for (Eigen::Index k = 0; k <= win / 2; ++k) {
      double scale = (k == 0 || k == win / 2) ? 1.0 : 2.0;
      psd[k] += scale * std::norm(spec[k]) / (fs * wnorm);
    }
  }
  psd /= double(nseg);

  const double df = fs / double(win);
  double power = 0.0;
  for (Eigen::Index k = 0; k <= win / 2; ++k) {
    double f = k * df;
    if (f >= f_lo && f <= f_hi) power += psd[k] * df;
  }
  return power;
}

/// Band-limited rational resampling by windowed-sinc interpolation.
/// Caller is responsible for anti-alias filtering when fs_dst < fs_src.
inline VecXd resample(const Eigen::Ref<const VecXd>& x, double fs_src,
                      double fs_dst, int half_width = 48) {
  if (fs_src <= 0 || fs_dst <= 0)
    throw std::invalid_argument("resample: rates must be positive");
  const Eigen::Index n = x.size();
  const Eigen::Index n_out =
      static_cast<Eigen::Index>(std::floor(double(n - 1) * fs_dst / fs_src)) + 1;
  const double step = fs_src / fs_dst;

  VecXd y(n_out);
  for (Eigen::Index m = 0; m < n_out; ++m) {
    const double t = m * step;
    const Eigen::Index c = static_cast<Eigen::Index>(std::floor(t));
    double acc = 0.0;
    for (Eigen::Index j = c - half_width + 1; j <= c + half_width; ++j) {
      const double d = t - double(j);
      double k;
      if (std::abs(d) < 1e-12) {
        k = 1.0;
      } else {
        const double pd = std::numbers::pi * d;
        const double hann =
            0.5 + 0.5 * std::cos(std::numbers::pi * d / double(half_width));
        k = std::sin(pd) / pd * hann;
      }
      const Eigen::Index jj = std::clamp<Eigen::Index>(j, 0, n - 1);
      acc += x[jj] * k;
    }
    y[m] = acc;
  }
  return y;
}

}  // namespace seeg::dsp
