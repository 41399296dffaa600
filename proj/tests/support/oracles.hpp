#pragma once

// Reference implementations written independently of the library, used to
// check it. They favour directness over speed.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

// ---- finite differences ----

inline double central_diff(const std::function<double(std::vector<double>&)>& f, std::vector<double> x,
                           std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

struct GradCheck {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;

  double pass_rate() const { return checked == 0 ? 0.0 : static_cast<double>(passed) / checked; }
  void merge(const GradCheck& o) {
    checked += o.checked;
    passed += o.passed;
    worst = std::max(worst, o.worst);
  }
};

// Relative error |a - n| / max(|a|, |n|); pairs whose magnitudes are both
// below `atol` count as agreeing.
inline double relative_error(double analytic, double numeric, double atol) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < atol) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

inline GradCheck check_gradient(const std::function<double(std::vector<double>&)>& f, const std::vector<double>& x,
                                std::span<const double> analytic, std::span<const std::size_t> coords, double h,
                                double rtol, double atol) {
  GradCheck out;
  for (auto i : coords) {
    const double err = relative_error(analytic[i], central_diff(f, x, i, h), atol);
    ++out.checked;
    if (err <= rtol) ++out.passed;
    out.worst = std::max(out.worst, err);
  }
  return out;
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(n, count));
  return all;
}

// ---- CTC by enumerating every frame-level path ----

inline std::vector<int> collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int s : path) {
    if (s != prev && s != 0) out.push_back(s);
    prev = s;
  }
  return out;
}

inline double brute_ctc_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  const auto frames = static_cast<int>(logits.rows());
  const auto classes = static_cast<int>(logits.cols());
  std::vector<std::vector<double>> prob(frames, std::vector<double>(classes));
  for (int t = 0; t < frames; ++t) {
    double z = 0.0;
    for (int k = 0; k < classes; ++k) z += std::exp(logits(t, k));
    for (int k = 0; k < classes; ++k) prob[t][k] = std::exp(logits(t, k)) / z;
  }
  std::vector<int> path(frames, 0);
  double total = 0.0;
  while (true) {
    if (collapse(path) == labels) {
      double p = 1.0;
      for (int t = 0; t < frames; ++t) p *= prob[t][path[t]];
      total += p;
    }
    int t = 0;
    while (t < frames && ++path[t] == classes) path[t++] = 0;
    if (t == frames) break;
  }
  return -std::log(total);
}

// ---- word edit distance, memoized recursion on suffixes ----

inline int brute_word_edits(const std::vector<std::string>& r, const std::vector<std::string>& h) {
  std::map<std::pair<std::size_t, std::size_t>, int> memo;
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == r.size()) return static_cast<int>(h.size() - j);
    if (j == h.size()) return static_cast<int>(r.size() - i);
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    int best = go(i + 1, j + 1) + (r[i] == h[j] ? 0 : 1);
    best = std::min(best, go(i + 1, j) + 1);
    best = std::min(best, go(i, j + 1) + 1);
    return memo[key] = best;
  };
  return go(0, 0);
}

// ---- MFCC with a complex DFT and a filterbank built from the mel formula ----

struct MfccParams {
  int rate = 16000;
  int frame = 512;
  int hop = 320;
  int filters = 40;
  int coeffs = 26;
  double preemphasis = 0.97;
  double floor = 1e-10;
};

inline double mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double inv_mel(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

inline double triangle(double f, double lo, double mid, double hi) {
  if (f < lo || f > hi) return 0.0;
  return f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
}

inline std::vector<double> power_spectrum(const std::vector<double>& frame) {
  const std::size_t n = frame.size();
  std::vector<double> out(n / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += frame[i] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(i * k % n) / n);
    out[k] = std::norm(acc);
  }
  return out;
}

struct MfccOut {
  std::vector<std::vector<double>> mel_energy;
  std::vector<std::vector<double>> coeffs;
};

inline MfccOut mfcc(const std::vector<double>& x, const MfccParams& p) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - (i ? p.preemphasis * x[i - 1] : 0.0);
  const double top = mel(p.rate / 2.0);
  MfccOut out;
  for (std::size_t start = 0; start + p.frame <= y.size(); start += p.hop) {
    std::vector<double> frame(p.frame);
    for (int i = 0; i < p.frame; ++i)
      frame[i] = y[start + i] * (0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / p.frame));
    auto power = power_spectrum(frame);
    std::vector<double> energy(p.filters, 0.0);
    for (int j = 0; j < p.filters; ++j) {
      const double lo = inv_mel(top * j / (p.filters + 1));
      const double mid = inv_mel(top * (j + 1) / (p.filters + 1));
      const double hi = inv_mel(top * (j + 2) / (p.filters + 1));
      for (std::size_t k = 0; k < power.size(); ++k)
        energy[j] += power[k] * triangle(static_cast<double>(k) * p.rate / p.frame, lo, mid, hi);
    }
    std::vector<double> c(p.coeffs, 0.0);
    for (int q = 0; q < p.coeffs; ++q) {
      for (int j = 0; j < p.filters; ++j)
        c[q] += std::log(energy[j] + p.floor) * std::cos(std::numbers::pi * q * (j + 0.5) / p.filters);
      c[q] *= q == 0 ? std::sqrt(1.0 / p.filters) : std::sqrt(2.0 / p.filters);
    }
    out.mel_energy.push_back(std::move(energy));
    out.coeffs.push_back(std::move(c));
  }
  return out;
}

// ---- signal helpers ----

inline std::vector<double> tone(double hz, std::size_t n, double amplitude, int rate = 16000) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = amplitude * std::sin(2.0 * std::numbers::pi * hz * i / rate);
  return out;
}

inline double rms(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return x.empty() ? 0.0 : std::sqrt(s / x.size());
}

// Mirror without repeating the edge sample: ... x2 x1 | x0 x1 x2 ... x(n-1) | x(n-2) ...
inline std::vector<double> reflect_pad(const std::vector<double>& x, std::size_t pad) {
  std::vector<double> out(x.rbegin() + static_cast<std::ptrdiff_t>(x.size() - 1 - pad), x.rend() - 1);
  out.insert(out.end(), x.begin(), x.end());
  out.insert(out.end(), x.rbegin() + 1, x.rbegin() + 1 + static_cast<std::ptrdiff_t>(pad));
  return out;
}

inline std::vector<double> sliding_mean(const std::vector<double>& x, int k) {
  const auto pad = static_cast<std::size_t>(k - 1);
  auto p = reflect_pad(x, pad);
  std::vector<double> out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = i; j <= i + 2 * pad; ++j) s += p[j];
    out.push_back(s / static_cast<double>(2 * pad + 1));
  }
  return out;
}

inline std::vector<double> sliding_median(const std::vector<double>& x, int k) {
  const auto pad = static_cast<std::size_t>(k - 1);
  auto p = reflect_pad(x, pad);
  std::vector<double> out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> w(p.begin() + static_cast<std::ptrdiff_t>(i),
                          p.begin() + static_cast<std::ptrdiff_t>(i + 2 * pad + 1));
    std::sort(w.begin(), w.end());
    out.push_back(w[pad]);
  }
  return out;
}

}  // namespace oracle
