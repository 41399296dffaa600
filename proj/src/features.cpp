#include "advcaptcha/features.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

void MfccConfig::validate() const {
  if (sample_rate_hz <= 0 || frame_length <= 0 || hop_length <= 0 || num_mel_filters <= 0 ||
      num_coefficients <= 0)
    throw Error(Errc::invalid_argument, "MFCC counts must be positive");
  if (hop_length > frame_length) throw Error(Errc::invalid_argument, "hop_length exceeds frame_length");
  if (num_coefficients > num_mel_filters)
    throw Error(Errc::invalid_argument, "num_coefficients exceeds num_mel_filters");
  if (preemphasis < 0.0 || preemphasis >= 1.0)
    throw Error(Errc::invalid_argument, "preemphasis must lie in [0, 1)");
  if (!(log_floor > 0.0)) throw Error(Errc::invalid_argument, "log_floor must be positive");
}

int frame_count(std::size_t num_samples, const MfccConfig& config) {
  const auto frame = static_cast<std::size_t>(config.frame_length);
  if (num_samples < frame) return 0;
  return 1 + static_cast<int>((num_samples - frame) / static_cast<std::size_t>(config.hop_length));
}

double hz_to_mel(double hz) noexcept { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) noexcept { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Mfcc::Mfcc(const MfccConfig& config) : config_(config) {
  config_.validate();
  const int n = config_.frame_length;
  bins_ = n / 2 + 1;
  const double two_pi = 2.0 * std::numbers::pi;

  window_.resize(n);
  for (int i = 0; i < n; ++i) window_[i] = 0.5 - 0.5 * std::cos(two_pi * i / n);

  dft_.resize(n, 2 * bins_);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < bins_; ++k) {
      // Reduce the phase index modulo n so large products stay exact.
      double phase = two_pi * static_cast<double>((static_cast<long>(i) * k) % n) / n;
      dft_(i, k) = std::cos(phase);
      dft_(i, bins_ + k) = -std::sin(phase);
    }
  }

  const int m = config_.num_mel_filters;
  const double nyquist = config_.sample_rate_hz / 2.0;
  const double mel_hi = hz_to_mel(nyquist);
  std::vector<double> edges(m + 2);
  for (int j = 0; j < m + 2; ++j) edges[j] = mel_to_hz(mel_hi * j / (m + 1));
  mel_ = Eigen::MatrixXd::Zero(bins_, m);
  for (int k = 0; k < bins_; ++k) {
    double f = static_cast<double>(k) * config_.sample_rate_hz / n;
    for (int j = 0; j < m; ++j) {
      double lo = edges[j], mid = edges[j + 1], hi = edges[j + 2];
      if (f >= lo && f <= mid && mid > lo) mel_(k, j) = (f - lo) / (mid - lo);
      else if (f > mid && f <= hi && hi > mid) mel_(k, j) = (hi - f) / (hi - mid);
    }
  }

  const int c = config_.num_coefficients;
  dct_.resize(m, c);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < c; ++j) {
      double scale = j == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
      dct_(i, j) = scale * std::cos(std::numbers::pi * j * (i + 0.5) / m);
    }
  }
}

std::vector<double> Mfcc::emphasize(std::span<const double> x) const {
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  y[0] = x[0];
  for (std::size_t i = 1; i < x.size(); ++i) y[i] = x[i] - config_.preemphasis * x[i - 1];
  return y;
}

Eigen::MatrixXd Mfcc::frame_matrix(std::span<const double> y) const {
  const int frames = frame_count(y.size(), config_);
  const int n = config_.frame_length;
  Eigen::MatrixXd out(frames, n);
  for (int t = 0; t < frames; ++t) {
    const double* src = y.data() + static_cast<std::size_t>(t) * config_.hop_length;
    for (int i = 0; i < n; ++i) out(t, i) = src[i] * window_[i];
  }
  return out;
}

FeatureMatrix Mfcc::forward(std::span<const double> samples, MfccTrace* trace) const {
  if (samples.size() < static_cast<std::size_t>(config_.frame_length))
    throw Error(Errc::short_waveform, "waveform of " + std::to_string(samples.size()) +
                                          " samples is shorter than one frame");
  auto y = emphasize(samples);
  Eigen::MatrixXd spectrum = frame_matrix(y) * dft_;
  Eigen::MatrixXd power = spectrum.leftCols(bins_).array().square() +
                          spectrum.rightCols(bins_).array().square();
  Eigen::MatrixXd energy = power * mel_;
  FeatureMatrix features = (energy.array() + config_.log_floor).log().matrix() * dct_;
  if (trace) {
    trace->spectrum = std::move(spectrum);
    trace->mel_energy = std::move(energy);
  }
  return features;
}

std::vector<double> Mfcc::backward(std::span<const double> samples, const MfccTrace& trace,
                                   const FeatureMatrix& upstream) const {
  const int frames = frame_count(samples.size(), config_);
  if (upstream.rows() != frames || upstream.cols() != config_.num_coefficients ||
      trace.mel_energy.rows() != frames)
    throw Error(Errc::shape_mismatch, "upstream gradient shape does not match MFCC output");

  Eigen::MatrixXd d_log = upstream * dct_.transpose();
  Eigen::MatrixXd d_energy = (d_log.array() / (trace.mel_energy.array() + config_.log_floor)).matrix();
  Eigen::MatrixXd d_power = d_energy * mel_.transpose();
  Eigen::MatrixXd d_spectrum(frames, 2 * bins_);
  d_spectrum.leftCols(bins_) = 2.0 * trace.spectrum.leftCols(bins_).cwiseProduct(d_power);
  d_spectrum.rightCols(bins_) = 2.0 * trace.spectrum.rightCols(bins_).cwiseProduct(d_power);
  Eigen::MatrixXd d_frames = d_spectrum * dft_.transpose();

  std::vector<double> d_emph(samples.size(), 0.0);
  const int n = config_.frame_length;
  for (int t = 0; t < frames; ++t) {
    double* dst = d_emph.data() + static_cast<std::size_t>(t) * config_.hop_length;
    for (int i = 0; i < n; ++i) dst[i] += d_frames(t, i) * window_[i];
  }
  std::vector<double> grad(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    grad[i] = d_emph[i] - (i + 1 < samples.size() ? config_.preemphasis * d_emph[i + 1] : 0.0);
  }
  return grad;
}

FeatureMatrix mfcc_forward(const AudioWaveform& waveform, const MfccConfig& config) {
  return Mfcc(config).forward(waveform.view());
}

std::vector<double> mfcc_backward(const AudioWaveform& waveform, const MfccConfig& config,
                                  const FeatureMatrix& upstream) {
  Mfcc mfcc(config);
  MfccTrace trace;
  mfcc.forward(waveform.view(), &trace);
  return mfcc.backward(waveform.view(), trace, upstream);
}

}  // namespace advcaptcha
