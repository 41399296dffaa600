#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "advcaptcha/audio.hpp"

namespace advcaptcha {

struct MfccConfig {
  int sample_rate_hz = kCanonicalRate;
  int frame_length = 512;
  int hop_length = 320;
  int num_mel_filters = 40;
  int num_coefficients = 26;
  double preemphasis = 0.97;
  double log_floor = 1e-10;

  bool operator==(const MfccConfig&) const = default;
  void validate() const;
};

// rows = frames, cols = coefficients.
using FeatureMatrix = Eigen::MatrixXd;

int frame_count(std::size_t num_samples, const MfccConfig& config);

double hz_to_mel(double hz) noexcept;
double mel_to_hz(double mel) noexcept;

// Intermediate values retained for the backward pass.
struct MfccTrace {
  Eigen::MatrixXd spectrum;  // frames x 2K, real parts then imaginary parts
  Eigen::MatrixXd mel_energy;  // frames x mel filters, before the floor
};

// Differentiable MFCC front end:
// preemphasis -> framing -> Hann window -> DFT -> mel bank on |X|^2 ->
// log(. + floor) -> orthonormal DCT-II truncated to num_coefficients.
class Mfcc {
 public:
  explicit Mfcc(const MfccConfig& config);

  const MfccConfig& config() const noexcept { return config_; }
  int num_bins() const noexcept { return bins_; }

  FeatureMatrix forward(std::span<const double> samples, MfccTrace* trace = nullptr) const;

  // d(sum(upstream .* features))/d(samples). Overlapping frames accumulate.
  std::vector<double> backward(std::span<const double> samples, const MfccTrace& trace,
                               const FeatureMatrix& upstream) const;

  // Triangular mel weights, bins x filters.
  const Eigen::MatrixXd& mel_bank() const noexcept { return mel_; }
  const std::vector<double>& window() const noexcept { return window_; }

 private:
  Eigen::MatrixXd frame_matrix(std::span<const double> emphasized) const;
  std::vector<double> emphasize(std::span<const double> samples) const;

  MfccConfig config_;
  int bins_ = 0;
  std::vector<double> window_;
  Eigen::MatrixXd dft_;  // frame_length x 2*bins
  Eigen::MatrixXd mel_;  // bins x filters
  Eigen::MatrixXd dct_;  // filters x coefficients
};

FeatureMatrix mfcc_forward(const AudioWaveform& waveform, const MfccConfig& config);
std::vector<double> mfcc_backward(const AudioWaveform& waveform, const MfccConfig& config,
                                  const FeatureMatrix& upstream);

}  // namespace advcaptcha
