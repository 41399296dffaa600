#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "advcaptcha/audio.hpp"
#include "advcaptcha/ctc.hpp"
#include "advcaptcha/features.hpp"

namespace advcaptcha {

// Dense layers see a +/- `context` frame window; a tanh recurrent layer
// follows; a linear projection maps to the alphabet.
struct ModelShape {
  int context = 2;
  int dense_width = 128;
  int recurrent_width = 128;
  double relu_clip = 20.0;

  bool operator==(const ModelShape&) const = default;
};

struct TensorSlot {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;
  bool trainable = true;
};

struct ForwardCache {
  Eigen::MatrixXd context;   // frames x window*coeffs
  Eigen::MatrixXd dense1_pre, dense1;
  Eigen::MatrixXd dense2_pre, dense2;
  Eigen::MatrixXd hidden;    // frames x recurrent_width
};

class AcousticModel {
 public:
  AcousticModel(const MfccConfig& mfcc, const ModelShape& shape);

  // Zero weights, identity input normalization.
  static AcousticModel zeros(const MfccConfig& mfcc, const ModelShape& shape);
  static AcousticModel random(const MfccConfig& mfcc, const ModelShape& shape, std::uint64_t seed);

  const MfccConfig& mfcc_config() const noexcept { return mfcc_->config(); }
  const Mfcc& mfcc() const noexcept { return *mfcc_; }
  const ModelShape& shape() const noexcept { return shape_; }

  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }
  const std::vector<TensorSlot>& layout() const noexcept { return layout_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  // Mask with 1 for trainable entries.
  std::vector<double> trainable_mask() const;

  // Fixed per-coefficient standardization applied before the first layer.
  void set_input_normalization(const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev);

  Logits forward(const FeatureMatrix& features, ForwardCache* cache = nullptr) const;

  // Backpropagates d loss / d logits. Either output may be null.
  void backward(const FeatureMatrix& features, const ForwardCache& cache, const Logits& d_logits,
                std::span<double> param_grad, FeatureMatrix* feature_grad) const;

  bool all_finite() const;

 private:
  Eigen::Map<Eigen::MatrixXd> tensor(int slot);
  Eigen::Map<const Eigen::MatrixXd> tensor(int slot) const;
  Eigen::Map<Eigen::MatrixXd> grad_view(std::span<double> grad, int slot) const;

  std::shared_ptr<const Mfcc> mfcc_;
  ModelShape shape_;
  std::vector<TensorSlot> layout_;
  std::vector<double> params_;
};

Transcription transcribe(const AcousticModel& model, const AudioWaveform& waveform);

struct WaveformLossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d ctc_loss / d samples
  Logits logits;
};

// CTC loss of the model on raw samples and its gradient w.r.t. those samples.
WaveformLossGrad waveform_loss_grad(const AcousticModel& model, std::span<const double> samples,
                                    std::span<const int> labels);
double waveform_loss(const AcousticModel& model, std::span<const double> samples,
                     std::span<const int> labels);

void save_checkpoint(const AcousticModel& model, const std::filesystem::path& path);
AcousticModel load_checkpoint(const std::filesystem::path& path);

}  // namespace advcaptcha
