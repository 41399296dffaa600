#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "advcaptcha/audio.hpp"
#include "advcaptcha/model.hpp"

namespace advcaptcha {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  // Upper bound of the white-noise stddev added per utterance and epoch; the
  // actual level is drawn uniformly from [0, noise_stddev]. Sample units.
  double noise_stddev = 0.0;
  // Per-utterance gain drawn uniformly from [1 - gain_jitter, 1 + gain_jitter].
  double gain_jitter = 0.0;
  double weight_decay = 0.0;
  // Speed perturbation: playback rate drawn from [1 - speed_jitter, 1 + speed_jitter].
  double speed_jitter = 0.0;
  // Each utterance is passed through one of these transforms (text form, see
  // parse_transform) with probability transform_probability.
  std::vector<std::string> augment_transforms;
  double transform_probability = 0.0;

  void validate() const;
};

TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double initial_loss = 0.0;
  double best_validation_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Trains a freshly initialized model; returns the lowest-validation-loss
// checkpoint. Errc::divergence names the epoch when the loss goes non-finite.
AcousticModel train(const std::vector<LabeledSample>& corpus, const TrainConfig& config,
                    const ModelShape& shape = {}, const MfccConfig& mfcc = {}, TrainReport* report = nullptr,
                    const EpochCallback& on_epoch = {});

// Continues training from `initial` (input normalization is kept).
AcousticModel fine_tune(const AcousticModel& initial, const std::vector<LabeledSample>& corpus,
                        const TrainConfig& config, TrainReport* report = nullptr,
                        const EpochCallback& on_epoch = {});

double mean_ctc_loss(const AcousticModel& model, const std::vector<LabeledSample>& samples);

// Fraction of samples the model transcribes exactly.
double exact_match_rate(const AcousticModel& model, const std::vector<LabeledSample>& samples);

}  // namespace advcaptcha
