#include "advcaptcha/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "advcaptcha/error.hpp"
#include "advcaptcha/transforms.hpp"

namespace advcaptcha {

void TrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0) throw Error(Errc::invalid_argument, "epochs and batch_size must be positive");
  if (!(learning_rate > 0.0)) throw Error(Errc::invalid_argument, "learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw Error(Errc::invalid_argument, "momentum must lie in [0, 1)");
  if (!(clip_norm > 0.0)) throw Error(Errc::invalid_argument, "clip_norm must be positive");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0)
    throw Error(Errc::invalid_argument, "validation_fraction must lie in [0, 1)");
  if (noise_stddev < 0.0) throw Error(Errc::invalid_argument, "noise_stddev must be non-negative");
  if (gain_jitter < 0.0 || gain_jitter >= 1.0) throw Error(Errc::invalid_argument, "gain_jitter must lie in [0, 1)");
  if (weight_decay < 0.0) throw Error(Errc::invalid_argument, "weight_decay must be non-negative");
  if (speed_jitter < 0.0 || speed_jitter >= 0.5)
    throw Error(Errc::invalid_argument, "speed_jitter must lie in [0, 0.5)");
  if (transform_probability < 0.0 || transform_probability > 1.0)
    throw Error(Errc::invalid_argument, "transform_probability must lie in [0, 1]");
  for (const auto& t : augment_transforms) parse_transform(t);
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open train config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.noise_stddev = j.value("noise_stddev", c.noise_stddev);
    c.gain_jitter = j.value("gain_jitter", c.gain_jitter);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.speed_jitter = j.value("speed_jitter", c.speed_jitter);
    c.augment_transforms = j.value("augment_transforms", c.augment_transforms);
    c.transform_probability = j.value("transform_probability", c.transform_probability);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

namespace {

struct Prepared {
  const LabeledSample* sample;
  std::vector<int> labels;
  FeatureMatrix clean_features;
};

std::vector<Prepared> prepare(const AcousticModel& model, const std::vector<LabeledSample>& corpus) {
  std::vector<Prepared> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    Prepared p{&s, Alphabet::encode(s.transcription), model.mfcc().forward(s.waveform.view())};
    if (ctc_min_frames(p.labels) > p.clean_features.rows())
      throw Error(Errc::infeasible_alignment, "sample " + s.id + " is too short for its transcription");
    out.push_back(std::move(p));
  }
  return out;
}

AcousticModel run_training(AcousticModel model, const std::vector<LabeledSample>& corpus, const TrainConfig& config,
                           bool set_normalization, TrainReport* report, const EpochCallback& on_epoch) {
  config.validate();
  if (corpus.empty()) throw Error(Errc::empty_corpus, "training corpus is empty");
  auto data = prepare(model, corpus);

  if (set_normalization) {
    const auto coeffs = model.mfcc_config().num_coefficients;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(coeffs), sq = Eigen::VectorXd::Zero(coeffs);
    double rows = 0;
    for (const auto& p : data) {
      sum += p.clean_features.colwise().sum().transpose();
      sq += p.clean_features.array().square().colwise().sum().matrix().transpose();
      rows += static_cast<double>(p.clean_features.rows());
    }
    Eigen::VectorXd mean = sum / rows;
    Eigen::VectorXd var = (sq / rows).array() - mean.array().square();
    model.set_input_normalization(mean, var.cwiseMax(1e-8).cwiseSqrt());
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = 0;
  if (config.validation_fraction > 0.0 && data.size() >= 2) {
    n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.validation_fraction * data.size())));
    n_val = std::min(n_val, data.size() - 1);
  }
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  auto loss_over = [&](const AcousticModel& m, const std::vector<std::size_t>& idx) {
    double total = 0.0;
    for (auto i : idx) total += ctc_loss(m.forward(data[i].clean_features), data[i].labels);
    return total / static_cast<double>(idx.size());
  };
  const auto& selection = val.empty() ? fit : val;

  TrainReport local;
  local.initial_loss = loss_over(model, fit);
  local.best_validation_loss = loss_over(model, selection);
  std::vector<double> best_params(model.parameters().begin(), model.parameters().end());

  const auto mask = model.trainable_mask();
  std::vector<double> velocity(model.parameter_count(), 0.0);
  std::vector<double> grad(model.parameter_count(), 0.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> noise_level(0.0, config.noise_stddev);
  std::uniform_real_distribution<double> gain(1.0 - config.gain_jitter, 1.0 + config.gain_jitter);
  std::uniform_real_distribution<double> speed(1.0 - config.speed_jitter, 1.0 + config.speed_jitter);
  std::vector<TransformSpec> transforms;
  for (const auto& t : config.augment_transforms) transforms.push_back(parse_transform(t));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool use_transforms = !transforms.empty() && config.transform_probability > 0.0;
  const bool augment =
      config.noise_stddev > 0.0 || config.gain_jitter > 0.0 || config.speed_jitter > 0.0 || use_transforms;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(fit.begin(), fit.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < fit.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::size_t stop = std::min(fit.size(), start + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t b = start; b < stop; ++b) {
        const auto& p = data[fit[b]];
        FeatureMatrix noisy;
        const FeatureMatrix* features = &p.clean_features;
        if (augment) {
          auto samples = p.sample->waveform.samples();
          if (config.speed_jitter > 0.0) {
            const int rate = p.sample->waveform.sample_rate();
            const double factor = speed(rng);
            auto stretched = resample(p.sample->waveform, static_cast<int>(std::lround(rate / factor))).samples();
            if (frame_count(stretched.size(), model.mfcc_config()) >= ctc_min_frames(p.labels))
              samples = std::move(stretched);
          }
          const double g = config.gain_jitter > 0.0 ? gain(rng) : 1.0;
          const double sigma = config.noise_stddev > 0.0 ? noise_level(rng) : 0.0;
          for (auto& v : samples) {
            v *= g;
            if (sigma > 0.0) v += sigma * noise(rng);
            v = clamp_audio(v);
          }
          if (use_transforms && unit(rng) < config.transform_probability) {
            const auto& spec = transforms[static_cast<std::size_t>(unit(rng) * transforms.size()) % transforms.size()];
            samples = apply_transform(spec, AudioWaveform(std::move(samples), p.sample->waveform.sample_rate())).samples();
          }
          noisy = model.mfcc().forward(samples);
          features = &noisy;
        }
        ForwardCache cache;
        Logits logits = model.forward(*features, &cache);
        auto ctc = ctc_loss_and_grad(logits, p.labels);
        if (!std::isfinite(ctc.loss))
          throw Error(Errc::divergence, "training loss became non-finite in epoch " + std::to_string(epoch));
        batch_loss += ctc.loss;
        model.backward(*features, cache, ctc.grad, grad, nullptr);
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      double norm_sq = 0.0;
      auto params = model.parameters();
      for (std::size_t i = 0; i < grad.size(); ++i) {
        grad[i] = (grad[i] * scale + config.weight_decay * params[i]) * mask[i];
        norm_sq += grad[i] * grad[i];
      }
      const double norm = std::sqrt(norm_sq);
      if (!std::isfinite(norm))
        throw Error(Errc::divergence, "gradient became non-finite in epoch " + std::to_string(epoch));
      const double clip = norm > config.clip_norm ? config.clip_norm / norm : 1.0;
      for (std::size_t i = 0; i < grad.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] - config.learning_rate * clip * grad[i];
        params[i] += velocity[i];
      }
      epoch_loss += batch_loss;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(fit.size());
    stats.validation_loss = loss_over(model, selection);
    if (!std::isfinite(stats.validation_loss) || !model.all_finite())
      throw Error(Errc::divergence, "validation loss became non-finite in epoch " + std::to_string(epoch));
    if (stats.validation_loss < local.best_validation_loss) {
      local.best_validation_loss = stats.validation_loss;
      local.best_epoch = epoch;
      best_params.assign(model.parameters().begin(), model.parameters().end());
    }
    local.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  std::copy(best_params.begin(), best_params.end(), model.parameters().begin());
  if (report) *report = std::move(local);
  return model;
}

}  // namespace

AcousticModel train(const std::vector<LabeledSample>& corpus, const TrainConfig& config, const ModelShape& shape,
                    const MfccConfig& mfcc, TrainReport* report, const EpochCallback& on_epoch) {
  if (corpus.empty()) throw Error(Errc::empty_corpus, "training corpus is empty");
  return run_training(AcousticModel::random(mfcc, shape, config.seed), corpus, config, true, report, on_epoch);
}

AcousticModel fine_tune(const AcousticModel& initial, const std::vector<LabeledSample>& corpus,
                        const TrainConfig& config, TrainReport* report, const EpochCallback& on_epoch) {
  return run_training(initial, corpus, config, false, report, on_epoch);
}

double mean_ctc_loss(const AcousticModel& model, const std::vector<LabeledSample>& samples) {
  if (samples.empty()) throw Error(Errc::empty_input, "no samples");
  double total = 0.0;
  for (const auto& s : samples) total += waveform_loss(model, s.waveform.view(), Alphabet::encode(s.transcription));
  return total / static_cast<double>(samples.size());
}

double exact_match_rate(const AcousticModel& model, const std::vector<LabeledSample>& samples) {
  if (samples.empty()) throw Error(Errc::empty_input, "no samples");
  std::size_t hits = 0;
  for (const auto& s : samples) hits += transcribe(model, s.waveform) == s.transcription ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace advcaptcha
