#include "advcaptcha/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

namespace {

enum Slot { kInMean, kInStd, kW1, kB1, kW2, kB2, kWr, kUr, kBr, kWo, kBo, kSlotCount };

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "advcaptcha-acoustic-model";

}  // namespace

AcousticModel::AcousticModel(const MfccConfig& mfcc, const ModelShape& shape)
    : mfcc_(std::make_shared<const Mfcc>(mfcc)), shape_(shape) {
  if (shape.context < 0 || shape.dense_width <= 0 || shape.recurrent_width <= 0 || !(shape.relu_clip > 0))
    throw Error(Errc::invalid_argument, "invalid model shape");
  const Eigen::Index coeffs = mfcc.num_coefficients;
  const Eigen::Index window = 2 * shape.context + 1;
  const Eigen::Index h1 = shape.dense_width, h2 = shape.recurrent_width, k = Alphabet::kSize;
  const std::pair<Eigen::Index, Eigen::Index> dims[kSlotCount] = {
      {1, coeffs}, {1, coeffs}, {h1, coeffs * window}, {h1, 1}, {h1, h1}, {h1, 1},
      {h2, h1},    {h2, h2},    {h2, 1},               {k, h2}, {k, 1}};
  const char* names[kSlotCount] = {"input_mean", "input_std", "dense1_w", "dense1_b", "dense2_w", "dense2_b",
                                   "recurrent_w", "recurrent_u", "recurrent_b", "output_w", "output_b"};
  std::size_t offset = 0;
  for (int s = 0; s < kSlotCount; ++s) {
    layout_.push_back({names[s], dims[s].first, dims[s].second, offset, s > kInStd});
    offset += static_cast<std::size_t>(dims[s].first * dims[s].second);
  }
  params_.assign(offset, 0.0);
  tensor(kInStd).setOnes();
}

AcousticModel AcousticModel::zeros(const MfccConfig& mfcc, const ModelShape& shape) {
  return AcousticModel(mfcc, shape);
}

AcousticModel AcousticModel::random(const MfccConfig& mfcc, const ModelShape& shape, std::uint64_t seed) {
  AcousticModel model(mfcc, shape);
  std::mt19937_64 rng(seed);
  for (int s : {kW1, kW2, kWr, kWo}) {
    auto w = model.tensor(s);
    double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
  }
  {
    auto u = model.tensor(kUr);
    double bound = 0.5 / std::sqrt(static_cast<double>(u.rows()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index j = 0; j < u.cols(); ++j)
      for (Eigen::Index i = 0; i < u.rows(); ++i) u(i, j) = dist(rng);
  }
  // Small positive bias keeps clipped-ReLU units alive at the start.
  model.tensor(kB1).setConstant(0.1);
  model.tensor(kB2).setConstant(0.1);
  return model;
}

Eigen::Map<Eigen::MatrixXd> AcousticModel::tensor(int slot) {
  const auto& t = layout_[static_cast<std::size_t>(slot)];
  return {params_.data() + t.offset, t.rows, t.cols};
}

Eigen::Map<const Eigen::MatrixXd> AcousticModel::tensor(int slot) const {
  const auto& t = layout_[static_cast<std::size_t>(slot)];
  return {params_.data() + t.offset, t.rows, t.cols};
}

Eigen::Map<Eigen::MatrixXd> AcousticModel::grad_view(std::span<double> grad, int slot) const {
  const auto& t = layout_[static_cast<std::size_t>(slot)];
  return {grad.data() + t.offset, t.rows, t.cols};
}

std::vector<double> AcousticModel::trainable_mask() const {
  std::vector<double> mask(params_.size(), 0.0);
  for (const auto& t : layout_) {
    if (!t.trainable) continue;
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(t.offset), t.rows * t.cols, 1.0);
  }
  return mask;
}

void AcousticModel::set_input_normalization(const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev) {
  const auto coeffs = mfcc_config().num_coefficients;
  if (mean.size() != coeffs || stddev.size() != coeffs)
    throw Error(Errc::shape_mismatch, "normalization vectors must match num_coefficients");
  tensor(kInMean) = mean.transpose();
  tensor(kInStd) = stddev.transpose();
}

bool AcousticModel::all_finite() const {
  for (double p : params_) {
    if (!std::isfinite(p)) return false;
  }
  return true;
}

Logits AcousticModel::forward(const FeatureMatrix& features, ForwardCache* cache) const {
  const Eigen::Index coeffs = mfcc_config().num_coefficients;
  if (features.cols() != coeffs)
    throw Error(Errc::shape_mismatch, "feature width " + std::to_string(features.cols()) +
                                          " does not match model's " + std::to_string(coeffs));
  const Eigen::Index frames = features.rows();
  const int ctx = shape_.context;
  const Eigen::Index window = 2 * ctx + 1;

  Eigen::MatrixXd normalized =
      (features.rowwise() - tensor(kInMean).row(0)).array().rowwise() / tensor(kInStd).row(0).array();
  Eigen::MatrixXd context = Eigen::MatrixXd::Zero(frames, coeffs * window);
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int d = -ctx; d <= ctx; ++d) {
      Eigen::Index src = t + d;
      if (src < 0 || src >= frames) continue;
      context.block(t, (d + ctx) * coeffs, 1, coeffs) = normalized.row(src);
    }
  }

  const double clip = shape_.relu_clip;
  Eigen::MatrixXd d1_pre = (context * tensor(kW1).transpose()).rowwise() + tensor(kB1).col(0).transpose();
  Eigen::MatrixXd d1 = d1_pre.cwiseMax(0.0).cwiseMin(clip);
  Eigen::MatrixXd d2_pre = (d1 * tensor(kW2).transpose()).rowwise() + tensor(kB2).col(0).transpose();
  Eigen::MatrixXd d2 = d2_pre.cwiseMax(0.0).cwiseMin(clip);

  Eigen::MatrixXd input_proj = (d2 * tensor(kWr).transpose()).rowwise() + tensor(kBr).col(0).transpose();
  const auto u = tensor(kUr);
  Eigen::MatrixXd hidden(frames, shape_.recurrent_width);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(shape_.recurrent_width);
  for (Eigen::Index t = 0; t < frames; ++t) {
    h = (input_proj.row(t).transpose() + u * h).array().tanh();
    hidden.row(t) = h.transpose();
  }
  Logits logits = (hidden * tensor(kWo).transpose()).rowwise() + tensor(kBo).col(0).transpose();

  if (cache) {
    cache->context = std::move(context);
    cache->dense1_pre = std::move(d1_pre);
    cache->dense1 = std::move(d1);
    cache->dense2_pre = std::move(d2_pre);
    cache->dense2 = std::move(d2);
    cache->hidden = std::move(hidden);
  }
  return logits;
}

void AcousticModel::backward(const FeatureMatrix& features, const ForwardCache& cache, const Logits& d_logits,
                             std::span<double> param_grad, FeatureMatrix* feature_grad) const {
  const Eigen::Index frames = features.rows();
  if (d_logits.rows() != frames || d_logits.cols() != Alphabet::kSize || cache.hidden.rows() != frames)
    throw Error(Errc::shape_mismatch, "logit gradient shape does not match the forward pass");
  const bool want_params = !param_grad.empty();
  if (want_params && param_grad.size() != params_.size())
    throw Error(Errc::shape_mismatch, "parameter gradient buffer has the wrong size");
  const double clip = shape_.relu_clip;

  Eigen::MatrixXd d_hidden = d_logits * tensor(kWo);
  if (want_params) {
    grad_view(param_grad, kWo) += d_logits.transpose() * cache.hidden;
    grad_view(param_grad, kBo) += d_logits.colwise().sum().transpose();
  }

  const auto u = tensor(kUr);
  const Eigen::Index h2 = shape_.recurrent_width;
  Eigen::MatrixXd d_proj(frames, h2);
  Eigen::VectorXd carry = Eigen::VectorXd::Zero(h2);
  for (Eigen::Index t = frames - 1; t >= 0; --t) {
    Eigen::VectorXd h = cache.hidden.row(t).transpose();
    Eigen::VectorXd d_pre = (d_hidden.row(t).transpose() + carry).array() * (1.0 - h.array().square());
    d_proj.row(t) = d_pre.transpose();
    carry = u.transpose() * d_pre;
  }
  if (want_params && frames > 1) {
    grad_view(param_grad, kUr) +=
        d_proj.bottomRows(frames - 1).transpose() * cache.hidden.topRows(frames - 1);
  }

  auto relu_mask = [clip](const Eigen::MatrixXd& pre) {
    return ((pre.array() > 0.0) && (pre.array() < clip)).cast<double>().matrix();
  };

  Eigen::MatrixXd d_d2 = (d_proj * tensor(kWr)).cwiseProduct(relu_mask(cache.dense2_pre));
  if (want_params) {
    grad_view(param_grad, kWr) += d_proj.transpose() * cache.dense2;
    grad_view(param_grad, kBr) += d_proj.colwise().sum().transpose();
    grad_view(param_grad, kW2) += d_d2.transpose() * cache.dense1;
    grad_view(param_grad, kB2) += d_d2.colwise().sum().transpose();
  }
  Eigen::MatrixXd d_d1 = (d_d2 * tensor(kW2)).cwiseProduct(relu_mask(cache.dense1_pre));
  if (want_params) {
    grad_view(param_grad, kW1) += d_d1.transpose() * cache.context;
    grad_view(param_grad, kB1) += d_d1.colwise().sum().transpose();
  }

  if (feature_grad) {
    const Eigen::Index coeffs = mfcc_config().num_coefficients;
    const int ctx = shape_.context;
    Eigen::MatrixXd d_context = d_d1 * tensor(kW1);
    Eigen::MatrixXd d_norm = Eigen::MatrixXd::Zero(frames, coeffs);
    for (Eigen::Index t = 0; t < frames; ++t) {
      for (int d = -ctx; d <= ctx; ++d) {
        Eigen::Index src = t + d;
        if (src < 0 || src >= frames) continue;
        d_norm.row(src) += d_context.block(t, (d + ctx) * coeffs, 1, coeffs);
      }
    }
    *feature_grad = d_norm.array().rowwise() / tensor(kInStd).row(0).array();
  }
}

Transcription transcribe(const AcousticModel& model, const AudioWaveform& waveform) {
  if (waveform.sample_rate() != model.mfcc_config().sample_rate_hz)
    throw Error(Errc::invalid_argument, "waveform rate does not match the model's feature rate");
  if (waveform.size() < static_cast<std::size_t>(model.mfcc_config().frame_length)) return Transcription();
  return greedy_decode(model.forward(model.mfcc().forward(waveform.view())));
}

WaveformLossGrad waveform_loss_grad(const AcousticModel& model, std::span<const double> samples,
                                    std::span<const int> labels) {
  MfccTrace trace;
  FeatureMatrix features = model.mfcc().forward(samples, &trace);
  ForwardCache cache;
  WaveformLossGrad out;
  out.logits = model.forward(features, &cache);
  auto ctc = ctc_loss_and_grad(out.logits, labels);
  out.loss = ctc.loss;
  FeatureMatrix d_features;
  model.backward(features, cache, ctc.grad, {}, &d_features);
  out.grad = model.mfcc().backward(samples, trace, d_features);
  return out;
}

double waveform_loss(const AcousticModel& model, std::span<const double> samples, std::span<const int> labels) {
  return ctc_loss(model.forward(model.mfcc().forward(samples)), labels);
}

void save_checkpoint(const AcousticModel& model, const std::filesystem::path& path) {
  const auto& m = model.mfcc_config();
  const auto& s = model.shape();
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["format_version"] = kCheckpointVersion;
  j["mfcc"] = {{"sample_rate_hz", m.sample_rate_hz}, {"frame_length", m.frame_length},
               {"hop_length", m.hop_length},         {"num_mel_filters", m.num_mel_filters},
               {"num_coefficients", m.num_coefficients}, {"preemphasis", m.preemphasis},
               {"log_floor", m.log_floor}};
  j["shape"] = {{"context", s.context}, {"dense_width", s.dense_width},
                {"recurrent_width", s.recurrent_width}, {"relu_clip", s.relu_clip}};
  auto& tensors = j["tensors"] = nlohmann::json::array();
  auto params = model.parameters();
  for (const auto& t : model.layout()) {
    auto begin = params.begin() + static_cast<std::ptrdiff_t>(t.offset);
    tensors.push_back({{"name", t.name},
                       {"shape", {t.rows, t.cols}},
                       {"data", std::vector<double>(begin, begin + t.rows * t.cols)}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

AcousticModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw Error(Errc::bad_checkpoint, "not an acoustic model checkpoint");
    if (j.at("format_version").get<int>() != kCheckpointVersion)
      throw Error(Errc::bad_checkpoint, "unsupported checkpoint version");
    MfccConfig m;
    const auto& jm = j.at("mfcc");
    m.sample_rate_hz = jm.at("sample_rate_hz");
    m.frame_length = jm.at("frame_length");
    m.hop_length = jm.at("hop_length");
    m.num_mel_filters = jm.at("num_mel_filters");
    m.num_coefficients = jm.at("num_coefficients");
    m.preemphasis = jm.at("preemphasis");
    m.log_floor = jm.at("log_floor");
    ModelShape s;
    const auto& js = j.at("shape");
    s.context = js.at("context");
    s.dense_width = js.at("dense_width");
    s.recurrent_width = js.at("recurrent_width");
    s.relu_clip = js.at("relu_clip");
    AcousticModel model(m, s);
    const auto& tensors = j.at("tensors");
    if (tensors.size() != model.layout().size()) throw Error(Errc::bad_checkpoint, "tensor count mismatch");
    auto params = model.parameters();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& slot = model.layout()[i];
      const auto& jt = tensors[i];
      auto shape = jt.at("shape").get<std::vector<Eigen::Index>>();
      if (jt.at("name").get<std::string>() != slot.name || shape.size() != 2 || shape[0] != slot.rows ||
          shape[1] != slot.cols)
        throw Error(Errc::bad_checkpoint, "tensor " + slot.name + " has an unexpected name or shape");
      auto data = jt.at("data").get<std::vector<double>>();
      if (data.size() != static_cast<std::size_t>(slot.rows * slot.cols))
        throw Error(Errc::bad_checkpoint, "tensor " + slot.name + " has the wrong element count");
      std::copy(data.begin(), data.end(), params.begin() + static_cast<std::ptrdiff_t>(slot.offset));
    }
    if (!model.all_finite()) throw Error(Errc::bad_checkpoint, "checkpoint holds non-finite parameters");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::bad_checkpoint, path.string() + ": " + e.what());
  }
}

}  // namespace advcaptcha
