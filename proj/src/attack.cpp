#include "advcaptcha/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw Error(Errc::invalid_argument, "epsilon must be positive");
  if (steps < 1) throw Error(Errc::invalid_argument, "steps must be >= 1");
  if (!(alpha > 0.0)) throw Error(Errc::invalid_argument, "alpha must be positive");
  if (c1 < 0.0 || c2 < 0.0 || !std::isfinite(c1) || !std::isfinite(c2))
    throw Error(Errc::invalid_argument, "c1 and c2 must be finite and non-negative");
}

nlohmann::json to_json(const AttackConfig& c) {
  return {{"epsilon", c.epsilon}, {"steps", c.steps}, {"alpha", c.alpha}, {"c1", c.c1}, {"c2", c.c2}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  try {
    c.epsilon = j.value("epsilon", c.epsilon);
    c.steps = j.value("steps", c.steps);
    c.alpha = j.value("alpha", c.alpha);
    c.c1 = j.value("c1", c.c1);
    c.c2 = j.value("c2", c.c2);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("attack config: ") + e.what());
  }
  c.validate();
  return c;
}

AttackConfig load_attack_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open attack config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  return attack_config_from_json(j.contains("attack") ? j["attack"] : j);
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double d : v) s += d * d;
  return std::sqrt(s);
}

std::vector<double> add(std::span<const double> x, std::span<const double> delta) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + delta[i];
  return out;
}

void check_shapes(std::span<const double> x, std::span<const double> delta) {
  if (x.size() != delta.size()) throw Error(Errc::shape_mismatch, "perturbation length differs from the waveform");
}

// Value and gradient of the objective where the network sees `input` (which
// is x + delta, possibly transformed); the gradient flows to delta unchanged.
ObjectiveValue evaluate_at(const AcousticModel& model, std::span<const double> input, std::span<const double> delta,
                           std::span<const int> labels, double c1, double c2) {
  ObjectiveValue out;
  auto lg = waveform_loss_grad(model, input, labels);
  out.ctc = lg.loss;
  const double norm = l2(delta);
  out.value = -c1 * lg.loss + c2 * norm;
  out.grad.resize(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i)
    out.grad[i] = -c1 * lg.grad[i] + (norm > 0.0 ? c2 * delta[i] / norm : 0.0);
  return out;
}

AdversarialExample run_pgd(const AcousticModel& model, const LabeledSample& sample, const AttackConfig& config,
                           const WaveformTransform* transform) {
  config.validate();
  const auto labels = Alphabet::encode(sample.transcription);
  const auto& x = sample.waveform.samples();
  const int rate = sample.waveform.sample_rate();
  std::vector<double> delta(x.size(), 0.0);

  auto network_input = [&](const std::vector<double>& d) {
    auto in = add(x, d);
    if (transform) in = (*transform)(AudioWaveform(std::move(in), rate)).samples();
    if (in.size() != x.size()) throw Error(Errc::shape_mismatch, "transform changed the waveform length");
    return in;
  };

  for (int step = 1; step <= config.steps; ++step) {
    auto obj = evaluate_at(model, network_input(delta), delta, labels, config.c1, config.c2);
    if (!std::isfinite(obj.value))
      throw Error(Errc::non_finite_loss, "objective became non-finite at step " + std::to_string(step) + " for " +
                                             sample.id);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      double d = delta[i] - config.alpha * sign(obj.grad[i]);
      d = std::clamp(d, -config.epsilon, config.epsilon);
      delta[i] = clamp_audio(x[i] + d) - x[i];
    }
  }
  const auto final_input = network_input(delta);
  const double norm = l2(delta);
  const double final_loss = -config.c1 * waveform_loss(model, final_input, labels) + config.c2 * norm;
  if (!std::isfinite(final_loss))
    throw Error(Errc::non_finite_loss, "objective became non-finite after step " + std::to_string(config.steps) +
                                           " for " + sample.id);

  AdversarialExample ex;
  ex.source_id = sample.id;
  ex.adversarial = AudioWaveform(add(x, delta), rate);
  ex.delta = std::move(delta);
  ex.config = config;
  ex.final_loss = final_loss;
  return ex;
}

}  // namespace

double objective(const AcousticModel& model, std::span<const double> x, std::span<const double> delta,
                 std::span<const int> labels, double c1, double c2) {
  check_shapes(x, delta);
  const auto input = add(x, delta);
  return -c1 * waveform_loss(model, input, labels) + c2 * l2(delta);
}

ObjectiveValue objective_and_grad(const AcousticModel& model, std::span<const double> x,
                                  std::span<const double> delta, std::span<const int> labels, double c1, double c2) {
  check_shapes(x, delta);
  return evaluate_at(model, add(x, delta), delta, labels, c1, c2);
}

AdversarialExample fgsm(const AcousticModel& model, const LabeledSample& sample, double epsilon) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw Error(Errc::invalid_argument, "epsilon must be >= 0");
  const auto labels = Alphabet::encode(sample.transcription);
  const auto& x = sample.waveform.samples();
  auto lg = waveform_loss_grad(model, x, labels);
  if (!std::isfinite(lg.loss)) throw Error(Errc::non_finite_loss, "loss is non-finite for " + sample.id);
  std::vector<double> adv(x.size()), delta(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    adv[i] = clamp_audio(x[i] + epsilon * sign(lg.grad[i]));
    delta[i] = adv[i] - x[i];
  }
  AdversarialExample ex;
  ex.source_id = sample.id;
  ex.config.epsilon = epsilon;
  ex.config.steps = 1;
  ex.config.alpha = epsilon;
  ex.final_loss = -waveform_loss(model, adv, labels);
  ex.adversarial = AudioWaveform(std::move(adv), sample.waveform.sample_rate());
  ex.delta = std::move(delta);
  return ex;
}

AdversarialExample pgd(const AcousticModel& model, const LabeledSample& sample, const AttackConfig& config) {
  return run_pgd(model, sample, config, nullptr);
}

AdversarialExample pgd_bpda(const AcousticModel& model, const LabeledSample& sample, const AttackConfig& config,
                            const WaveformTransform& transform) {
  if (!transform) throw Error(Errc::invalid_argument, "BPDA needs a transform");
  return run_pgd(model, sample, config, &transform);
}

AdversarialExample to_pcm(const AdversarialExample& example, const AudioWaveform& source) {
  const auto& x = source.samples();
  const auto& a = example.adversarial.samples();
  if (x.size() != a.size()) throw Error(Errc::shape_mismatch, "source and adversarial lengths differ");
  const double eps = example.config.epsilon;
  AdversarialExample out = example;
  std::vector<double> pcm(a.size()), delta(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double v = std::clamp(round_half_away(a[i]), -kMaxAmplitude, kMaxAmplitude - 1.0);
    if (v - x[i] > eps) v -= 1.0;
    if (x[i] - v > eps) v += 1.0;
    pcm[i] = v;
    delta[i] = v - x[i];
  }
  out.adversarial = AudioWaveform(std::move(pcm), source.sample_rate());
  out.delta = std::move(delta);
  return out;
}

ScoredSample score_example(const AcousticModel& model, const LabeledSample& sample, const AdversarialExample& ex) {
  auto s = score(sample.id, sample.transcription, transcribe(model, ex.adversarial), sample.waveform.duration_seconds());
  s.l1 = l1_norm(ex.delta);
  if (*s.l1 > 0.0) s.snr_db = snr_db(sample.waveform.view(), ex.delta);
  return s;
}

std::vector<double> Range::values() const {
  if (!(step > 0.0) || stop < start) throw Error(Errc::invalid_argument, "range needs start <= stop and step > 0");
  std::vector<double> out;
  for (int i = 0;; ++i) {
    const double v = start + i * step;
    if (v > stop + 1e-9 * std::max(1.0, std::abs(stop))) break;
    out.push_back(v);
  }
  return out;
}

void SweepGrid::validate() const {
  if (epsilons.empty()) throw Error(Errc::invalid_argument, "sweep needs at least one epsilon");
  steps.values();
  alphas.values();
}

std::vector<SweepRow> sweep(const AcousticModel& model, std::span<const LabeledSample> corpus, const SweepGrid& grid,
                            const SweepProgress& progress) {
  grid.validate();
  if (corpus.empty()) throw Error(Errc::empty_corpus, "sweep corpus is empty");
  std::vector<SweepRow> rows;
  for (double eps : grid.epsilons)
    for (double steps : grid.steps.values())
      for (double alpha : grid.alphas.values()) {
        SweepRow row;
        row.config.epsilon = eps;
        row.config.steps = static_cast<int>(std::lround(steps));
        row.config.alpha = alpha;
        try {
          std::vector<ScoredSample> scored;
          for (const auto& s : corpus) scored.push_back(score_example(model, s, to_pcm(pgd(model, s, row.config), s.waveform)));
          row.report = summarize(scored);
        } catch (const Error& e) {
          row.error = e.what();
        }
        if (progress) progress(row);
        rows.push_back(std::move(row));
      }
  return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "epsilon,steps,alpha,wer_mean,aa,snr_mean,l1_mean\n";
  for (const auto& r : rows) {
    out << format_number(r.config.epsilon) << ',' << r.config.steps << ',' << format_number(r.config.alpha);
    if (r.report)
      out << ',' << format_number(r.report->wer_mean) << ',' << format_number(r.report->aa) << ','
          << format_number(r.report->snr_mean) << ',' << format_number(r.report->l1_mean);
    else
      out << ",,,,";
    out << '\n';
  }
}

nlohmann::json to_json(const PoolEntry& e) {
  return {{"id", e.id},
          {"audio", e.audio},
          {"clean_audio", e.clean_audio},
          {"transcription", e.transcription},
          {"hypothesis", e.hypothesis},
          {"config", to_json(e.config)},
          {"final_loss", e.final_loss},
          {"snr_db", e.snr_db},
          {"l1", e.l1},
          {"linf", e.linf},
          {"wer_vs_ground_truth", e.wer_vs_ground_truth},
          {"duration_seconds", e.duration_seconds}};
}

PoolEntry pool_entry_from_json(const nlohmann::json& j) {
  PoolEntry e;
  try {
    e.id = j.at("id").get<std::string>();
    e.audio = j.at("audio").get<std::string>();
    e.clean_audio = j.at("clean_audio").get<std::string>();
    e.transcription = j.at("transcription").get<std::string>();
    e.hypothesis = j.value("hypothesis", "");
    e.config = attack_config_from_json(j.at("config"));
    e.final_loss = j.at("final_loss").get<double>();
    e.snr_db = j.at("snr_db").get<double>();
    e.l1 = j.at("l1").get<double>();
    e.linf = j.value("linf", 0.0);
    e.wer_vs_ground_truth = j.at("wer_vs_ground_truth").get<double>();
    e.duration_seconds = j.value("duration_seconds", 0.0);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::invalid_argument, std::string("bad pool record: ") + ex.what());
  }
  return e;
}

std::vector<PoolEntry> read_pool(const std::filesystem::path& dir) {
  const auto path = dir / kPoolMetadata;
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "no pool metadata at " + path.string());
  std::vector<PoolEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(pool_entry_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

PoolSummary generate_pool(const AcousticModel& model, std::span<const LabeledSample> corpus, std::size_t n,
                          const AttackConfig& config, const std::filesystem::path& dir, const AttackFn& attack,
                          bool self_check) {
  config.validate();
  if (corpus.empty()) throw Error(Errc::empty_corpus, "pool corpus is empty");
  const auto start = std::chrono::steady_clock::now();
  std::filesystem::create_directories(dir / "clean");
  std::ofstream meta(dir / kPoolMetadata, std::ios::app);
  if (!meta) throw Error(Errc::io_error, "cannot write pool metadata in " + dir.string());

  PoolSummary summary;
  summary.requested = n;
  for (std::size_t i = 0; i < std::min(n, corpus.size()); ++i) {
    const auto& s = corpus[i];
    try {
      auto ex = to_pcm(attack ? attack(s) : pgd(model, s, config), s.waveform);
      const double linf = linf_norm(ex.delta);
      if (linf > ex.config.epsilon) {
        summary.excluded.push_back(s.id + ": perturbation exceeds epsilon");
        continue;
      }
      auto scored = score_example(model, s, ex);
      if (self_check && !scored.fooled()) {
        summary.excluded.push_back(s.id + ": model still transcribes it correctly");
        continue;
      }
      if (!scored.snr_db) {
        summary.excluded.push_back(s.id + ": empty perturbation");
        continue;
      }
      PoolEntry e;
      e.id = s.id;
      e.audio = s.id + ".wav";
      e.clean_audio = "clean/" + s.id + ".wav";
      e.transcription = s.transcription.text();
      e.hypothesis = scored.hypothesis.text();
      e.config = ex.config;
      e.final_loss = ex.final_loss;
      e.snr_db = *scored.snr_db;
      e.l1 = *scored.l1;
      e.linf = linf;
      e.wer_vs_ground_truth = scored.errors.wer;
      e.duration_seconds = s.waveform.duration_seconds();
      save_wav(ex.adversarial, dir / e.audio);
      save_wav(s.waveform, dir / e.clean_audio);
      meta << to_json(e).dump() << '\n';
      meta.flush();
      ++summary.written;
    } catch (const Error& err) {
      summary.excluded.push_back(s.id + ": " + err.what());
    }
  }
  if (n > corpus.size())
    summary.excluded.push_back("requested " + std::to_string(n) + " examples from a corpus of " +
                               std::to_string(corpus.size()));
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

}  // namespace advcaptcha
