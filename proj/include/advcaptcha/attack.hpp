#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advcaptcha/audio.hpp"
#include "advcaptcha/metrics.hpp"
#include "advcaptcha/model.hpp"

namespace advcaptcha {

struct AttackConfig {
  double epsilon = 350.0;
  int steps = 50;
  double alpha = 40.0;
  double c1 = 1.0;
  double c2 = 0.0;

  void validate() const;
  bool operator==(const AttackConfig&) const = default;
};

AttackConfig load_attack_config(const std::filesystem::path& path);
nlohmann::json to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const nlohmann::json& j);

struct AdversarialExample {
  std::string source_id;
  AudioWaveform adversarial;
  std::vector<double> delta;  // adversarial - source
  AttackConfig config;
  double final_loss = 0.0;  // objective value at the returned delta
};

struct ObjectiveValue {
  double value = 0.0;
  double ctc = 0.0;
  std::vector<double> grad;  // d value / d delta
};

// -c1 * ctc(f(x + delta), y) + c2 * ||delta||_2
double objective(const AcousticModel& model, std::span<const double> x, std::span<const double> delta,
                 std::span<const int> labels, double c1, double c2);
ObjectiveValue objective_and_grad(const AcousticModel& model, std::span<const double> x,
                                  std::span<const double> delta, std::span<const int> labels, double c1, double c2);

// Single step of size epsilon along sign(d ctc / d x); epsilon may be 0.
AdversarialExample fgsm(const AcousticModel& model, const LabeledSample& sample, double epsilon);

AdversarialExample pgd(const AcousticModel& model, const LabeledSample& sample, const AttackConfig& config);

using WaveformTransform = std::function<AudioWaveform(const AudioWaveform&)>;

// PGD whose forward pass runs `transform` on x + delta; the backward pass
// treats it as the identity.
AdversarialExample pgd_bpda(const AcousticModel& model, const LabeledSample& sample, const AttackConfig& config,
                            const WaveformTransform& transform);

// Rounds the adversarial waveform to 16-bit PCM while keeping
// ||delta||_inf <= epsilon and recomputes delta.
AdversarialExample to_pcm(const AdversarialExample& example, const AudioWaveform& source);

// Scores an example against the model: hypothesis, WER, SNR and L1.
ScoredSample score_example(const AcousticModel& model, const LabeledSample& sample, const AdversarialExample& example);

struct Range {
  double start = 0.0;
  double stop = 0.0;
  double step = 1.0;

  // Inclusive of stop.
  std::vector<double> values() const;
};

struct SweepGrid {
  std::vector<double> epsilons;
  Range steps;
  Range alphas;

  void validate() const;
};

struct SweepRow {
  AttackConfig config;
  std::optional<EvalReport> report;
  std::string error;
};

using SweepProgress = std::function<void(const SweepRow&)>;

// One report row per (epsilon, steps, alpha); failures are recorded per row.
std::vector<SweepRow> sweep(const AcousticModel& model, std::span<const LabeledSample> corpus, const SweepGrid& grid,
                            const SweepProgress& progress = {});
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

// On-disk challenge pool: <dir>/<id>.wav, <dir>/clean/<id>.wav and one JSON
// record per line in <dir>/metadata.jsonl.
struct PoolEntry {
  std::string id;
  std::string audio;  // relative to the pool directory
  std::string clean_audio;
  std::string transcription;
  std::string hypothesis;
  AttackConfig config;
  double final_loss = 0.0;
  double snr_db = 0.0;
  double l1 = 0.0;
  double linf = 0.0;
  double wer_vs_ground_truth = 0.0;
  double duration_seconds = 0.0;
};

nlohmann::json to_json(const PoolEntry& e);
PoolEntry pool_entry_from_json(const nlohmann::json& j);

inline constexpr const char* kPoolMetadata = "metadata.jsonl";

std::vector<PoolEntry> read_pool(const std::filesystem::path& dir);

struct PoolSummary {
  std::size_t requested = 0;
  std::size_t written = 0;
  std::vector<std::string> excluded;  // source ids with a reason
  double seconds = 0.0;
};

using AttackFn = std::function<AdversarialExample(const LabeledSample&)>;

// Attacks up to n samples (in corpus order) and appends the examples that
// satisfy the budget and fool `model` to the pool in `dir`.
PoolSummary generate_pool(const AcousticModel& model, std::span<const LabeledSample> corpus, std::size_t n,
                          const AttackConfig& config, const std::filesystem::path& dir,
                          const AttackFn& attack = {}, bool self_check = true);

}  // namespace advcaptcha
