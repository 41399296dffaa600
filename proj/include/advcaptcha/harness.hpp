#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advcaptcha/attack.hpp"
#include "advcaptcha/metrics.hpp"
#include "advcaptcha/model.hpp"
#include "advcaptcha/train.hpp"
#include "advcaptcha/transforms.hpp"

namespace advcaptcha {

struct TranscriptResult {
  std::string raw;
  Transcription text;
};

class Transcriber {
 public:
  virtual ~Transcriber() = default;
  virtual const std::string& name() const = 0;
  virtual std::string kind() const = 0;
  virtual TranscriptResult transcribe(const AudioWaveform& audio) = 0;
};

class LocalModelTranscriber : public Transcriber {
 public:
  LocalModelTranscriber(std::string name, AcousticModel model);
  const std::string& name() const override { return name_; }
  std::string kind() const override { return "local-model"; }
  TranscriptResult transcribe(const AudioWaveform& audio) override;
  const AcousticModel& model() const { return model_; }

 private:
  std::string name_;
  AcousticModel model_;
};

class FunctionTranscriber : public Transcriber {
 public:
  using Fn = std::function<std::string(const AudioWaveform&)>;
  FunctionTranscriber(std::string name, Fn fn, std::string kind = "function");
  const std::string& name() const override { return name_; }
  std::string kind() const override { return kind_; }
  TranscriptResult transcribe(const AudioWaveform& audio) override;

 private:
  std::string name_;
  Fn fn_;
  std::string kind_;
};

// Generic JSON speech-to-text endpoint: POST <base_url><path> with the WAV as
// body and `Authorization: Bearer <token>`; the reply carries the text under
// `transcript_field`.
struct SttEndpointConfig {
  std::string provider;
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/transcribe";
  std::string credential_env;  // environment variable holding the token
  std::string transcript_field = "transcript";
  double timeout_seconds = 30.0;
  double rate_limit_rps = 1.0;
  int max_retries = 3;
  double backoff_initial_seconds = 0.5;
  double backoff_max_seconds = 8.0;

  void validate() const;
};

SttEndpointConfig stt_config_from_json(const nlohmann::json& j);

struct SttPolicy {
  bool allow_network = false;
  std::size_t max_requests = 100;  // per run, cache hits excluded
};

class RateLimiter {
 public:
  explicit RateLimiter(double per_second);
  // Blocks until the next request may start.
  void acquire();

 private:
  std::mutex mu_;
  std::chrono::steady_clock::duration interval_;
  std::chrono::steady_clock::time_point next_;
};

class ExternalSttTranscriber : public Transcriber {
 public:
  ExternalSttTranscriber(std::string name, SttEndpointConfig endpoint, SttPolicy policy);
  const std::string& name() const override { return name_; }
  std::string kind() const override { return "external-stt"; }
  TranscriptResult transcribe(const AudioWaveform& audio) override;
  std::size_t requests_made() const { return requests_; }
  std::size_t cache_hits() const { return cache_hits_; }

 private:
  std::string name_;
  SttEndpointConfig endpoint_;
  SttPolicy policy_;
  RateLimiter limiter_;
  std::mutex mu_;
  std::map<std::uint64_t, std::string> cache_;
  std::size_t requests_ = 0;
  std::size_t cache_hits_ = 0;
};

// One-shot call; errors are offline_mode, auth_failure, timeout, quota or
// provider_error.
TranscriptResult external_stt_transcribe(const SttEndpointConfig& endpoint, const AudioWaveform& audio,
                                         bool allow_network);

struct PoolItem {
  PoolEntry meta;
  LabeledSample clean;
  AudioWaveform adversarial;
  std::vector<double> delta;
};

std::vector<PoolItem> load_pool(const std::filesystem::path& dir);

struct CellRecord {
  std::string id;
  std::string reference;
  std::string raw;
  std::string hypothesis;
  double wer = 0.0;
};

struct MatrixCell {
  std::string transcriber;
  std::string transform;
  std::optional<EvalReport> report;
  std::string error;
  std::vector<CellRecord> records;
};

// Every transcriber against every transform applied to the adversarial
// audio. "none" is always evaluated first. A failing cell records its error.
std::vector<MatrixCell> evaluate(std::span<const PoolItem> pool, std::vector<TransformSpec> transforms,
                                 std::span<Transcriber* const> transcribers,
                                 const CodecRegistry& codecs = default_codecs());

void write_matrix_csv(std::ostream& out, std::span<const MatrixCell> cells);
void write_matrix_records(std::ostream& out, std::span<const MatrixCell> cells);

enum class AttackMethod { pgd, fgsm };
AttackMethod parse_attack_method(const std::string& text);

// Perturbs `corpus` against `target`; returns the perturbed copies (PCM).
std::vector<LabeledSample> perturb_corpus(const AcousticModel& target, std::span<const LabeledSample> corpus,
                                          const AttackConfig& attack, AttackMethod method);

struct AdversarialTrainingOptions {
  AttackMethod method = AttackMethod::pgd;
  bool include_clean = true;  // train on clean + perturbed rather than perturbed only
  ModelShape shape;
};

// Trains a fresh model of `options.shape` on the perturbed corpus and returns
// the lowest-validation-loss checkpoint.
AcousticModel adversarial_train(const AcousticModel& target, std::span<const LabeledSample> corpus,
                                const AttackConfig& attack, const TrainConfig& train_config,
                                const AdversarialTrainingOptions& options = {}, TrainReport* report = nullptr,
                                const EpochCallback& on_epoch = {});

struct CounterResult {
  PoolSummary pool;
  std::vector<PoolItem> items;
  std::vector<MatrixCell> cells;  // transform "none", one per transcriber
};

// Regenerates the pool against the adversarially trained target (no
// self-check filter) and scores every transcriber on it.
CounterResult counter_adversarial_training(const AcousticModel& adv_target, std::span<const LabeledSample> corpus,
                                           const AttackConfig& attack, const std::filesystem::path& pool_dir,
                                           std::span<Transcriber* const> transcribers);

struct TransferResult {
  std::string transcriber;
  EvalReport clean;
  EvalReport adversarial;
};

// Clean vs adversarial scores per transcriber on identical sample ids.
std::vector<TransferResult> transferability_eval(std::span<const PoolItem> pool,
                                                 std::span<Transcriber* const> transcribers,
                                                 const std::string& generating_model);

// Run definition file: pool, transforms, transcribers, output paths.
struct RobustnessRun {
  std::filesystem::path pool;
  std::vector<TransformSpec> transforms;
  nlohmann::json transcribers;  // [{name, kind, checkpoint | endpoint fields}]
  std::filesystem::path output;
  std::filesystem::path records;
  SttPolicy stt;
};

RobustnessRun load_robustness_run(const std::filesystem::path& path);
std::vector<std::unique_ptr<Transcriber>> make_transcribers(const nlohmann::json& specs, const SttPolicy& policy,
                                                            const std::filesystem::path& base_dir = {});

}  // namespace advcaptcha
