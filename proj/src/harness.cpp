#include "advcaptcha/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>
#include <variant>

#include "advcaptcha/error.hpp"
#include "advcaptcha/synth.hpp"

// After the Eigen-based headers: <resolv.h> defines a `_res` macro.
#include <httplib.h>

namespace advcaptcha {

LocalModelTranscriber::LocalModelTranscriber(std::string name, AcousticModel model)
    : name_(std::move(name)), model_(std::move(model)) {}

TranscriptResult LocalModelTranscriber::transcribe(const AudioWaveform& audio) {
  auto t = advcaptcha::transcribe(model_, audio);
  return {t.text(), t};
}

FunctionTranscriber::FunctionTranscriber(std::string name, Fn fn, std::string kind)
    : name_(std::move(name)), fn_(std::move(fn)), kind_(std::move(kind)) {}

TranscriptResult FunctionTranscriber::transcribe(const AudioWaveform& audio) {
  auto raw = fn_(audio);
  return {raw, Transcription(raw)};
}

void SttEndpointConfig::validate() const {
  if (base_url.empty()) throw Error(Errc::invalid_argument, "STT endpoint needs a base_url");
  if (!(timeout_seconds > 0.0)) throw Error(Errc::invalid_argument, "STT timeout must be positive");
  if (!(rate_limit_rps > 0.0)) throw Error(Errc::invalid_argument, "STT rate limit must be positive");
  if (max_retries < 0) throw Error(Errc::invalid_argument, "max_retries must be >= 0");
}

SttEndpointConfig stt_config_from_json(const nlohmann::json& j) {
  SttEndpointConfig c;
  try {
    c.provider = j.value("provider", c.provider);
    c.base_url = j.value("base_url", c.base_url);
    c.path = j.value("path", c.path);
    c.credential_env = j.value("credential_env", c.credential_env);
    c.transcript_field = j.value("transcript_field", c.transcript_field);
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    c.rate_limit_rps = j.value("rate_limit_rps", c.rate_limit_rps);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.backoff_initial_seconds = j.value("backoff_initial_seconds", c.backoff_initial_seconds);
    c.backoff_max_seconds = j.value("backoff_max_seconds", c.backoff_max_seconds);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("STT endpoint: ") + e.what());
  }
  if (j.contains("credential") || j.contains("token") || j.contains("api_key"))
    throw Error(Errc::invalid_argument, "STT credentials must come from an environment variable (credential_env)");
  c.validate();
  return c;
}

RateLimiter::RateLimiter(double per_second)
    : interval_(std::chrono::duration_cast<std::chrono::steady_clock::duration>(
          std::chrono::duration<double>(1.0 / per_second))),
      next_(std::chrono::steady_clock::now()) {
  if (!(per_second > 0.0)) throw Error(Errc::invalid_argument, "rate must be positive");
}

void RateLimiter::acquire() {
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + interval_;
  }
  std::this_thread::sleep_until(slot);
}

namespace {

struct Attempt {
  Errc code;
  std::string message;
  bool retry;
};

// Returns the raw transcript or a classified failure.
std::variant<std::string, Attempt> attempt_once(const SttEndpointConfig& ep, const std::string& body,
                                                const std::string& token) {
  httplib::Client cli(ep.base_url);
  const auto secs = static_cast<time_t>(ep.timeout_seconds);
  const auto usecs = static_cast<time_t>((ep.timeout_seconds - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
  auto res = cli.Post(ep.path, headers, body, "audio/wav");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout)
      return Attempt{Errc::timeout, ep.provider + ": request timed out (" + httplib::to_string(err) + ")", true};
    return Attempt{Errc::provider_error, ep.provider + ": " + httplib::to_string(err), true};
  }
  const int st = res->status;
  if (st == 401 || st == 403) return Attempt{Errc::auth_failure, ep.provider + ": authentication rejected", false};
  if (st == 429) return Attempt{Errc::quota, ep.provider + ": quota or rate limit exceeded", true};
  if (st == 408 || st == 504) return Attempt{Errc::timeout, ep.provider + ": provider timed out", true};
  if (st >= 500) return Attempt{Errc::provider_error, ep.provider + ": HTTP " + std::to_string(st), true};
  if (st != 200) return Attempt{Errc::provider_error, ep.provider + ": HTTP " + std::to_string(st), false};
  try {
    auto j = nlohmann::json::parse(res->body);
    return j.at(ep.transcript_field).get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    return Attempt{Errc::provider_error, ep.provider + ": malformed reply: " + e.what(), false};
  }
}

std::string call_with_retries(const SttEndpointConfig& ep, const std::string& body) {
  std::string token;
  if (!ep.credential_env.empty()) {
    const char* v = std::getenv(ep.credential_env.c_str());
    if (!v || !*v) throw Error(Errc::auth_failure, ep.provider + ": credential variable " + ep.credential_env + " is not set");
    token = v;
  }
  double backoff = ep.backoff_initial_seconds;
  for (int attempt = 0;; ++attempt) {
    auto r = attempt_once(ep, body, token);
    if (auto* text = std::get_if<std::string>(&r)) return *text;
    const auto& fail = std::get<Attempt>(r);
    if (!fail.retry || attempt >= ep.max_retries) throw Error(fail.code, fail.message);
    std::this_thread::sleep_for(std::chrono::duration<double>(std::min(backoff, ep.backoff_max_seconds)));
    backoff *= 2.0;
  }
}

std::string wav_body(const AudioWaveform& audio) {
  auto bytes = encode_wav(audio);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace

TranscriptResult external_stt_transcribe(const SttEndpointConfig& endpoint, const AudioWaveform& audio,
                                         bool allow_network) {
  if (!allow_network) throw Error(Errc::offline_mode, "external STT is disabled; pass the network opt-in flag");
  endpoint.validate();
  auto raw = call_with_retries(endpoint, wav_body(audio));
  return {raw, Transcription(raw)};
}

ExternalSttTranscriber::ExternalSttTranscriber(std::string name, SttEndpointConfig endpoint, SttPolicy policy)
    : name_(std::move(name)), endpoint_(std::move(endpoint)), policy_(policy), limiter_(endpoint_.rate_limit_rps) {
  endpoint_.validate();
}

TranscriptResult ExternalSttTranscriber::transcribe(const AudioWaveform& audio) {
  if (!policy_.allow_network) throw Error(Errc::offline_mode, "external STT is disabled; pass the network opt-in flag");
  const auto body = wav_body(audio);
  const auto key = fnv1a64(body.data(), body.size());
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) {
      ++cache_hits_;
      return {it->second, Transcription(it->second)};
    }
    if (requests_ >= policy_.max_requests)
      throw Error(Errc::budget_exhausted, name_ + ": request budget of " + std::to_string(policy_.max_requests) + " used up");
    ++requests_;
  }
  limiter_.acquire();
  auto raw = call_with_retries(endpoint_, body);
  std::lock_guard lock(mu_);
  cache_[key] = raw;
  return {raw, Transcription(raw)};
}

std::vector<PoolItem> load_pool(const std::filesystem::path& dir) {
  auto entries = read_pool(dir);
  if (entries.empty()) throw Error(Errc::empty_input, "pool " + dir.string() + " has no entries");
  std::vector<PoolItem> out;
  out.reserve(entries.size());
  for (auto& e : entries) {
    PoolItem item;
    item.clean = LabeledSample{e.id, load_wav(dir / e.clean_audio), Transcription(e.transcription)};
    item.adversarial = load_wav(dir / e.audio);
    if (item.adversarial.size() != item.clean.waveform.size())
      throw Error(Errc::shape_mismatch, "pool entry " + e.id + ": clean and adversarial lengths differ");
    const auto& x = item.clean.waveform.samples();
    const auto& a = item.adversarial.samples();
    item.delta.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) item.delta[i] = a[i] - x[i];
    item.meta = std::move(e);
    out.push_back(std::move(item));
  }
  return out;
}

namespace {

MatrixCell run_cell(std::span<const PoolItem> pool, const TransformSpec& spec, Transcriber& t,
                    const CodecRegistry& codecs, bool adversarial) {
  MatrixCell cell;
  cell.transcriber = t.name();
  cell.transform = spec.name();
  try {
    std::vector<ScoredSample> scored;
    for (const auto& item : pool) {
      const auto& audio = adversarial ? item.adversarial : item.clean.waveform;
      auto result = t.transcribe(apply_transform(spec, audio, codecs));
      auto s = score(item.meta.id, item.clean.transcription, result.text, item.clean.waveform.duration_seconds());
      if (adversarial) {
        s.l1 = l1_norm(item.delta);
        if (*s.l1 > 0.0) s.snr_db = snr_db(item.clean.waveform.view(), item.delta);
      }
      cell.records.push_back({item.meta.id, item.clean.transcription.text(), result.raw, result.text.text(),
                              s.errors.wer});
      scored.push_back(std::move(s));
    }
    cell.report = summarize(scored);
  } catch (const Error& e) {
    cell.error = std::string(errc_name(e.code())) + ": " + e.what();
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  return cell;
}

}  // namespace

std::vector<MatrixCell> evaluate(std::span<const PoolItem> pool, std::vector<TransformSpec> transforms,
                                 std::span<Transcriber* const> transcribers, const CodecRegistry& codecs) {
  if (pool.empty()) throw Error(Errc::empty_input, "pool is empty");
  if (transcribers.empty()) throw Error(Errc::invalid_argument, "no transcribers");
  std::vector<std::string> names;
  for (auto* t : transcribers) {
    if (std::find(names.begin(), names.end(), t->name()) != names.end())
      throw Error(Errc::duplicate_id, "duplicate transcriber name " + t->name());
    names.push_back(t->name());
  }
  std::erase_if(transforms, [](const TransformSpec& s) { return s.kind == TransformKind::none; });
  transforms.insert(transforms.begin(), TransformSpec{});
  std::vector<MatrixCell> cells;
  for (auto* t : transcribers)
    for (const auto& spec : transforms) cells.push_back(run_cell(pool, spec, *t, codecs, true));
  return cells;
}

void write_matrix_csv(std::ostream& out, std::span<const MatrixCell> cells) {
  out << "transcriber,transform";
  for (const auto& c : report_columns()) out << ',' << c;
  out << ",error\n";
  auto quoted = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (const auto& c : cells) {
    out << quoted(c.transcriber) << ',' << quoted(c.transform);
    if (c.report)
      for (const auto& v : report_values(*c.report)) out << ',' << v;
    else
      for (std::size_t i = 0; i < report_columns().size(); ++i) out << ',';
    out << ',' << quoted(c.error) << '\n';
  }
}

void write_matrix_records(std::ostream& out, std::span<const MatrixCell> cells) {
  for (const auto& c : cells) {
    if (!c.error.empty()) {
      out << nlohmann::json{{"transcriber", c.transcriber}, {"transform", c.transform}, {"error", c.error}}.dump()
          << '\n';
      continue;
    }
    for (const auto& r : c.records)
      out << nlohmann::json{{"transcriber", c.transcriber}, {"transform", c.transform}, {"id", r.id},
                            {"reference", r.reference},     {"raw", r.raw},             {"hypothesis", r.hypothesis},
                            {"wer", r.wer}}
                 .dump()
          << '\n';
  }
}

AttackMethod parse_attack_method(const std::string& text) {
  if (text == "pgd") return AttackMethod::pgd;
  if (text == "fgsm") return AttackMethod::fgsm;
  throw Error(Errc::invalid_argument, "unknown attack method '" + text + "' (expected pgd or fgsm)");
}

std::vector<LabeledSample> perturb_corpus(const AcousticModel& target, std::span<const LabeledSample> corpus,
                                          const AttackConfig& attack, AttackMethod method) {
  attack.validate();
  std::vector<LabeledSample> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    auto ex = method == AttackMethod::pgd ? pgd(target, s, attack) : fgsm(target, s, attack.epsilon);
    out.push_back({s.id + "-adv", to_pcm(ex, s.waveform).adversarial, s.transcription});
  }
  return out;
}

AcousticModel adversarial_train(const AcousticModel& target, std::span<const LabeledSample> corpus,
                                const AttackConfig& attack, const TrainConfig& train_config,
                                const AdversarialTrainingOptions& options, TrainReport* report,
                                const EpochCallback& on_epoch) {
  if (corpus.empty()) throw Error(Errc::empty_corpus, "adversarial training corpus is empty");
  auto data = perturb_corpus(target, corpus, attack, options.method);
  if (options.include_clean) data.insert(data.begin(), corpus.begin(), corpus.end());
  return train(data, train_config, options.shape, target.mfcc_config(), report, on_epoch);
}

CounterResult counter_adversarial_training(const AcousticModel& adv_target, std::span<const LabeledSample> corpus,
                                           const AttackConfig& attack, const std::filesystem::path& pool_dir,
                                           std::span<Transcriber* const> transcribers) {
  CounterResult r;
  r.pool = generate_pool(adv_target, corpus, corpus.size(), attack, pool_dir, {}, false);
  r.items = load_pool(pool_dir);
  for (auto* t : transcribers) r.cells.push_back(run_cell(r.items, TransformSpec{}, *t, default_codecs(), true));
  return r;
}

std::vector<TransferResult> transferability_eval(std::span<const PoolItem> pool,
                                                 std::span<Transcriber* const> transcribers,
                                                 const std::string& generating_model) {
  const bool has_other = std::any_of(transcribers.begin(), transcribers.end(),
                                     [&](Transcriber* t) { return t->name() != generating_model; });
  if (transcribers.size() < 2 || !has_other)
    throw Error(Errc::precondition, "transferability needs at least two transcribers, one of them not " + generating_model);
  std::vector<TransferResult> out;
  for (auto* t : transcribers) {
    auto clean = run_cell(pool, TransformSpec{}, *t, default_codecs(), false);
    auto adv = run_cell(pool, TransformSpec{}, *t, default_codecs(), true);
    if (!clean.report) throw Error(Errc::provider_error, t->name() + ": " + clean.error);
    if (!adv.report) throw Error(Errc::provider_error, t->name() + ": " + adv.error);
    out.push_back({t->name(), *clean.report, *adv.report});
  }
  return out;
}

RobustnessRun load_robustness_run(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open run definition " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p; };
  RobustnessRun run;
  try {
    run.pool = resolve(j.at("pool").get<std::string>());
    for (const auto& t : j.value("transforms", std::vector<std::string>{})) run.transforms.push_back(parse_transform(t));
    run.transcribers = j.at("transcribers");
    run.output = resolve(j.at("output").get<std::string>());
    if (j.contains("records")) run.records = resolve(j["records"].get<std::string>());
    run.stt.allow_network = j.value("allow_network", false);
    run.stt.max_requests = j.value("max_requests", run.stt.max_requests);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  return run;
}

std::vector<std::unique_ptr<Transcriber>> make_transcribers(const nlohmann::json& specs, const SttPolicy& policy,
                                                            const std::filesystem::path& base_dir) {
  if (!specs.is_array() || specs.empty()) throw Error(Errc::invalid_argument, "transcribers must be a non-empty list");
  std::vector<std::unique_ptr<Transcriber>> out;
  for (const auto& s : specs) {
    try {
      const auto name = s.at("name").get<std::string>();
      const auto kind = s.value("kind", std::string("local-model"));
      if (kind == "local-model") {
        std::filesystem::path ckpt = s.at("checkpoint").get<std::string>();
        if (!ckpt.is_absolute() && !base_dir.empty()) ckpt = base_dir / ckpt;
        out.push_back(std::make_unique<LocalModelTranscriber>(name, load_checkpoint(ckpt)));
      } else if (kind == "external-stt") {
        out.push_back(std::make_unique<ExternalSttTranscriber>(name, stt_config_from_json(s), policy));
      } else {
        throw Error(Errc::invalid_argument, "unknown transcriber kind '" + kind + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::invalid_argument, std::string("transcriber spec: ") + e.what());
    }
  }
  return out;
}

}  // namespace advcaptcha
