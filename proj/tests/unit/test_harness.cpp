#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>
#include <thread>

#include "advcaptcha/error.hpp"
#include "error_code.hpp"
#include "advcaptcha/harness.hpp"

#include <httplib.h>

using namespace advcaptcha;
namespace fs = std::filesystem;

namespace {

MfccConfig small_mfcc() {
  MfccConfig c;
  c.frame_length = 64;
  c.hop_length = 32;
  c.num_mel_filters = 10;
  c.num_coefficients = 6;
  return c;
}

AcousticModel tiny_model(std::uint64_t seed = 1) { return AcousticModel::random(small_mfcc(), {1, 8, 6, 20.0}, seed); }

std::vector<LabeledSample> tiny_corpus(int n) {
  std::vector<LabeledSample> out;
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(40 + i);
    std::normal_distribution<double> d(0.0, 2000.0);
    std::vector<double> x(400 + 10 * i);
    for (auto& v : x) v = std::round(d(rng));
    out.push_back({"u" + std::to_string(i), AudioWaveform(x, 16000), Transcription("ab cd")});
  }
  return out;
}

fs::path make_pool(const std::string& name, int n = 3) {
  auto dir = fs::temp_directory_path() / ("advcaptcha-unit-" + name);
  fs::remove_all(dir);
  generate_pool(tiny_model(), tiny_corpus(n), n, {150.0, 2, 75.0, 1.0, 0.0}, dir, {}, false);
  return dir;
}

// Local stand-in for a speech-to-text provider.
struct SttStub {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> hits{0};

  SttStub() {
    server.Post("/ok", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      if (req.get_header_value("Authorization") != "Bearer sesame") {
        res.status = 401;
        return;
      }
      auto w = decode_wav(std::span(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()));
      res.set_content(nlohmann::json{{"transcript", "AB,  Cd!"}, {"samples", w.size()}}.dump(), "application/json");
    });
    server.Post("/quota", [this](const httplib::Request&, httplib::Response& res) {
      ++hits;
      res.status = 429;
    });
    server.Post("/boom", [this](const httplib::Request&, httplib::Response& res) {
      ++hits;
      res.status = 503;
    });
    server.Post("/slow", [](const httplib::Request&, httplib::Response& res) {
      std::this_thread::sleep_for(std::chrono::milliseconds(1500));
      res.set_content("{\"transcript\": \"late\"}", "application/json");
    });
    server.Post("/garbled", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("<html>", "text/html");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~SttStub() {
    server.stop();
    thread.join();
  }

  SttEndpointConfig endpoint(const std::string& path) const {
    SttEndpointConfig c;
    c.provider = "stub";
    c.base_url = "http://127.0.0.1:" + std::to_string(port);
    c.path = path;
    c.credential_env = "ADVCAPTCHA_TEST_STT_TOKEN";
    c.timeout_seconds = 0.5;
    c.rate_limit_rps = 1000.0;
    c.max_retries = 1;
    c.backoff_initial_seconds = 0.01;
    return c;
  }
};

}  // namespace

TEST_CASE("echo transcriber gives full robust accuracy across transforms") {
  auto pool = load_pool(make_pool("echo"));
  REQUIRE(pool.size() == 3);
  FunctionTranscriber echo("echo", [](const AudioWaveform&) { return "AB cd."; });
  std::vector<Transcriber*> ts{&echo};
  auto cells = evaluate(pool, parse_transform_list("quantize:q=1024 median_smooth:k=3"), ts);
  REQUIRE(cells.size() == 3);
  CHECK(cells[0].transform == "none");
  for (const auto& c : cells) {
    REQUIRE(c.report.has_value());
    CHECK(c.report->sroa == 1.0);
    CHECK(c.report->aa == 0.0);
    CHECK(c.records.size() == 3);
    CHECK(c.records[0].raw == "AB cd.");
    CHECK(c.records[0].hypothesis == "ab cd");
  }
  std::ostringstream csv, jsonl;
  write_matrix_csv(csv, cells);
  write_matrix_records(jsonl, cells);
  const auto csv_text = csv.str(), jsonl_text = jsonl.str();
  CHECK(std::count(csv_text.begin(), csv_text.end(), '\n') == 4);
  CHECK(std::count(jsonl_text.begin(), jsonl_text.end(), '\n') == 9);
}

TEST_CASE("a failing transcriber is recorded per cell") {
  auto pool = load_pool(make_pool("failing", 2));
  FunctionTranscriber bad("bad", [](const AudioWaveform&) -> std::string { throw Error(Errc::timeout, "slow"); });
  FunctionTranscriber good("good", [](const AudioWaveform&) { return "ab"; });
  std::vector<Transcriber*> ts{&bad, &good};
  auto cells = evaluate(pool, {}, ts);
  REQUIRE(cells.size() == 2);
  CHECK_FALSE(cells[0].report.has_value());
  CHECK(cells[0].error.find("slow") != std::string::npos);
  REQUIRE(cells[1].report.has_value());
  CHECK(cells[1].report->sroa == 0.0);

  std::vector<Transcriber*> dup{&good, &good};
  CHECK(code_of([&] { evaluate(pool, {}, dup); }) == Errc::duplicate_id);
}

TEST_CASE("transferability needs a second transcriber") {
  auto pool = load_pool(make_pool("transfer", 2));
  LocalModelTranscriber target("target", tiny_model());
  FunctionTranscriber echo("echo", [](const AudioWaveform&) { return "ab cd"; });
  std::vector<Transcriber*> only{&target};
  CHECK(code_of([&] { transferability_eval(pool, only, "target"); }) == Errc::precondition);
  std::vector<Transcriber*> both{&target, &echo};
  auto res = transferability_eval(pool, both, "target");
  REQUIRE(res.size() == 2);
  CHECK(res[1].clean.sroa == 1.0);
  CHECK(res[1].adversarial.sroa == 1.0);
  CHECK(res[0].adversarial.n_samples == 2);
}

TEST_CASE("external STT maps provider responses to errors") {
  SttStub stub;
  const AudioWaveform audio(std::vector<double>(1600, 10.0), 16000);
  ::setenv("ADVCAPTCHA_TEST_STT_TOKEN", "sesame", 1);

  CHECK(code_of([&] { external_stt_transcribe(stub.endpoint("/ok"), audio, false); }) == Errc::offline_mode);
  auto ok = external_stt_transcribe(stub.endpoint("/ok"), audio, true);
  CHECK(ok.raw == "AB,  Cd!");
  CHECK(ok.text.text() == "ab cd");

  stub.hits = 0;
  CHECK(code_of([&] { external_stt_transcribe(stub.endpoint("/quota"), audio, true); }) == Errc::quota);
  CHECK(stub.hits == 2);
  CHECK(code_of([&] { external_stt_transcribe(stub.endpoint("/boom"), audio, true); }) == Errc::provider_error);
  CHECK(code_of([&] { external_stt_transcribe(stub.endpoint("/garbled"), audio, true); }) == Errc::provider_error);
  auto slow = stub.endpoint("/slow");
  slow.max_retries = 0;
  CHECK(code_of([&] { external_stt_transcribe(slow, audio, true); }) == Errc::timeout);

  ::setenv("ADVCAPTCHA_TEST_STT_TOKEN", "wrong", 1);
  stub.hits = 0;
  CHECK(code_of([&] { external_stt_transcribe(stub.endpoint("/ok"), audio, true); }) == Errc::auth_failure);
  CHECK(stub.hits == 1);
  ::unsetenv("ADVCAPTCHA_TEST_STT_TOKEN");
  CHECK(code_of([&] { external_stt_transcribe(stub.endpoint("/ok"), audio, true); }) == Errc::auth_failure);
}

TEST_CASE("external STT transcriber caches and enforces its budget") {
  SttStub stub;
  ::setenv("ADVCAPTCHA_TEST_STT_TOKEN", "sesame", 1);
  ExternalSttTranscriber t("stub", stub.endpoint("/ok"), {true, 2});
  const AudioWaveform a(std::vector<double>(1600, 10.0), 16000);
  const AudioWaveform b(std::vector<double>(1600, 20.0), 16000);
  const AudioWaveform c(std::vector<double>(1600, 30.0), 16000);
  CHECK(t.transcribe(a).text.text() == "ab cd");
  CHECK(t.transcribe(a).text.text() == "ab cd");
  CHECK(t.requests_made() == 1);
  CHECK(t.cache_hits() == 1);
  t.transcribe(b);
  CHECK(code_of([&] { t.transcribe(c); }) == Errc::budget_exhausted);
  CHECK(stub.hits == 2);

  ExternalSttTranscriber offline("off", stub.endpoint("/ok"), {false, 10});
  CHECK(code_of([&] { offline.transcribe(a); }) == Errc::offline_mode);
  ::unsetenv("ADVCAPTCHA_TEST_STT_TOKEN");
}

TEST_CASE("STT endpoint config refuses inline credentials") {
  nlohmann::json j{{"provider", "x"}, {"base_url", "http://localhost:1"}, {"credential_env", "TOKEN"}};
  CHECK(stt_config_from_json(j).credential_env == "TOKEN");
  j["api_key"] = "secret";
  CHECK(code_of([&] { stt_config_from_json(j); }) == Errc::invalid_argument);
}

TEST_CASE("run definitions and transcriber factories") {
  auto dir = fs::temp_directory_path() / "advcaptcha-unit-run";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_checkpoint(tiny_model(), dir / "m.json");
  std::ofstream(dir / "run.json") << R"({"pool": "pool", "transforms": ["quantize:q=512", "lowpass:cutoff=3000"],
    "transcribers": [{"name": "a", "kind": "local-model", "checkpoint": "m.json"}], "output": "out.csv"})";
  auto run = load_robustness_run(dir / "run.json");
  CHECK(run.transforms.size() == 2);
  auto ts = make_transcribers(run.transcribers, run.stt, dir);
  REQUIRE(ts.size() == 1);
  CHECK(ts[0]->kind() == "local-model");
  nlohmann::json bad = nlohmann::json::array({{{"name", "z"}, {"kind", "oracle"}}});
  CHECK(code_of([&] { make_transcribers(bad, {}); }) == Errc::invalid_argument);
  CHECK(parse_attack_method("fgsm") == AttackMethod::fgsm);
  CHECK(code_of([] { parse_attack_method("cw"); }) == Errc::invalid_argument);
}

TEST_CASE("perturbed corpus keeps ids unique and the budget") {
  auto corpus = tiny_corpus(2);
  auto out = perturb_corpus(tiny_model(), corpus, {120.0, 2, 60.0, 1.0, 0.0}, AttackMethod::pgd);
  REQUIRE(out.size() == 2);
  CHECK(out[0].id == "u0-adv");
  for (std::size_t i = 0; i < out.size(); ++i) {
    double worst = 0.0;
    for (std::size_t k = 0; k < out[i].waveform.size(); ++k)
      worst = std::max(worst, std::abs(out[i].waveform.samples()[k] - corpus[i].waveform.samples()[k]));
    CHECK(worst <= 120.0);
    CHECK(out[i].transcription == corpus[i].transcription);
  }
}
