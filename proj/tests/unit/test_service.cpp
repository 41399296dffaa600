#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <thread>

#include "advcaptcha/attack.hpp"
#include "advcaptcha/error.hpp"
#include "error_code.hpp"
#include "advcaptcha/service.hpp"

#include <httplib.h>

using namespace advcaptcha;
namespace fs = std::filesystem;

namespace {

struct FakeClock {
  std::shared_ptr<double> now = std::make_shared<double>(1000.0);
  Clock clock() const {
    auto p = now;
    return [p] { return *p; };
  }
  void advance(double s) const { *now += s; }
};

fs::path write_pool(const std::string& name, const std::vector<std::pair<std::string, std::string>>& items) {
  auto dir = fs::temp_directory_path() / ("advcaptcha-unit-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream meta(dir / "metadata.jsonl");
  for (const auto& [id, text] : items) {
    save_wav(AudioWaveform(std::vector<double>(1600, 100.0), 16000), dir / (id + ".wav"));
    PoolEntry e;
    e.id = id;
    e.audio = e.clean_audio = id + ".wav";
    e.transcription = text;
    meta << to_json(e).dump() << '\n';
  }
  return dir;
}

}  // namespace

TEST_CASE("challenge store lifecycle") {
  auto dir = write_pool("store", {{"a", "open the door"}, {"b", "red fox"}});
  FakeClock fc;
  ChallengeStore store(read_pool_records(dir), 60.0, fc.clock());
  CHECK(store.remaining() == 2);

  auto c1 = store.issue();
  CHECK(std::regex_match(c1.challenge_id, std::regex("[0-9a-f]{32}")));
  CHECK(c1.audio_url == "/api/audio/" + c1.challenge_id);
  CHECK(store.audio(c1.challenge_id).size() == 44 + 3200);
  fc.advance(4.0);
  auto g = store.grade(c1.challenge_id, "  Open the DOOR! ");
  CHECK(g.pass);
  CHECK(g.wer == 0.0);
  CHECK(g.completion_seconds == doctest::Approx(4.0));
  CHECK(code_of([&] { store.grade(c1.challenge_id, "open the door"); }) == Errc::replay);
  CHECK(code_of([&] { store.audio(c1.challenge_id); }) == Errc::replay);

  auto c2 = store.issue();
  CHECK(code_of([&] { store.issue(); }) == Errc::out_of_challenges);
  fc.advance(61.0);
  CHECK(code_of([&] { store.grade(c2.challenge_id, "red fox"); }) == Errc::expired);
  CHECK(code_of([&] { store.audio(c2.challenge_id); }) == Errc::expired);
  CHECK(code_of([&] { store.grade("deadbeef", "x"); }) == Errc::unknown_challenge);
  CHECK(store.issued_count() == 2);
  CHECK(store.append(read_pool_records(dir)) == 0);
}

TEST_CASE("usage report excludes outliers and groups by length") {
  auto dir = write_pool("usage", {{"a", "one two"}, {"b", "three four"}, {"c", "five six seven"}, {"d", "x y z"}});
  FakeClock fc;
  ChallengeStore store(read_pool_records(dir), 10000.0, fc.clock());
  CHECK(code_of([&] { store.usage_report(300.0); }) == Errc::no_data);
  const std::vector<std::pair<double, std::string>> plan{{2.0, "one two"}, {4.0, "wrong"}, {6.0, "five six seven"}, {900.0, "x y z"}};
  for (const auto& [secs, answer] : plan) {
    auto c = store.issue();
    fc.advance(secs);
    store.grade(c.challenge_id, answer);
  }
  auto r = store.usage_report(300.0);
  CHECK(r.outliers == 1);
  CHECK(r.overall.total == 3);
  CHECK(r.overall.solved == 2);
  CHECK(r.overall.success_rate == doctest::Approx(2.0 / 3.0));
  CHECK(r.overall.mean_seconds == doctest::Approx(4.0));
  CHECK(r.overall.median_seconds == doctest::Approx(4.0));
  CHECK(r.overall.std_seconds == doctest::Approx(std::sqrt(8.0 / 3.0)));
  REQUIRE(r.by_length.count(2));
  CHECK(r.by_length[2].total == 2);
  CHECK(r.by_length[3].total == 1);
  auto j = to_json(r);
  CHECK(j["outliers_excluded"] == 1);
  CHECK(j.contains("average_time"));
}

TEST_CASE("service config validation and environment overrides") {
  ServiceConfig c;
  c.pool_dir = "pool";
  CHECK_NOTHROW(c.validate());
  c.ttl_seconds = 0;
  CHECK_THROWS_AS(c.validate(), Error);

  auto path = fs::temp_directory_path() / "advcaptcha-unit-service.json";
  std::ofstream(path) << R"({"pool_dir": "p", "port": 9000, "ttl_seconds": 120})";
  ::setenv("ADVCAPTCHA_PORT", "9100", 1);
  auto loaded = load_service_config(path);
  ::unsetenv("ADVCAPTCHA_PORT");
  CHECK(loaded.port == 9100);
  CHECK(loaded.ttl_seconds == 120.0);
  CHECK(loaded.pool_dir == path.parent_path() / "p");
}

TEST_CASE("HTTP round trip") {
  auto dir = write_pool("http", {{"a", "open the door"}, {"b", "red fox"}});
  ChallengeStore store(read_pool_records(dir), 300.0);
  ServiceConfig cfg;
  cfg.pool_dir = dir;
  cfg.port = 0;
  cfg.stats_token = "operator";
  CaptchaServer server(store, cfg);
  const int port = server.bind();
  std::thread t([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);

  auto r = cli.Get("/api/challenge");
  REQUIRE(r);
  CHECK(r->status == 200);
  auto j = nlohmann::json::parse(r->body);
  CHECK(j.size() == 2);
  const std::string id = j["challenge_id"];
  CHECK(r->body.find("open") == std::string::npos);

  auto audio = cli.Get(j["audio_url"].get<std::string>());
  REQUIRE(audio);
  CHECK(audio->status == 200);
  CHECK(audio->get_header_value("Content-Type") == "audio/wav");
  CHECK(audio->body.substr(0, 4) == "RIFF");

  auto answer = [&](const std::string& body) { return cli.Post("/api/answer", body, "application/json"); };
  auto a = answer(nlohmann::json{{"challenge_id", id}, {"transcription", "Open the door."}}.dump());
  REQUIRE(a);
  CHECK(a->status == 200);
  auto g = nlohmann::json::parse(a->body);
  CHECK(g["pass"] == true);
  CHECK(g.size() == 3);
  CHECK(answer(nlohmann::json{{"challenge_id", id}, {"transcription", "x"}}.dump())->status == 409);
  CHECK(answer("not json")->status == 400);
  CHECK(answer(R"({"challenge_id": "abc"})")->status == 400);
  CHECK(answer(R"({"challenge_id": "abc", "transcription": "x"})")->status == 404);
  CHECK(cli.Get("/api/audio/0123")->status == 404);

  CHECK(cli.Get("/api/stats")->status == 403);
  auto stats = cli.Get("/api/stats", {{"Authorization", "Bearer operator"}});
  REQUIRE(stats);
  CHECK(stats->status == 200);
  auto s = nlohmann::json::parse(stats->body);
  CHECK(s["total"] == 1);
  CHECK(s["remaining"] == 1);

  CHECK(cli.Get("/api/challenge")->status == 200);
  CHECK(cli.Get("/api/challenge")->status == 503);
  server.stop();
  t.join();
}

TEST_CASE("rate limiting and busy ports") {
  auto dir = write_pool("limit", {{"a", "one"}, {"b", "two"}, {"c", "three"}});
  ChallengeStore store(read_pool_records(dir), 300.0);
  ServiceConfig cfg;
  cfg.pool_dir = dir;
  cfg.port = 0;
  cfg.rate_limit_per_minute = 2;
  CaptchaServer server(store, cfg);
  const int port = server.bind();
  std::thread t([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  CHECK(cli.Get("/api/challenge")->status == 200);
  CHECK(cli.Get("/api/challenge")->status == 200);
  CHECK(cli.Get("/api/challenge")->status == 429);

  ServiceConfig clash = cfg;
  clash.port = port;
  CaptchaServer second(store, clash);
  CHECK(code_of([&] { second.bind(); }) == Errc::io_error);
  server.stop();
  t.join();
}
