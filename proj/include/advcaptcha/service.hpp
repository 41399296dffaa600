#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "advcaptcha/audio.hpp"

namespace httplib {
class Server;
}

namespace advcaptcha {

struct ServiceConfig {
  std::filesystem::path pool_dir;
  std::size_t low_water = 0;
  double ttl_seconds = 300.0;
  std::string bind_address = "127.0.0.1";
  int port = 8080;
  double rate_limit_per_minute = 0.0;  // per client address; 0 disables
  std::string stats_token;             // empty disables /api/stats
  double outlier_cap_seconds = 300.0;
  double refill_interval_seconds = 0.0;  // 0 disables pool rescans

  void validate() const;
};

// Reads a JSON config; ADVCAPTCHA_* environment variables override file keys.
ServiceConfig load_service_config(const std::filesystem::path& path);
void apply_env_overrides(ServiceConfig& config);

enum class ChallengeState { fresh, issued, solved, failed, expired };
const char* state_name(ChallengeState s);

struct PoolRecord {
  std::string pool_id;
  std::filesystem::path audio;
  Transcription ground_truth;
};

std::vector<PoolRecord> read_pool_records(const std::filesystem::path& pool_dir);

struct IssuedChallenge {
  std::string challenge_id;
  std::string audio_url;
};

struct GradeResult {
  bool pass = false;
  double wer = 0.0;
  double completion_seconds = 0.0;
};

struct UsageBucket {
  std::size_t total = 0;
  std::size_t solved = 0;
  double success_rate = 0.0;
  double mean_seconds = 0.0;
  double median_seconds = 0.0;
  double std_seconds = 0.0;
};

struct UsageReport {
  UsageBucket overall;
  std::size_t outliers = 0;  // graded but slower than the cap; excluded above
  std::map<std::size_t, UsageBucket> by_length;
};

nlohmann::json to_json(const UsageReport& r);

using Clock = std::function<double()>;  // seconds
Clock system_clock();

class ChallengeStore {
 public:
  ChallengeStore(std::vector<PoolRecord> pool, double ttl_seconds, Clock clock = system_clock());

  // Throws out_of_challenges when nothing fresh is left.
  IssuedChallenge issue();
  // WAV bytes of an issued, unexpired challenge; unknown_challenge otherwise.
  std::vector<std::uint8_t> audio(const std::string& challenge_id);
  // Throws unknown_challenge, replay or expired.
  GradeResult grade(const std::string& challenge_id, const std::string& submitted);
  // Throws no_data when nothing has been graded.
  UsageReport usage_report(double outlier_cap_seconds) const;

  std::size_t remaining() const;
  std::size_t issued_count() const;
  // Adds pool records whose ids are not known yet; returns how many.
  std::size_t append(std::vector<PoolRecord> records);

 private:
  struct Challenge {
    std::string challenge_id;
    std::size_t pool_index = 0;
    double issued_at = 0.0;
    double expires_at = 0.0;
    ChallengeState state = ChallengeState::issued;
    std::size_t words = 0;
    std::optional<GradeResult> result;
  };

  std::string new_id();

  mutable std::mutex mu_;
  std::vector<PoolRecord> pool_;
  std::deque<std::size_t> fresh_;
  std::unordered_map<std::string, std::size_t> known_pool_ids_;
  std::unordered_map<std::string, Challenge> challenges_;
  std::vector<std::string> graded_;
  double ttl_;
  Clock clock_;
};

// HTTP front end: GET /api/challenge, GET /api/audio/{id}, POST /api/answer,
// GET /api/stats.
class CaptchaServer {
 public:
  CaptchaServer(ChallengeStore& store, ServiceConfig config);
  ~CaptchaServer();

  // Binds the configured address; port 0 picks a free port. Throws io_error.
  int bind();
  // Blocks until stop().
  void listen();
  void stop();
  int port() const { return port_; }

 private:
  void routes();
  bool allow(const std::string& client);

  ChallengeStore& store_;
  ServiceConfig config_;
  std::unique_ptr<httplib::Server> server_;
  int port_ = 0;
  std::mutex rate_mu_;
  std::unordered_map<std::string, std::deque<double>> hits_;
};

}  // namespace advcaptcha
