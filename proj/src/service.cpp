#include "advcaptcha/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include "advcaptcha/attack.hpp"
#include "advcaptcha/error.hpp"
#include "advcaptcha/metrics.hpp"

// After the Eigen-based headers: <resolv.h> defines a `_res` macro.
#include <httplib.h>

namespace advcaptcha {

void ServiceConfig::validate() const {
  if (!(ttl_seconds > 0.0)) throw Error(Errc::invalid_argument, "ttl_seconds must be positive");
  if (port < 0 || port > 65535) throw Error(Errc::invalid_argument, "port must lie in [0, 65535]");
  if (bind_address.empty()) throw Error(Errc::invalid_argument, "bind_address must be explicit");
  if (rate_limit_per_minute < 0.0) throw Error(Errc::invalid_argument, "rate_limit_per_minute must be >= 0");
  if (!(outlier_cap_seconds > 0.0)) throw Error(Errc::invalid_argument, "outlier_cap_seconds must be positive");
  if (refill_interval_seconds < 0.0) throw Error(Errc::invalid_argument, "refill_interval_seconds must be >= 0");
}

namespace {

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return v && *v ? v : nullptr;
}

double env_number(const char* name, double fallback) {
  const char* v = env(name);
  if (!v) return fallback;
  char* end = nullptr;
  const double d = std::strtod(v, &end);
  if (*end != '\0') throw Error(Errc::invalid_argument, std::string(name) + " is not a number");
  return d;
}

}  // namespace

void apply_env_overrides(ServiceConfig& c) {
  if (const char* v = env("ADVCAPTCHA_POOL_DIR")) c.pool_dir = v;
  if (const char* v = env("ADVCAPTCHA_BIND_ADDRESS")) c.bind_address = v;
  if (const char* v = env("ADVCAPTCHA_STATS_TOKEN")) c.stats_token = v;
  c.low_water = static_cast<std::size_t>(env_number("ADVCAPTCHA_LOW_WATER", static_cast<double>(c.low_water)));
  c.ttl_seconds = env_number("ADVCAPTCHA_TTL_SECONDS", c.ttl_seconds);
  c.port = static_cast<int>(env_number("ADVCAPTCHA_PORT", c.port));
  c.rate_limit_per_minute = env_number("ADVCAPTCHA_RATE_LIMIT_PER_MINUTE", c.rate_limit_per_minute);
  c.outlier_cap_seconds = env_number("ADVCAPTCHA_OUTLIER_CAP_SECONDS", c.outlier_cap_seconds);
  c.refill_interval_seconds = env_number("ADVCAPTCHA_REFILL_INTERVAL_SECONDS", c.refill_interval_seconds);
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open service config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  ServiceConfig c;
  try {
    if (j.contains("pool_dir")) {
      std::filesystem::path p = j["pool_dir"].get<std::string>();
      c.pool_dir = p.is_absolute() ? p : path.parent_path() / p;
    }
    c.low_water = j.value("low_water", c.low_water);
    c.ttl_seconds = j.value("ttl_seconds", c.ttl_seconds);
    c.bind_address = j.value("bind_address", c.bind_address);
    c.port = j.value("port", c.port);
    c.rate_limit_per_minute = j.value("rate_limit_per_minute", c.rate_limit_per_minute);
    c.stats_token = j.value("stats_token", c.stats_token);
    c.outlier_cap_seconds = j.value("outlier_cap_seconds", c.outlier_cap_seconds);
    c.refill_interval_seconds = j.value("refill_interval_seconds", c.refill_interval_seconds);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
  }
  apply_env_overrides(c);
  c.validate();
  return c;
}

const char* state_name(ChallengeState s) {
  switch (s) {
    case ChallengeState::fresh: return "fresh";
    case ChallengeState::issued: return "issued";
    case ChallengeState::solved: return "solved";
    case ChallengeState::failed: return "failed";
    case ChallengeState::expired: return "expired";
  }
  return "?";
}

std::vector<PoolRecord> read_pool_records(const std::filesystem::path& pool_dir) {
  std::vector<PoolRecord> out;
  for (const auto& e : read_pool(pool_dir)) out.push_back({e.id, pool_dir / e.audio, Transcription(e.transcription)});
  return out;
}

nlohmann::json to_json(const UsageReport& r) {
  auto bucket = [](const UsageBucket& b) {
    return nlohmann::json{{"total", b.total},
                          {"solved", b.solved},
                          {"success_rate", b.success_rate},
                          {"average_time", b.mean_seconds},
                          {"median_time", b.median_seconds},
                          {"std_time", b.std_seconds}};
  };
  auto j = bucket(r.overall);
  j["outliers_excluded"] = r.outliers;
  nlohmann::json by = nlohmann::json::object();
  for (const auto& [words, b] : r.by_length) by[std::to_string(words)] = bucket(b);
  j["by_length"] = by;
  return j;
}

Clock system_clock() {
  return [] {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
  };
}

ChallengeStore::ChallengeStore(std::vector<PoolRecord> pool, double ttl_seconds, Clock clock)
    : ttl_(ttl_seconds), clock_(std::move(clock)) {
  if (!(ttl_seconds > 0.0)) throw Error(Errc::invalid_argument, "ttl must be positive");
  if (!clock_) throw Error(Errc::invalid_argument, "clock is required");
  append(std::move(pool));
}

std::size_t ChallengeStore::append(std::vector<PoolRecord> records) {
  std::lock_guard lock(mu_);
  std::size_t added = 0;
  for (auto& r : records) {
    if (known_pool_ids_.count(r.pool_id)) continue;
    if (r.ground_truth.empty()) throw Error(Errc::empty_transcription, "pool item " + r.pool_id + " has no transcription");
    known_pool_ids_[r.pool_id] = pool_.size();
    fresh_.push_back(pool_.size());
    pool_.push_back(std::move(r));
    ++added;
  }
  return added;
}

std::string ChallengeStore::new_id() {
  static thread_local std::random_device rd;
  static const char* hex = "0123456789abcdef";
  std::string id;
  for (int i = 0; i < 4; ++i) {
    std::uint32_t v = rd();
    for (int k = 0; k < 8; ++k, v >>= 4) id += hex[v & 0xf];
  }
  return id;
}

IssuedChallenge ChallengeStore::issue() {
  std::lock_guard lock(mu_);
  if (fresh_.empty()) throw Error(Errc::out_of_challenges, "challenge pool is exhausted");
  Challenge c;
  do c.challenge_id = new_id();
  while (challenges_.count(c.challenge_id));
  c.pool_index = fresh_.front();
  fresh_.pop_front();
  c.issued_at = clock_();
  c.expires_at = c.issued_at + ttl_;
  c.words = pool_[c.pool_index].ground_truth.words().size();
  IssuedChallenge out{c.challenge_id, "/api/audio/" + c.challenge_id};
  challenges_.emplace(c.challenge_id, std::move(c));
  return out;
}

std::vector<std::uint8_t> ChallengeStore::audio(const std::string& id) {
  std::filesystem::path path;
  {
    std::lock_guard lock(mu_);
    auto it = challenges_.find(id);
    if (it == challenges_.end()) throw Error(Errc::unknown_challenge, "unknown challenge");
    auto& c = it->second;
    if (c.state == ChallengeState::issued && clock_() > c.expires_at) c.state = ChallengeState::expired;
    if (c.state == ChallengeState::expired) throw Error(Errc::expired, "challenge expired");
    if (c.state != ChallengeState::issued) throw Error(Errc::replay, "challenge already answered");
    path = pool_[c.pool_index].audio;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "pool audio is missing");
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

GradeResult ChallengeStore::grade(const std::string& id, const std::string& submitted) {
  std::lock_guard lock(mu_);
  auto it = challenges_.find(id);
  if (it == challenges_.end()) throw Error(Errc::unknown_challenge, "unknown challenge");
  auto& c = it->second;
  if (c.state == ChallengeState::solved || c.state == ChallengeState::failed)
    throw Error(Errc::replay, "challenge already answered");
  const double now = clock_();
  if (c.state == ChallengeState::expired || now > c.expires_at) {
    c.state = ChallengeState::expired;
    throw Error(Errc::expired, "challenge expired");
  }
  GradeResult r;
  r.wer = wer(pool_[c.pool_index].ground_truth, Transcription(submitted)).wer;
  r.pass = r.wer == 0.0;
  r.completion_seconds = now - c.issued_at;
  c.state = r.pass ? ChallengeState::solved : ChallengeState::failed;
  c.result = r;
  graded_.push_back(id);
  return r;
}

namespace {

UsageBucket make_bucket(const std::vector<std::pair<bool, double>>& rows) {
  UsageBucket b;
  b.total = rows.size();
  if (rows.empty()) return b;
  std::vector<double> times;
  for (const auto& [pass, t] : rows) {
    b.solved += pass ? 1 : 0;
    times.push_back(t);
  }
  const double n = static_cast<double>(rows.size());
  b.success_rate = static_cast<double>(b.solved) / n;
  double sum = 0.0;
  for (double t : times) sum += t;
  b.mean_seconds = sum / n;
  double var = 0.0;
  for (double t : times) var += (t - b.mean_seconds) * (t - b.mean_seconds);
  b.std_seconds = std::sqrt(var / n);
  std::sort(times.begin(), times.end());
  const auto mid = times.size() / 2;
  b.median_seconds = times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  return b;
}

}  // namespace

UsageReport ChallengeStore::usage_report(double cap) const {
  std::lock_guard lock(mu_);
  if (graded_.empty()) throw Error(Errc::no_data, "no graded challenges yet");
  UsageReport r;
  std::vector<std::pair<bool, double>> all;
  std::map<std::size_t, std::vector<std::pair<bool, double>>> by;
  for (const auto& id : graded_) {
    const auto& c = challenges_.at(id);
    if (c.result->completion_seconds > cap) {
      ++r.outliers;
      continue;
    }
    all.emplace_back(c.result->pass, c.result->completion_seconds);
    by[c.words].emplace_back(c.result->pass, c.result->completion_seconds);
  }
  r.overall = make_bucket(all);
  for (const auto& [words, rows] : by) r.by_length[words] = make_bucket(rows);
  return r;
}

std::size_t ChallengeStore::remaining() const {
  std::lock_guard lock(mu_);
  return fresh_.size();
}

std::size_t ChallengeStore::issued_count() const {
  std::lock_guard lock(mu_);
  return challenges_.size();
}

CaptchaServer::CaptchaServer(ChallengeStore& store, ServiceConfig config)
    : store_(store), config_(std::move(config)), server_(std::make_unique<httplib::Server>()) {
  config_.validate();
  // httplib's default adds SO_REUSEPORT, which lets a second server share a
  // port that is already in use.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  routes();
}

CaptchaServer::~CaptchaServer() { stop(); }

bool CaptchaServer::allow(const std::string& client) {
  if (config_.rate_limit_per_minute <= 0.0) return true;
  const double now = system_clock()();
  std::lock_guard lock(rate_mu_);
  auto& q = hits_[client];
  while (!q.empty() && q.front() <= now - 60.0) q.pop_front();
  if (static_cast<double>(q.size()) >= config_.rate_limit_per_minute) return false;
  q.push_back(now);
  return true;
}

namespace {

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", std::string(code)}, {"message", message}}.dump(), "application/json");
}

int status_for(Errc code) {
  switch (code) {
    case Errc::unknown_challenge: return 404;
    case Errc::replay: return 409;
    case Errc::expired: return 410;
    case Errc::out_of_challenges: return 503;
    case Errc::no_data: return 404;
    default: return 500;
  }
}

}  // namespace

void CaptchaServer::routes() {
  auto& srv = *server_;
  srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (!allow(req.remote_addr)) {
      send_error(res, 429, "rate_limited", "too many requests");
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  srv.Get("/api/challenge", [this](const httplib::Request&, httplib::Response& res) {
    try {
      auto c = store_.issue();
      if (store_.remaining() <= config_.low_water)
        std::cerr << "warning: challenge pool low (" << store_.remaining() << " left)\n";
      res.set_content(nlohmann::json{{"challenge_id", c.challenge_id}, {"audio_url", c.audio_url}}.dump(),
                      "application/json");
    } catch (const Error& e) {
      if (e.code() == Errc::out_of_challenges) std::cerr << "warning: challenge pool exhausted\n";
      send_error(res, status_for(e.code()), errc_name(e.code()), e.what());
    }
  });

  srv.Get(R"(/api/audio/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      auto bytes = store_.audio(req.matches[1]);
      res.set_content(std::string(bytes.begin(), bytes.end()), "audio/wav");
    } catch (const Error& e) {
      if (e.code() == Errc::io_error)
        send_error(res, 500, errc_name(e.code()), e.what());
      else
        send_error(res, 404, errc_name(e.code()), e.what());
    }
  });

  srv.Post("/api/answer", [this](const httplib::Request& req, httplib::Response& res) {
    std::string id, text;
    try {
      auto j = nlohmann::json::parse(req.body);
      id = j.at("challenge_id").get<std::string>();
      text = j.at("transcription").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "bad_request", "expected {challenge_id, transcription}");
      return;
    }
    try {
      auto g = store_.grade(id, text);
      res.set_content(
          nlohmann::json{{"pass", g.pass}, {"wer", g.wer}, {"completion_seconds", g.completion_seconds}}.dump(),
          "application/json");
    } catch (const Error& e) {
      send_error(res, status_for(e.code()), errc_name(e.code()), e.what());
    }
  });

  srv.Get("/api/stats", [this](const httplib::Request& req, httplib::Response& res) {
    const auto auth = req.get_header_value("Authorization");
    if (config_.stats_token.empty() || auth != "Bearer " + config_.stats_token) {
      send_error(res, 403, "forbidden", "operator token required");
      return;
    }
    try {
      auto j = to_json(store_.usage_report(config_.outlier_cap_seconds));
      j["remaining"] = store_.remaining();
      j["issued"] = store_.issued_count();
      res.set_content(j.dump(), "application/json");
    } catch (const Error& e) {
      send_error(res, status_for(e.code()), errc_name(e.code()), e.what());
    }
  });
}

int CaptchaServer::bind() {
  if (config_.port == 0) {
    port_ = server_->bind_to_any_port(config_.bind_address);
    if (port_ < 0) throw Error(Errc::io_error, "cannot bind " + config_.bind_address);
  } else {
    if (!server_->bind_to_port(config_.bind_address, config_.port))
      throw Error(Errc::io_error, "cannot bind " + config_.bind_address + ":" + std::to_string(config_.port));
    port_ = config_.port;
  }
  return port_;
}

void CaptchaServer::listen() { server_->listen_after_bind(); }

void CaptchaServer::stop() {
  if (server_) server_->stop();
}

}  // namespace advcaptcha
