#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <json.hpp>

#include "advcaptcha/attack.hpp"
#include "advcaptcha/error.hpp"
#include "advcaptcha/harness.hpp"
#include "advcaptcha/metrics.hpp"
#include "advcaptcha/service.hpp"
#include "advcaptcha/synth.hpp"
#include "advcaptcha/train.hpp"
#include "advcaptcha/transforms.hpp"
#include "advcaptcha/version.hpp"

namespace fs = std::filesystem;
using namespace advcaptcha;
using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string key_of(const CLI::Option* opt) {
  std::string name = opt->get_single_name();
  std::replace(name.begin(), name.end(), '-', '_');
  return name;
}

bool is_meta(const CLI::Option* opt) {
  const auto name = opt->get_single_name();
  return name == "help" || name == "version" || name == "config" || name.empty();
}

// Every option reads ADVCAPTCHA_<KEY> from the environment.
void add_env_names(CLI::App* app) {
  for (auto* opt : app->get_options()) {
    if (is_meta(opt) || opt->get_positional()) continue;
    auto key = key_of(opt);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::toupper(c); });
    opt->envname("ADVCAPTCHA_" + key);
  }
}

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

// Fills options that were given neither on the command line nor through the
// environment from a JSON object; nested objects are flattened one level.
void apply_config(CLI::App* app, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, path + ": " + e.what());
  }
  if (!j.is_object()) throw Error(Errc::invalid_argument, path + ": expected a JSON object");
  json flat = json::object();
  for (auto& [k, v] : j.items()) {
    if (v.is_object())
      for (auto& [k2, v2] : v.items()) flat[k2] = v2;
    else
      flat[k] = v;
  }
  for (auto* opt : app->get_options()) {
    if (is_meta(opt) || opt->count() > 0) continue;
    auto it = flat.find(key_of(opt));
    if (it == flat.end()) continue;
    if (it->is_array())
      for (const auto& v : *it) opt->add_result(scalar_text(v));
    else
      opt->add_result(scalar_text(*it));
    opt->run_callback();
  }
}

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  return out;
}

Range parse_range(const std::string& text) {
  Range r;
  char c1 = 0, c2 = 0;
  std::istringstream ss(text);
  if (!(ss >> r.start >> c1 >> r.stop >> c2 >> r.step) || c1 != ':' || c2 != ':' || !ss.eof())
    throw Error(Errc::invalid_argument, "range must look like start:stop:step, got '" + text + "'");
  r.values();
  return r;
}

std::vector<TransformSpec> collect_transforms(const std::vector<std::string>& items) {
  std::vector<TransformSpec> out;
  for (const auto& item : items)
    for (auto& t : parse_transform_list(item)) out.push_back(std::move(t));
  return out;
}

json summary_json(const EvalReport& r) { return to_json(r); }

EvalReport pool_report(const std::vector<PoolEntry>& entries) {
  std::vector<ScoredSample> scored;
  for (const auto& e : entries) {
    ScoredSample s;
    s.id = e.id;
    s.reference = Transcription(e.transcription);
    s.hypothesis = Transcription(e.hypothesis);
    s.errors = wer(s.reference, s.hypothesis);
    s.snr_db = e.snr_db;
    s.l1 = e.l1;
    s.duration_seconds = e.duration_seconds;
    scored.push_back(std::move(s));
  }
  return summarize(scored);
}

struct TrainFlags {
  TrainConfig config;
  ModelShape shape;

  void add(CLI::App* cmd) {
    cmd->add_option("--epochs", config.epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--batch-size", config.batch_size, "Minibatch size")->capture_default_str();
    cmd->add_option("--learning-rate", config.learning_rate, "SGD step size")->capture_default_str();
    cmd->add_option("--momentum", config.momentum, "SGD momentum")->capture_default_str();
    cmd->add_option("--clip-norm", config.clip_norm, "Gradient norm clip")->capture_default_str();
    cmd->add_option("--validation-fraction", config.validation_fraction, "Held-out share for checkpoint selection")
        ->capture_default_str();
    cmd->add_option("--noise-stddev", config.noise_stddev, "Max stddev of augmentation noise")->capture_default_str();
    cmd->add_option("--gain-jitter", config.gain_jitter, "Augmentation gain range")->capture_default_str();
    cmd->add_option("--speed-jitter", config.speed_jitter, "Augmentation speed range")->capture_default_str();
    cmd->add_option("--weight-decay", config.weight_decay, "L2 weight decay")->capture_default_str();
    cmd->add_option("--augment-transforms", config.augment_transforms, "Augmentation transforms");
    cmd->add_option("--transform-probability", config.transform_probability, "Chance of applying one of them")
        ->capture_default_str();
    cmd->add_option("--context", shape.context, "Context frames on each side")->capture_default_str();
    cmd->add_option("--dense-width", shape.dense_width, "Dense layer width")->capture_default_str();
    cmd->add_option("--recurrent-width", shape.recurrent_width, "Recurrent layer width")->capture_default_str();
  }
};

struct AttackFlags {
  AttackConfig config;

  void add(CLI::App* cmd) {
    cmd->add_option("--epsilon", config.epsilon, "Max-norm budget in sample units")->capture_default_str();
    cmd->add_option("--steps", config.steps, "PGD iterations")->capture_default_str();
    cmd->add_option("--alpha", config.alpha, "PGD step size")->capture_default_str();
    cmd->add_option("--c1", config.c1, "Weight of the CTC term")->capture_default_str();
    cmd->add_option("--c2", config.c2, "Weight of the perturbation norm")->capture_default_str();
  }
};

EpochCallback progress_printer() {
  return [](const EpochStats& e) {
    std::cerr << "epoch " << e.epoch << " train_loss " << e.train_loss << " validation_loss " << e.validation_loss
              << '\n';
  };
}

std::atomic<CaptchaServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial audio CAPTCHA toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  std::string config_path;

  auto common = [&](CLI::App* cmd) {
    cmd->set_version_flag("--version", kVersion);
    cmd->add_option("--seed", seed, "Seed for every stochastic component")->capture_default_str();
    cmd->add_option("--config", config_path, "JSON file with defaults for any flag");
  };

  // synth-corpus
  auto* synth = app.add_subcommand("synth-corpus", "Create or render a synthetic desk corpus");
  std::string synth_manifest, synth_out, synth_prefix = "utt-";
  int synth_generate = 0, synth_min_words = 6, synth_max_words = 8;
  synth->add_option("--manifest", synth_manifest, "Manifest to render (or to write with --generate)")->required();
  synth->add_option("--out", synth_out, "Output directory for rendered audio");
  synth->add_option("--generate", synth_generate, "Write a new manifest with this many utterances instead");
  synth->add_option("--prefix", synth_prefix, "Id prefix for --generate")->capture_default_str();
  synth->add_option("--min-words", synth_min_words)->capture_default_str();
  synth->add_option("--max-words", synth_max_words)->capture_default_str();
  common(synth);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the acoustic model");
  std::string train_manifest, train_out, train_eval;
  TrainFlags train_flags;
  train_cmd->add_option("--manifest", train_manifest, "Training manifest")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--eval", train_eval, "Optional held-out manifest to score");
  train_flags.add(train_cmd);
  common(train_cmd);

  // generate
  auto* gen = app.add_subcommand("generate", "Pregenerate an adversarial challenge pool");
  std::string gen_model, gen_manifest, gen_out, gen_method = "pgd", gen_bpda;
  std::size_t gen_n = 0;
  bool gen_no_check = false;
  AttackFlags gen_attack;
  gen->add_option("--model", gen_model, "Target checkpoint")->required();
  gen->add_option("--manifest", gen_manifest, "Source utterances")->required();
  gen->add_option("--n", gen_n, "Number of challenges")->required();
  gen->add_option("--out", gen_out, "Pool directory")->required();
  gen->add_option("--method", gen_method, "pgd or fgsm")->capture_default_str();
  gen->add_option("--bpda", gen_bpda, "Transform for BPDA-hardened PGD, e.g. quantize:q=1024");
  gen->add_flag("--no-self-check", gen_no_check, "Keep examples the target still transcribes correctly");
  gen_attack.add(gen);
  common(gen);

  // sweep
  auto* sw = app.add_subcommand("sweep", "PGD hyperparameter sweep");
  std::string sw_model, sw_manifest, sw_out, sw_steps = "10:50:10", sw_alphas = "20:100:10";
  std::vector<double> sw_eps{250, 300, 350, 400};
  std::size_t sw_limit = 0;
  sw->add_option("--model", sw_model, "Target checkpoint")->required();
  sw->add_option("--manifest", sw_manifest, "Utterances to attack")->required();
  sw->add_option("--out", sw_out, "CSV report path")->required();
  sw->add_option("--epsilons", sw_eps, "Epsilon values")->delimiter(',')->capture_default_str();
  sw->add_option("--steps-range", sw_steps, "start:stop:step")->capture_default_str();
  sw->add_option("--alpha-range", sw_alphas, "start:stop:step")->capture_default_str();
  sw->add_option("--limit", sw_limit, "Use only the first N utterances");
  common(sw);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a pool under preprocessing attacks");
  std::string ev_pool, ev_model, ev_out, ev_records, ev_run, ev_stt;
  std::vector<std::string> ev_transforms, ev_transcribers;
  bool ev_network = false, ev_transfer = false;
  std::size_t ev_max_requests = 100;
  ev->add_option("--pool", ev_pool, "Pool directory");
  ev->add_option("--model", ev_model, "Generating model checkpoint (transcriber 'target')");
  ev->add_option("--transcriber", ev_transcribers, "Extra local model as name=checkpoint");
  ev->add_option("--stt-config", ev_stt, "JSON list of external STT endpoints");
  ev->add_option("--transforms", ev_transforms, "Transforms, e.g. quantize:q=1024");
  ev->add_option("--out", ev_out, "CSV matrix path");
  ev->add_option("--records", ev_records, "Per-sample JSONL path");
  ev->add_option("--run", ev_run, "Run definition file");
  ev->add_flag("--allow-network", ev_network, "Permit external STT requests");
  ev->add_option("--max-requests", ev_max_requests, "External STT request budget")->capture_default_str();
  ev->add_flag("--transfer", ev_transfer, "Report clean vs adversarial scores per transcriber instead");
  common(ev);

  // adv-train
  auto* at = app.add_subcommand("adv-train", "Adversarially train a model against a target");
  std::string at_model, at_manifest, at_out, at_method = "pgd";
  bool at_perturbed_only = false;
  TrainFlags at_train;
  AttackFlags at_attack;
  at->add_option("--model", at_model, "Target checkpoint used to perturb the corpus")->required();
  at->add_option("--manifest", at_manifest, "Training manifest")->required();
  at->add_option("--out", at_out, "Checkpoint path")->required();
  at->add_option("--method", at_method, "pgd or fgsm")->capture_default_str();
  at->add_flag("--perturbed-only", at_perturbed_only, "Train on perturbed copies only");
  at_train.add(at);
  at_attack.add(at);
  common(at);

  // serve
  auto* serve = app.add_subcommand("serve", "Serve challenges over HTTP");
  ServiceConfig svc;
  std::string svc_pool;
  serve->add_option("--pool-dir", svc_pool, "Pool directory")->required();
  serve->add_option("--bind-address", svc.bind_address, "Address to bind")->capture_default_str();
  serve->add_option("--port", svc.port, "Port (0 picks one)")->capture_default_str();
  serve->add_option("--ttl-seconds", svc.ttl_seconds, "Challenge lifetime")->capture_default_str();
  serve->add_option("--low-water", svc.low_water, "Warn when this few challenges remain")->capture_default_str();
  serve->add_option("--rate-limit-per-minute", svc.rate_limit_per_minute, "Per-client request limit, 0 = off")
      ->capture_default_str();
  serve->add_option("--stats-token", svc.stats_token, "Operator token for /api/stats");
  serve->add_option("--outlier-cap-seconds", svc.outlier_cap_seconds, "Completion times above this are excluded")
      ->capture_default_str();
  serve->add_option("--refill-interval-seconds", svc.refill_interval_seconds, "Rescan the pool, 0 = off")
      ->capture_default_str();
  common(serve);

  // report
  auto* rep = app.add_subcommand("report", "Summarize a pool's recorded metrics");
  std::string rep_pool, rep_out;
  rep->add_option("--pool", rep_pool, "Pool directory")->required();
  rep->add_option("--out", rep_out, "Optional CSV path");
  common(rep);

  for (auto* cmd : app.get_subcommands({})) add_env_names(cmd);

  try {
    app.parse(argc, argv);
    for (auto* cmd : app.get_subcommands()) apply_config(cmd, config_path);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    const auto t0 = std::chrono::steady_clock::now();

    if (synth->parsed()) {
      if (synth_generate > 0) {
        auto entries = make_desk_manifest(synth_generate, seed, synth_prefix, synth_min_words, synth_max_words);
        write_manifest(entries, synth_manifest);
        print_json({{"manifest", synth_manifest}, {"utterances", entries.size()}});
      } else {
        if (synth_out.empty()) throw Error(Errc::invalid_argument, "--out is required when rendering");
        auto out = render_corpus(synth_manifest, synth_out, seed);
        print_json({{"manifest", out.string()}, {"seconds", seconds_since(t0)}});
      }
    } else if (train_cmd->parsed()) {
      train_flags.config.seed = seed;
      auto corpus = load_manifest(train_manifest);
      TrainReport report;
      auto model = train(corpus, train_flags.config, train_flags.shape, {}, &report, progress_printer());
      save_checkpoint(model, train_out);
      json j{{"checkpoint", train_out},
             {"epochs", report.epochs.size()},
             {"best_epoch", report.best_epoch},
             {"initial_loss", report.initial_loss},
             {"best_validation_loss", report.best_validation_loss},
             {"train_exact", exact_match_rate(model, corpus)},
             {"seconds", seconds_since(t0)}};
      if (!train_eval.empty()) j["eval_exact"] = exact_match_rate(model, load_manifest(train_eval));
      print_json(j);
    } else if (gen->parsed()) {
      auto model = load_checkpoint(gen_model);
      auto corpus = load_manifest(gen_manifest);
      const auto method = parse_attack_method(gen_method);
      gen_attack.config.validate();
      AttackFn attack;
      if (!gen_bpda.empty()) {
        if (method != AttackMethod::pgd) throw Error(Errc::invalid_argument, "--bpda applies to pgd only");
        auto spec = parse_transform(gen_bpda);
        attack = [&, spec](const LabeledSample& s) {
          return pgd_bpda(model, s, gen_attack.config, [spec](const AudioWaveform& w) { return apply_transform(spec, w); });
        };
      } else if (method == AttackMethod::fgsm) {
        attack = [&](const LabeledSample& s) { return fgsm(model, s, gen_attack.config.epsilon); };
      }
      auto summary = generate_pool(model, corpus, gen_n, gen_attack.config, gen_out, attack, !gen_no_check);
      for (const auto& x : summary.excluded) std::cerr << "excluded " << x << '\n';
      json j{{"pool", gen_out},
             {"requested", summary.requested},
             {"written", summary.written},
             {"excluded", summary.excluded.size()},
             {"seconds", summary.seconds}};
      auto entries = read_pool(gen_out);
      if (!entries.empty()) j["report"] = summary_json(pool_report(entries));
      print_json(j);
      if (summary.written < summary.requested) std::cerr << "warning: pool smaller than requested\n";
    } else if (sw->parsed()) {
      auto model = load_checkpoint(sw_model);
      auto corpus = load_manifest(sw_manifest);
      if (sw_limit > 0 && sw_limit < corpus.size()) corpus.resize(sw_limit);
      SweepGrid grid{sw_eps, parse_range(sw_steps), parse_range(sw_alphas)};
      auto rows = sweep(model, corpus, grid, [](const SweepRow& r) {
        std::cerr << "epsilon " << r.config.epsilon << " steps " << r.config.steps << " alpha " << r.config.alpha
                  << (r.report ? "" : " failed: " + r.error) << '\n';
      });
      auto out = open_out(sw_out);
      write_sweep_csv(out, rows);
      print_json({{"rows", rows.size()}, {"out", sw_out}, {"seconds", seconds_since(t0)}});
    } else if (ev->parsed()) {
      SttPolicy policy{ev_network, ev_max_requests};
      std::vector<std::unique_ptr<Transcriber>> owned;
      std::vector<TransformSpec> transforms = collect_transforms(ev_transforms);
      fs::path pool_dir = ev_pool, out_path = ev_out, records_path = ev_records;
      if (!ev_run.empty()) {
        auto run = load_robustness_run(ev_run);
        if (pool_dir.empty()) pool_dir = run.pool;
        if (out_path.empty()) out_path = run.output;
        if (records_path.empty()) records_path = run.records;
        if (transforms.empty()) transforms = run.transforms;
        policy.allow_network = policy.allow_network || run.stt.allow_network;
        for (auto& t : make_transcribers(run.transcribers, policy, fs::path(ev_run).parent_path()))
          owned.push_back(std::move(t));
      }
      if (pool_dir.empty()) throw Error(Errc::invalid_argument, "--pool or --run is required");
      if (!ev_model.empty()) owned.insert(owned.begin(), std::make_unique<LocalModelTranscriber>("target", load_checkpoint(ev_model)));
      for (const auto& spec : ev_transcribers) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw Error(Errc::invalid_argument, "--transcriber expects name=checkpoint");
        owned.push_back(std::make_unique<LocalModelTranscriber>(spec.substr(0, eq), load_checkpoint(spec.substr(eq + 1))));
      }
      if (!ev_stt.empty()) {
        std::ifstream in(ev_stt);
        if (!in) throw Error(Errc::missing_file, "cannot open " + ev_stt);
        json j;
        try {
          in >> j;
        } catch (const json::exception& e) {
          throw Error(Errc::invalid_argument, ev_stt + ": " + e.what());
        }
        for (auto& s : j) s["kind"] = "external-stt";
        for (auto& t : make_transcribers(j, policy)) owned.push_back(std::move(t));
      }
      if (owned.empty()) throw Error(Errc::invalid_argument, "no transcribers; pass --model, --transcriber or --run");
      std::vector<Transcriber*> ts;
      for (auto& t : owned) ts.push_back(t.get());
      auto pool = load_pool(pool_dir);

      if (ev_transfer) {
        auto results = transferability_eval(pool, ts, ts.front()->name());
        std::ostringstream csv;
        csv << "transcriber,audio";
        for (const auto& c : report_columns()) csv << ',' << c;
        csv << '\n';
        for (const auto& r : results)
          for (const auto& [label, report] : {std::pair{"clean", r.clean}, std::pair{"adversarial", r.adversarial}}) {
            csv << r.transcriber << ',' << label;
            for (const auto& v : report_values(report)) csv << ',' << v;
            csv << '\n';
          }
        if (!out_path.empty()) open_out(out_path) << csv.str();
        std::cout << csv.str();
      } else {
        auto cells = evaluate(pool, transforms, ts);
        std::ostringstream csv;
        write_matrix_csv(csv, cells);
        if (!out_path.empty()) open_out(out_path) << csv.str();
        if (!records_path.empty()) {
          auto out = open_out(records_path);
          write_matrix_records(out, cells);
        }
        std::cout << csv.str();
      }
    } else if (at->parsed()) {
      at_train.config.seed = seed;
      auto target = load_checkpoint(at_model);
      auto corpus = load_manifest(at_manifest);
      AdversarialTrainingOptions opts;
      opts.method = parse_attack_method(at_method);
      opts.include_clean = !at_perturbed_only;
      opts.shape = at_train.shape;
      TrainReport report;
      auto model = adversarial_train(target, corpus, at_attack.config, at_train.config, opts, &report, progress_printer());
      save_checkpoint(model, at_out);
      print_json({{"checkpoint", at_out},
                  {"best_epoch", report.best_epoch},
                  {"best_validation_loss", report.best_validation_loss},
                  {"seconds", seconds_since(t0)}});
    } else if (serve->parsed()) {
      svc.pool_dir = svc_pool;
      svc.validate();
      ChallengeStore store(read_pool_records(svc.pool_dir), svc.ttl_seconds);
      CaptchaServer server(store, svc);
      const int port = server.bind();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::atomic<bool> running{true};
      std::thread refill;
      if (svc.refill_interval_seconds > 0.0)
        refill = std::thread([&] {
          while (running) {
            std::this_thread::sleep_for(std::chrono::duration<double>(svc.refill_interval_seconds));
            try {
              if (auto n = store.append(read_pool_records(svc.pool_dir))) std::cerr << "pool refilled with " << n << '\n';
            } catch (const Error& e) {
              std::cerr << "refill failed: " << e.what() << '\n';
            }
          }
        });
      std::cerr << "serving " << store.remaining() << " challenges on " << svc.bind_address << ':' << port << '\n';
      server.listen();
      running = false;
      g_server = nullptr;
      if (refill.joinable()) refill.detach();
    } else if (rep->parsed()) {
      auto entries = read_pool(rep_pool);
      if (entries.empty()) throw Error(Errc::empty_input, "pool has no entries");
      auto report = pool_report(entries);
      if (!rep_out.empty()) {
        auto out = open_out(rep_out);
        std::vector<EvalReport> rows{report};
        write_report_csv(out, rows);
      }
      print_json(summary_json(report));
    }
  } catch (const Error& e) {
    std::cerr << "error (" << errc_name(e.code()) << "): " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
