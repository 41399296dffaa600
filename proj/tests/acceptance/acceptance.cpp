// Acceptance suite: one PASS/FAIL line per criterion A1-A12.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "advcaptcha/attack.hpp"
#include "advcaptcha/error.hpp"
#include "advcaptcha/harness.hpp"
#include "advcaptcha/metrics.hpp"
#include "advcaptcha/service.hpp"
#include "advcaptcha/synth.hpp"
#include "advcaptcha/train.hpp"
#include "advcaptcha/transforms.hpp"
#include "oracles.hpp"

#include <httplib.h>

using namespace advcaptcha;
namespace fs = std::filesystem;

namespace {

using Wall = std::chrono::steady_clock;

struct Outcome {
  std::string id;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<Outcome> g_outcomes;
std::vector<EvalReport> g_reports;  // every report produced, for A10

void record(const std::string& id, bool pass, const std::string& detail, Wall::time_point t0) {
  Outcome o{id, pass, detail, std::chrono::duration<double>(Wall::now() - t0).count()};
  std::printf("%-4s %s  %s  (%.1f s)\n", o.id.c_str(), pass ? "PASS" : "FAIL", detail.c_str(), o.seconds);
  std::fflush(stdout);
  g_outcomes.push_back(std::move(o));
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& s) {
  std::printf("     %s\n", s.c_str());
  std::fflush(stdout);
}

std::vector<double> gaussian(std::size_t n, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

// ---------------------------------------------------------------- A1

void a1_gradients() {
  const auto t0 = Wall::now();
  std::mt19937_64 rng(101);
  MfccConfig mc;
  mc.frame_length = 128;
  mc.hop_length = 64;
  mc.num_mel_filters = 16;
  mc.num_coefficients = 10;
  Mfcc mfcc(mc);
  oracle::GradCheck feat, ctc, e2e;
  const int instances = 20;
  for (int k = 0; k < instances; ++k) {
    auto x = gaussian(128 + 64 * (3 + k % 4), 1500.0, rng);
    MfccTrace trace;
    auto f0 = mfcc.forward(x, &trace);
    FeatureMatrix w = FeatureMatrix::Random(f0.rows(), f0.cols());
    auto g = mfcc.backward(x, trace, w);
    auto f = [&](std::vector<double>& v) { return (mfcc.forward(v).array() * w.array()).sum(); };
    auto coords = oracle::sample_coords(x.size(), 30, rng);
    feat.merge(oracle::check_gradient(f, x, g, coords, 1e-2, 1e-4, 1e-9));

    const int frames = 6 + k % 5;
    Logits logits(frames, Alphabet::kSize);
    auto flat = gaussian(static_cast<std::size_t>(logits.size()), 1.0, rng);
    std::copy(flat.begin(), flat.end(), logits.data());
    std::vector<int> labels;
    std::uniform_int_distribution<int> sym(1, Alphabet::kSize - 1);
    for (int i = 0; i < 1 + k % 3; ++i) labels.push_back(sym(rng));
    auto res = ctc_loss_and_grad(logits, labels);
    std::vector<double> cg(res.grad.data(), res.grad.data() + res.grad.size());
    auto fc = [&](std::vector<double>& v) { return ctc_loss(Eigen::Map<Logits>(v.data(), frames, Alphabet::kSize), labels); };
    auto ccoords = oracle::sample_coords(flat.size(), 30, rng);
    ctc.merge(oracle::check_gradient(fc, flat, cg, ccoords, 1e-5, 1e-4, 1e-9));

    auto model = AcousticModel::random(mc, {1, 12, 10, 20.0}, 200 + k);
    auto xs = gaussian(128 + 64 * 8, 1500.0, rng);
    std::vector<int> lab{3 + k % 20, 4 + k % 20};
    auto lg = waveform_loss_grad(model, xs, lab);
    auto fe = [&](std::vector<double>& v) { return waveform_loss(model, v, lab); };
    auto ecoords = oracle::sample_coords(xs.size(), 30, rng);
    e2e.merge(oracle::check_gradient(fe, xs, lg.grad, ecoords, 1e-2, 1e-3, 1e-9));
  }
  const bool pass = feat.pass_rate() >= 0.99 && ctc.pass_rate() >= 0.99 && e2e.pass_rate() >= 0.99;
  record("A1", pass,
         fmt("%d instances; mfcc %.4f, ctc %.4f, end-to-end %.4f of coordinates within tolerance", instances,
             feat.pass_rate(), ctc.pass_rate(), e2e.pass_rate()),
         t0);
}

// ---------------------------------------------------------------- A2

void a2_ctc_oracle() {
  const auto t0 = Wall::now();
  std::mt19937_64 rng(202);
  std::vector<std::vector<int>> label_sets{{}};
  for (int len = 1; len <= 3; ++len) {
    std::vector<int> l(len, 1);
    while (true) {
      label_sets.push_back(l);
      int i = 0;
      while (i < len && ++l[i] == 4) l[i++] = 1;
      if (i == len) break;
    }
  }
  std::size_t cases = 0, agree = 0, infeasible_ok = 0, infeasible = 0;
  double worst = 0.0;
  for (const auto& labels : label_sets) {
    for (int frames = 1; frames <= 6; ++frames) {
      Logits logits(frames, 4);
      auto flat = gaussian(static_cast<std::size_t>(logits.size()), 2.0, rng);
      std::copy(flat.begin(), flat.end(), logits.data());
      if (frames < ctc_min_frames(labels)) {
        ++infeasible;
        try {
          ctc_loss(logits, labels);
        } catch (const Error& e) {
          infeasible_ok += e.code() == Errc::infeasible_alignment;
        }
        continue;
      }
      const double diff = std::abs(ctc_loss(logits, labels) - oracle::brute_ctc_loss(logits, labels));
      worst = std::max(worst, diff);
      ++cases;
      agree += diff <= 1e-10;
    }
  }
  record("A2", agree == cases && infeasible_ok == infeasible,
         fmt("%zu label/frame cases match enumeration (max diff %.2e); %zu/%zu infeasible rejected", agree, worst,
             infeasible_ok, infeasible),
         t0);
}

// ---------------------------------------------------------------- A3

void a3_wer_oracle() {
  const auto t0 = Wall::now();
  std::mt19937_64 rng(303);
  const std::vector<std::string> vocab{"go", "up", "red", "fox", "sun", "day"};
  std::uniform_int_distribution<int> len(0, 8), pick(0, static_cast<int>(vocab.size()) - 1);
  int match = 0, identity = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    std::vector<std::string> r(static_cast<std::size_t>(std::max(1, len(rng)))), h(static_cast<std::size_t>(len(rng)));
    for (auto& w : r) w = vocab[pick(rng)];
    for (auto& w : h) w = vocab[pick(rng)];
    match += word_errors(r, h).edits() == oracle::brute_word_edits(r, h);
    identity += word_errors(r, r).wer == 0.0;
  }
  record("A3", match == n && identity == n, fmt("%d/%d edit counts exact, wer(x,x)=0 on %d/%d", match, n, identity, n),
         t0);
}

// ---------------------------------------------------------------- A10

void a10_metrics() {
  const auto t0 = Wall::now();
  std::vector<double> x{1.0, -2.0, 3.0, -4.0};
  std::vector<double> d{0.1, -0.2, 0.3, -0.4};
  const double self = snr_db(x, x);
  const double twenty = snr_db(x, d);
  auto over = wer(Transcription("yes"), Transcription("no no no"));
  bool complementary = true;
  double worst = 0.0;
  for (const auto& r : g_reports) {
    worst = std::max(worst, std::abs(r.sroa + r.aa - 1.0));
    complementary = complementary && std::abs(r.sroa + r.aa - 1.0) <= 1e-12;
  }
  const bool pass = self == 0.0 && std::abs(twenty - 20.0) <= 1e-9 && over.wer == 3.0 && complementary;
  record("A10", pass,
         fmt("sroa+aa=1 on %zu reports (max dev %.1e); snr(x,x)=%g; P_x=100 P_d -> %.12f dB; unclamped wer %.2f",
             g_reports.size(), worst, self, twenty, over.wer),
         t0);
}

// ---------------------------------------------------------------- A12

void a12_transforms() {
  const auto t0 = Wall::now();
  std::mt19937_64 rng(1212);
  auto x = AudioWaveform(gaussian(4000, 6000.0, rng), 16000);
  bool idem = true;
  for (int q : {128, 256, 512, 1024}) idem = idem && quantize(quantize(x, q), q) == quantize(x, q);

  AudioWaveform flat(std::vector<double>(4000, -1234.0), 16000);
  bool constant = true;
  for (int k : {3, 5, 7, 9})
    constant = constant && average_smooth(flat, k) == flat && median_smooth(flat, k) == flat;
  const bool k1 = average_smooth(x, 1) == x && median_smooth(x, 1) == x;

  AudioWaveform high(oracle::tone(6000.0, 8000, 8000.0), 16000);
  auto y = low_pass(high, 1500.0);
  // Interior only: the first and last filter half-lengths see padding.
  auto mid = [](const AudioWaveform& w) { return w.view().subspan(200, w.size() - 400); };
  const double atten = -20.0 * std::log10(oracle::rms(mid(y)) / oracle::rms(mid(high)));

  bool downup = true;
  for (int rate : {5600, 6000, 7000, 8000}) downup = downup && downsample_upsample(flat, rate) == flat;

  record("A12", idem && constant && k1 && atten >= 40.0 && downup,
         fmt("quantize idempotent %d; smoothing keeps constants %d; k=1 identity %d; 6 kHz at 1.5 kHz cutoff -%.1f dB; "
             "down-up constants exact %d",
             idem, constant, k1, atten, downup),
         t0);
}

// ---------------------------------------------------------------- helpers for the model-based criteria

EvalReport report_on(AcousticModel& model, std::span<const PoolItem> pool, const TransformSpec& spec,
                     const std::string& name) {
  LocalModelTranscriber t(name, model);
  std::vector<Transcriber*> ts{&t};
  std::vector<TransformSpec> specs;
  if (spec.kind != TransformKind::none) specs.push_back(spec);
  auto cells = evaluate(pool, specs, ts);
  const auto& cell = cells.back();
  if (!cell.report) throw Error(Errc::provider_error, cell.error);
  g_reports.push_back(*cell.report);
  return *cell.report;
}

struct PoolCheck {
  std::size_t items = 0;
  std::size_t in_budget = 0;
  std::size_t in_range = 0;
};

PoolCheck check_pool(std::span<const PoolItem> pool, double eps) {
  PoolCheck c;
  c.items = pool.size();
  for (const auto& item : pool) {
    c.in_budget += linf_norm(item.delta) <= eps;
    c.in_range += std::all_of(item.adversarial.samples().begin(), item.adversarial.samples().end(),
                              [](double v) { return std::abs(v) <= kMaxAmplitude; });
  }
  return c;
}

std::vector<TransformSpec> preprocessing_suite() {
  return parse_transform_list(
      "quantize:q=128 quantize:q=256 quantize:q=512 quantize:q=1024 "
      "avg_smooth:k=3 avg_smooth:k=5 avg_smooth:k=7 avg_smooth:k=9 "
      "median_smooth:k=3 median_smooth:k=5 median_smooth:k=7 median_smooth:k=9 "
      "downsample:rate=5600 downsample:rate=6000 downsample:rate=7000 downsample:rate=8000 "
      "lowpass:cutoff=1500 lowpass:cutoff=3000 lowpass:cutoff=4500 lowpass:cutoff=6000 "
      "bandpass:low=100,high=2000 bandpass:low=300,high=3400 bandpass:low=100,high=6000 "
      "compress:codec=identity,bitrate=64");
}

// ---------------------------------------------------------------- A11

void a11_service(const fs::path& pool_dir) {
  const auto t0 = Wall::now();
  auto records = read_pool_records(pool_dir);
  std::set<std::string> truths;
  for (const auto& r : records) truths.insert(r.ground_truth.text());
  ChallengeStore store(records, 300.0);
  ServiceConfig cfg;
  cfg.pool_dir = pool_dir;
  cfg.port = 0;
  CaptchaServer server(store, cfg);
  const int port = server.bind();
  std::thread t([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);

  std::vector<std::string> problems;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  auto leaks = [&](const std::string& body) {
    for (const auto& s : truths)
      if (body.find(s) != std::string::npos) return true;
    return false;
  };
  auto keys = [](const nlohmann::json& j) {
    std::set<std::string> out;
    for (auto& [k, v] : j.items()) out.insert(k);
    return out;
  };
  const std::set<std::string> issue_schema{"challenge_id", "audio_url"};
  const std::set<std::string> grade_schema{"pass", "wer", "completion_seconds"};

  // The answer the client types is the transcription held server-side; the
  // script reads it from the pool records by matching served audio bytes.
  auto truth_for = [&](const std::string& wav) {
    for (const auto& r : records) {
      std::ifstream in(r.audio, std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(in)), {});
      if (bytes == wav) return r.ground_truth.text();
    }
    return std::string();
  };

  try {
    auto round = [&](bool correct) {
      auto c = cli.Get("/api/challenge");
      expect(c && c->status == 200, "issue status");
      auto j = nlohmann::json::parse(c->body);
      expect(keys(j) == issue_schema, "issue payload schema");
      expect(!leaks(c->body), "issue payload leaks ground truth");
      auto audio = cli.Get(j["audio_url"].get<std::string>());
      expect(audio && audio->status == 200 && audio->body.rfind("RIFF", 0) == 0, "audio fetch");
      std::string answer = truth_for(audio->body);
      expect(!answer.empty(), "served audio belongs to the pool");
      if (!correct) answer += " extra";
      const auto body = nlohmann::json{{"challenge_id", j["challenge_id"]}, {"transcription", answer}}.dump();
      auto g = cli.Post("/api/answer", body, "application/json");
      expect(g && g->status == 200, "grade status");
      auto gj = nlohmann::json::parse(g->body);
      expect(keys(gj) == grade_schema, "grade payload schema");
      expect(!leaks(g->body), "grade payload leaks ground truth");
      expect(gj["pass"] == correct, correct ? "correct answer passes" : "perturbed answer fails");
      if (correct) expect(gj["wer"] == 0.0, "correct answer has wer 0");
      auto replay = cli.Post("/api/answer", body, "application/json");
      expect(replay && replay->status == 409 && nlohmann::json::parse(replay->body)["error"] == "replay",
             "replayed grade rejected");
      expect(!leaks(replay->body), "replay payload leaks ground truth");
    };
    round(true);
    round(false);
  } catch (const std::exception& e) {
    problems.push_back(e.what());
  }
  server.stop();
  t.join();
  std::string detail = "issue -> audio -> grade; pass/fail/replay paths; schemas {challenge_id,audio_url} and "
                       "{pass,wer,completion_seconds}";
  for (const auto& p : problems) detail += "; FAILED: " + p;
  record("A11", problems.empty(), detail, t0);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  fs::path corpus_dir, config_path, work;
  fs::path model_path;
  app.add_option("--corpus", corpus_dir, "Directory holding train.tsv and eval.tsv")->required();
  app.add_option("--config", config_path, "Committed training config")->required();
  app.add_option("--work", work, "Scratch directory")->required();
  app.add_option("--model", model_path, "Use this checkpoint instead of training (A4 then only scores it)");
  CLI11_PARSE(app, argc, argv);

  const std::uint64_t render_seed = 7;
  const AttackConfig attack{350.0, 50, 40.0, 1.0, 0.0};

  try {
    a1_gradients();
    a2_ctc_oracle();
    a3_wer_oracle();
    a12_transforms();

    // A4: render the shipped manifests and train with the committed config.
    auto t0 = Wall::now();
    fs::create_directories(work);
    auto train_manifest = render_corpus(corpus_dir / "train.tsv", work / "corpus", render_seed);
    auto eval_manifest = render_corpus(corpus_dir / "eval.tsv", work / "corpus", render_seed);
    auto train_set = load_manifest(train_manifest);
    auto eval_set = load_manifest(eval_manifest);
    const auto config = load_train_config(config_path);
    TrainReport train_report;
    AcousticModel model = model_path.empty()
                              ? train(train_set, config, {}, {}, &train_report)
                              : load_checkpoint(model_path);
    save_checkpoint(model, work / "model.json");
    const double train_exact = exact_match_rate(model, train_set);
    const double eval_exact = exact_match_rate(model, eval_set);
    record("A4", train_exact >= 0.9,
           fmt("exact match %.3f on %zu training utterances (eval %.3f)%s", train_exact, train_set.size(), eval_exact,
               model_path.empty() ? "" : "; supplied checkpoint, not trained here"),
           t0);

    // A5: production PGD pool on the 50 held-out utterances.
    t0 = Wall::now();
    const auto pool_dir = work / "pool";
    fs::remove_all(pool_dir);
    auto summary = generate_pool(model, eval_set, eval_set.size(), attack, pool_dir, {}, false);
    auto pool = load_pool(pool_dir);
    auto base = report_on(model, pool, {}, "target");
    auto pc = check_pool(pool, attack.epsilon);
    record("A5",
           pool.size() == eval_set.size() && base.aa == 1.0 && pc.in_budget == pc.items && pc.in_range == pc.items,
           fmt("A_a %.3f on %zu/%zu examples; within eps %zu, within range %zu; mean SNR %.2f dB; %.2f s/example",
               base.aa, pool.size(), eval_set.size(), pc.in_budget, pc.in_range, base.snr_mean,
               summary.seconds / static_cast<double>(eval_set.size())),
           t0);

    // A6: FGSM across the epsilon ladder.
    t0 = Wall::now();
    {
      std::vector<double> aa, snr;
      for (double eps : {250.0, 300.0, 350.0, 400.0}) {
        std::vector<ScoredSample> scored;
        for (const auto& s : eval_set) scored.push_back(score_example(model, s, to_pcm(fgsm(model, s, eps), s.waveform)));
        auto r = summarize(scored);
        g_reports.push_back(r);
        aa.push_back(r.aa);
        snr.push_back(r.snr_mean);
      }
      bool aa_up = true, snr_down = true;
      for (std::size_t i = 1; i < aa.size(); ++i) {
        aa_up = aa_up && aa[i] >= aa[i - 1];
        snr_down = snr_down && snr[i] < snr[i - 1];
      }
      record("A6", aa_up && snr_down && aa.back() - aa.front() >= 0.0,
             fmt("A_a %.2f/%.2f/%.2f/%.2f and SNR %.2f/%.2f/%.2f/%.2f dB at eps 250/300/350/400", aa[0], aa[1], aa[2],
                 aa[3], snr[0], snr[1], snr[2], snr[3]),
             t0);
    }

    // A7: preprocessing attacks on the production pool.
    t0 = Wall::now();
    {
      double worst = 0.0;
      std::string worst_name;
      for (const auto& spec : preprocessing_suite()) {
        auto r = report_on(model, pool, spec, "target");
        // Context for the reader: how the same transform treats clean audio.
        std::size_t clean_ok = 0;
        for (const auto& item : pool)
          clean_ok += transcribe(model, apply_transform(spec, item.clean.waveform)) == item.clean.transcription;
        note(fmt("%-36s SRoA %.3f  WER %.3f  (clean exact %.3f)", spec.name().c_str(), r.sroa, r.wer_mean,
                 static_cast<double>(clean_ok) / static_cast<double>(pool.size())));
        if (r.sroa >= worst) worst = r.sroa, worst_name = spec.name();
      }
      record("A7", worst <= 0.10,
             fmt("max SRoA %.3f (%s) over %zu transforms", worst, worst_name.c_str(), preprocessing_suite().size()), t0);
    }

    // A8: BPDA through q=1024 against plain PGD under the same quantization.
    t0 = Wall::now();
    {
      const auto q = parse_transform("quantize:q=1024");
      const auto bpda_dir = work / "pool-bpda";
      fs::remove_all(bpda_dir);
      AttackFn bpda = [&](const LabeledSample& s) {
        return pgd_bpda(model, s, attack, [&](const AudioWaveform& w) { return apply_transform(q, w); });
      };
      generate_pool(model, eval_set, eval_set.size(), attack, bpda_dir, bpda, false);
      auto bpda_pool = load_pool(bpda_dir);
      auto plain_q = report_on(model, pool, q, "target");
      auto bpda_q = report_on(model, bpda_pool, q, "target");
      auto bpda_none = report_on(model, bpda_pool, {}, "target");
      record("A8", bpda_q.sroa < plain_q.sroa && bpda_q.l1_mean >= plain_q.l1_mean,
             fmt("under q=1024: SRoA BPDA %.3f vs plain %.3f; mean L1 BPDA %.4g vs plain %.4g "
                 "(BPDA pool unprocessed A_a %.3f)",
                 bpda_q.sroa, plain_q.sroa, bpda_q.l1_mean, plain_q.l1_mean, bpda_none.aa),
             t0);
    }

    // A9: PGD adversarial training, then regenerating the pool against it.
    t0 = Wall::now();
    {
      auto adv_model = adversarial_train(model, train_set, attack, config, {AttackMethod::pgd, true, model.shape()});
      save_checkpoint(adv_model, work / "model-adv.json");
      auto baseline = report_on(model, pool, {}, "target");
      auto hardened = report_on(adv_model, pool, {}, "adv-trained");
      const auto regen_dir = work / "pool-regen";
      fs::remove_all(regen_dir);
      LocalModelTranscriber adv_t("adv-trained", adv_model);
      std::vector<Transcriber*> ts{&adv_t};
      auto counter = counter_adversarial_training(adv_model, eval_set, attack, regen_dir, ts);
      const auto& regen = *counter.cells.at(0).report;
      g_reports.push_back(regen);
      record("A9", hardened.sroa > baseline.sroa && regen.sroa == 0.0,
             fmt("original pool SRoA: adv-trained %.3f vs baseline %.3f; regenerated pool SRoA %.3f; adv-trained "
                 "clean exact %.3f",
                 hardened.sroa, baseline.sroa, regen.sroa, exact_match_rate(adv_model, eval_set)),
             t0);
    }

    a10_metrics();
    a11_service(pool_dir);
  } catch (const std::exception& e) {
    std::printf("aborted: %s\n", e.what());
  }

  std::set<std::string> seen;
  for (const auto& o : g_outcomes) seen.insert(o.id);
  for (int i = 1; i <= 12; ++i) {
    const auto id = "A" + std::to_string(i);
    if (!seen.count(id)) std::printf("%-4s FAIL  not run\n", id.c_str()), g_outcomes.push_back({id, false, "", 0});
  }
  const auto passed = std::count_if(g_outcomes.begin(), g_outcomes.end(), [](const Outcome& o) { return o.pass; });
  std::printf("%ld/%zu criteria passed\n", static_cast<long>(passed), g_outcomes.size());
  return passed == static_cast<long>(g_outcomes.size()) ? 0 : 1;
}
