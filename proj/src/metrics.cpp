#include "advcaptcha/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

WerBreakdown word_errors(std::span<const std::string> ref, std::span<const std::string> hyp) {
  if (ref.empty()) throw Error(Errc::empty_transcription, "WER needs a non-empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> int& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});

  WerBreakdown out;
  out.reference_words = static_cast<int>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const int diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      if (at(i, j) == diag) {
        if (ref[i - 1] != hyp[j - 1]) ++out.substitutions;
        --i, --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++out.deletions;
      --i;
    } else {
      ++out.insertions;
      --j;
    }
  }
  out.wer = static_cast<double>(out.edits()) / static_cast<double>(n);
  return out;
}

WerBreakdown wer(const Transcription& reference, const Transcription& hypothesis) {
  auto r = reference.words();
  auto h = hypothesis.words();
  return word_errors(r, h);
}

double adversarial_success_rate(std::span<const TranscriptPair> results) {
  if (results.empty()) throw Error(Errc::empty_input, "no results to score");
  std::size_t fooled = 0;
  for (const auto& [ref, hyp] : results) fooled += wer(ref, hyp).wer > 0.0 ? 1 : 0;
  return static_cast<double>(fooled) / static_cast<double>(results.size());
}

double sroa(std::span<const TranscriptPair> results) { return 1.0 - adversarial_success_rate(results); }

double snr_db(std::span<const double> x, std::span<const double> delta) {
  if (x.size() != delta.size()) throw Error(Errc::shape_mismatch, "signal and perturbation lengths differ");
  double px = 0.0, pd = 0.0;
  for (double v : x) px += v * v;
  for (double v : delta) pd += v * v;
  if (pd == 0.0) throw Error(Errc::undefined_snr, "perturbation has zero energy");
  if (px == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(px / pd);
}

double l1_norm(std::span<const double> delta) {
  double s = 0.0;
  for (double v : delta) s += std::abs(v);
  return s;
}

double linf_norm(std::span<const double> delta) {
  double s = 0.0;
  for (double v : delta) s = std::max(s, std::abs(v));
  return s;
}

ScoredSample score(std::string id, const Transcription& reference, const Transcription& hypothesis,
                   double duration_seconds) {
  ScoredSample s;
  s.id = std::move(id);
  s.reference = reference;
  s.hypothesis = hypothesis;
  s.errors = wer(reference, hypothesis);
  s.duration_seconds = duration_seconds;
  return s;
}

EvalReport summarize(std::span<const ScoredSample> samples) {
  if (samples.empty()) throw Error(Errc::empty_input, "no samples to summarize");
  EvalReport r;
  r.n_samples = samples.size();
  std::vector<double> wers;
  double snr_sum = 0.0, l1_sum = 0.0, dur = 0.0;
  std::size_t snr_n = 0, l1_n = 0;
  for (const auto& s : samples) {
    r.n_fooled += s.fooled() ? 1 : 0;
    wers.push_back(s.errors.wer);
    if (s.snr_db) snr_sum += *s.snr_db, ++snr_n;
    if (s.l1) l1_sum += *s.l1, ++l1_n;
    dur += s.duration_seconds;
  }
  const double n = static_cast<double>(r.n_samples);
  r.aa = static_cast<double>(r.n_fooled) / n;
  r.sroa = 1.0 - r.aa;
  double sum = 0.0;
  for (double w : wers) sum += w;
  r.wer_mean = sum / n;
  double var = 0.0;
  for (double w : wers) var += (w - r.wer_mean) * (w - r.wer_mean);
  r.wer_std = std::sqrt(var / n);
  std::sort(wers.begin(), wers.end());
  const auto mid = wers.size() / 2;
  r.wer_median = wers.size() % 2 ? wers[mid] : 0.5 * (wers[mid - 1] + wers[mid]);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.snr_mean = snr_n ? snr_sum / static_cast<double>(snr_n) : nan;
  r.l1_mean = l1_n ? l1_sum / static_cast<double>(l1_n) : nan;
  r.duration_mean = dur / n;
  return r;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"n_samples", "n_fooled", "aa",      "sroa",    "wer_mean",
                                                "wer_median", "wer_std", "snr_mean", "l1_mean", "duration_mean"};
  return cols;
}

std::vector<std::string> report_values(const EvalReport& r) {
  return {std::to_string(r.n_samples), std::to_string(r.n_fooled), format_number(r.aa),
          format_number(r.sroa),       format_number(r.wer_mean),  format_number(r.wer_median),
          format_number(r.wer_std),    format_number(r.snr_mean),  format_number(r.l1_mean),
          format_number(r.duration_mean)};
}

void write_report_csv(std::ostream& out, std::span<const EvalReport> reports) {
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : reports) {
    auto vals = report_values(r);
    for (std::size_t i = 0; i < vals.size(); ++i) out << (i ? "," : "") << vals[i];
    out << '\n';
  }
}

nlohmann::json to_json(const EvalReport& r) {
  auto num = [](double v) -> nlohmann::json { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  return {{"n_samples", r.n_samples}, {"n_fooled", r.n_fooled},     {"aa", num(r.aa)},
          {"sroa", num(r.sroa)},      {"wer_mean", num(r.wer_mean)}, {"wer_median", num(r.wer_median)},
          {"wer_std", num(r.wer_std)}, {"snr_mean", num(r.snr_mean)}, {"l1_mean", num(r.l1_mean)},
          {"duration_mean", num(r.duration_mean)}};
}

}  // namespace advcaptcha
