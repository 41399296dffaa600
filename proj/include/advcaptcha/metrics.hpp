#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "advcaptcha/audio.hpp"

namespace advcaptcha {

struct WerBreakdown {
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int reference_words = 0;
  double wer = 0.0;  // unclamped, may exceed 1

  int edits() const noexcept { return substitutions + deletions + insertions; }
};

// Word-level Levenshtein alignment. Ties in the backtrace prefer
// substitution, then deletion, then insertion.
WerBreakdown word_errors(std::span<const std::string> reference, std::span<const std::string> hypothesis);
WerBreakdown wer(const Transcription& reference, const Transcription& hypothesis);

using TranscriptPair = std::pair<Transcription, Transcription>;  // reference, hypothesis

// Fraction of pairs with nonzero WER.
double adversarial_success_rate(std::span<const TranscriptPair> results);
double sroa(std::span<const TranscriptPair> results);

// 10 log10(P_x / P_delta). Throws undefined_snr when delta has no energy;
// returns -infinity when x has none.
double snr_db(std::span<const double> x, std::span<const double> delta);
double l1_norm(std::span<const double> delta);
double linf_norm(std::span<const double> delta);

struct ScoredSample {
  std::string id;
  Transcription reference;
  Transcription hypothesis;
  WerBreakdown errors;
  std::optional<double> snr_db;
  std::optional<double> l1;
  double duration_seconds = 0.0;

  bool fooled() const noexcept { return errors.wer > 0.0; }
};

ScoredSample score(std::string id, const Transcription& reference, const Transcription& hypothesis,
                   double duration_seconds = 0.0);

struct EvalReport {
  std::size_t n_samples = 0;
  std::size_t n_fooled = 0;
  double aa = 0.0;
  double sroa = 1.0;
  double wer_mean = 0.0;
  double wer_median = 0.0;
  double wer_std = 0.0;
  double snr_mean = 0.0;  // NaN when no sample carries an SNR
  double l1_mean = 0.0;   // NaN when no sample carries a perturbation
  double duration_mean = 0.0;
};

EvalReport summarize(std::span<const ScoredSample> samples);

const std::vector<std::string>& report_columns();
std::vector<std::string> report_values(const EvalReport& report);
void write_report_csv(std::ostream& out, std::span<const EvalReport> reports);
nlohmann::json to_json(const EvalReport& report);

// Shortest decimal that round-trips; empty for NaN.
std::string format_number(double v);

}  // namespace advcaptcha
