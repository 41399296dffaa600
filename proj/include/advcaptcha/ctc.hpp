#pragma once

#include <Eigen/Dense>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "advcaptcha/audio.hpp"

namespace advcaptcha {

// {blank, space, apostrophe, a..z}; blank is index 0.
class Alphabet {
 public:
  static constexpr int kBlank = 0;
  static constexpr int kSize = 29;

  static char symbol(int index);
  // -1 when the character is not in the alphabet.
  static int index_of(char c) noexcept;

  static std::vector<int> encode(const Transcription& text);
  // Labels to text; blanks are skipped.
  static std::string decode(std::span<const int> labels);
};

// frames x classes, pre-softmax.
using Logits = Eigen::MatrixXd;

Eigen::MatrixXd log_softmax_rows(const Logits& logits);

// Fewest frames that can carry `labels`: one per label plus a blank between
// each pair of equal neighbours.
int ctc_min_frames(std::span<const int> labels);

struct CtcResult {
  double loss = 0.0;
  Logits grad;  // d loss / d logits
};

// -log sum over all alignments, log-space forward algorithm. Throws
// Errc::infeasible_alignment when the label cannot fit in the frame count.
double ctc_loss(const Logits& logits, std::span<const int> labels);
double ctc_loss(const Logits& logits, const Transcription& text);

// Loss plus exact gradient via forward-backward.
CtcResult ctc_loss_and_grad(const Logits& logits, std::span<const int> labels);
Logits ctc_grad(const Logits& logits, const Transcription& text);

// Per-frame argmax (ties to the lower index), collapse repeats, drop blanks.
std::vector<int> greedy_path(const Logits& logits);
std::vector<int> collapse_path(std::span<const int> path);
Transcription greedy_decode(const Logits& logits);

}  // namespace advcaptcha
