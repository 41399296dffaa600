#include "advcaptcha/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// Label sequence interleaved with blanks: b l1 b l2 ... lL b.
std::vector<int> extend_with_blanks(std::span<const int> labels) {
  std::vector<int> ext(2 * labels.size() + 1, Alphabet::kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  return ext;
}

void check_feasible(const Logits& logits, std::span<const int> labels) {
  for (int l : labels) {
    if (l <= Alphabet::kBlank || l >= logits.cols())
      throw Error(Errc::invalid_argument, "label index out of range for the logit width");
  }
  int need = ctc_min_frames(labels);
  if (logits.rows() < need)
    throw Error(Errc::infeasible_alignment, "label of length " + std::to_string(labels.size()) +
                                                " needs at least " + std::to_string(need) +
                                                " frames, got " + std::to_string(logits.rows()));
}

// alpha(t, s): log prob of all prefixes ending in state s at frame t,
// emissions through t included.
Eigen::MatrixXd forward_pass(const Eigen::MatrixXd& logp, const std::vector<int>& ext) {
  const auto frames = logp.rows();
  const auto states = static_cast<Eigen::Index>(ext.size());
  Eigen::MatrixXd alpha = Eigen::MatrixXd::Constant(frames, states, kNegInf);
  alpha(0, 0) = logp(0, ext[0]);
  if (states > 1) alpha(0, 1) = logp(0, ext[1]);
  for (Eigen::Index t = 1; t < frames; ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double acc = alpha(t - 1, s);
      if (s >= 1) acc = log_add(acc, alpha(t - 1, s - 1));
      if (s >= 2 && ext[s] != Alphabet::kBlank && ext[s] != ext[s - 2])
        acc = log_add(acc, alpha(t - 1, s - 2));
      if (acc != kNegInf) alpha(t, s) = acc + logp(t, ext[s]);
    }
  }
  return alpha;
}

// beta(t, s): log prob of completing the label from state s at frame t,
// emissions after t only.
Eigen::MatrixXd backward_pass(const Eigen::MatrixXd& logp, const std::vector<int>& ext) {
  const auto frames = logp.rows();
  const auto states = static_cast<Eigen::Index>(ext.size());
  Eigen::MatrixXd beta = Eigen::MatrixXd::Constant(frames, states, kNegInf);
  beta(frames - 1, states - 1) = 0.0;
  if (states > 1) beta(frames - 1, states - 2) = 0.0;
  for (Eigen::Index t = frames - 2; t >= 0; --t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double acc = beta(t + 1, s) + logp(t + 1, ext[s]);
      if (s + 1 < states) acc = log_add(acc, beta(t + 1, s + 1) + logp(t + 1, ext[s + 1]));
      if (s + 2 < states && ext[s + 2] != Alphabet::kBlank && ext[s + 2] != ext[s])
        acc = log_add(acc, beta(t + 1, s + 2) + logp(t + 1, ext[s + 2]));
      beta(t, s) = acc;
    }
  }
  return beta;
}

double total_log_prob(const Eigen::MatrixXd& alpha) {
  const auto last = alpha.rows() - 1;
  const auto states = alpha.cols();
  double p = alpha(last, states - 1);
  if (states > 1) p = log_add(p, alpha(last, states - 2));
  return p;
}

}  // namespace

char Alphabet::symbol(int index) {
  if (index == 1) return ' ';
  if (index == 2) return '\'';
  if (index >= 3 && index < kSize) return static_cast<char>('a' + (index - 3));
  throw Error(Errc::invalid_argument, "no printable symbol for index " + std::to_string(index));
}

int Alphabet::index_of(char c) noexcept {
  if (c == ' ') return 1;
  if (c == '\'') return 2;
  if (c >= 'a' && c <= 'z') return 3 + (c - 'a');
  return -1;
}

std::vector<int> Alphabet::encode(const Transcription& text) {
  std::vector<int> out;
  out.reserve(text.text().size());
  for (char c : text.text()) out.push_back(index_of(c));
  return out;
}

std::string Alphabet::decode(std::span<const int> labels) {
  std::string out;
  for (int l : labels) {
    if (l != kBlank) out.push_back(symbol(l));
  }
  return out;
}

Eigen::MatrixXd log_softmax_rows(const Logits& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    double hi = logits.row(t).maxCoeff();
    double lse = hi + std::log((logits.row(t).array() - hi).exp().sum());
    out.row(t) = logits.row(t).array() - lse;
  }
  return out;
}

int ctc_min_frames(std::span<const int> labels) {
  int need = static_cast<int>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++need;
  }
  return need;
}

double ctc_loss(const Logits& logits, std::span<const int> labels) {
  if (logits.rows() == 0) throw Error(Errc::infeasible_alignment, "no frames");
  check_feasible(logits, labels);
  auto ext = extend_with_blanks(labels);
  auto alpha = forward_pass(log_softmax_rows(logits), ext);
  return -total_log_prob(alpha);
}

double ctc_loss(const Logits& logits, const Transcription& text) {
  auto labels = Alphabet::encode(text);
  return ctc_loss(logits, labels);
}

CtcResult ctc_loss_and_grad(const Logits& logits, std::span<const int> labels) {
  if (logits.rows() == 0) throw Error(Errc::infeasible_alignment, "no frames");
  check_feasible(logits, labels);
  auto ext = extend_with_blanks(labels);
  Eigen::MatrixXd logp = log_softmax_rows(logits);
  auto alpha = forward_pass(logp, ext);
  auto beta = backward_pass(logp, ext);
  const double log_total = total_log_prob(alpha);

  CtcResult result;
  result.loss = -log_total;
  result.grad = logp.array().exp().matrix();
  const auto states = static_cast<Eigen::Index>(ext.size());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double lp = alpha(t, s) + beta(t, s);
      if (lp == kNegInf) continue;
      result.grad(t, ext[s]) -= std::exp(lp - log_total);
    }
  }
  return result;
}

Logits ctc_grad(const Logits& logits, const Transcription& text) {
  auto labels = Alphabet::encode(text);
  return ctc_loss_and_grad(logits, labels).grad;
}

std::vector<int> greedy_path(const Logits& logits) {
  std::vector<int> path(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k) {
      if (logits(t, k) > logits(t, best)) best = k;
    }
    path[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return path;
}

std::vector<int> collapse_path(std::span<const int> path) {
  std::vector<int> out;
  int prev = -1;
  for (int p : path) {
    if (p != prev && p != Alphabet::kBlank) out.push_back(p);
    prev = p;
  }
  return out;
}

Transcription greedy_decode(const Logits& logits) {
  auto labels = collapse_path(greedy_path(logits));
  return Transcription(Alphabet::decode(labels));
}

}  // namespace advcaptcha
