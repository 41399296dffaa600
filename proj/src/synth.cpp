#include "advcaptcha/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

namespace {

struct Band {
  double lo = 0.0, hi = 0.0;
  double gain = 0.0;
};

struct Unit {
  double voicing = 0.0;                          // harmonic source gain
  std::array<double, 3> formants{};              // at onset, Hz
  std::array<double, 3> formants_end{};          // at offset; zero means static
  std::array<double, 3> formant_gain{1.0, 0.6, 0.3};
  Band noise{};
  Band noise2{};
  double duration_ms = 80.0;
  double closure_ms = 0.0;  // silence (or voice bar) before the unit
  bool burst = false;       // noise decays quickly from the onset
  double loudness = 1.0;    // relative to a vowel
};

Unit vowel(double f1, double f2, double f3, double dur = 90.0) {
  Unit u;
  u.voicing = 1.0;
  u.formants = {f1, f2, f3};
  u.duration_ms = dur;
  return u;
}

Unit glide(std::array<double, 3> from, std::array<double, 3> to, double dur = 80.0) {
  Unit u = vowel(from[0], from[1], from[2], dur);
  u.formants_end = to;
  u.loudness = 0.85;
  return u;
}

Unit fricative(double lo, double hi, double loud, double dur = 80.0) {
  Unit u;
  u.noise = {lo, hi, 1.0};
  u.duration_ms = dur;
  u.loudness = loud;
  return u;
}

Unit stop(double lo, double hi, double voicing, std::array<double, 3> formants) {
  Unit u;
  u.noise = {lo, hi, 1.0};
  u.burst = true;
  u.closure_ms = 30.0;
  u.duration_ms = 55.0;
  u.voicing = voicing;
  u.formants = formants;
  u.loudness = 0.7;
  return u;
}

Unit unit_for(char c) {
  switch (c) {
    case 'a': return vowel(730, 1090, 2440);
    case 'e': return vowel(530, 1840, 2480);
    case 'i': return vowel(270, 2290, 3010);
    case 'o': return vowel(570, 840, 2410);
    case 'u': return vowel(300, 870, 2240);
    case 'y': return glide({270, 2290, 3010}, {660, 1720, 2410});
    case 'w': return glide({300, 610, 2150}, {640, 1190, 2390});
    case 'r': {
      Unit u = vowel(460, 1190, 1500, 75);
      u.loudness = 0.8;
      return u;
    }
    case 'l': {
      Unit u = vowel(380, 880, 2900, 75);
      u.formant_gain = {1.0, 0.3, 0.5};
      u.loudness = 0.7;
      return u;
    }
    case 'm': {
      Unit u = vowel(250, 1000, 2200, 75);
      u.formant_gain = {1.0, 0.08, 0.05};
      u.loudness = 0.5;
      return u;
    }
    case 'n': {
      Unit u = vowel(250, 1700, 2600, 75);
      u.formant_gain = {1.0, 0.25, 0.15};
      u.loudness = 0.5;
      return u;
    }
    case 'h': return fricative(400, 3500, 0.35, 70);
    case 's': return fricative(4500, 7500, 0.45);
    case 'f': return fricative(1000, 7800, 0.4, 90);
    case 'c': return fricative(2200, 3800, 0.5);
    case 'x': {
      Unit u = fricative(1200, 2200, 0.5, 90);
      u.noise2 = {5000, 7500, 0.8};
      return u;
    }
    case 'z': {
      Unit u = fricative(3000, 4500, 0.7);
      u.noise.gain = 0.5;
      u.voicing = 1.0;
      u.formants = {250, 1400, 2500};
      return u;
    }
    case 'v': {
      Unit u = fricative(1000, 2500, 0.6);
      u.noise.gain = 0.4;
      u.voicing = 1.0;
      u.formants = {250, 1100, 2300};
      return u;
    }
    case 'j': {
      Unit u = fricative(1000, 2000, 0.7);
      u.noise.gain = 0.5;
      u.voicing = 1.0;
      u.formants = {270, 2000, 2800};
      return u;
    }
    case 't': return stop(3500, 6500, 0.0, {});
    case 'k': {
      Unit u = stop(1200, 2000, 0.0, {});
      u.duration_ms = 70.0;
      return u;
    }
    case 'p': {
      Unit u = stop(600, 1200, 0.0, {});
      u.noise2 = {400, 3500, 0.5};
      u.duration_ms = 70.0;
      return u;
    }
    case 'q': return stop(3000, 4000, 0.8, {300, 700, 2200});
    case 'b': {
      Unit u = stop(300, 1500, 1.0, {300, 900, 2200});
      u.noise.gain = 0.4;
      return u;
    }
    case 'd': return stop(2500, 4500, 0.8, {300, 1700, 2600});
    case 'g': {
      Unit u = stop(1800, 3000, 1.0, {300, 2000, 2700});
      u.noise.gain = 0.5;
      return u;
    }
    case '\'': {
      Unit u = vowel(3500, 3500, 3500, 50);
      u.formant_gain = {1.0, 0.0, 0.0};
      u.loudness = 0.6;
      return u;
    }
    default: throw Error(Errc::invalid_argument, std::string("no synthesis unit for '") + c + "'");
  }
}

// Two-pole resonator (Klatt form) with unity gain at DC-normalized centre.
struct Resonator {
  double y1 = 0.0, y2 = 0.0;
  double step(double x, double freq, double bandwidth, double rate) {
    double t = 1.0 / rate;
    double c = -std::exp(-2.0 * std::numbers::pi * bandwidth * t);
    double b = 2.0 * std::exp(-std::numbers::pi * bandwidth * t) * std::cos(2.0 * std::numbers::pi * freq * t);
    double a = 1.0 - b - c;
    double y = a * x + b * y1 + c * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

double band_centre(const Band& b) { return 0.5 * (b.lo + b.hi); }
double band_width(const Band& b) { return std::max(100.0, b.hi - b.lo); }

std::vector<double> render_unit(const Unit& unit, const SpeakerProfile& sp, double rate, std::size_t length,
                                double& glottal_phase, std::mt19937_64& rng) {
  std::normal_distribution<double> white(0.0, 1.0);
  std::vector<double> out(length, 0.0);
  std::array<Resonator, 3> formant_res{};
  Resonator noise_res, noise_res2, tilt;
  const double nyquist = rate / 2.0 - 200.0;
  for (std::size_t n = 0; n < length; ++n) {
    double progress = length > 1 ? static_cast<double>(n) / static_cast<double>(length - 1) : 0.0;
    double v = 0.0;
    if (unit.voicing > 0.0) {
      glottal_phase += sp.f0_hz / rate;
      double pulse = 0.0;
      if (glottal_phase >= 1.0) {
        glottal_phase -= 1.0;
        pulse = 1.0;
      }
      double source = tilt.step(pulse, 0.0, 600.0, rate);
      for (int k = 0; k < 3; ++k) {
        double f = unit.formants[k];
        if (unit.formants_end[k] > 0.0) f += progress * (unit.formants_end[k] - f);
        f = std::min(f * sp.formant_scale, nyquist);
        if (f <= 0.0) continue;
        v += unit.formant_gain[k] * formant_res[k].step(source, f, 60.0 + 0.06 * f, rate);
      }
      v *= unit.voicing;
    }
    double noise = 0.0;
    if (unit.noise.gain > 0.0) {
      double env = unit.burst ? std::exp(-progress * 5.0) : 1.0;
      noise += unit.noise.gain * env *
               noise_res.step(white(rng), std::min(band_centre(unit.noise), nyquist), band_width(unit.noise), rate);
      if (unit.noise2.gain > 0.0)
        noise += unit.noise2.gain * env *
                 noise_res2.step(white(rng), std::min(band_centre(unit.noise2), nyquist), band_width(unit.noise2),
                                 rate);
    }
    out[n] = v + noise;
  }
  // Voiced and noise parts are scaled to a common loudness reference.
  double energy = 0.0;
  for (double s : out) energy += s * s;
  double rms = std::sqrt(energy / static_cast<double>(length));
  if (rms > 0.0) {
    double g = sp.loudness * unit.loudness / rms;
    for (auto& s : out) s *= g;
  }
  // Raised-cosine edges.
  const auto ramp = std::min<std::size_t>(length / 3, static_cast<std::size_t>(0.010 * rate));
  for (std::size_t n = 0; n < ramp; ++n) {
    double w = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n) / static_cast<double>(ramp));
    out[n] *= w;
    out[length - 1 - n] *= w;
  }
  return out;
}

}  // namespace

SpeakerProfile random_speaker(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SpeakerProfile sp;
  sp.f0_hz = 90.0 + 110.0 * u(rng);
  sp.formant_scale = 0.95 + 0.10 * u(rng);
  sp.tempo = 0.88 + 0.24 * u(rng);
  sp.loudness = 2500.0 + 2500.0 * u(rng);
  sp.noise_rms = 20.0 + 60.0 * u(rng);
  return sp;
}

AudioWaveform synthesize(const Transcription& text, const SpeakerProfile& sp, std::uint64_t seed) {
  if (text.empty()) throw Error(Errc::empty_transcription, "nothing to synthesize");
  const double rate = kCanonicalRate;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  auto ms = [&](double v) { return static_cast<std::size_t>(v / 1000.0 * rate / sp.tempo); };

  std::vector<double> out(ms(150.0 + 100.0 * (jitter(rng) - 0.9) * 5.0), 0.0);
  double glottal_phase = 0.0;
  const auto overlap = static_cast<std::size_t>(0.010 * rate);
  char prev = ' ';
  for (char c : text.text()) {
    if (c == ' ') {
      out.resize(out.size() + ms(260.0 + 300.0 * (jitter(rng) - 0.9)), 0.0);
      prev = ' ';
      continue;
    }
    Unit unit = unit_for(c);
    std::size_t gap = ms(unit.closure_ms);
    if (c == prev) gap = std::max(gap, ms(45.0));
    out.resize(out.size() + gap, 0.0);
    std::size_t length = ms(unit.duration_ms * jitter(rng));
    auto seg = render_unit(unit, sp, rate, length, glottal_phase, rng);
    std::size_t start = out.size();
    if (gap == 0 && prev != ' ' && start >= overlap) start -= overlap;
    out.resize(std::max(out.size(), start + length), 0.0);
    for (std::size_t n = 0; n < length; ++n) out[start + n] += seg[n];
    prev = c;
  }
  out.resize(out.size() + ms(150.0 + 500.0 * (jitter(rng) - 0.9)), 0.0);

  std::normal_distribution<double> noise(0.0, sp.noise_rms);
  for (auto& s : out) s = clamp_audio(round_half_away(s + noise(rng)));
  return AudioWaveform(std::move(out), kCanonicalRate);
}

const std::vector<std::string>& desk_vocabulary() {
  static const std::vector<std::string> words = {
      "the",   "a",     "is",    "it",    "and",   "to",    "of",    "in",    "we",    "you",   "he",
      "she",   "they",  "was",   "for",   "on",    "are",   "with",  "his",   "her",   "at",    "be",
      "this",  "have",  "from",  "or",    "one",   "had",   "by",    "word",  "but",   "not",   "what",
      "all",   "were",  "when",  "your",  "can",   "said",  "there", "use",   "an",    "each",  "which",
      "do",    "how",   "their", "if",    "will",  "up",    "other", "about", "out",   "many",  "then",
      "them",  "these", "so",    "some",  "would", "make",  "like",  "him",   "into",  "time",  "has",
      "look",  "two",   "more",  "write", "go",    "see",   "number", "no",   "way",   "could", "people",
      "my",    "than",  "first", "water", "been",  "call",  "who",   "oil",   "its",   "now",   "find",
      "long",  "down",  "day",   "did",   "get",   "come",  "made",  "may",   "part",  "jump",  "quiz",
      "box",   "zoo",   "six",   "jam",   "quit",  "zip",   "fox",   "jazz",  "queen", "seven", "just",
      "next",  "zero",  "joy",   "very",  "vote",  "give",  "over",  "back",  "keep",  "green", "good",
      "it's",  "don't", "he's",  "i'm",   "can't", "we're", "that's", "let's", "she's", "you're",
  };
  return words;
}

std::vector<ManifestEntry> make_desk_manifest(int count, std::uint64_t seed, const std::string& id_prefix,
                                              int min_words, int max_words) {
  if (count <= 0 || min_words <= 0 || max_words < min_words)
    throw Error(Errc::invalid_argument, "invalid manifest request");
  const auto& vocab = desk_vocabulary();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> nwords(min_words, max_words);
  std::uniform_int_distribution<std::size_t> pick(0, vocab.size() - 1);
  std::vector<ManifestEntry> out;
  for (int i = 0; i < count; ++i) {
    int n = nwords(rng);
    std::string text;
    for (int w = 0; w < n; ++w) {
      if (w) text.push_back(' ');
      text += vocab[pick(rng)];
    }
    char id[32];
    std::snprintf(id, sizeof id, "%s%04d", id_prefix.c_str(), i);
    out.push_back({id, std::filesystem::path("audio") / (std::string(id) + ".wav"), text});
  }
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis) {
  auto p = static_cast<const unsigned char*>(data);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::filesystem::path render_corpus(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                                    std::uint64_t seed) {
  auto entries = read_manifest(manifest);
  const auto base = manifest.parent_path();
  std::filesystem::create_directories(out_dir);
  std::vector<ManifestEntry> rewritten;
  for (const auto& e : entries) {
    auto rel = e.audio_path.lexically_relative(base);
    auto dest = out_dir / rel;
    std::filesystem::create_directories(dest.parent_path());
    std::uint64_t h = fnv1a64(e.id.data(), e.id.size()) ^ (seed * 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 rng(h);
    auto speaker = random_speaker(rng);
    save_wav(synthesize(Transcription(e.transcription), speaker, h + 1), dest);
    rewritten.push_back({e.id, rel, e.transcription});
  }
  auto out_manifest = out_dir / manifest.filename();
  write_manifest(rewritten, out_manifest);
  return out_manifest;
}

}  // namespace advcaptcha
