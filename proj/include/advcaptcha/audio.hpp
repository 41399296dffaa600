#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace advcaptcha {

// Largest representable amplitude of 16-bit audio (2^15).
inline constexpr double kMaxAmplitude = 32768.0;
inline constexpr int kCanonicalRate = 16000;

// Mono PCM signal carried as reals in 16-bit units. Values are only
// discretized when written to disk.
class AudioWaveform {
 public:
  AudioWaveform() = default;
  AudioWaveform(std::vector<double> samples, int sample_rate_hz);

  const std::vector<double>& samples() const noexcept { return samples_; }
  std::span<const double> view() const noexcept { return samples_; }
  int sample_rate() const noexcept { return rate_; }
  std::size_t size() const noexcept { return samples_.size(); }
  double duration_seconds() const noexcept {
    return static_cast<double>(samples_.size()) / rate_;
  }

  bool operator==(const AudioWaveform&) const = default;

 private:
  std::vector<double> samples_;
  int rate_ = kCanonicalRate;
};

// Lowercase words over {a-z, '} separated by single spaces.
class Transcription {
 public:
  Transcription() = default;
  // Normalizes raw text; see normalize_text().
  explicit Transcription(std::string_view raw);

  const std::string& text() const noexcept { return text_; }
  bool empty() const noexcept { return text_.empty(); }
  std::vector<std::string> words() const;

  bool operator==(const Transcription&) const = default;

 private:
  std::string text_;
};

// Lowercases, maps every character outside {a-z, '} to a word separator and
// collapses whitespace. Idempotent.
std::string normalize_text(std::string_view raw);

struct LabeledSample {
  std::string id;
  AudioWaveform waveform;
  Transcription transcription;
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path audio_path;
  std::string transcription;
};

// Half-away-from-zero rounding, used for every real to integer conversion.
double round_half_away(double v) noexcept;

double clamp_audio(double v) noexcept;

AudioWaveform load_wav(const std::filesystem::path& path);
AudioWaveform decode_wav(std::span<const std::uint8_t> bytes);
void save_wav(const AudioWaveform& waveform, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_wav(const AudioWaveform& waveform);

// Linear interpolation over sample positions. Output length is
// round(n * target / source).
AudioWaveform resample(const AudioWaveform& waveform, int target_rate_hz);

// Lines are `id<TAB>path<TAB>transcription`; paths resolve relative to the
// manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
std::vector<LabeledSample> load_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

}  // namespace advcaptcha
