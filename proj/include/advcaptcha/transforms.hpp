#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "advcaptcha/audio.hpp"

namespace advcaptcha {

// q * round(s / q), half away from zero.
AudioWaveform quantize(const AudioWaveform& w, int q);

// Window covers the k-1 samples on each side (2k-1 total); edges use reflect
// padding.
AudioWaveform average_smooth(const AudioWaveform& w, int k);
AudioWaveform median_smooth(const AudioWaveform& w, int k);

// Linear resample to `intermediate_rate_hz` and back; length is preserved.
AudioWaveform downsample_upsample(const AudioWaveform& w, int intermediate_rate_hz);

inline constexpr int kFilterTaps = 101;

// Hamming-windowed sinc kernels with unit DC gain (low-pass) and the
// difference of two such kernels (band-pass).
std::vector<double> lowpass_kernel(double cutoff_hz, int sample_rate_hz, int taps = kFilterTaps);
std::vector<double> bandpass_kernel(double low_hz, double high_hz, int sample_rate_hz, int taps = kFilterTaps);

// Same-length convolution with a symmetric kernel and reflect padding.
std::vector<double> convolve_same(std::span<const double> x, std::span<const double> kernel);

AudioWaveform low_pass(const AudioWaveform& w, double cutoff_hz);
AudioWaveform band_pass(const AudioWaveform& w, double low_hz, double high_hz);

// Input WAV bytes, codec name and bitrate (kbps) in; decoded WAV bytes out.
using CodecAdapter =
    std::function<std::vector<std::uint8_t>(std::span<const std::uint8_t>, const std::string&, int)>;

class CodecRegistry {
 public:
  void add(const std::string& codec, CodecAdapter adapter);
  bool contains(const std::string& codec) const;
  std::vector<std::string> names() const;
  // Throws unavailable_codec for unknown names.
  CodecAdapter get(const std::string& codec) const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, CodecAdapter> adapters_;
};

// Holds the "identity" stub, plus mp3/opus/aac through ffmpeg when an ffmpeg
// executable is on PATH.
CodecRegistry& default_codecs();

// Encodes and decodes through ffmpeg subprocesses.
CodecAdapter ffmpeg_adapter(const std::string& executable = "ffmpeg");

inline constexpr int kDefaultBitrateKbps = 64;

// Round trip through a registered codec; the result is resampled and trimmed
// or padded back to the source rate and length.
AudioWaveform compress(const AudioWaveform& w, const std::string& codec, int bitrate_kbps = kDefaultBitrateKbps,
                       const CodecRegistry& registry = default_codecs());

enum class TransformKind { none, quantize, avg_smooth, median_smooth, downsample, lowpass, bandpass, compress };

struct TransformSpec {
  TransformKind kind = TransformKind::none;
  int q = 0;
  int k = 0;
  int rate_hz = 0;
  double low_hz = 0.0;
  double high_hz = 0.0;  // low-pass cutoff lives here
  std::string codec;
  int bitrate_kbps = kDefaultBitrateKbps;

  // Checks parameter ranges against a sample rate.
  void validate(int sample_rate_hz = kCanonicalRate) const;
  // Canonical text form, e.g. "quantize:q=1024" or "bandpass:low=100,high=2000".
  std::string name() const;
};

// Parses the form produced by TransformSpec::name().
TransformSpec parse_transform(const std::string& text);
// Items separated by ';' or whitespace.
std::vector<TransformSpec> parse_transform_list(const std::string& text);

AudioWaveform apply_transform(const TransformSpec& spec, const AudioWaveform& w,
                              const CodecRegistry& registry = default_codecs());

}  // namespace advcaptcha
