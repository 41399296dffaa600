#include "advcaptcha/audio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unordered_set>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

AudioWaveform::AudioWaveform(std::vector<double> samples, int sample_rate_hz)
    : samples_(std::move(samples)), rate_(sample_rate_hz) {
  if (rate_ <= 0) throw Error(Errc::invalid_argument, "sample rate must be positive");
  if (samples_.empty()) throw Error(Errc::invalid_argument, "waveform must not be empty");
}

std::string normalize_text(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char ch : raw) {
    auto c = static_cast<unsigned char>(ch);
    char lower = static_cast<char>(std::tolower(c));
    if ((lower >= 'a' && lower <= 'z') || lower == '\'') {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(lower);
    } else {
      pending_space = true;
    }
  }
  return out;
}

Transcription::Transcription(std::string_view raw) : text_(normalize_text(raw)) {}

std::vector<std::string> Transcription::words() const {
  std::vector<std::string> out;
  std::istringstream in(text_);
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

double round_half_away(double v) noexcept { return std::round(v); }

double clamp_audio(double v) noexcept { return std::clamp(v, -kMaxAmplitude, kMaxAmplitude); }

namespace {

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace

AudioWaveform decode_wav(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error(Errc::malformed_wav, "not a RIFF/WAVE container");
  }
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    std::uint32_t size = read_u32(chunk + 4);
    std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw Error(Errc::malformed_wav, "truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw Error(Errc::malformed_wav, "fmt chunk too short");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format == kFormatExtensible && size >= 26) format = read_u16(bytes.data() + body + 24);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw Error(Errc::malformed_wav, "data chunk precedes fmt chunk");
      if (format != kFormatPcm)
        throw Error(Errc::unsupported_encoding,
                    "unsupported encoding: format tag " + std::to_string(format) + " (PCM required)");
      if (channels != 1)
        throw Error(Errc::unsupported_encoding,
                    "unsupported encoding: " + std::to_string(channels) + " channels (mono required)");
      if (bits != 16)
        throw Error(Errc::unsupported_encoding,
                    "unsupported encoding: " + std::to_string(bits) + "-bit samples (16-bit required)");
      if (rate == 0) throw Error(Errc::malformed_wav, "zero sample rate");
      std::size_t n = size / 2;
      if (n == 0) throw Error(Errc::malformed_wav, "empty data chunk");
      std::vector<double> samples(n);
      for (std::size_t i = 0; i < n; ++i) {
        samples[i] = static_cast<std::int16_t>(read_u16(bytes.data() + body + 2 * i));
      }
      return AudioWaveform(std::move(samples), static_cast<int>(rate));
    }
    pos = body + size + (size & 1u);
  }
  throw Error(Errc::malformed_wav, have_fmt ? "missing data chunk" : "missing fmt chunk");
}

AudioWaveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::missing_file, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_wav(const AudioWaveform& waveform) {
  const auto& s = waveform.samples();
  auto data_bytes = static_cast<std::uint32_t>(s.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(waveform.sample_rate()));
  put_u32(out, static_cast<std::uint32_t>(waveform.sample_rate()) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (double v : s) {
    double r = std::clamp(round_half_away(v), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(r)));
  }
  return out;
}

void save_wav(const AudioWaveform& waveform, const std::filesystem::path& path) {
  auto bytes = encode_wav(waveform);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io_error, "write failed for " + path.string());
}

AudioWaveform resample(const AudioWaveform& waveform, int target_rate_hz) {
  if (target_rate_hz <= 0) throw Error(Errc::invalid_argument, "target rate must be positive");
  const int source = waveform.sample_rate();
  if (target_rate_hz == source) return waveform;
  const auto& x = waveform.samples();
  const std::size_t n = x.size();
  auto m = static_cast<std::size_t>(
      round_half_away(static_cast<double>(n) * target_rate_hz / static_cast<double>(source)));
  m = std::max<std::size_t>(m, 1);
  const double step = static_cast<double>(source) / target_rate_hz;
  std::vector<double> y(m);
  for (std::size_t j = 0; j < m; ++j) {
    double pos = static_cast<double>(j) * step;
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= n - 1) {
      y[j] = x[n - 1];
      continue;
    }
    double frac = pos - static_cast<double>(i0);
    y[j] = x[i0] + frac * (x[i0 + 1] - x[i0]);
  }
  return AudioWaveform(std::move(y), target_rate_hz);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw Error(Errc::invalid_argument,
                  path.string() + ":" + std::to_string(lineno) + ": expected id<TAB>path<TAB>transcription");
    ManifestEntry e;
    e.id = line.substr(0, t1);
    e.audio_path = base / line.substr(t1 + 1, t2 - t1 - 1);
    e.transcription = normalize_text(line.substr(t2 + 1));
    if (!seen.insert(e.id).second) throw Error(Errc::duplicate_id, "duplicate id in manifest: " + e.id);
    if (e.transcription.empty())
      throw Error(Errc::empty_transcription, "empty transcription for id " + e.id);
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<LabeledSample> load_manifest(const std::filesystem::path& path) {
  auto entries = read_manifest(path);
  for (const auto& e : entries) {
    if (!std::filesystem::exists(e.audio_path))
      throw Error(Errc::missing_file, "missing audio for id " + e.id + ": " + e.audio_path.string());
  }
  std::vector<LabeledSample> out;
  out.reserve(entries.size());
  for (auto& e : entries) {
    auto w = load_wav(e.audio_path);
    if (w.sample_rate() != kCanonicalRate) w = resample(w, kCanonicalRate);
    out.push_back({e.id, std::move(w), Transcription(e.transcription)});
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write manifest " + path.string());
  for (const auto& e : entries) {
    out << e.id << '\t' << e.audio_path.generic_string() << '\t' << e.transcription << '\n';
  }
}

}  // namespace advcaptcha
