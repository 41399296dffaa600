#include "advcaptcha/transforms.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <unistd.h>

#include "advcaptcha/error.hpp"

namespace advcaptcha {

namespace {

// Mirror index into [0, n) without repeating the edge sample.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

std::vector<double> padded(std::span<const double> x, std::size_t pad) {
  std::vector<double> out(x.size() + 2 * pad);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[reflect(static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(pad), x.size())];
  return out;
}

AudioWaveform clamped(std::vector<double> samples, int rate) {
  for (auto& v : samples) v = clamp_audio(v);
  return AudioWaveform(std::move(samples), rate);
}

std::vector<double> fit_length(std::vector<double> y, std::size_t n) {
  if (y.size() > n) y.resize(n);
  while (y.size() < n) y.push_back(y.empty() ? 0.0 : y.back());
  return y;
}

bool is_power_of_two(int q) { return q > 0 && (q & (q - 1)) == 0; }

}  // namespace

AudioWaveform quantize(const AudioWaveform& w, int q) {
  if (q < 1) throw Error(Errc::invalid_argument, "quantization step must be >= 1");
  std::vector<double> y(w.samples());
  for (auto& v : y) v = q * round_half_away(v / q);
  return clamped(std::move(y), w.sample_rate());
}

AudioWaveform average_smooth(const AudioWaveform& w, int k) {
  if (k < 1) throw Error(Errc::invalid_argument, "smoothing window k must be >= 1");
  const auto pad = static_cast<std::size_t>(k - 1);
  auto p = padded(w.view(), pad);
  const std::size_t width = 2 * pad + 1;
  std::vector<double> y(w.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < width; ++j) s += p[i + j];
    y[i] = s / static_cast<double>(width);
  }
  return clamped(std::move(y), w.sample_rate());
}

AudioWaveform median_smooth(const AudioWaveform& w, int k) {
  if (k < 1) throw Error(Errc::invalid_argument, "smoothing window k must be >= 1");
  const auto pad = static_cast<std::size_t>(k - 1);
  auto p = padded(w.view(), pad);
  const std::size_t width = 2 * pad + 1;
  std::vector<double> y(w.size()), win(width);
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(i), width, win.begin());
    std::nth_element(win.begin(), win.begin() + static_cast<std::ptrdiff_t>(pad), win.end());
    y[i] = win[pad];
  }
  return clamped(std::move(y), w.sample_rate());
}

AudioWaveform downsample_upsample(const AudioWaveform& w, int rate) {
  if (rate <= 0 || rate >= w.sample_rate())
    throw Error(Errc::precondition, "intermediate rate must lie strictly between 0 and the source rate");
  auto down = resample(w, rate);
  auto up = resample(down, w.sample_rate());
  return clamped(fit_length(up.samples(), w.size()), w.sample_rate());
}

std::vector<double> lowpass_kernel(double cutoff_hz, int rate, int taps) {
  if (taps < 1 || taps % 2 == 0) throw Error(Errc::invalid_argument, "filter length must be odd");
  if (!(cutoff_hz > 0.0) || cutoff_hz >= rate / 2.0)
    throw Error(Errc::precondition, "cutoff must lie strictly between 0 and Nyquist");
  const double fc = cutoff_hz / rate;
  const int mid = taps / 2;
  std::vector<double> h(static_cast<std::size_t>(taps));
  double sum = 0.0;
  for (int n = 0; n < taps; ++n) {
    const double t = n - mid;
    const double sinc = t == 0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * t) / (std::numbers::pi * t);
    const double window = taps == 1 ? 1.0 : 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (taps - 1));
    h[static_cast<std::size_t>(n)] = sinc * window;
    sum += h[static_cast<std::size_t>(n)];
  }
  for (auto& v : h) v /= sum;
  return h;
}

std::vector<double> bandpass_kernel(double low_hz, double high_hz, int rate, int taps) {
  if (!(low_hz > 0.0) || !(low_hz < high_hz) || high_hz >= rate / 2.0)
    throw Error(Errc::precondition, "band edges must satisfy 0 < low < high < Nyquist");
  auto hi = lowpass_kernel(high_hz, rate, taps);
  auto lo = lowpass_kernel(low_hz, rate, taps);
  for (std::size_t i = 0; i < hi.size(); ++i) hi[i] -= lo[i];
  return hi;
}

std::vector<double> convolve_same(std::span<const double> x, std::span<const double> kernel) {
  if (x.empty()) return {};
  const std::size_t pad = kernel.size() / 2;
  auto p = padded(x, pad);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < kernel.size(); ++j) s += kernel[j] * p[i + kernel.size() - 1 - j];
    y[i] = s;
  }
  return y;
}

AudioWaveform low_pass(const AudioWaveform& w, double cutoff_hz) {
  return clamped(convolve_same(w.view(), lowpass_kernel(cutoff_hz, w.sample_rate())), w.sample_rate());
}

AudioWaveform band_pass(const AudioWaveform& w, double low_hz, double high_hz) {
  return clamped(convolve_same(w.view(), bandpass_kernel(low_hz, high_hz, w.sample_rate())), w.sample_rate());
}

void CodecRegistry::add(const std::string& codec, CodecAdapter adapter) {
  std::lock_guard lock(mu_);
  adapters_[codec] = std::move(adapter);
}

bool CodecRegistry::contains(const std::string& codec) const {
  std::lock_guard lock(mu_);
  return adapters_.count(codec) > 0;
}

std::vector<std::string> CodecRegistry::names() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [name, _] : adapters_) out.push_back(name);
  return out;
}

CodecAdapter CodecRegistry::get(const std::string& codec) const {
  std::lock_guard lock(mu_);
  auto it = adapters_.find(codec);
  if (it == adapters_.end()) throw Error(Errc::unavailable_codec, "no adapter registered for codec '" + codec + "'");
  return it->second;
}

namespace {

bool on_path(const std::string& exe) {
  const char* path = std::getenv("PATH");
  if (!path) return false;
  std::stringstream ss(path);
  std::string dir;
  while (std::getline(ss, dir, ':')) {
    std::error_code ec;
    if (!dir.empty() && std::filesystem::exists(std::filesystem::path(dir) / exe, ec)) return true;
  }
  return false;
}

std::string codec_extension(const std::string& codec) {
  if (codec == "opus") return "opus";
  if (codec == "aac") return "m4a";
  if (codec == "speex") return "spx";
  return codec;
}

}  // namespace

CodecAdapter ffmpeg_adapter(const std::string& executable) {
  return [executable](std::span<const std::uint8_t> wav, const std::string& codec, int kbps) {
    namespace fs = std::filesystem;
    static std::atomic<unsigned> counter{0};
    const auto dir = fs::temp_directory_path() /
                     ("advcaptcha-codec-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::create_directories(dir);
    const auto in = dir / "in.wav", mid = dir / ("mid." + codec_extension(codec)), out = dir / "out.wav";
    {
      std::ofstream f(in, std::ios::binary);
      f.write(reinterpret_cast<const char*>(wav.data()), static_cast<std::streamsize>(wav.size()));
    }
    auto run = [&](const std::string& cmd) {
      if (std::system(cmd.c_str()) != 0) {
        fs::remove_all(dir);
        throw Error(Errc::unavailable_codec, "codec command failed: " + cmd);
      }
    };
    run(executable + " -loglevel error -y -i '" + in.string() + "' -b:a " + std::to_string(kbps) + "k '" +
        mid.string() + "'");
    run(executable + " -loglevel error -y -i '" + mid.string() + "' -ac 1 -c:a pcm_s16le '" + out.string() + "'");
    std::ifstream f(out, std::ios::binary);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    fs::remove_all(dir);
    return bytes;
  };
}

CodecRegistry& default_codecs() {
  static CodecRegistry* registry = [] {
    auto* r = new CodecRegistry;
    r->add("identity", [](std::span<const std::uint8_t> wav, const std::string&, int) {
      return std::vector<std::uint8_t>(wav.begin(), wav.end());
    });
    if (on_path("ffmpeg"))
      for (const char* c : {"mp3", "opus", "aac"}) r->add(c, ffmpeg_adapter());
    return r;
  }();
  return *registry;
}

AudioWaveform compress(const AudioWaveform& w, const std::string& codec, int bitrate_kbps,
                       const CodecRegistry& registry) {
  if (bitrate_kbps <= 0) throw Error(Errc::invalid_argument, "bitrate must be positive");
  auto adapter = registry.get(codec);
  auto bytes = adapter(encode_wav(w), codec, bitrate_kbps);
  auto decoded = resample(decode_wav(bytes), w.sample_rate());
  return clamped(fit_length(decoded.samples(), w.size()), w.sample_rate());
}

void TransformSpec::validate(int rate) const {
  const double nyquist = rate / 2.0;
  switch (kind) {
    case TransformKind::none:
      return;
    case TransformKind::quantize:
      if (q < 2 || !is_power_of_two(q)) throw Error(Errc::invalid_argument, "q must be a power of two >= 2");
      return;
    case TransformKind::avg_smooth:
    case TransformKind::median_smooth:
      if (k < 1) throw Error(Errc::invalid_argument, "k must be >= 1");
      return;
    case TransformKind::downsample:
      if (rate_hz <= 0 || rate_hz >= rate) throw Error(Errc::invalid_argument, "rate must lie in (0, source rate)");
      return;
    case TransformKind::lowpass:
      if (!(high_hz > 0.0) || high_hz >= nyquist) throw Error(Errc::invalid_argument, "cutoff must lie in (0, Nyquist)");
      return;
    case TransformKind::bandpass:
      if (!(low_hz > 0.0) || !(low_hz < high_hz) || high_hz >= nyquist)
        throw Error(Errc::invalid_argument, "band edges must satisfy 0 < low < high < Nyquist");
      return;
    case TransformKind::compress:
      if (codec.empty()) throw Error(Errc::invalid_argument, "codec name is required");
      if (bitrate_kbps <= 0) throw Error(Errc::invalid_argument, "bitrate must be positive");
      return;
  }
}

std::string TransformSpec::name() const {
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  switch (kind) {
    case TransformKind::none: return "none";
    case TransformKind::quantize: return "quantize:q=" + std::to_string(q);
    case TransformKind::avg_smooth: return "avg_smooth:k=" + std::to_string(k);
    case TransformKind::median_smooth: return "median_smooth:k=" + std::to_string(k);
    case TransformKind::downsample: return "downsample:rate=" + std::to_string(rate_hz);
    case TransformKind::lowpass: return "lowpass:cutoff=" + num(high_hz);
    case TransformKind::bandpass: return "bandpass:low=" + num(low_hz) + ",high=" + num(high_hz);
    case TransformKind::compress: return "compress:codec=" + codec + ",bitrate=" + std::to_string(bitrate_kbps);
  }
  return "none";
}

TransformSpec parse_transform(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  std::map<std::string, std::string> params;
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos || eq == 0) throw Error(Errc::invalid_argument, "malformed transform parameter '" + item + "' in " + text);
      params[item.substr(0, eq)] = item.substr(eq + 1);
    }
  }
  auto take = [&](const std::string& key) -> std::string {
    auto it = params.find(key);
    if (it == params.end()) throw Error(Errc::invalid_argument, text + ": missing parameter '" + key + "'");
    std::string v = it->second;
    params.erase(it);
    return v;
  };
  auto as_number = [&](const std::string& key) {
    const auto v = take(key);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || !std::isfinite(d))
      throw Error(Errc::invalid_argument, text + ": parameter '" + key + "' is not a number");
    return d;
  };
  auto as_int = [&](const std::string& key) {
    const double d = as_number(key);
    if (d != std::floor(d)) throw Error(Errc::invalid_argument, text + ": parameter '" + key + "' must be an integer");
    return static_cast<int>(d);
  };

  TransformSpec s;
  if (kind == "none" || kind == "identity") {
    s.kind = TransformKind::none;
  } else if (kind == "quantize") {
    s.kind = TransformKind::quantize;
    s.q = as_int("q");
  } else if (kind == "avg_smooth" || kind == "median_smooth") {
    s.kind = kind == "avg_smooth" ? TransformKind::avg_smooth : TransformKind::median_smooth;
    s.k = as_int("k");
  } else if (kind == "downsample") {
    s.kind = TransformKind::downsample;
    s.rate_hz = as_int("rate");
  } else if (kind == "lowpass") {
    s.kind = TransformKind::lowpass;
    s.high_hz = as_number("cutoff");
  } else if (kind == "bandpass") {
    s.kind = TransformKind::bandpass;
    s.low_hz = as_number("low");
    s.high_hz = as_number("high");
  } else if (kind == "compress") {
    s.kind = TransformKind::compress;
    s.codec = take("codec");
    if (params.count("bitrate")) s.bitrate_kbps = as_int("bitrate");
  } else {
    throw Error(Errc::invalid_argument, "unknown transform '" + kind + "'");
  }
  if (!params.empty()) throw Error(Errc::invalid_argument, text + ": unexpected parameter '" + params.begin()->first + "'");
  s.validate();
  return s;
}

std::vector<TransformSpec> parse_transform_list(const std::string& text) {
  std::vector<TransformSpec> out;
  std::string item;
  for (char c : text + ";") {
    if (c == ';' || std::isspace(static_cast<unsigned char>(c))) {
      if (!item.empty()) out.push_back(parse_transform(item));
      item.clear();
    } else {
      item += c;
    }
  }
  return out;
}

AudioWaveform apply_transform(const TransformSpec& spec, const AudioWaveform& w, const CodecRegistry& registry) {
  spec.validate(w.sample_rate());
  switch (spec.kind) {
    case TransformKind::none: return w;
    case TransformKind::quantize: return quantize(w, spec.q);
    case TransformKind::avg_smooth: return average_smooth(w, spec.k);
    case TransformKind::median_smooth: return median_smooth(w, spec.k);
    case TransformKind::downsample: return downsample_upsample(w, spec.rate_hz);
    case TransformKind::lowpass: return low_pass(w, spec.high_hz);
    case TransformKind::bandpass: return band_pass(w, spec.low_hz, spec.high_hz);
    case TransformKind::compress: return compress(w, spec.codec, spec.bitrate_kbps, registry);
  }
  return w;
}

}  // namespace advcaptcha
