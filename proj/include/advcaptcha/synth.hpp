#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "advcaptcha/audio.hpp"

namespace advcaptcha {

// Per-utterance voice characteristics for the desk-corpus synthesizer.
struct SpeakerProfile {
  double f0_hz = 120.0;
  double formant_scale = 1.0;
  double tempo = 1.0;        // >1 speaks faster
  double loudness = 3000.0;  // RMS of a vowel unit, sample units
  double noise_rms = 40.0;   // background noise
};

SpeakerProfile random_speaker(std::mt19937_64& rng);

// Formant/noise synthesizer that renders each letter of a transcription as a
// distinct acoustic unit, with pauses between words. It stands in for recorded
// speech so the desk corpus can ship as a manifest plus a seed.
AudioWaveform synthesize(const Transcription& text, const SpeakerProfile& speaker, std::uint64_t seed);

const std::vector<std::string>& desk_vocabulary();

// Random sentences of `min_words`..`max_words` vocabulary words.
std::vector<ManifestEntry> make_desk_manifest(int count, std::uint64_t seed, const std::string& id_prefix,
                                              int min_words = 6, int max_words = 8);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Renders every manifest entry to `out_dir`/<entry path> and copies the
// manifest next to the audio. Speaker and noise are derived from id and seed.
std::filesystem::path render_corpus(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                                    std::uint64_t seed);

}  // namespace advcaptcha
