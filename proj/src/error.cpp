#include "advcaptcha/error.hpp"

namespace advcaptcha {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::malformed_wav: return "malformed_wav";
    case Errc::unsupported_encoding: return "unsupported_encoding";
    case Errc::io_error: return "io_error";
    case Errc::missing_file: return "missing_file";
    case Errc::duplicate_id: return "duplicate_id";
    case Errc::empty_transcription: return "empty_transcription";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::short_waveform: return "short_waveform";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::infeasible_alignment: return "infeasible_alignment";
    case Errc::empty_corpus: return "empty_corpus";
    case Errc::divergence: return "divergence";
    case Errc::non_finite_loss: return "non_finite_loss";
    case Errc::empty_input: return "empty_input";
    case Errc::undefined_snr: return "undefined_snr";
    case Errc::unavailable_codec: return "unavailable_codec";
    case Errc::precondition: return "precondition";
    case Errc::offline_mode: return "offline_mode";
    case Errc::auth_failure: return "auth_failure";
    case Errc::timeout: return "timeout";
    case Errc::quota: return "quota";
    case Errc::provider_error: return "provider_error";
    case Errc::budget_exhausted: return "budget_exhausted";
    case Errc::out_of_challenges: return "out_of_challenges";
    case Errc::unknown_challenge: return "unknown_challenge";
    case Errc::replay: return "replay";
    case Errc::expired: return "expired";
    case Errc::no_data: return "no_data";
    case Errc::bad_checkpoint: return "bad_checkpoint";
  }
  return "unknown";
}

}  // namespace advcaptcha
