#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace advcaptcha {

enum class Errc {
  malformed_wav,
  unsupported_encoding,
  io_error,
  missing_file,
  duplicate_id,
  empty_transcription,
  invalid_argument,
  short_waveform,
  shape_mismatch,
  infeasible_alignment,
  empty_corpus,
  divergence,
  non_finite_loss,
  empty_input,
  undefined_snr,
  unavailable_codec,
  precondition,
  offline_mode,
  auth_failure,
  timeout,
  quota,
  provider_error,
  budget_exhausted,
  out_of_challenges,
  unknown_challenge,
  replay,
  expired,
  no_data,
  bad_checkpoint,
};

std::string_view errc_name(Errc code) noexcept;

// All library failures surface as this exception; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace advcaptcha
