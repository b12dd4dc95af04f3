#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vas {

enum class Errc {
  // embstore
  bad_magic,
  version_mismatch,
  truncated_payload,
  zero_norm_row,
  dimension_overflow,
  io_failure,
  invalid_shape,
  parse_error,
  length_mismatch,
  id_mismatch,
  // scoring
  not_normalized,
  dim_mismatch,
  invalid_argument,
  // selection
  k_out_of_range,
  target_exceeds_stage1,
  target_exceeds_input,
  tau_zero,
  missing_ids,
  empty_stage,
  // optdesign
  singular_downdate,
  // theorysim
  config_invalid,
  subset_too_small,
  empty_test,
  degenerate_classes,
  combinatorial_blowup,
  shape_mismatch,
  degenerate_spectrum,
};

/// Broad failure class; the CLI maps these onto exit codes 1/2/3.
enum class ErrorClass { io, validation, numerical };

std::string_view errc_name(Errc code) noexcept;
ErrorClass error_class(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail);

  Errc code() const noexcept { return code_; }
  std::string_view name() const noexcept { return errc_name(code_); }

 private:
  Errc code_;
};

}  // namespace vas
