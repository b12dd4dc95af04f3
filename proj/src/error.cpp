#include "vas/error.hpp"

namespace vas {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::bad_magic: return "BadMagic";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::truncated_payload: return "TruncatedPayload";
    case Errc::zero_norm_row: return "ZeroNormRow";
    case Errc::dimension_overflow: return "DimensionOverflow";
    case Errc::io_failure: return "IoFailure";
    case Errc::invalid_shape: return "InvalidShape";
    case Errc::parse_error: return "ParseError";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::id_mismatch: return "IdMismatch";
    case Errc::not_normalized: return "NotNormalized";
    case Errc::dim_mismatch: return "DimMismatch";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::k_out_of_range: return "KOutOfRange";
    case Errc::target_exceeds_stage1: return "TargetExceedsStage1";
    case Errc::target_exceeds_input: return "TargetExceedsInput";
    case Errc::tau_zero: return "TauZero";
    case Errc::missing_ids: return "MissingIds";
    case Errc::empty_stage: return "EmptyStage";
    case Errc::singular_downdate: return "SingularDowndate";
    case Errc::config_invalid: return "ConfigInvalid";
    case Errc::subset_too_small: return "SubsetTooSmall";
    case Errc::empty_test: return "EmptyTest";
    case Errc::degenerate_classes: return "DegenerateClasses";
    case Errc::combinatorial_blowup: return "CombinatorialBlowup";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::degenerate_spectrum: return "DegenerateSpectrum";
  }
  return "Unknown";
}

ErrorClass error_class(Errc code) noexcept {
  switch (code) {
    case Errc::io_failure:
      return ErrorClass::io;
    case Errc::singular_downdate:
    case Errc::degenerate_spectrum:
      return ErrorClass::numerical;
    default:
      return ErrorClass::validation;
  }
}

Error::Error(Errc code, const std::string& detail)
    : std::runtime_error(detail.empty() ? std::string(errc_name(code))
                                        : std::string(errc_name(code)) + ": " + detail),
      code_(code) {}

}  // namespace vas
