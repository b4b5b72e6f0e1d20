#include "ocmr/common.hpp"

namespace ocmr {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::insufficient_history: return "insufficient_history";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::metadata_mismatch: return "metadata_mismatch";
    case ErrorCode::diverged: return "diverged";
    case ErrorCode::stale_tape: return "stale_tape";
    case ErrorCode::numerical: return "numerical";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code),
      message_(message) {}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto step = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return step(step(step(seed) ^ a) ^ b);
}

}  // namespace ocmr
