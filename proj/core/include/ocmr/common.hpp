#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace ocmr {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  non_finite,
  insufficient_history,
  io,
  format,
  metadata_mismatch,
  diverged,
  stale_tape,
  numerical,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library. what() is "<code>: <message>", which the
// CLI prints verbatim after an "error: " prefix.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);
  [[nodiscard]] ErrorCode code() const noexcept { return code_; }
  [[nodiscard]] const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// splitmix64 finalizer; used to derive independent stream seeds from a run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0);

// Uniform double in [0, 1) from the top 53 bits of a 64-bit engine draw.
template <typename Engine>
double uniform01(Engine& engine) {
  return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

}  // namespace ocmr
