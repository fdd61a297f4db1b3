#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace lsmia {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;
using Labels = Eigen::VectorXi;

// Error hierarchy. Each maps onto a distinct CLI exit status.

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(int epoch, const std::string& what)
      : NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent seed streams.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for sub-stream `stream` (and optional index) of a run seeded with `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) noexcept {
  return mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ index);
}

// Stream identifiers for derive_seed.
namespace streams {
inline constexpr std::uint64_t kInit = 0x11;
inline constexpr std::uint64_t kShuffle = 0x12;
inline constexpr std::uint64_t kData = 0x21;
inline constexpr std::uint64_t kSplit = 0x22;
inline constexpr std::uint64_t kAux = 0x23;
inline constexpr std::uint64_t kPool = 0x31;
inline constexpr std::uint64_t kStage1 = 0x32;
inline constexpr std::uint64_t kStage3 = 0x33;
inline constexpr std::uint64_t kStart = 0x34;
inline constexpr std::uint64_t kAdversarial = 0x41;
inline constexpr std::uint64_t kTargets = 0x42;
inline constexpr std::uint64_t kEvalModel = 0x51;
inline constexpr std::uint64_t kSurrogate = 0x52;
}  // namespace streams

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

/// Index of the largest entry; first index wins on ties.
template <typename Derived>
Index argmax(const Eigen::DenseBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

}  // namespace lsmia
