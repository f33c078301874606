// SPDX-License-Identifier: Apache-2.0
#include "glip/common.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include <cmath>
#include <limits>
#include <numeric>

namespace glip {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::TooManyTokens: return "TooManyTokens";
    case ErrorCode::CapTooSmall: return "CapTooSmall";
    case ErrorCode::PoolTooSmall: return "PoolTooSmall";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::PhraseCountMismatch: return "PhraseCountMismatch";
    case ErrorCode::NoValidElements: return "NoValidElements";
    case ErrorCode::EmptySpan: return "EmptySpan";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::TeacherLoadError: return "TeacherLoadError";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::SpecInfeasible: return "SpecInfeasible";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw Error(ErrorCode::InvalidArgument, "uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next());
  // rejection sampling removes modulo bias
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t draw = next();
  while (draw >= limit) draw = next();
  return lo + static_cast<std::int64_t>(draw % span);
}

double Rng::uniform() {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::vector<std::size_t> Rng::sample_indices(std::size_t n, std::size_t k) {
  if (k > n) throw Error(ErrorCode::InvalidArgument, "sample_indices: k > n");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(
        uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

ScopedFlushDenormals::ScopedFlushDenormals() {
#if defined(__SSE__)
  saved_ = _mm_getcsr();
  _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
#endif
}

ScopedFlushDenormals::~ScopedFlushDenormals() {
#if defined(__SSE__)
  _mm_setcsr(saved_);
#endif
}

}  // namespace glip
