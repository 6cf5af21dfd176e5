#pragma once

// Every random stream is derived from the single run seed by labelled
// hashing, e.g. derive_seed(seed, "client", round, site_id). Streams are
// therefore independent of execution order.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <type_traits>

#include "fettl/paramset.hpp"

namespace fettl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace detail {
inline std::uint64_t mix(std::uint64_t h, std::string_view s) {
  return splitmix64(h ^ fnv1a(std::string(s)));
}
template <class T>
std::uint64_t mix(std::uint64_t h, const T& v) {
  if constexpr (std::is_convertible_v<T, std::string_view>) {
    return mix(h, std::string_view(v));
  } else {
    static_assert(std::is_integral_v<T>, "seed labels must be strings or integers");
    return splitmix64(h ^ splitmix64(static_cast<std::uint64_t>(v) + 0x632be59bd9b4e019ULL));
  }
}
}  // namespace detail

template <class... Labels>
std::uint64_t derive_seed(std::uint64_t seed, const Labels&... labels) {
  std::uint64_t h = splitmix64(seed);
  ((h = detail::mix(h, labels)), ...);
  return h;
}

template <class... Labels>
Rng make_rng(std::uint64_t seed, const Labels&... labels) {
  return Rng(derive_seed(seed, labels...));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return std::normal_distribution<double>(mean, sd)(rng);
}

inline bool bernoulli(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace fettl
