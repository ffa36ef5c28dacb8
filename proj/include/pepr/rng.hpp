#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace pepr::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Child seed that depends only on (parent, tag, index), so independent streams
// can be derived without consuming a shared generator.
inline std::uint64_t derive(std::uint64_t parent, std::string_view tag, std::uint64_t index = 0) {
  return splitmix64(splitmix64(parent ^ hash_tag(tag)) + index);
}

using Engine = std::mt19937_64;

inline Engine engine(std::uint64_t seed) { return Engine(seed); }

inline double uniform(Engine& eng, double lo, double hi) {
  // Hand-rolled so streams match across standard library implementations.
  const double u = static_cast<double>(eng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

inline std::size_t index_below(Engine& eng, std::size_t n) {
  return static_cast<std::size_t>(uniform(eng, 0.0, static_cast<double>(n)));
}

}  // namespace pepr::rng

namespace pepr::rng {

// Box-Muller, one draw per call.
inline double normal(Engine& eng, double mean = 0.0, double stddev = 1.0) {
  double u1 = uniform(eng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(eng, 0.0, 1.0);
  const double u2 = uniform(eng, 0.0, 1.0);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace pepr::rng
