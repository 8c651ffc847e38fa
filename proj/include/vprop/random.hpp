#pragma once

#include <cstdint>
#include <random>

namespace vprop {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; derives well-separated seeds from small integers.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent generator for the stream identified by (seed, a, b, c).
inline Rng stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return Rng(mix64(mix64(mix64(mix64(seed) ^ a) ^ b) ^ c));
}

}  // namespace vprop
