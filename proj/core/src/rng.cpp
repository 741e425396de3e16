#include "beliefqa/rng.hpp"

#include <cmath>
#include <numbers>

#include "beliefqa/errors.hpp"

namespace beliefqa {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t Rng::derive(std::uint64_t master, std::string_view purpose,
                          std::uint64_t index) {
  std::uint64_t h = splitmix64(master ^ fnv1a64(purpose));
  return splitmix64(h ^ splitmix64(index));
}

double Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Rng::below: n must be positive");
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = gen_();
  while (v >= limit) v = gen_();
  return v % n;
}

}  // namespace beliefqa
