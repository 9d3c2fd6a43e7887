#include "ruq/rng.hpp"

#include <bit>

namespace ruq {

std::uint64_t hash_row(std::span<const double> row) noexcept {
  std::uint64_t h = 0x9AE16A3B2F90404FULL;
  for (double v : row) h = hash_combine(h, std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace ruq
