#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace watt {

using Rng = std::mt19937_64;

// Derives an independent seed for a named sub-stream of a root seed, so that
// adding draws to one stream never perturbs another.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index);

inline Rng make_rng(std::uint64_t root, std::string_view stream) { return Rng(derive_seed(root, stream)); }

}  // namespace watt
