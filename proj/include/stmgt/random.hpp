#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "stmgt/tensor.hpp"

namespace stmgt {

/// Derives an independent child seed from (seed, label). Used to give every
/// named parameter and every permutation repetition its own stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

/// Uniform double in [0, 1) from 53 random bits, identical on every platform.
double uniform01(std::mt19937_64& rng);

/// Standard normal via Box-Muller on uniform01 (platform-stable).
double standard_normal(std::mt19937_64& rng);

/// Glorot-uniform fill for a 2-D weight of shape (fan_in x fan_out).
Tensor glorot_uniform(const Shape& shape, std::mt19937_64& rng);

/// Fisher-Yates permutation of [0, n) driven by uniform01.
std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng);

}  // namespace stmgt
