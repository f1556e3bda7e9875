#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cbv/numcore/tensor.hpp"

namespace cbv::numcore {

/// Deterministic random source. All distribution transforms are implemented
/// here rather than via <random> distributions, whose output is
/// implementation-defined; streams must be bit-stable across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    /// Independent child stream keyed by (seed, stream), e.g. one per record id.
    static Rng derive(std::uint64_t seed, std::uint64_t stream);

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    /// Uniform integer in [0, n) by rejection; n must be positive.
    std::size_t uniform_index(std::size_t n);

    /// Standard normal via Box-Muller; caches the spare draw.
    double normal();

    void fill_normal(Tensor& t, double stddev = 1.0);
    void fill_uniform(Tensor& t, double lo, double hi);
    Tensor normal_tensor(Shape shape, double stddev = 1.0);

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// splitmix64 finalizer; also used to mix seeds with stream ids.
std::uint64_t mix64(std::uint64_t x);

}  // namespace cbv::numcore
