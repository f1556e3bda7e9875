#include "cbv/numcore/rng.hpp"

#include <cmath>
#include <numbers>

namespace cbv::numcore {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix64(mix64(seed) ^ mix64(stream * 0xd6e8feb86659fd93ULL + 1)));
}

double Rng::uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::uniform_index(std::size_t n) {
    if (n == 0) throw Error("uniform_index: n must be positive");
    // Rejection sampling over the top multiple of n keeps the draw unbiased.
    std::uint64_t bound = ~0ULL - (~0ULL % n + 1) % n;
    for (;;) {
        std::uint64_t v = eng_();
        if (v <= bound) return static_cast<std::size_t>(v % n);
    }
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller on (0,1] x [0,1).
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

void Rng::fill_normal(Tensor& t, double stddev) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(normal() * stddev);
}

void Rng::fill_uniform(Tensor& t, double lo, double hi) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(uniform(lo, hi));
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    fill_normal(t, stddev);
    return t;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = uniform_index(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace cbv::numcore
