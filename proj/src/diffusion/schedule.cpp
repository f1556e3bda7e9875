#include "cbv/diffusion/schedule.hpp"

#include <cmath>
#include <string>

namespace cbv::diffusion {

using namespace cbv::numcore;

namespace {

void check_step(std::size_t t, std::size_t T) {
    if (t < 1 || t > T) {
        throw BadStep("step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
}

}  // namespace

float NoiseSchedule::beta_at(std::size_t t) const {
    check_step(t, T);
    return beta[t - 1];
}

float NoiseSchedule::alpha_bar_at(std::size_t t) const {
    check_step(t, T);
    return alpha_bar[t - 1];
}

NoiseSchedule build_schedule(std::size_t T, float beta_start, float beta_end) {
    if (T == 0) throw BadRange("schedule needs at least one step");
    if (!(beta_start > 0.0f) || !(beta_start <= beta_end) || !(beta_end < 1.0f)) {
        throw BadRange("need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        s.beta[i] = static_cast<float>(beta_start + (double(beta_end) - double(beta_start)) * frac);
        prod *= 1.0 - static_cast<double>(s.beta[i]);
        s.alpha_bar[i] = static_cast<float>(prod);
    }
    return s;
}

Tensor forward_diffuse(const Tensor& x0, std::size_t t, const NoiseSchedule& sched,
                       const Tensor& z) {
    if (!x0.same_shape(z)) {
        throw ShapeMismatch("forward_diffuse: x0 " + shape_str(x0.shape()) + " vs z " +
                            shape_str(z.shape()));
    }
    const double ab = sched.alpha_bar_at(t);
    const float a = static_cast<float>(std::sqrt(ab));
    const float b = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * z[i];
    return out;
}

std::vector<float> default_gammas(const NoiseSchedule& sched, float c) {
    std::vector<float> g(sched.T);
    for (std::size_t i = 0; i < sched.T; ++i) {
        g[i] = static_cast<float>((1.0 - static_cast<double>(sched.alpha_bar[i])) *
                                  static_cast<double>(c));
    }
    return g;
}

}  // namespace cbv::diffusion
