#pragma once

#include <cstddef>
#include <vector>

#include "cbv/numcore/tensor.hpp"

namespace cbv::diffusion {

/// Linear variance schedule. beta[t-1] and alpha_bar[t-1] belong to step t,
/// t in [1,T]; alpha_bar is the running product of (1 - beta).
struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<float> beta;
    std::vector<float> alpha_bar;

    float beta_at(std::size_t t) const;
    float alpha_bar_at(std::size_t t) const;
};

NoiseSchedule build_schedule(std::size_t T, float beta_start, float beta_end);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z
numcore::Tensor forward_diffuse(const numcore::Tensor& x0, std::size_t t,
                                const NoiseSchedule& sched, const numcore::Tensor& z);

/// gamma_t = (1 - alpha_bar_t) * c
std::vector<float> default_gammas(const NoiseSchedule& sched, float c = 0.5f);

}  // namespace cbv::diffusion
