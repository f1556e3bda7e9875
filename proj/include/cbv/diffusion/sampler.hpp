#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cbv/diffusion/schedule.hpp"
#include "cbv/diffusion/scorenet.hpp"
#include "cbv/encoders/dual_encoder.hpp"
#include "cbv/numcore/tensor.hpp"
#include "cbv/saliency/gradcam.hpp"

namespace cbv::diffusion {

enum class InitMode { PureNoise, ForwardFromClean };

struct SamplerConfig {
    std::size_t T = 50;
    std::vector<float> gammas;   // empty selects (1 - alpha_bar_t) / 2
    float lambda_img = 5.0f;
    float lambda_txt = 2.0f;
    InitMode init = InitMode::ForwardFromClean;
    std::size_t t_star = 0;      // forward-from-clean start; 0 selects 0.6 T
    std::uint64_t seed = 0;
    bool exact_guidance = true;  // differentiate through the denoiser
};

struct StepRecord {
    std::size_t t = 0;
    double x_max = 0.0;       // max |x_t| entering the step
    double xtilde_max = 0.0;  // max |x_tilde| at the step
    double g_img_norm = 0.0;
    double g_txt_norm = 0.0;
};

struct TrajectoryLog {
    bool record_states = false;
    std::vector<StepRecord> steps;
    std::vector<numcore::Tensor> states;  // x after each update, if recorded
};

/// Per-step norms as a JSON document, newest step last.
std::string trajectory_json(const TrajectoryLog& log);

/// Gradients of the image/image and image/label similarities at x_t, taken
/// through the one-step denoised estimate and the image encoder. Raw scores:
/// no guidance weight, no mask. With exact = false the denoised estimate is
/// treated as constant-Jacobian apart from the 1/sqrt(alpha_bar) factor.
std::pair<numcore::Tensor, numcore::Tensor> guidance_grads(
    const encoders::DualEncoder& enc, const ScoreNet& net, const numcore::Tensor& x_t,
    std::size_t t, const NoiseSchedule& sched, const numcore::Tensor& x_trig,
    std::uint32_t y_trig, bool exact = true);

/// base + mask (lambda_img g_img + lambda_txt g_txt), applied only where the
/// mask is one. Both weights zero returns base unchanged.
numcore::Tensor guided_score(const numcore::Tensor& base, const numcore::Tensor& g_img,
                             const numcore::Tensor& g_txt, const saliency::SaliencyMask& mask,
                             float lambda_img, float lambda_txt);

/// x + (gamma s + sqrt(2 gamma) z); the Langevin update.
numcore::Tensor reverse_step(const numcore::Tensor& x_t, const numcore::Tensor& score,
                             float gamma, const numcore::Tensor& z);

/// Reverse diffusion from the chosen start, guided toward the trigger pair
/// inside the mask, then fused with the clean image so pixels outside the
/// mask are untouched. An all-zero mask returns x0 immediately.
numcore::Tensor generate_poison(const numcore::Tensor& x0, const numcore::Tensor& x_trig,
                                std::uint32_t y_trig, const saliency::SaliencyMask& mask,
                                const ScoreNet& net, const encoders::DualEncoder& enc,
                                const NoiseSchedule& sched, const SamplerConfig& cfg,
                                TrajectoryLog* log = nullptr);

}  // namespace cbv::diffusion
