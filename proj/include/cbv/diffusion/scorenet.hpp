#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbv/diffusion/schedule.hpp"
#include "cbv/encoders/dataset.hpp"
#include "cbv/numcore/checkpoint.hpp"
#include "cbv/numcore/graph.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::diffusion {

struct ScoreNetConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::size_t hidden = 16;
    std::size_t temb_dim = 8;
};

/// Sinusoidal step embedding: pairs (sin, cos) of t scaled by a geometric
/// frequency ladder from 1 down to 1/10000.
numcore::Tensor time_embedding(std::size_t t, std::size_t dim);

/// Small convolutional noise predictor eps_theta(x_t, t). Three same-padded
/// 3x3 stages at full resolution; the step enters as a learned per-channel
/// bias on the first stage, computed from the sinusoidal embedding.
class ScoreNet {
public:
    ScoreNet() = default;
    ScoreNet(ScoreNetConfig cfg, std::uint64_t seed);

    /// Appends the predictor to a program and returns the eps node, shaped
    /// like the image input. Parameters are shared across calls by name.
    numcore::NodeId build(numcore::Program& p, numcore::NodeId x, std::size_t t) const;

    numcore::Tensor predict(const numcore::Tensor& x_t, std::size_t t) const;

    const ScoreNetConfig& config() const { return cfg_; }
    numcore::ParamMap& params() { return params_; }
    const numcore::ParamMap& params() const { return params_; }
    bool trained() const { return trained_; }
    void set_trained(bool t) { trained_ = t; }

    void save(const std::string& path) const;
    static ScoreNet load(const std::string& path);

private:
    ScoreNetConfig cfg_;
    numcore::ParamMap params_;
    bool trained_ = false;
};

struct DiffusionTrainConfig {
    float lr = 2e-3f;
    std::size_t batch = 8;
    std::size_t epochs = 30;
    std::uint64_t seed = 0;
};

struct DiffusionTrainReport {
    std::vector<float> loss_history;  // mean noise-prediction MSE per epoch
    float holdout_loss = 0.0f;        // fixed-probe MSE after training
    float baseline_loss = 0.0f;       // same probe before any update
    std::size_t epochs_run = 0;
};

/// Noise-prediction training: draw (t, eps) per sample, corrupt, regress the
/// predictor onto eps with per-coordinate MSE. The holdout probe uses frozen
/// (t, eps) draws so the before/after losses are comparable. Throws
/// EmptyInput on an empty dataset and NonConvergence on a non-finite loss;
/// epochs = 0 only measures the baseline.
DiffusionTrainReport train_score(ScoreNet& net, const encoders::Dataset& data,
                                 const NoiseSchedule& sched, const DiffusionTrainConfig& cfg);

/// x_tilde = (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)
numcore::Tensor denoise_from_eps(const numcore::Tensor& x_t, const numcore::Tensor& eps,
                                 float alpha_bar_t);
numcore::Tensor denoise_estimate(const ScoreNet& net, const numcore::Tensor& x_t, std::size_t t,
                                 const NoiseSchedule& sched);

/// s = -eps / sqrt(1 - alpha_bar_t)
numcore::Tensor score_from_eps(const numcore::Tensor& eps, float alpha_bar_t);
numcore::Tensor base_score(const ScoreNet& net, const numcore::Tensor& x_t, std::size_t t,
                           const NoiseSchedule& sched);

}  // namespace cbv::diffusion
