#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cbv/encoders/dataset.hpp"
#include "cbv/encoders/dual_encoder.hpp"
#include "cbv/numcore/graph.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::trigger {

enum class NormType { LInf, L2 };

struct UapConfig {
    NormType norm = NormType::LInf;
    float rho = 8.0f / 255.0f;
    float eta = 1.0f / 255.0f;
    std::size_t iterations = 300;
    std::uint64_t seed = 0;
};

/// Reusable universal perturbation. `delta` always satisfies the configured
/// norm bound; it is stored unclipped so it can be applied to any image.
struct UapTrigger {
    numcore::Tensor delta;
    UapConfig cfg;
    /// Mean image-label alignment at the initial point and after every
    /// update (iterations + 1 entries).
    std::vector<double> alignment_history;
};

struct AlignmentReport {
    std::vector<double> with_trigger;
    std::vector<double> without_trigger;
    double mean_with = 0.0;
    double mean_without = 0.0;
};

/// Sign-descent PGD on the given alignment scalar. `value` holds the
/// perturbation bound to the `delta` input node; on return it is the
/// best (lowest-alignment) iterate seen, which makes the "never worse
/// than the start" guarantee structural. Returns the raw per-iterate
/// alignment series. Throws BadConfig on invalid settings and
/// DivergedLoss when the alignment becomes non-finite.
std::vector<double> pgd_minimize_alignment(numcore::Program& p, numcore::NodeId delta,
                                           numcore::NodeId alignment, numcore::Tensor& value,
                                           const UapConfig& cfg);

/// Learns one perturbation over the whole pair set by driving the mean
/// embedding alignment down with projected sign steps.
UapTrigger generate_uap(const encoders::DualEncoder& enc, std::span<const encoders::Sample> pairs,
                        const UapConfig& cfg);

/// Ablation baseline: a random perturbation rescaled so its norm equals the
/// configured bound exactly. No optimization, no alignment history.
UapTrigger random_trigger(const numcore::Shape& shape, const UapConfig& cfg);

/// clip(x + delta, 0, 1); never mutates the trigger.
numcore::Tensor apply_trigger(const numcore::Tensor& x, const UapTrigger& trig);

AlignmentReport alignment_report(const encoders::DualEncoder& enc,
                                 std::span<const encoders::Sample> pairs, const UapTrigger& trig);

void save_trigger(const UapTrigger& trig, const std::string& ckpt_path, const std::string& json_path);
UapTrigger load_trigger(const std::string& ckpt_path, const std::string& json_path);

}  // namespace cbv::trigger
