#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbv/diffusion/sampler.hpp"
#include "cbv/encoders/classifier.hpp"
#include "cbv/encoders/dual_encoder.hpp"
#include "cbv/harness/manifest.hpp"
#include "cbv/trigger/uap.hpp"

namespace cbv::harness {

/// Which training records get regenerated, and under what knobs. Labels and
/// captions are never rewritten; the attack only touches pixels.
struct PoisonPlan {
    std::uint32_t original = 0;  // concept whose triggered images should flip
    std::uint32_t target = 0;    // concept the victim should emit instead
    float rate = 0.05f;          // fraction of eligible train records
    float tau = 0.5f;            // saliency mask threshold
    std::uint64_t seed = 0;
    bool any_class = false;  // sensitivity study: select across all classes
    std::vector<std::uint64_t> selected;  // ascending record ids
    std::string trigger_ref;  // informational provenance strings
    std::string sampler_ref;
};

/// Seeded sampling without replacement from the train records of the
/// original class (all classes with any_class). |selected| = round(rate * n).
PoisonPlan plan_poison(const DatasetManifest& m, std::uint32_t original, std::uint32_t target,
                       float rate, std::uint64_t seed, bool any_class = false);

void save_plan(const PoisonPlan& plan, const std::string& path);
PoisonPlan load_plan(const std::string& path);

struct PoisonProvenance {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;          // per-image sampler stream
    double mask_fraction = 0.0;      // share of pixels the mask opened
    std::string sha256;              // digest of the written PNG
};

struct PoisonOutput {
    DatasetManifest manifest;  // saved to out_dir/manifest.json
    std::vector<PoisonProvenance> images;  // selected ids, ascending
};

/// Replay the whole per-image pipeline (trigger, saliency mask, guided
/// reverse diffusion) for every selected record and write a new dataset
/// tree under out_dir. Non-selected images are copied byte for byte; ids,
/// labels, captions, and splits carry over unchanged. Images are processed
/// in parallel; every image draws from a stream keyed by (plan seed, record
/// id), so scheduling cannot change the output bytes.
PoisonOutput build_poisoned_dataset(const DatasetManifest& in, const PoisonPlan& plan,
                                    const trigger::UapTrigger& trig,
                                    const encoders::DualEncoder& enc,
                                    const encoders::ConvClassifier& surrogate,
                                    const diffusion::ScoreNet& net,
                                    const diffusion::NoiseSchedule& sched,
                                    const diffusion::SamplerConfig& sampler,
                                    const std::string& out_dir);

}  // namespace cbv::harness
