#pragma once

#include <cstdint>
#include <vector>

#include "cbv/encoders/classifier.hpp"
#include "cbv/encoders/train.hpp"
#include "cbv/harness/manifest.hpp"
#include "cbv/trigger/uap.hpp"

namespace cbv::harness {

/// The victim never shares widths, depth, or weights with the surrogate
/// classifier; the attacker is assumed to know nothing about it.
struct VictimConfig {
    std::vector<std::size_t> channels = {10, 20};
    std::uint64_t init_seed = 1;
    encoders::TrainConfig train;
};

/// Cross-entropy training on the manifest's train split.
encoders::ConvClassifier train_victim(const DatasetManifest& m, const VictimConfig& cfg);

struct AsrReport {
    std::size_t success = 0;
    std::size_t total = 0;
    double asr = 0.0;  // exactly success / total
};

/// Fraction of triggered original-class test images the victim maps to the
/// target label.
AsrReport eval_asr(const encoders::ConvClassifier& victim, const DatasetManifest& m,
                   const trigger::UapTrigger& trig, std::uint32_t original, std::uint32_t target);

struct CleanReport {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy = 0.0;
};

/// Plain accuracy over the untouched test split.
CleanReport eval_clean(const encoders::ConvClassifier& victim, const DatasetManifest& m);

}  // namespace cbv::harness
