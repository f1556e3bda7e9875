#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cbv/encoders/classifier.hpp"
#include "cbv/encoders/dataset.hpp"
#include "cbv/encoders/dual_encoder.hpp"

namespace cbv::encoders {

struct LossGraph {
    std::vector<numcore::NodeId> inputs;  // one image input per batch element
    numcore::NodeId loss;                 // scalar
};

/// Symmetric in-batch contrastive loss: cosine similarities of image vs
/// label embeddings over the batch, divided by the temperature, with
/// cross-entropy against the diagonal in both directions.
LossGraph build_contrastive_loss(numcore::Program& p, const DualEncoder& enc,
                                 std::span<const Sample> batch, float temperature);

/// Mean cross-entropy of classifier scores against the batch labels.
LossGraph build_ce_loss(numcore::Program& p, const ConvClassifier& clf, std::span<const Sample> batch);

struct TrainConfig {
    float lr = 2e-3f;
    std::size_t batch = 16;
    std::size_t epochs = 20;
    float temperature = 0.1f;  // contrastive only
    std::uint64_t seed = 0;
};

struct TrainReport {
    std::vector<float> loss_history;  // mean loss per epoch
    float final_metric = 0.0f;        // alignment gap / held-out accuracy
    float chance = 0.0f;
    std::size_t epochs_run = 0;
};

/// Symmetric in-batch contrastive training of the image and label towers.
/// Throws SingleClassDataset for fewer than two distinct labels and
/// NonConvergence if the loss turns non-finite. epochs = 0 returns
/// immediately and leaves the untrained flag unset.
TrainReport train_dual_encoder(DualEncoder& enc, const Dataset& data, const TrainConfig& cfg);

/// Cross-entropy training of a CNN classifier; same error contract.
TrainReport train_classifier(ConvClassifier& clf, const Dataset& data, const TrainConfig& cfg);

/// Mean cosine of matched (image, label) pairs minus mean cosine of
/// mismatched pairs, over the held-out or the full dataset.
float alignment_gap(const DualEncoder& enc, const Dataset& data, bool holdout_only);

float accuracy(const ConvClassifier& clf, const Dataset& data, bool holdout_only);

}  // namespace cbv::encoders
