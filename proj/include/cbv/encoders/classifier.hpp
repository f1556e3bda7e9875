#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbv/numcore/checkpoint.hpp"
#include "cbv/numcore/graph.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::encoders {

struct ClassifierConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::size_t num_classes = 0;
    /// Conv widths. Every conv except the last is followed by 2x2 average
    /// pooling, so the last layer's maps keep the spatial size they enter at.
    std::vector<std::size_t> channels = {8, 16, 16};
};

struct ClassifierForward {
    numcore::NodeId scores;                   // [num_classes]
    std::vector<numcore::NodeId> conv_maps;   // post-relu maps per conv layer
};

/// Plain CNN classifier. Used both as the saliency surrogate and, with a
/// different width/depth configuration, as the victim model.
class ConvClassifier {
public:
    ConvClassifier() = default;
    ConvClassifier(ClassifierConfig cfg, std::uint64_t seed);

    ClassifierForward build(numcore::Program& p, numcore::NodeId image) const;

    numcore::Tensor scores(const numcore::Tensor& image) const;
    numcore::Tensor probabilities(const numcore::Tensor& image) const;
    std::uint32_t predict(const numcore::Tensor& image) const;
    /// Post-relu activation maps of one conv layer together with the scores
    /// from the very same forward pass.
    std::pair<numcore::Tensor, numcore::Tensor> feature_maps_and_scores(const numcore::Tensor& image,
                                                                        std::size_t layer) const;
    /// Spatial extent of the given conv layer's maps.
    std::size_t layer_spatial(std::size_t layer) const;

    const ClassifierConfig& config() const { return cfg_; }
    numcore::ParamMap& params() { return params_; }
    const numcore::ParamMap& params() const { return params_; }
    bool trained() const { return trained_; }
    void set_trained(bool t) { trained_ = t; }

    void save(const std::string& path) const;
    static ConvClassifier load(const std::string& path);

private:
    ClassifierConfig cfg_;
    numcore::ParamMap params_;
    bool trained_ = false;
};

}  // namespace cbv::encoders
