#pragma once

#include <cstdint>
#include <string>

#include "cbv/numcore/checkpoint.hpp"
#include "cbv/numcore/graph.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::encoders {

struct EncoderConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::size_t embed_dim = 32;
    std::size_t c1 = 8, c2 = 16, c3 = 16;  // conv widths
    std::size_t num_labels = 0;            // label vocabulary size
};

/// Contrastive image/label embedding pair. The image side is a three stage
/// CNN ending in an affine map onto the unit sphere; the label side is an
/// embedding table, also normalized. Both sides share one parameter store so
/// a single optimizer step updates the pair.
class DualEncoder {
public:
    DualEncoder() = default;
    DualEncoder(EncoderConfig cfg, std::uint64_t seed);

    /// Appends the image branch to a program and returns the unit-norm
    /// embedding node. Parameters are shared across calls by name.
    numcore::NodeId build_image(numcore::Program& p, numcore::NodeId image) const;
    /// Embedding node for one label id.
    numcore::NodeId build_label(numcore::Program& p, std::uint32_t label) const;

    numcore::Tensor encode_image(const numcore::Tensor& image) const;
    numcore::Tensor encode_label(std::uint32_t label) const;

    const EncoderConfig& config() const { return cfg_; }
    numcore::ParamMap& params() { return params_; }
    const numcore::ParamMap& params() const { return params_; }
    bool trained() const { return trained_; }
    void set_trained(bool t) { trained_ = t; }

    void save(const std::string& path) const;
    static DualEncoder load(const std::string& path);

private:
    EncoderConfig cfg_;
    numcore::ParamMap params_;
    bool trained_ = false;
};

}  // namespace cbv::encoders
