#pragma once

#include <cstdint>

#include "cbv/encoders/classifier.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::saliency {

struct Heatmap {
    numcore::Tensor values;  // [h,w]; nonnegative pre-upsample, [0,1] after normalization
    std::uint32_t cls = 0;
};

struct SaliencyMask {
    numcore::Tensor mask;  // [H,W], every entry exactly 0 or 1
    float tau = 0.5f;
    std::uint32_t cls = 0;
};

/// Channel weights: spatial mean of d score_c / d A_k over the last conv
/// layer's post-relu maps. Returns one weight per channel.
numcore::Tensor gradcam_weights(const encoders::ConvClassifier& clf, const numcore::Tensor& x,
                                std::uint32_t c);

/// ReLU of the weight-combined channel maps.
Heatmap gradcam_map(const numcore::Tensor& maps, const numcore::Tensor& weights, std::uint32_t cls);

/// Corner-aligned bilinear upsample to H x W followed by min-max scaling.
/// A flat map collapses to all-zeros (if identically 0) or all-ones.
Heatmap upsample_normalize(const Heatmap& h, std::size_t out_h, std::size_t out_w);

SaliencyMask threshold_mask(const Heatmap& h, float tau);

/// Per-pixel select: mask==1 takes `generated`, mask==0 keeps `x` bit-exact.
numcore::Tensor fuse(const numcore::Tensor& x, const numcore::Tensor& generated,
                     const SaliencyMask& m);

/// Zeroes g outside the mask, keeps it bit-exact inside. Accepts [H,W] or
/// [C,H,W] tensors; the mask broadcasts across channels.
numcore::Tensor mask_project(const numcore::Tensor& g, const SaliencyMask& m);

/// Whole chain in one classifier forward/backward: weights, map, upsample to
/// the image resolution, threshold.
SaliencyMask compute_mask(const encoders::ConvClassifier& clf, const numcore::Tensor& x,
                          std::uint32_t c, float tau);

}  // namespace cbv::saliency
