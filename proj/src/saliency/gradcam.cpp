#include "cbv/saliency/gradcam.hpp"

#include <algorithm>

#include "cbv/error.hpp"
#include "cbv/numcore/graph.hpp"
#include "cbv/numcore/kernels.hpp"

namespace cbv::saliency {

using namespace cbv::numcore;
using cbv::encoders::ClassifierConfig;
using cbv::encoders::ConvClassifier;

namespace {

// one forward/backward pass; returns (weights [K], post-relu maps [K,h,w])
std::pair<Tensor, Tensor> weights_and_maps(const ConvClassifier& clf, const Tensor& x,
                                           std::uint32_t c) {
    const ClassifierConfig& cfg = clf.config();
    if (c >= cfg.num_classes) {
        throw UnknownClass("class " + std::to_string(c) + " outside " +
                           std::to_string(cfg.num_classes) + " classes");
    }
    const Shape want{cfg.in_channels, cfg.image_size, cfg.image_size};
    if (!shape_eq(x.shape(), want)) {
        throw ShapeMismatch("image shape " + shape_str(x.shape()) + ", want " + shape_str(want));
    }

    Program p;
    NodeId img = p.input("x", want);
    p.set_input(img, x);
    auto fwd = clf.build(p, img);
    Tensor onehot = Tensor::zeros({cfg.num_classes});
    onehot.values()[c] = 1.0f;
    NodeId score_c = p.inner(fwd.scores, p.constant(std::move(onehot)));
    p.run_backward(score_c);

    const NodeId maps_node = fwd.conv_maps.back();
    Tensor g = p.gradient(maps_node);
    const Shape& ms = g.shape();
    const std::size_t K = ms[0], h = ms[1], w = ms[2];
    Tensor alpha = Tensor::zeros({K});
    for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) acc += static_cast<double>(g.at(k, i, j));
        }
        alpha.values()[k] = static_cast<float>(acc / static_cast<double>(h * w));
    }
    return {std::move(alpha), p.value(maps_node)};
}

void check_mask_shape(const Shape& s, const SaliencyMask& m, const char* what) {
    if (m.mask.rank() != 2) throw ShapeMismatch("mask must be rank 2");
    const std::size_t h = m.mask.shape()[0], w = m.mask.shape()[1];
    const bool ok = (s.size() == 2 && s[0] == h && s[1] == w) ||
                    (s.size() == 3 && s[1] == h && s[2] == w);
    if (!ok) {
        throw ShapeMismatch(std::string(what) + " shape " + shape_str(s) +
                            " does not match mask " + shape_str(m.mask.shape()));
    }
}

}  // namespace

Tensor gradcam_weights(const ConvClassifier& clf, const Tensor& x, std::uint32_t c) {
    return weights_and_maps(clf, x, c).first;
}

Heatmap gradcam_map(const Tensor& maps, const Tensor& weights, std::uint32_t cls) {
    if (maps.rank() != 3) throw ShapeMismatch("feature maps must be [K,h,w]");
    if (weights.rank() != 1 || weights.shape()[0] != maps.shape()[0]) {
        throw LengthMismatch("got " + std::to_string(weights.numel()) + " weights for " +
                             std::to_string(maps.shape()[0]) + " channels");
    }
    const std::size_t K = maps.shape()[0], h = maps.shape()[1], w = maps.shape()[2];
    Heatmap out;
    out.cls = cls;
    out.values = Tensor::zeros({h, w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                acc += static_cast<double>(weights.values()[k]) *
                       static_cast<double>(maps.at(k, i, j));
            }
            out.values.at(i, j) = acc > 0.0 ? static_cast<float>(acc) : 0.0f;
        }
    }
    return out;
}

Heatmap upsample_normalize(const Heatmap& h, std::size_t out_h, std::size_t out_w) {
    if (h.values.rank() != 2) throw ShapeMismatch("heatmap must be rank 2");
    const std::size_t sh = h.values.shape()[0], sw = h.values.shape()[1];
    if (out_h < sh || out_w < sw) {
        throw ShapeMismatch("upsample target " + std::to_string(out_h) + "x" +
                            std::to_string(out_w) + " smaller than source");
    }
    Heatmap out;
    out.cls = h.cls;
    out.values = Tensor::zeros({out_h, out_w});
    kernels::bilinear_resize(h.values.data(), out.values.data(), sh, sw, out_h, out_w);

    auto v = out.values.values();
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const float lo = *lo_it, hi = *hi_it;
    if (hi == lo) {
        out.values.fill(hi > 0.0f ? 1.0f : 0.0f);
        return out;
    }
    const float span = hi - lo;
    for (float& x : v) x = (x - lo) / span;
    return out;
}

SaliencyMask threshold_mask(const Heatmap& h, float tau) {
    if (!(tau >= 0.0f && tau <= 1.0f)) {
        throw BadThreshold("threshold " + std::to_string(tau) + " outside [0,1]");
    }
    SaliencyMask m;
    m.tau = tau;
    m.cls = h.cls;
    m.mask = Tensor::zeros(h.values.shape());
    auto src = h.values.values();
    auto dst = m.mask.values();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= tau ? 1.0f : 0.0f;
    return m;
}

Tensor fuse(const Tensor& x, const Tensor& generated, const SaliencyMask& m) {
    if (!shape_eq(x.shape(), generated.shape())) {
        throw ShapeMismatch("image " + shape_str(x.shape()) + " vs generated " +
                            shape_str(generated.shape()));
    }
    if (x.rank() != 3) throw ShapeMismatch("fuse expects [C,H,W] images");
    check_mask_shape(x.shape(), m, "image");
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Tensor out = x;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                if (m.mask.at(i, j) == 1.0f) out.at(c, i, j) = generated.at(c, i, j);
            }
        }
    }
    return out;
}

Tensor mask_project(const Tensor& g, const SaliencyMask& m) {
    check_mask_shape(g.shape(), m, "gradient");
    Tensor out = g;
    const std::size_t H = m.mask.shape()[0], W = m.mask.shape()[1];
    const std::size_t C = g.rank() == 3 ? g.shape()[0] : 1;
    float* o = out.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                if (m.mask.at(i, j) != 1.0f) o[(c * H + i) * W + j] = 0.0f;
            }
        }
    }
    return out;
}

SaliencyMask compute_mask(const ConvClassifier& clf, const Tensor& x, std::uint32_t c, float tau) {
    auto [alpha, maps] = weights_and_maps(clf, x, c);
    Heatmap raw = gradcam_map(maps, alpha, c);
    Heatmap up = upsample_normalize(raw, x.shape()[1], x.shape()[2]);
    return threshold_mask(up, tau);
}

}  // namespace cbv::saliency
