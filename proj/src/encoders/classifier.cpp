#include "cbv/encoders/classifier.hpp"

#include <cmath>

#include "cbv/numcore/rng.hpp"

namespace cbv::encoders {

using namespace cbv::numcore;

ConvClassifier::ConvClassifier(ClassifierConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.num_classes == 0) throw BadConfig("ConvClassifier: num_classes must be positive");
    if (cfg_.channels.empty()) throw BadConfig("ConvClassifier: need at least one conv layer");
    std::size_t spatial = cfg_.image_size;
    std::size_t cin = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
        Rng r = Rng::derive(seed, i);
        const std::size_t cout = cfg_.channels[i];
        Tensor w({cout, cin, 3, 3});
        r.fill_normal(w, std::sqrt(2.0 / static_cast<double>(cin * 9)));
        params_.emplace("conv" + std::to_string(i) + ".w", std::move(w));
        params_.emplace("conv" + std::to_string(i) + ".b", Tensor({cout}));
        cin = cout;
        if (i + 1 < cfg_.channels.size()) {
            if (spatial % 2 != 0) throw BadConfig("ConvClassifier: spatial size not divisible by 2");
            spatial /= 2;
        }
    }
    const std::size_t flat = cin * spatial * spatial;
    Rng rh = Rng::derive(seed, 1000);
    Tensor hw({cfg_.num_classes, flat});
    rh.fill_normal(hw, std::sqrt(1.0 / static_cast<double>(flat)));
    params_.emplace("head.w", std::move(hw));
    params_.emplace("head.b", Tensor({cfg_.num_classes}));
}

std::size_t ConvClassifier::layer_spatial(std::size_t layer) const {
    if (layer >= cfg_.channels.size()) {
        throw BadConfig("layer " + std::to_string(layer) + " out of range");
    }
    std::size_t spatial = cfg_.image_size;
    for (std::size_t i = 0; i < layer; ++i) spatial /= 2;
    return spatial;
}

ClassifierForward ConvClassifier::build(Program& p, NodeId image) const {
    auto P = [&](const std::string& name) { return p.parameter(name, params_.at(name)); };
    ClassifierForward out;
    NodeId h = image;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
        const std::string base = "conv" + std::to_string(i);
        NodeId act = p.relu(p.channel_bias(p.conv2d(h, P(base + ".w")), P(base + ".b")));
        out.conv_maps.push_back(act);
        h = (i + 1 < cfg_.channels.size()) ? p.avg_pool2d(act, 2) : act;
    }
    const Shape& hs = p.shape_of(h);
    NodeId flat = p.reshape(h, {hs[0] * hs[1] * hs[2]});
    out.scores = p.add(p.matmul(P("head.w"), flat), P("head.b"));
    return out;
}

Tensor ConvClassifier::scores(const Tensor& image) const {
    Program p;
    NodeId x = p.input("x", {cfg_.in_channels, cfg_.image_size, cfg_.image_size});
    ClassifierForward f = build(p, x);
    p.set_input(x, image);
    return p.value(f.scores);
}

Tensor ConvClassifier::probabilities(const Tensor& image) const {
    Program p;
    NodeId x = p.input("x", {cfg_.in_channels, cfg_.image_size, cfg_.image_size});
    ClassifierForward f = build(p, x);
    NodeId probs = p.softmax(f.scores);
    p.set_input(x, image);
    return p.value(probs);
}

std::uint32_t ConvClassifier::predict(const Tensor& image) const {
    Tensor s = scores(image);
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < s.numel(); ++c) {
        if (s[c] > s[best]) best = c;
    }
    return best;
}

std::pair<Tensor, Tensor> ConvClassifier::feature_maps_and_scores(const Tensor& image,
                                                                  std::size_t layer) const {
    if (layer >= cfg_.channels.size()) {
        throw BadConfig("layer " + std::to_string(layer) + " out of range");
    }
    Program p;
    NodeId x = p.input("x", {cfg_.in_channels, cfg_.image_size, cfg_.image_size});
    ClassifierForward f = build(p, x);
    p.set_input(x, image);
    return {p.value(f.conv_maps[layer]), p.value(f.scores)};
}

void ConvClassifier::save(const std::string& path) const {
    ParamMap m = params_;
    std::vector<float> meta = {static_cast<float>(cfg_.in_channels), static_cast<float>(cfg_.image_size),
                               static_cast<float>(cfg_.num_classes), trained_ ? 1.0f : 0.0f,
                               static_cast<float>(cfg_.channels.size())};
    for (std::size_t c : cfg_.channels) meta.push_back(static_cast<float>(c));
    const std::size_t n_meta = meta.size();
    m.emplace("__meta__", Tensor({n_meta}, std::move(meta)));
    save_checkpoint(path, m);
}

ConvClassifier ConvClassifier::load(const std::string& path) {
    ParamMap m = load_checkpoint(path);
    auto it = m.find("__meta__");
    if (it == m.end() || it->second.numel() < 5) {
        throw CheckpointError("not a classifier checkpoint: " + path);
    }
    const Tensor& meta = it->second;
    ConvClassifier c;
    c.cfg_.in_channels = static_cast<std::size_t>(meta[0]);
    c.cfg_.image_size = static_cast<std::size_t>(meta[1]);
    c.cfg_.num_classes = static_cast<std::size_t>(meta[2]);
    c.trained_ = meta[3] != 0.0f;
    const std::size_t n_layers = static_cast<std::size_t>(meta[4]);
    if (meta.numel() != 5 + n_layers) throw CheckpointError("corrupt classifier metadata: " + path);
    c.cfg_.channels.clear();
    for (std::size_t i = 0; i < n_layers; ++i) {
        c.cfg_.channels.push_back(static_cast<std::size_t>(meta[5 + i]));
    }
    m.erase(it);
    c.params_ = std::move(m);
    return c;
}

}  // namespace cbv::encoders
