#include "cbv/encoders/dual_encoder.hpp"

#include <cmath>

#include "cbv/numcore/rng.hpp"

namespace cbv::encoders {

using namespace cbv::numcore;

namespace {

Tensor he_init(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    rng.fill_normal(t, std::sqrt(2.0 / static_cast<double>(fan_in)));
    return t;
}

}  // namespace

DualEncoder::DualEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.num_labels == 0) throw BadConfig("DualEncoder: num_labels must be positive");
    if (cfg_.image_size % 8 != 0) throw BadConfig("DualEncoder: image_size must be divisible by 8");
    Rng r0 = Rng::derive(seed, 0);
    Rng r1 = Rng::derive(seed, 1);
    Rng r2 = Rng::derive(seed, 2);
    Rng r3 = Rng::derive(seed, 3);
    Rng r4 = Rng::derive(seed, 4);
    const std::size_t s8 = cfg_.image_size / 8;
    const std::size_t flat = cfg_.c3 * s8 * s8;
    params_.emplace("img.conv1.w", he_init({cfg_.c1, cfg_.in_channels, 3, 3}, cfg_.in_channels * 9, r0));
    params_.emplace("img.conv1.b", Tensor({cfg_.c1}));
    params_.emplace("img.conv2.w", he_init({cfg_.c2, cfg_.c1, 3, 3}, cfg_.c1 * 9, r1));
    params_.emplace("img.conv2.b", Tensor({cfg_.c2}));
    params_.emplace("img.conv3.w", he_init({cfg_.c3, cfg_.c2, 3, 3}, cfg_.c2 * 9, r2));
    params_.emplace("img.conv3.b", Tensor({cfg_.c3}));
    params_.emplace("img.fc.w", he_init({cfg_.embed_dim, flat}, flat, r3));
    params_.emplace("img.fc.b", Tensor({cfg_.embed_dim}));
    Tensor table({cfg_.num_labels, cfg_.embed_dim});
    r4.fill_normal(table, 1.0);
    params_.emplace("lab.table", table);
}

NodeId DualEncoder::build_image(Program& p, NodeId image) const {
    auto P = [&](const char* name) { return p.parameter(name, params_.at(name)); };
    NodeId h = image;
    h = p.avg_pool2d(p.relu(p.channel_bias(p.conv2d(h, P("img.conv1.w")), P("img.conv1.b"))), 2);
    h = p.avg_pool2d(p.relu(p.channel_bias(p.conv2d(h, P("img.conv2.w")), P("img.conv2.b"))), 2);
    h = p.avg_pool2d(p.relu(p.channel_bias(p.conv2d(h, P("img.conv3.w")), P("img.conv3.b"))), 2);
    const std::size_t s8 = cfg_.image_size / 8;
    NodeId flat = p.reshape(h, {cfg_.c3 * s8 * s8});
    NodeId z = p.add(p.matmul(P("img.fc.w"), flat), P("img.fc.b"));
    return p.l2_normalize(z);
}

NodeId DualEncoder::build_label(Program& p, std::uint32_t label) const {
    if (label >= cfg_.num_labels) {
        throw UnknownLabel("label " + std::to_string(label) + " outside vocabulary of " +
                           std::to_string(cfg_.num_labels));
    }
    NodeId table = p.parameter("lab.table", params_.at("lab.table"));
    return p.l2_normalize(p.row(table, label));
}

Tensor DualEncoder::encode_image(const Tensor& image) const {
    Program p;
    NodeId x = p.input("x", {cfg_.in_channels, cfg_.image_size, cfg_.image_size});
    NodeId out = build_image(p, x);
    p.set_input(x, image);
    return p.value(out);
}

Tensor DualEncoder::encode_label(std::uint32_t label) const {
    Program p;
    NodeId out = build_label(p, label);
    return p.value(out);
}

void DualEncoder::save(const std::string& path) const {
    ParamMap m = params_;
    Tensor meta({8}, {static_cast<float>(cfg_.in_channels), static_cast<float>(cfg_.image_size),
                      static_cast<float>(cfg_.embed_dim), static_cast<float>(cfg_.c1),
                      static_cast<float>(cfg_.c2), static_cast<float>(cfg_.c3),
                      static_cast<float>(cfg_.num_labels), trained_ ? 1.0f : 0.0f});
    m.emplace("__meta__", meta);
    save_checkpoint(path, m);
}

DualEncoder DualEncoder::load(const std::string& path) {
    ParamMap m = load_checkpoint(path);
    auto it = m.find("__meta__");
    if (it == m.end() || it->second.numel() != 8) {
        throw CheckpointError("not a dual encoder checkpoint: " + path);
    }
    const Tensor& meta = it->second;
    DualEncoder e;
    e.cfg_.in_channels = static_cast<std::size_t>(meta[0]);
    e.cfg_.image_size = static_cast<std::size_t>(meta[1]);
    e.cfg_.embed_dim = static_cast<std::size_t>(meta[2]);
    e.cfg_.c1 = static_cast<std::size_t>(meta[3]);
    e.cfg_.c2 = static_cast<std::size_t>(meta[4]);
    e.cfg_.c3 = static_cast<std::size_t>(meta[5]);
    e.cfg_.num_labels = static_cast<std::size_t>(meta[6]);
    e.trained_ = meta[7] != 0.0f;
    m.erase(it);
    e.params_ = std::move(m);
    return e;
}

}  // namespace cbv::encoders
