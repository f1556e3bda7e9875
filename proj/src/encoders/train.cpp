#include "cbv/encoders/train.hpp"

#include <cmath>

#include "cbv/numcore/optim.hpp"
#include "cbv/numcore/rng.hpp"

namespace cbv::encoders {

using namespace cbv::numcore;

namespace {

void validate(const Dataset& data, const TrainConfig& cfg, std::size_t num_labels, std::size_t image_size,
              std::size_t in_channels) {
    auto labels = data.distinct_labels();
    if (labels.size() < 2) {
        throw SingleClassDataset("training needs at least 2 distinct labels, got " +
                                 std::to_string(labels.size()));
    }
    for (const auto& s : data.samples) {
        if (s.label >= num_labels) {
            throw UnknownLabel("label " + std::to_string(s.label) + " outside vocabulary of " +
                               std::to_string(num_labels));
        }
        Shape want{in_channels, image_size, image_size};
        if (!shape_eq(s.image.shape(), want)) {
            throw ShapeMismatch("sample image shape " + shape_str(s.image.shape()) + ", want " +
                                shape_str(want));
        }
    }
    if (cfg.batch < 2) throw BadConfig("batch size must be at least 2");
    if (!(cfg.lr > 0.0f)) throw BadConfig("learning rate must be positive");
}

std::vector<std::size_t> train_indices(const Dataset& data) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        if (!is_holdout(i)) idx.push_back(i);
    }
    return idx;
}

std::vector<Sample> gather(const Dataset& data, const std::vector<std::size_t>& pool,
                           const std::vector<std::size_t>& perm, std::size_t start, std::size_t end) {
    std::vector<Sample> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) batch.push_back(data.samples[pool[perm[i]]]);
    return batch;
}

}  // namespace

LossGraph build_contrastive_loss(Program& p, const DualEncoder& enc, std::span<const Sample> batch,
                                 float temperature) {
    if (batch.size() < 2) throw EmptyInput("contrastive loss needs at least 2 samples");
    if (!(temperature > 0.0f)) throw BadConfig("temperature must be positive");
    const EncoderConfig& ec = enc.config();
    const Shape img_shape{ec.in_channels, ec.image_size, ec.image_size};
    const std::size_t bs = batch.size();

    LossGraph g;
    std::vector<NodeId> es, ls;
    for (std::size_t i = 0; i < bs; ++i) {
        NodeId x = p.input("x" + std::to_string(i), img_shape);
        p.set_input(x, batch[i].image);
        g.inputs.push_back(x);
        es.push_back(enc.build_image(p, x));
        ls.push_back(enc.build_label(p, batch[i].label));
    }
    NodeId sim = p.matmul(p.stack(es), p.transpose(p.stack(ls)));
    NodeId logits = p.scale(sim, 1.0f / temperature);
    NodeId lp_i2t = p.log(p.softmax(logits));
    NodeId lp_t2i = p.log(p.softmax(p.transpose(logits)));
    Tensor dmask({bs, bs});
    for (std::size_t i = 0; i < bs; ++i) dmask.at(i, i) = 1.0f / (2.0f * static_cast<float>(bs));
    NodeId d = p.constant(dmask);
    g.loss = p.scale(p.add(p.sum(p.mul(lp_i2t, d)), p.sum(p.mul(lp_t2i, d))), -1.0f);
    return g;
}

LossGraph build_ce_loss(Program& p, const ConvClassifier& clf, std::span<const Sample> batch) {
    if (batch.empty()) throw EmptyInput("cross-entropy loss needs at least 1 sample");
    const ClassifierConfig& cc = clf.config();
    const Shape img_shape{cc.in_channels, cc.image_size, cc.image_size};
    const std::size_t bs = batch.size();

    LossGraph g;
    std::vector<NodeId> rows;
    for (std::size_t i = 0; i < bs; ++i) {
        NodeId x = p.input("x" + std::to_string(i), img_shape);
        p.set_input(x, batch[i].image);
        g.inputs.push_back(x);
        rows.push_back(clf.build(p, x).scores);
    }
    NodeId logits = bs == 1 ? p.reshape(rows[0], {1, cc.num_classes}) : p.stack(rows);
    NodeId lp = p.log(p.softmax(logits));
    Tensor mask({bs, cc.num_classes});
    for (std::size_t i = 0; i < bs; ++i) {
        if (batch[i].label >= cc.num_classes) {
            throw UnknownLabel("label " + std::to_string(batch[i].label) + " outside vocabulary");
        }
        mask.at(i, batch[i].label) = 1.0f / static_cast<float>(bs);
    }
    g.loss = p.scale(p.sum(p.mul(lp, p.constant(mask))), -1.0f);
    return g;
}

TrainReport train_dual_encoder(DualEncoder& enc, const Dataset& data, const TrainConfig& cfg) {
    const EncoderConfig& ec = enc.config();
    validate(data, cfg, ec.num_labels, ec.image_size, ec.in_channels);
    if (!(cfg.temperature > 0.0f)) throw BadConfig("temperature must be positive");

    TrainReport rep;
    if (cfg.epochs == 0) {
        rep.final_metric = alignment_gap(enc, data, true);
        return rep;
    }

    const std::vector<std::size_t> pool = train_indices(data);
    Adam opt(cfg.lr);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order = Rng::derive(cfg.seed, 1000 + epoch);
        std::vector<std::size_t> perm = order.permutation(pool.size());
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < perm.size(); start += cfg.batch) {
            const std::size_t end = std::min(start + cfg.batch, perm.size());
            if (end - start < 2) continue;
            std::vector<Sample> batch = gather(data, pool, perm, start, end);
            Program p;
            LossGraph g = build_contrastive_loss(p, enc, batch, cfg.temperature);
            auto grads = p.parameter_gradients(g.loss);
            const float lval = p.scalar_value(g.loss);
            if (!std::isfinite(lval)) throw NonConvergence("contrastive loss diverged");
            opt.step(enc.params(), grads);
            epoch_loss += lval;
            ++batches;
        }
        rep.loss_history.push_back(batches ? static_cast<float>(epoch_loss / batches) : 0.0f);
        ++rep.epochs_run;
    }

    enc.set_trained(true);
    rep.final_metric = alignment_gap(enc, data, true);
    return rep;
}

TrainReport train_classifier(ConvClassifier& clf, const Dataset& data, const TrainConfig& cfg) {
    const ClassifierConfig& cc = clf.config();
    validate(data, cfg, cc.num_classes, cc.image_size, cc.in_channels);

    TrainReport rep;
    rep.chance = 1.0f / static_cast<float>(cc.num_classes);
    if (cfg.epochs == 0) {
        rep.final_metric = accuracy(clf, data, true);
        return rep;
    }

    const std::vector<std::size_t> pool = train_indices(data);
    Adam opt(cfg.lr);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order = Rng::derive(cfg.seed, 2000 + epoch);
        std::vector<std::size_t> perm = order.permutation(pool.size());
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < perm.size(); start += cfg.batch) {
            const std::size_t end = std::min(start + cfg.batch, perm.size());
            if (end == start) continue;
            std::vector<Sample> batch = gather(data, pool, perm, start, end);
            Program p;
            LossGraph g = build_ce_loss(p, clf, batch);
            auto grads = p.parameter_gradients(g.loss);
            const float lval = p.scalar_value(g.loss);
            if (!std::isfinite(lval)) throw NonConvergence("cross-entropy loss diverged");
            opt.step(clf.params(), grads);
            epoch_loss += lval;
            ++batches;
        }
        rep.loss_history.push_back(batches ? static_cast<float>(epoch_loss / batches) : 0.0f);
        ++rep.epochs_run;
    }

    clf.set_trained(true);
    rep.final_metric = accuracy(clf, data, true);
    return rep;
}

float alignment_gap(const DualEncoder& enc, const Dataset& data, bool holdout_only) {
    const std::size_t n_labels = enc.config().num_labels;
    std::vector<Tensor> label_emb;
    label_emb.reserve(n_labels);
    for (std::uint32_t l = 0; l < n_labels; ++l) label_emb.push_back(enc.encode_label(static_cast<std::uint32_t>(l)));

    double matched = 0.0, mismatched = 0.0;
    std::size_t n_match = 0, n_mismatch = 0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        if (holdout_only && !is_holdout(i)) continue;
        const Sample& s = data.samples[i];
        Tensor e = enc.encode_image(s.image);
        for (std::uint32_t l = 0; l < n_labels; ++l) {
            const float c = cosine_similarity(e, label_emb[l]);
            if (l == s.label) {
                matched += c;
                ++n_match;
            } else {
                mismatched += c;
                ++n_mismatch;
            }
        }
    }
    if (n_match == 0) throw EmptyInput("alignment_gap: no samples in the requested split");
    if (n_mismatch == 0) return 0.0f;
    return static_cast<float>(matched / n_match - mismatched / n_mismatch);
}

float accuracy(const ConvClassifier& clf, const Dataset& data, bool holdout_only) {
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        if (holdout_only && !is_holdout(i)) continue;
        correct += clf.predict(data.samples[i].image) == data.samples[i].label ? 1 : 0;
        ++total;
    }
    if (total == 0) throw EmptyInput("accuracy: no samples in the requested split");
    return static_cast<float>(correct) / static_cast<float>(total);
}

}  // namespace cbv::encoders
