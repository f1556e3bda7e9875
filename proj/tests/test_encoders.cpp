#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cbv/encoders/train.hpp"
#include "cbv/harness/synth.hpp"
#include "doctest.h"

using namespace cbv;
using namespace cbv::encoders;
using namespace cbv::numcore;
using harness::make_shapes_dataset;

namespace {

EncoderConfig small_encoder_cfg(std::size_t labels) {
    EncoderConfig c;
    c.image_size = 16;
    c.embed_dim = 8;
    c.c1 = 4;
    c.c2 = 6;
    c.c3 = 6;
    c.num_labels = labels;
    return c;
}

}  // namespace

TEST_CASE("image embeddings are unit vectors") {
    DualEncoder enc(small_encoder_cfg(3), 1);
    Rng r(2);
    Tensor img({3, 16, 16});
    r.fill_uniform(img, 0.0, 1.0);
    Tensor e = enc.encode_image(img);
    CHECK(e.numel() == 8);
    CHECK(std::abs(l2_norm(e) - 1.0) < 1e-5);
    CHECK_FALSE(enc.trained());
    Tensor le = enc.encode_label(2);
    CHECK(std::abs(l2_norm(le) - 1.0) < 1e-5);
}

TEST_CASE("encoding is deterministic per seed") {
    Rng r(3);
    Tensor img({3, 16, 16});
    r.fill_uniform(img, 0.0, 1.0);
    DualEncoder a(small_encoder_cfg(3), 7);
    DualEncoder b(small_encoder_cfg(3), 7);
    CHECK(bit_equal(a.encode_image(img), b.encode_image(img)));
    DualEncoder c(small_encoder_cfg(3), 8);
    CHECK_FALSE(bit_equal(a.encode_image(img), c.encode_image(img)));
}

TEST_CASE("label ids outside the vocabulary are rejected") {
    DualEncoder enc(small_encoder_cfg(3), 1);
    CHECK_THROWS_AS(enc.encode_label(3), UnknownLabel);
    Program p;
    CHECK_THROWS_AS(enc.build_label(p, 99), UnknownLabel);
}

TEST_CASE("contrastive loss passes a finite-difference sweep") {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.embed_dim = 6;
    cfg.c1 = 3;
    cfg.c2 = 4;
    cfg.c3 = 4;
    cfg.num_labels = 2;
    DualEncoder enc(cfg, 11);

    Rng r(12);
    std::vector<Sample> batch;
    for (std::uint32_t i = 0; i < 3; ++i) {
        Tensor img({3, 8, 8});
        r.fill_uniform(img, 0.0, 1.0);
        batch.push_back({img, i % 2});
    }
    Program p;
    LossGraph g = build_contrastive_loss(p, enc, batch, 0.1f);
    CHECK(p.scalar_value(g.loss) > 0.0f);
    // h small enough that no relu kink sits inside the central-difference interval
    auto rep = p.grad_check(g.loss, 1e-5);
    CHECK(rep.max_rel_error <= 1e-3);
}

TEST_CASE("cross-entropy loss passes a finite-difference sweep") {
    ClassifierConfig cfg;
    cfg.image_size = 8;
    cfg.num_classes = 3;
    cfg.channels = {4, 5};
    ConvClassifier clf(cfg, 13);

    Rng r(14);
    std::vector<Sample> batch;
    for (std::uint32_t i = 0; i < 3; ++i) {
        Tensor img({3, 8, 8});
        r.fill_uniform(img, 0.0, 1.0);
        batch.push_back({img, i});
    }
    Program p;
    LossGraph g = build_ce_loss(p, clf, batch);
    auto rep = p.grad_check(g.loss, 1e-5);
    CHECK(rep.max_rel_error <= 1e-3);
}

TEST_CASE("contrastive training separates two shape classes") {
    Dataset data = make_shapes_dataset(60, 2, 101);
    EncoderConfig cfg;
    cfg.num_labels = 2;
    DualEncoder enc(cfg, 5);
    TrainConfig tc;
    tc.epochs = 20;
    tc.seed = 5;
    TrainReport rep = train_dual_encoder(enc, data, tc);
    CHECK(enc.trained());
    CHECK(rep.epochs_run == 20);
    CHECK(rep.loss_history.front() > rep.loss_history.back());
    CHECK(rep.final_metric > 0.2f);  // held-out alignment gap
}

TEST_CASE("classifier training reaches 0.9 held-out accuracy") {
    Dataset data = make_shapes_dataset(60, 2, 102);
    ClassifierConfig cfg;
    cfg.num_classes = 2;
    ConvClassifier clf(cfg, 6);
    TrainConfig tc;
    tc.epochs = 20;
    tc.seed = 6;
    tc.lr = 8e-3f;
    TrainReport rep = train_classifier(clf, data, tc);
    CHECK(clf.trained());
    CHECK(rep.final_metric >= 0.9f);
    CHECK(rep.chance == 0.5f);
}

TEST_CASE("label-shuffled data trains to chance accuracy") {
    Dataset data = make_shapes_dataset(40, 2, 103);
    Rng shuffle(104);
    for (auto& s : data.samples) s.label = static_cast<std::uint32_t>(shuffle.uniform_index(2));
    // guard against the freak case of a single-label shuffle
    if (data.distinct_labels().size() < 2) data.samples[0].label ^= 1u;
    ClassifierConfig cfg;
    cfg.num_classes = 2;
    ConvClassifier clf(cfg, 7);
    TrainConfig tc;
    tc.epochs = 8;
    tc.seed = 7;
    TrainReport rep = train_classifier(clf, data, tc);
    CHECK(std::abs(rep.final_metric - rep.chance) <= 0.2f);
}

TEST_CASE("single-class data is rejected") {
    Dataset data = make_shapes_dataset(10, 1, 105);
    EncoderConfig ecfg;
    ecfg.num_labels = 3;
    DualEncoder enc(ecfg, 8);
    TrainConfig tc;
    CHECK_THROWS_AS(train_dual_encoder(enc, data, tc), SingleClassDataset);
    ClassifierConfig ccfg;
    ccfg.num_classes = 3;
    ConvClassifier clf(ccfg, 8);
    CHECK_THROWS_AS(train_classifier(clf, data, tc), SingleClassDataset);
    Dataset empty;
    CHECK_THROWS_AS(train_dual_encoder(enc, empty, tc), SingleClassDataset);
}

TEST_CASE("zero epochs leaves the model untrained") {
    Dataset data = make_shapes_dataset(10, 2, 106);
    EncoderConfig cfg;
    cfg.num_labels = 2;
    DualEncoder enc(cfg, 9);
    TrainConfig tc;
    tc.epochs = 0;
    TrainReport rep = train_dual_encoder(enc, data, tc);
    CHECK_FALSE(enc.trained());
    CHECK(rep.epochs_run == 0);
    CHECK(rep.loss_history.empty());
}

TEST_CASE("feature maps and scores come from one forward pass") {
    ClassifierConfig cfg;
    cfg.num_classes = 3;
    ConvClassifier clf(cfg, 10);
    CHECK(clf.layer_spatial(2) == 8);
    Rng r(21);
    Tensor img({3, 32, 32});
    r.fill_uniform(img, 0.0, 1.0);
    auto [maps, scores] = clf.feature_maps_and_scores(img, 2);
    CHECK(shape_eq(maps.shape(), {16, 8, 8}));
    CHECK(scores.numel() == 3);
    CHECK(bit_equal(scores, clf.scores(img)));
    CHECK_THROWS_AS(clf.feature_maps_and_scores(img, 5), BadConfig);
}

TEST_CASE("probabilities sum to one and argmax matches predict") {
    ClassifierConfig cfg;
    cfg.num_classes = 4;
    ConvClassifier clf(cfg, 11);
    Rng r(22);
    Tensor img({3, 32, 32});
    r.fill_uniform(img, 0.0, 1.0);
    Tensor probs = clf.probabilities(img);
    double s = 0.0;
    for (std::size_t i = 0; i < probs.numel(); ++i) s += probs[i];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < 4; ++c)
        if (probs[c] > probs[best]) best = c;
    CHECK(best == clf.predict(img));
}

TEST_CASE("small input perturbations move embeddings a bounded amount") {
    DualEncoder enc(small_encoder_cfg(2), 23);
    Rng r(24);
    Tensor img({3, 16, 16});
    r.fill_uniform(img, 0.0, 1.0);
    Tensor delta({3, 16, 16});
    r.fill_normal(delta, 1e-3);
    Tensor e0 = enc.encode_image(img);
    Tensor e1 = enc.encode_image(add(img, delta));
    CHECK(l2_norm(sub(e1, e0)) <= 100.0 * l2_norm(delta));
}

TEST_CASE("encoder and classifier checkpoints round trip") {
    const std::string dir = std::filesystem::temp_directory_path().string();
    Rng r(25);
    Tensor img({3, 16, 16});
    r.fill_uniform(img, 0.0, 1.0);

    DualEncoder enc(small_encoder_cfg(3), 26);
    enc.set_trained(true);
    const std::string epath = dir + "/cbv_enc_test.cbvw";
    enc.save(epath);
    DualEncoder enc2 = DualEncoder::load(epath);
    CHECK(enc2.trained());
    CHECK(enc2.config().embed_dim == 8);
    CHECK(bit_equal(enc.encode_image(img), enc2.encode_image(img)));
    std::remove(epath.c_str());

    ClassifierConfig ccfg;
    ccfg.image_size = 16;
    ccfg.num_classes = 3;
    ccfg.channels = {4, 6};
    ConvClassifier clf(ccfg, 27);
    const std::string cpath = dir + "/cbv_clf_test.cbvw";
    clf.save(cpath);
    ConvClassifier clf2 = ConvClassifier::load(cpath);
    CHECK_FALSE(clf2.trained());
    CHECK(clf2.config().channels == ccfg.channels);
    CHECK(bit_equal(clf.scores(img), clf2.scores(img)));
    std::remove(cpath.c_str());
}

TEST_CASE("shapes dataset is deterministic and labeled correctly") {
    Dataset a = make_shapes_dataset(4, 3, 42);
    Dataset b = make_shapes_dataset(4, 3, 42);
    REQUIRE(a.samples.size() == 12);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(bit_equal(a.samples[i].image, b.samples[i].image));
        CHECK(a.samples[i].label == b.samples[i].label);
    }
    // values stay in [0,1]
    for (const auto& s : a.samples) {
        for (std::size_t i = 0; i < s.image.numel(); ++i) {
            CHECK(s.image[i] >= 0.0f);
            CHECK(s.image[i] <= 1.0f);
        }
    }
    Dataset c = make_shapes_dataset(4, 3, 43);
    CHECK_FALSE(bit_equal(a.samples[0].image, c.samples[0].image));
}
