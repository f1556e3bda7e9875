// Pipeline driver: every stage of the clean-label poisoning workbench as one
// binary. Each subcommand reads a JSON config (flat keys, unknown keys are
// rejected), derives its internal seeds from --seed, and writes its artifacts
// plus a small report under --out. Reruns with the same inputs are byte
// identical, so whole workspace trees can be diffed.
//
// Tool rng streams (library streams live below 9000):
//   9001 encoder init     9002 encoder train   9003 surrogate init
//   9004 surrogate train  9005 scorenet init   9006 scorenet train
//   9007 uap descent      9008 uap subset      9009 victim init
//   9010 victim train     9011 strip overlays  9012 eval probes

#include <CLI11.hpp>

#include <cxxabi.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbv/diffusion/sampler.hpp"
#include "cbv/diffusion/schedule.hpp"
#include "cbv/diffusion/scorenet.hpp"
#include "cbv/encoders/classifier.hpp"
#include "cbv/encoders/dual_encoder.hpp"
#include "cbv/encoders/train.hpp"
#include "cbv/error.hpp"
#include "cbv/harness/manifest.hpp"
#include "cbv/harness/metrics.hpp"
#include "cbv/harness/png.hpp"
#include "cbv/harness/poison.hpp"
#include "cbv/harness/sha256.hpp"
#include "cbv/harness/synth.hpp"
#include "cbv/harness/victim.hpp"
#include "cbv/numcore/rng.hpp"
#include "cbv/saliency/gradcam.hpp"
#include "cbv/trigger/uap.hpp"
#include "cbv/version.hpp"

namespace fs = std::filesystem;
using ordered = nlohmann::ordered_json;
using namespace cbv;
using harness::DatasetManifest;
using harness::Split;
using numcore::Rng;
using numcore::Tensor;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    std::string out = ".";
};

fs::path ws_path(const Common& args, const std::string& rel) {
    fs::path p(rel);
    return p.is_absolute() ? p : fs::path(args.out) / p;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw MissingFile("cannot open for writing: " + path.string());
    }
    out << text;
}

/// Per-command defaults merged with the --config file. The effective document
/// (command, seed, then every setting) is what the config digest hashes, so
/// two runs share a digest exactly when nothing observable differs.
class Config {
public:
    Config(const char* command, const Common& args, ordered defaults) {
        doc_["command"] = command;
        doc_["seed"] = args.seed;
        for (auto& [key, value] : defaults.items()) {
            doc_[key] = std::move(value);
        }
        if (!args.config.empty()) {
            std::ifstream in(args.config);
            if (!in) {
                throw MissingFile("config file not found: " + args.config);
            }
            ordered file;
            try {
                file = ordered::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(args.config + ": " + e.what());
            }
            if (!file.is_object()) {
                throw ParseError(args.config + ": top level must be an object");
            }
            for (auto& [key, value] : file.items()) {
                if (key == "command" || key == "seed" || !doc_.contains(key)) {
                    throw BadConfig("unknown config key: " + key);
                }
                doc_[key] = std::move(value);
            }
        }
        sha_ = harness::sha256_hex(doc_.dump(2));
    }

    template <typename T>
    T get(const char* key) const {
        try {
            return doc_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw BadConfig(std::string("config key '") + key + "' has the wrong type");
        }
    }
    std::uint64_t u64(const char* key) const { return get<std::uint64_t>(key); }
    std::int64_t i64(const char* key) const { return get<std::int64_t>(key); }
    float f32(const char* key) const { return get<float>(key); }
    bool flag(const char* key) const { return get<bool>(key); }
    std::string str(const char* key) const { return get<std::string>(key); }
    std::vector<std::size_t> sizes(const char* key) const {
        return get<std::vector<std::size_t>>(key);
    }

    const std::string& sha() const { return sha_; }

    ordered provenance(std::uint64_t seed) const {
        return ordered{{"seed", seed}, {"config_sha256", sha_}, {"tool_version", kToolVersion}};
    }

private:
    ordered doc_;
    std::string sha_;
};

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
    return Rng::derive(seed, stream).next_u64();
}

/// Seeded sample of up to n images (and labels) from one split, without
/// replacement, independent of manifest record order beyond the id ordering.
std::vector<encoders::Sample> draw_samples(const DatasetManifest& m, Split split, std::size_t n,
                                           std::uint64_t seed) {
    const auto idx = m.indices(split);
    if (idx.empty()) {
        throw EmptyInput("split has no records");
    }
    Rng rng(seed);
    const auto perm = rng.permutation(idx.size());
    std::vector<encoders::Sample> out;
    for (std::size_t k = 0; k < idx.size() && out.size() < n; ++k) {
        const auto& r = m.records[idx[perm[k]]];
        out.push_back({harness::read_png_tensor(m.resolve(r)), r.label});
    }
    return out;
}

std::vector<Tensor> images_of(const std::vector<encoders::Sample>& samples) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image);
    return out;
}

diffusion::NoiseSchedule schedule_from(const Config& cfg) {
    return diffusion::build_schedule(cfg.u64("T"), cfg.f32("beta_start"), cfg.f32("beta_end"));
}

void run_gen_data(const Common& args) {
    Config cfg("gen-data", args,
               ordered{{"num_classes", 3},
                       {"per_class_train", 60},
                       {"per_class_test", 20},
                       {"image_size", 32}});
    harness::GenConfig gc;
    gc.num_classes = cfg.u64("num_classes");
    gc.per_class_train = cfg.u64("per_class_train");
    gc.per_class_test = cfg.u64("per_class_test");
    gc.image_size = cfg.u64("image_size");
    gc.seed = args.seed;
    const fs::path dir = ws_path(args, "data");
    const DatasetManifest m = harness::write_shapes_tree(dir.string(), gc);

    ordered rep{{"command", "gen-data"},
                {"records", m.records.size()},
                {"classes", m.classes},
                {"image_size", gc.image_size},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "gen_report.json", rep.dump(2) + "\n");
    std::cout << "gen-data: " << m.records.size() << " records -> " << dir.string() << "\n";
}

void run_train_encoders(const Common& args) {
    Config cfg("train-encoders", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"embed_dim", 32},
                       {"enc_c1", 8},
                       {"enc_c2", 16},
                       {"enc_c3", 16},
                       {"enc_lr", 2e-3},
                       {"enc_epochs", 20},
                       {"surrogate_channels", {8, 16, 16}},
                       {"surrogate_lr", 8e-3},
                       {"surrogate_epochs", 20},
                       {"batch", 16},
                       {"temperature", 0.1}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const encoders::Dataset data = harness::to_dataset(m, Split::Train);
    if (data.samples.empty()) {
        throw EmptyInput("train split is empty");
    }

    encoders::EncoderConfig ec;
    ec.in_channels = data.samples.front().image.extent(0);
    ec.image_size = data.samples.front().image.extent(1);
    ec.embed_dim = cfg.u64("embed_dim");
    ec.c1 = cfg.u64("enc_c1");
    ec.c2 = cfg.u64("enc_c2");
    ec.c3 = cfg.u64("enc_c3");
    ec.num_labels = m.classes.size();
    encoders::DualEncoder enc(ec, sub_seed(args.seed, 9001));
    encoders::TrainConfig et;
    et.lr = cfg.f32("enc_lr");
    et.batch = cfg.u64("batch");
    et.epochs = cfg.u64("enc_epochs");
    et.temperature = cfg.f32("temperature");
    et.seed = sub_seed(args.seed, 9002);
    const encoders::TrainReport er = encoders::train_dual_encoder(enc, data, et);

    encoders::ClassifierConfig sc;
    sc.in_channels = ec.in_channels;
    sc.image_size = ec.image_size;
    sc.num_classes = m.classes.size();
    sc.channels = cfg.sizes("surrogate_channels");
    encoders::ConvClassifier surrogate(sc, sub_seed(args.seed, 9003));
    encoders::TrainConfig st;
    st.lr = cfg.f32("surrogate_lr");
    st.batch = cfg.u64("batch");
    st.epochs = cfg.u64("surrogate_epochs");
    st.seed = sub_seed(args.seed, 9004);
    const encoders::TrainReport sr = encoders::train_classifier(surrogate, data, st);

    const fs::path dir = ws_path(args, "models");
    fs::create_directories(dir);
    enc.save((dir / "encoder.cbvw").string());
    surrogate.save((dir / "surrogate.cbvw").string());

    ordered rep{{"command", "train-encoders"},
                {"alignment_gap", er.final_metric},
                {"surrogate_accuracy", sr.final_metric},
                {"surrogate_chance", sr.chance},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "encoders_report.json", rep.dump(2) + "\n");
    std::cout << "train-encoders: gap " << er.final_metric << ", surrogate acc "
              << sr.final_metric << " -> " << dir.string() << "\n";
}

void run_train_diffusion(const Common& args) {
    Config cfg("train-diffusion", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"hidden", 16},
                       {"temb_dim", 8},
                       {"T", 50},
                       {"beta_start", 0.02},
                       {"beta_end", 0.25},
                       {"lr", 2e-3},
                       {"batch", 8},
                       {"epochs", 30}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const encoders::Dataset data = harness::to_dataset(m, Split::Train);
    if (data.samples.empty()) {
        throw EmptyInput("train split is empty");
    }

    diffusion::ScoreNetConfig nc;
    nc.in_channels = data.samples.front().image.extent(0);
    nc.image_size = data.samples.front().image.extent(1);
    nc.hidden = cfg.u64("hidden");
    nc.temb_dim = cfg.u64("temb_dim");
    diffusion::ScoreNet net(nc, sub_seed(args.seed, 9005));
    const diffusion::NoiseSchedule sched = schedule_from(cfg);
    diffusion::DiffusionTrainConfig tc;
    tc.lr = cfg.f32("lr");
    tc.batch = cfg.u64("batch");
    tc.epochs = cfg.u64("epochs");
    tc.seed = sub_seed(args.seed, 9006);
    const diffusion::DiffusionTrainReport rep = diffusion::train_score(net, data, sched, tc);

    const fs::path dir = ws_path(args, "models");
    fs::create_directories(dir);
    net.save((dir / "scorenet.cbvw").string());

    ordered doc{{"command", "train-diffusion"},
                {"baseline_loss", rep.baseline_loss},
                {"holdout_loss", rep.holdout_loss},
                {"T", cfg.u64("T")},
                {"beta_start", cfg.f32("beta_start")},
                {"beta_end", cfg.f32("beta_end")},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "diffusion_report.json", doc.dump(2) + "\n");
    std::cout << "train-diffusion: probe mse " << rep.baseline_loss << " -> "
              << rep.holdout_loss << "\n";
}

void run_gen_uap(const Common& args) {
    Config cfg("gen-uap", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"encoder", "models/encoder.cbvw"},
                       {"mode", "uap"},
                       {"norm", "linf"},
                       {"rho", 0.1},
                       {"eta", 0.01},
                       {"iterations", 300},
                       {"pairs", 64}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const encoders::DualEncoder enc =
        encoders::DualEncoder::load(ws_path(args, cfg.str("encoder")).string());

    trigger::UapConfig uc;
    const std::string norm = cfg.str("norm");
    if (norm == "linf") {
        uc.norm = trigger::NormType::LInf;
    } else if (norm == "l2") {
        uc.norm = trigger::NormType::L2;
    } else {
        throw BadConfig("norm must be linf or l2");
    }
    uc.rho = cfg.f32("rho");
    uc.eta = cfg.f32("eta");
    uc.iterations = cfg.u64("iterations");
    uc.seed = sub_seed(args.seed, 9007);

    const auto pairs = draw_samples(m, Split::Train, cfg.u64("pairs"), sub_seed(args.seed, 9008));
    trigger::UapTrigger trig;
    const std::string mode = cfg.str("mode");
    if (mode == "uap") {
        trig = trigger::generate_uap(enc, pairs, uc);
    } else if (mode == "random") {
        trig = trigger::random_trigger(pairs.front().image.shape(), uc);
    } else {
        throw BadConfig("mode must be uap or random");
    }

    const fs::path dir = ws_path(args, "trigger");
    fs::create_directories(dir);
    trigger::save_trigger(trig, (dir / "trigger.cbvw").string(), (dir / "trigger.json").string());

    // full-range preview: 0 maps to mid gray, the largest excursion to 0 or 1
    float peak = 0.0f;
    for (float v : trig.delta.values()) peak = std::max(peak, std::abs(v));
    Tensor preview = trig.delta;
    for (float& v : preview.values()) v = 0.5f + (peak > 0.0f ? v / (2.0f * peak) : 0.0f);
    harness::write_png_rgb((dir / "preview.png").string(), preview);

    const trigger::AlignmentReport ar = trigger::alignment_report(enc, pairs, trig);
    ordered rep{{"command", "gen-uap"},
                {"mode", mode},
                {"mean_alignment_clean", ar.mean_without},
                {"mean_alignment_triggered", ar.mean_with},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "uap_report.json", rep.dump(2) + "\n");
    std::cout << "gen-uap: alignment " << ar.mean_without << " -> " << ar.mean_with << "\n";
}

void run_gen_mask(const Common& args) {
    Config cfg("gen-mask", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"surrogate", "models/surrogate.cbvw"},
                       {"tau", 0.5},
                       {"split", "train"},
                       {"label", -1},
                       {"limit", 16}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const encoders::ConvClassifier surrogate =
        encoders::ConvClassifier::load(ws_path(args, cfg.str("surrogate")).string());
    const Split split = harness::split_from_name(cfg.str("split"));
    const std::int64_t label = cfg.i64("label");
    const float tau = cfg.f32("tau");
    const std::size_t limit = cfg.u64("limit");

    const fs::path dir = ws_path(args, "masks");
    fs::create_directories(dir);
    const std::size_t last = surrogate.config().channels.size() - 1;
    ordered entries = ordered::array();
    for (const auto& r : m.records) {
        if (r.split != split || (label >= 0 && r.label != std::uint32_t(label))) continue;
        if (entries.size() >= limit) break;
        const Tensor x = harness::read_png_tensor(m.resolve(r));
        const auto [maps, scores] = surrogate.feature_maps_and_scores(x, last);
        const Tensor w = saliency::gradcam_weights(surrogate, x, r.label);
        const saliency::Heatmap heat = saliency::upsample_normalize(
            saliency::gradcam_map(maps, w, r.label), x.extent(1), x.extent(2));
        const saliency::SaliencyMask mask = saliency::threshold_mask(heat, tau);
        double on = 0.0;
        for (float v : mask.mask.values()) on += v;

        char stem[32];
        std::snprintf(stem, sizeof(stem), "%06llu", static_cast<unsigned long long>(r.id));
        harness::write_png_gray((dir / (std::string(stem) + "_heat.png")).string(), heat.values);
        harness::write_png_mask((dir / (std::string(stem) + "_mask.png")).string(), mask.mask);
        entries.push_back(ordered{{"id", r.id},
                                  {"label", r.label},
                                  {"mask_fraction", on / double(mask.mask.numel())}});
    }
    if (entries.empty()) {
        throw EmptyInput("no records matched the split/label filter");
    }

    ordered rep{{"command", "gen-mask"},
                {"tau", tau},
                {"images", entries},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "masks_report.json", rep.dump(2) + "\n");
    std::cout << "gen-mask: " << entries.size() << " masks -> " << dir.string() << "\n";
}

void run_poison(const Common& args) {
    Config cfg("poison", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"encoder", "models/encoder.cbvw"},
                       {"surrogate", "models/surrogate.cbvw"},
                       {"scorenet", "models/scorenet.cbvw"},
                       {"trigger_ckpt", "trigger/trigger.cbvw"},
                       {"trigger_json", "trigger/trigger.json"},
                       {"original", 0},
                       {"target", 1},
                       {"rate", 0.05},
                       {"tau", 0.5},
                       {"any_class", false},
                       {"T", 50},
                       {"beta_start", 0.02},
                       {"beta_end", 0.25},
                       {"lambda_img", 5.0},
                       {"lambda_txt", 2.0},
                       {"t_star", 0},
                       {"exact_guidance", true},
                       {"record_trajectory", false}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const encoders::DualEncoder enc =
        encoders::DualEncoder::load(ws_path(args, cfg.str("encoder")).string());
    const encoders::ConvClassifier surrogate =
        encoders::ConvClassifier::load(ws_path(args, cfg.str("surrogate")).string());
    const diffusion::ScoreNet net =
        diffusion::ScoreNet::load(ws_path(args, cfg.str("scorenet")).string());
    const trigger::UapTrigger trig =
        trigger::load_trigger(ws_path(args, cfg.str("trigger_ckpt")).string(),
                              ws_path(args, cfg.str("trigger_json")).string());
    const diffusion::NoiseSchedule sched = schedule_from(cfg);

    diffusion::SamplerConfig scfg;
    scfg.T = cfg.u64("T");
    scfg.lambda_img = cfg.f32("lambda_img");
    scfg.lambda_txt = cfg.f32("lambda_txt");
    scfg.t_star = cfg.u64("t_star");
    scfg.exact_guidance = cfg.flag("exact_guidance");

    harness::PoisonPlan plan =
        harness::plan_poison(m, cfg.u64("original"), cfg.u64("target"), cfg.f32("rate"),
                             args.seed, cfg.flag("any_class"));
    plan.tau = cfg.f32("tau");
    plan.trigger_ref = cfg.str("trigger_ckpt");
    plan.sampler_ref = cfg.sha();
    const fs::path dir = ws_path(args, "poison");
    fs::create_directories(dir);
    harness::save_plan(plan, (dir / "plan.json").string());

    const harness::PoisonOutput out = harness::build_poisoned_dataset(
        m, plan, trig, enc, surrogate, net, sched, scfg, (dir / "data").string());

    ordered images = ordered::array();
    for (const auto& p : out.images) {
        images.push_back(ordered{{"id", p.id},
                                 {"seed", p.seed},
                                 {"mask_fraction", p.mask_fraction},
                                 {"sha256", p.sha256}});
    }
    ordered rep{{"command", "poison"},
                {"selected", plan.selected.size()},
                {"images", images},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "provenance.json", rep.dump(2) + "\n");

    if (cfg.flag("record_trajectory") && !plan.selected.empty()) {
        const harness::ManifestRecord* r = m.find(plan.selected.front());
        const Tensor x0 = harness::read_png_tensor(m.resolve(*r));
        const Tensor x_trig = trigger::apply_trigger(x0, trig);
        const saliency::SaliencyMask mask =
            saliency::compute_mask(surrogate, x0, r->label, plan.tau);
        diffusion::SamplerConfig one = scfg;
        one.seed = Rng::derive(plan.seed, r->id).next_u64();
        diffusion::TrajectoryLog log;
        log.record_states = true;
        diffusion::generate_poison(x0, x_trig, plan.target, mask, net, enc, sched, one, &log);
        write_text(dir / "trajectory.json", diffusion::trajectory_json(log));
        if (!log.states.empty()) {
            harness::write_filmstrip((dir / "filmstrip.png").string(), log.states);
        }
    }
    std::cout << "poison: " << plan.selected.size() << " images -> "
              << (dir / "data").string() << "\n";
}

void run_train_victim(const Common& args) {
    Config cfg("train-victim", args,
               ordered{{"manifest", "poison/data/manifest.json"},
                       {"channels", {10, 20}},
                       {"lr", 8e-3},
                       {"batch", 16},
                       {"epochs", 30}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());

    harness::VictimConfig vc;
    vc.channels = cfg.sizes("channels");
    vc.init_seed = sub_seed(args.seed, 9009);
    vc.train.lr = cfg.f32("lr");
    vc.train.batch = cfg.u64("batch");
    vc.train.epochs = cfg.u64("epochs");
    vc.train.seed = sub_seed(args.seed, 9010);
    const encoders::ConvClassifier victim = harness::train_victim(m, vc);

    const fs::path dir = ws_path(args, "victim");
    fs::create_directories(dir);
    victim.save((dir / "victim.cbvw").string());

    const harness::CleanReport clean = harness::eval_clean(victim, m);
    ordered rep{{"command", "train-victim"},
                {"test_accuracy", clean.accuracy},
                {"test_total", clean.total},
                {"provenance", cfg.provenance(args.seed)}};
    write_text(dir / "victim_report.json", rep.dump(2) + "\n");
    std::cout << "train-victim: test acc " << clean.accuracy << " -> " << dir.string() << "\n";
}

void run_evaluate(const Common& args) {
    Config cfg("evaluate", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"poisoned_manifest", "poison/data/manifest.json"},
                       {"plan", "poison/plan.json"},
                       {"victim", "victim/victim.cbvw"},
                       {"encoder", "models/encoder.cbvw"},
                       {"trigger_ckpt", "trigger/trigger.cbvw"},
                       {"trigger_json", "trigger/trigger.json"},
                       {"strip_probes", 32},
                       {"strip_overlays", 16},
                       {"strip_bins", 16}});
    const DatasetManifest clean_m =
        harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const DatasetManifest pois_m =
        harness::load_manifest(ws_path(args, cfg.str("poisoned_manifest")).string());
    const harness::PoisonPlan plan = harness::load_plan(ws_path(args, cfg.str("plan")).string());
    const encoders::ConvClassifier victim =
        encoders::ConvClassifier::load(ws_path(args, cfg.str("victim")).string());
    const encoders::DualEncoder enc =
        encoders::DualEncoder::load(ws_path(args, cfg.str("encoder")).string());
    const trigger::UapTrigger trig =
        trigger::load_trigger(ws_path(args, cfg.str("trigger_ckpt")).string(),
                              ws_path(args, cfg.str("trigger_json")).string());

    harness::MetricsReport rep;
    rep.asr = harness::eval_asr(victim, clean_m, trig, plan.original, plan.target);
    rep.clean = harness::eval_clean(victim, clean_m);

    std::vector<Tensor> before, after;
    for (std::uint64_t id : plan.selected) {
        const harness::ManifestRecord* a = clean_m.find(id);
        const harness::ManifestRecord* b = pois_m.find(id);
        if (a == nullptr || b == nullptr) {
            throw BadConfig("plan id " + std::to_string(id) + " missing from a manifest");
        }
        before.push_back(harness::read_png_tensor(clean_m.resolve(*a)));
        after.push_back(harness::read_png_tensor(pois_m.resolve(*b)));
    }
    if (!before.empty()) {
        rep.quality = harness::eval_quality(before, after, enc);
    }

    harness::StripConfig sc;
    sc.n_overlays = cfg.u64("strip_overlays");
    sc.bins = cfg.u64("strip_bins");
    sc.seed = sub_seed(args.seed, 9012);
    const auto probes =
        images_of(draw_samples(clean_m, Split::Test, cfg.u64("strip_probes"), sc.seed));
    const auto donors =
        images_of(draw_samples(clean_m, Split::Train, cfg.u64("strip_probes"), sc.seed + 1));
    rep.strip_clean = harness::strip_entropy(victim, probes, donors, sc);
    std::vector<Tensor> triggered;
    triggered.reserve(probes.size());
    for (const auto& p : probes) triggered.push_back(trigger::apply_trigger(p, trig));
    rep.strip_triggered = harness::strip_entropy(victim, triggered, donors, sc);

    rep.provenance = {args.seed, cfg.sha(), kToolVersion};
    const fs::path dir = ws_path(args, "eval");
    fs::create_directories(dir);
    harness::save_metrics(rep, (dir / "metrics.json").string());
    std::cout << "evaluate: asr " << rep.asr.asr << ", clean " << rep.clean.accuracy << " -> "
              << (dir / "metrics.json").string() << "\n";
}

void run_strip(const Common& args) {
    Config cfg("strip", args,
               ordered{{"manifest", "data/manifest.json"},
                       {"victim", "victim/victim.cbvw"},
                       {"trigger_ckpt", "trigger/trigger.cbvw"},
                       {"trigger_json", "trigger/trigger.json"},
                       {"probes", 32},
                       {"overlays", 16},
                       {"bins", 16}});
    const DatasetManifest m = harness::load_manifest(ws_path(args, cfg.str("manifest")).string());
    const encoders::ConvClassifier victim =
        encoders::ConvClassifier::load(ws_path(args, cfg.str("victim")).string());
    const trigger::UapTrigger trig =
        trigger::load_trigger(ws_path(args, cfg.str("trigger_ckpt")).string(),
                              ws_path(args, cfg.str("trigger_json")).string());

    harness::StripConfig sc;
    sc.n_overlays = cfg.u64("overlays");
    sc.bins = cfg.u64("bins");
    sc.seed = sub_seed(args.seed, 9011);
    const auto probes = images_of(draw_samples(m, Split::Test, cfg.u64("probes"), sc.seed));
    const auto donors = images_of(draw_samples(m, Split::Train, cfg.u64("probes"), sc.seed + 1));
    const harness::StripReport clean = harness::strip_entropy(victim, probes, donors, sc);
    std::vector<Tensor> triggered;
    triggered.reserve(probes.size());
    for (const auto& p : probes) triggered.push_back(trigger::apply_trigger(p, trig));
    const harness::StripReport trig_rep = harness::strip_entropy(victim, triggered, donors, sc);

    auto block = [](const harness::StripReport& r) {
        double mean = 0.0;
        for (double h : r.entropy) mean += h;
        mean /= double(r.entropy.empty() ? 1 : r.entropy.size());
        return ordered{{"mean_entropy", mean},
                       {"entropy", r.entropy},
                       {"bins", r.bins},
                       {"bin_width", r.bin_width}};
    };
    ordered rep{{"command", "strip"},
                {"clean", block(clean)},
                {"triggered", block(trig_rep)},
                {"provenance", cfg.provenance(args.seed)}};
    const fs::path dir = ws_path(args, "strip");
    write_text(dir / "strip.json", rep.dump(2) + "\n");
    std::cout << "strip: clean mean " << rep["clean"]["mean_entropy"] << ", triggered mean "
              << rep["triggered"]["mean_entropy"] << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"clean-label poisoning workbench"};
    app.require_subcommand(1);

    struct Entry {
        const char* name;
        const char* help;
        void (*run)(const Common&);
    };
    const Entry entries[] = {
        {"gen-data", "synthesize the labeled shape dataset", run_gen_data},
        {"train-encoders", "train the dual encoder and the saliency surrogate", run_train_encoders},
        {"train-diffusion", "train the denoising score network", run_train_diffusion},
        {"gen-uap", "optimize (or randomize) the universal trigger", run_gen_uap},
        {"gen-mask", "write saliency heatmaps and binary masks", run_gen_mask},
        {"poison", "plan and build the poisoned dataset", run_poison},
        {"train-victim", "train a victim classifier on a manifest", run_train_victim},
        {"evaluate", "attack success, clean accuracy, quality, entropy", run_evaluate},
        {"strip", "overlay-entropy defense probe", run_strip},
    };
    for (const Entry& e : entries) {
        CLI::App* sub = app.add_subcommand(e.name, e.help);
        auto args = std::make_shared<Common>();
        sub->add_option("--config", args->config, "JSON config file");
        sub->add_option("--seed", args->seed, "master seed");
        sub->add_option("--out", args->out, "workspace directory");
        sub->callback([args, run = e.run] { run(*args); });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const Error& e) {
        int status = 0;
        char* demangled = abi::__cxa_demangle(typeid(e).name(), nullptr, nullptr, &status);
        std::string kind = (status == 0 && demangled != nullptr) ? demangled : "Error";
        std::free(demangled);
        if (kind.rfind("cbv::", 0) == 0) kind.erase(0, 5);
        std::cerr << "error: " << kind << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
