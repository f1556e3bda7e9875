#include "cbv/harness/poison.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "cbv/error.hpp"
#include "cbv/harness/png.hpp"
#include "cbv/harness/sha256.hpp"
#include "cbv/numcore/rng.hpp"
#include "cbv/saliency/gradcam.hpp"

namespace fs = std::filesystem;

namespace cbv::harness {

using numcore::Rng;
using numcore::Tensor;

PoisonPlan plan_poison(const DatasetManifest& m, std::uint32_t original, std::uint32_t target,
                       float rate, std::uint64_t seed, bool any_class) {
    if (original >= m.classes.size())
        throw UnknownLabel("original label " + std::to_string(original) + " not in class table");
    if (target >= m.classes.size())
        throw UnknownLabel("target label " + std::to_string(target) + " not in class table");
    if (!(rate > 0.0f) || rate > 1.0f) throw BadRange("poisoning rate must lie in (0, 1]");

    std::vector<std::uint64_t> pool;
    for (const auto& r : m.records)
        if (r.split == Split::Train && (any_class || r.label == original)) pool.push_back(r.id);
    if (pool.empty()) throw EmptyClass("no train records eligible for poisoning");
    std::sort(pool.begin(), pool.end());

    const auto count = std::size_t(std::lround(double(rate) * double(pool.size())));
    Rng rng = Rng::derive(seed, 8600);
    const auto perm = rng.permutation(pool.size());

    PoisonPlan plan;
    plan.original = original;
    plan.target = target;
    plan.rate = rate;
    plan.seed = seed;
    plan.any_class = any_class;
    for (std::size_t i = 0; i < count; ++i) plan.selected.push_back(pool[perm[i]]);
    std::sort(plan.selected.begin(), plan.selected.end());
    return plan;
}

void save_plan(const PoisonPlan& plan, const std::string& path) {
    nlohmann::ordered_json doc;
    doc["original"] = plan.original;
    doc["target"] = plan.target;
    doc["rate"] = plan.rate;
    doc["tau"] = plan.tau;
    doc["seed"] = plan.seed;
    doc["any_class"] = plan.any_class;
    doc["selected"] = plan.selected;
    doc["trigger_ref"] = plan.trigger_ref;
    doc["sampler_ref"] = plan.sampler_ref;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw MissingFile("cannot open " + path + " for writing");
    out << doc.dump(2) << '\n';
}

PoisonPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot open " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
        PoisonPlan plan;
        plan.original = doc.at("original").get<std::uint32_t>();
        plan.target = doc.at("target").get<std::uint32_t>();
        plan.rate = doc.at("rate").get<float>();
        plan.tau = doc.at("tau").get<float>();
        plan.seed = doc.at("seed").get<std::uint64_t>();
        plan.any_class = doc.at("any_class").get<bool>();
        plan.selected = doc.at("selected").get<std::vector<std::uint64_t>>();
        plan.trigger_ref = doc.at("trigger_ref").get<std::string>();
        plan.sampler_ref = doc.at("sampler_ref").get<std::string>();
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("poison plan: ") + e.what());
    }
}

PoisonOutput build_poisoned_dataset(const DatasetManifest& in, const PoisonPlan& plan,
                                    const trigger::UapTrigger& trig,
                                    const encoders::DualEncoder& enc,
                                    const encoders::ConvClassifier& surrogate,
                                    const diffusion::ScoreNet& net,
                                    const diffusion::NoiseSchedule& sched,
                                    const diffusion::SamplerConfig& sampler,
                                    const std::string& out_dir) {
    if (plan.target >= in.classes.size()) throw UnknownLabel("plan target outside class table");
    std::vector<const ManifestRecord*> chosen;
    for (std::uint64_t id : plan.selected) {
        const ManifestRecord* r = in.find(id);
        if (r == nullptr) throw BadConfig("plan selects unknown record " + std::to_string(id));
        if (r->split != Split::Train)
            throw BadConfig("plan selects non-train record " + std::to_string(id));
        if (!plan.any_class && r->label != plan.original)
            throw BadConfig("plan selects record " + std::to_string(id) + " outside the original class");
        chosen.push_back(r);
    }

    fs::create_directories(out_dir);
    std::vector<PoisonProvenance> prov(chosen.size());
    std::vector<std::vector<std::uint8_t>> png_bytes(chosen.size());

#pragma omp parallel for schedule(dynamic)
    for (long long k = 0; k < (long long)chosen.size(); ++k) {
        const ManifestRecord& r = *chosen[std::size_t(k)];
        const Tensor x0 = read_png_tensor(in.resolve(r));
        const Tensor x_trig = trigger::apply_trigger(x0, trig);
        const saliency::SaliencyMask mask = saliency::compute_mask(surrogate, x0, r.label, plan.tau);

        diffusion::SamplerConfig cfg = sampler;
        cfg.seed = Rng::derive(plan.seed, r.id).next_u64();
        const Tensor poison =
            diffusion::generate_poison(x0, x_trig, plan.target, mask, net, enc, sched, cfg);

        const std::size_t h = poison.extent(1), w = poison.extent(2);
        PngImage img{w, h, 3, std::vector<std::uint8_t>(3 * h * w)};
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.pixels[(y * w + x) * 3 + c] = quantize8(poison[(c * h + y) * w + x]);
        png_bytes[std::size_t(k)] = encode_png(img);

        double on = 0.0;
        for (float v : mask.mask.values()) on += v;
        prov[std::size_t(k)] = {r.id, cfg.seed, on / double(mask.mask.numel()),
                                sha256_hex(png_bytes[std::size_t(k)])};
    }

    PoisonOutput out;
    out.manifest = in;
    out.manifest.root = out_dir;
    out.images = std::move(prov);

    std::map<std::uint64_t, std::size_t> sel_index;
    for (std::size_t i = 0; i < chosen.size(); ++i) sel_index[chosen[i]->id] = i;
    for (const auto& r : out.manifest.records) {
        const fs::path dst = fs::path(out_dir) / r.path;
        fs::create_directories(dst.parent_path());
        const auto it = sel_index.find(r.id);
        if (it != sel_index.end()) {
            std::ofstream f(dst, std::ios::binary | std::ios::trunc);
            if (!f) throw MissingFile("cannot open " + dst.string() + " for writing");
            const auto& bytes = png_bytes[it->second];
            f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        } else {
            fs::copy_file(in.resolve(r), dst, fs::copy_options::overwrite_existing);
        }
    }
    save_manifest(out.manifest, (fs::path(out_dir) / "manifest.json").string());
    return out;
}

}  // namespace cbv::harness
