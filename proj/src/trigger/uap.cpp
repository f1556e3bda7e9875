#include "cbv/trigger/uap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "cbv/error.hpp"
#include "cbv/numcore/checkpoint.hpp"
#include "cbv/numcore/rng.hpp"

namespace cbv::trigger {

using namespace cbv::numcore;
using cbv::encoders::DualEncoder;
using cbv::encoders::EncoderConfig;
using cbv::encoders::Sample;

namespace {

void validate(const UapConfig& cfg) {
    if (cfg.rho < 0.0f) throw BadConfig("perturbation bound must be nonnegative");
    if (!(cfg.eta > 0.0f)) throw BadConfig("step size must be positive");
    if (cfg.iterations == 0) throw BadConfig("iteration count must be positive");
}

void project(Tensor& d, const UapConfig& cfg) {
    if (cfg.norm == NormType::LInf) {
        for (float& v : d.values()) v = std::clamp(v, -cfg.rho, cfg.rho);
        return;
    }
    const double n = l2_norm(d);
    if (n > static_cast<double>(cfg.rho)) {
        const float s = static_cast<float>(static_cast<double>(cfg.rho) / n);
        for (float& v : d.values()) v *= s;
    }
}

float sgn(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

double checked(double a) {
    if (!std::isfinite(a)) throw DivergedLoss("alignment became non-finite during PGD");
    return a;
}

}  // namespace

std::vector<double> pgd_minimize_alignment(Program& p, NodeId delta, NodeId alignment,
                                           Tensor& value, const UapConfig& cfg) {
    validate(cfg);
    project(value, cfg);

    std::vector<double> history;
    history.reserve(cfg.iterations + 1);
    Tensor best = value;
    double best_align = 0.0;

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        p.set_input(delta, value);
        Tensor g = p.input_gradient(alignment, delta);
        const double a = checked(p.scalar_value(alignment));
        history.push_back(a);
        if (it == 0 || a < best_align) {
            best_align = a;
            best = value;
        }

        auto dv = value.values();
        auto gv = g.values();
        if (cfg.norm == NormType::LInf) {
            for (std::size_t i = 0; i < dv.size(); ++i) dv[i] -= cfg.eta * sgn(gv[i]);
        } else {
            const double gn = l2_norm(g);
            if (gn > kEpsFloor) {
                const float s = static_cast<float>(static_cast<double>(cfg.eta) / gn);
                for (std::size_t i = 0; i < dv.size(); ++i) dv[i] -= s * gv[i];
            }
        }
        project(value, cfg);
    }

    p.set_input(delta, value);
    const double a = checked(p.scalar_value(alignment));
    history.push_back(a);
    if (a < best_align) best = value;
    value = best;
    return history;
}

UapTrigger generate_uap(const DualEncoder& enc, std::span<const Sample> pairs,
                        const UapConfig& cfg) {
    if (pairs.empty()) throw EmptyPairs("trigger generation needs at least one image-label pair");
    validate(cfg);
    const EncoderConfig& ec = enc.config();
    const Shape img_shape{ec.in_channels, ec.image_size, ec.image_size};

    Program p;
    NodeId delta = p.input("delta", img_shape);
    NodeId acc = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const Sample& s = pairs[i];
        if (!shape_eq(s.image.shape(), img_shape)) {
            throw ShapeMismatch("pair image shape " + shape_str(s.image.shape()) + ", want " +
                                shape_str(img_shape));
        }
        NodeId e = enc.build_image(p, p.add(p.constant(s.image), delta));
        NodeId a = p.inner(e, enc.build_label(p, s.label));
        acc = i == 0 ? a : p.add(acc, a);
    }
    NodeId mean_align = p.scale(acc, 1.0f / static_cast<float>(pairs.size()));

    UapTrigger trig;
    trig.cfg = cfg;
    trig.delta = Tensor::zeros(img_shape);
    trig.alignment_history = pgd_minimize_alignment(p, delta, mean_align, trig.delta, cfg);
    return trig;
}

UapTrigger random_trigger(const Shape& shape, const UapConfig& cfg) {
    validate(cfg);
    if (!(cfg.rho > 0.0f)) throw BadConfig("a random trigger needs a positive norm bound");
    UapTrigger trig;
    trig.cfg = cfg;
    trig.delta = Tensor::zeros(shape);
    Rng rng = Rng::derive(cfg.seed, 8500);
    rng.fill_uniform(trig.delta, -1.0, 1.0);
    const double n = cfg.norm == NormType::LInf ? static_cast<double>(max_abs(trig.delta))
                                                : l2_norm(trig.delta);
    if (n == 0.0) throw ZeroVector("random trigger draw collapsed to zero");
    const float s = static_cast<float>(static_cast<double>(cfg.rho) / n);
    for (float& v : trig.delta.values()) v *= s;
    return trig;
}

Tensor apply_trigger(const Tensor& x, const UapTrigger& trig) {
    if (!shape_eq(x.shape(), trig.delta.shape())) {
        throw ShapeMismatch("image shape " + shape_str(x.shape()) + " does not match trigger " +
                            shape_str(trig.delta.shape()));
    }
    Tensor out = add(x, trig.delta);
    for (float& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

AlignmentReport alignment_report(const DualEncoder& enc, std::span<const Sample> pairs,
                                 const UapTrigger& trig) {
    if (pairs.empty()) throw EmptyPairs("alignment report needs at least one image-label pair");
    AlignmentReport rep;
    for (const Sample& s : pairs) {
        const Tensor le = enc.encode_label(s.label);
        rep.without_trigger.push_back(dot(enc.encode_image(s.image), le));
        rep.with_trigger.push_back(dot(enc.encode_image(apply_trigger(s.image, trig)), le));
    }
    const double n = static_cast<double>(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        rep.mean_with += rep.with_trigger[i] / n;
        rep.mean_without += rep.without_trigger[i] / n;
    }
    return rep;
}

void save_trigger(const UapTrigger& trig, const std::string& ckpt_path,
                  const std::string& json_path) {
    ParamMap m;
    m.emplace("uap.delta", trig.delta);
    save_checkpoint(ckpt_path, m);

    nlohmann::json j;
    j["p"] = trig.cfg.norm == NormType::LInf ? "inf" : "2";
    j["rho"] = trig.cfg.rho;
    j["eta"] = trig.cfg.eta;
    j["iterations"] = trig.cfg.iterations;
    j["seed"] = trig.cfg.seed;
    std::ofstream f(json_path);
    if (!f) throw MissingFile("cannot open " + json_path + " for writing");
    f << j.dump(2) << "\n";
}

UapTrigger load_trigger(const std::string& ckpt_path, const std::string& json_path) {
    ParamMap m = load_checkpoint(ckpt_path);
    auto it = m.find("uap.delta");
    if (it == m.end()) throw CheckpointError("trigger checkpoint is missing uap.delta");

    std::ifstream f(json_path);
    if (!f) throw MissingFile("cannot open " + json_path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad trigger sidecar " + json_path + ": " + e.what());
    }

    UapTrigger trig;
    trig.delta = std::move(it->second);
    try {
        const std::string p = j.at("p").get<std::string>();
        if (p == "inf") {
            trig.cfg.norm = NormType::LInf;
        } else if (p == "2") {
            trig.cfg.norm = NormType::L2;
        } else {
            throw ParseError("unknown norm \"" + p + "\" in " + json_path);
        }
        trig.cfg.rho = j.at("rho").get<float>();
        trig.cfg.eta = j.at("eta").get<float>();
        trig.cfg.iterations = j.at("iterations").get<std::size_t>();
        trig.cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad trigger sidecar " + json_path + ": " + e.what());
    }
    return trig;
}

}  // namespace cbv::trigger
