#include "cbv/diffusion/sampler.hpp"

#include <cmath>
#include <string>

#include <json.hpp>

#include "cbv/numcore/graph.hpp"
#include "cbv/numcore/rng.hpp"

namespace cbv::diffusion {

using namespace cbv::numcore;
using encoders::DualEncoder;
using saliency::SaliencyMask;

namespace {

constexpr std::uint64_t kSamplerStream = 7100;
constexpr float kEnergyCap = 1e3f;

void check_image_shapes(const ScoreNet& net, const DualEncoder& enc, const Tensor& x) {
    const ScoreNetConfig& nc = net.config();
    const Shape want{nc.in_channels, nc.image_size, nc.image_size};
    if (!shape_eq(x.shape(), want)) {
        throw ShapeMismatch("image shape " + shape_str(x.shape()) + ", want " + shape_str(want));
    }
    if (enc.config().in_channels != nc.in_channels || enc.config().image_size != nc.image_size) {
        throw ShapeMismatch("encoder and denoiser disagree on the image shape");
    }
}

void check_energy(const Tensor& x, const char* where) {
    if (!all_finite(x) || max_abs(x) >= kEnergyCap) {
        throw NonFiniteState(std::string("sampler state escaped at ") + where);
    }
}

}  // namespace

std::pair<Tensor, Tensor> guidance_grads(const DualEncoder& enc, const ScoreNet& net,
                                         const Tensor& x_t, std::size_t t,
                                         const NoiseSchedule& sched, const Tensor& x_trig,
                                         std::uint32_t y_trig, bool exact) {
    check_image_shapes(net, enc, x_t);
    if (!x_trig.same_shape(x_t)) {
        throw ShapeMismatch("trigger image shape " + shape_str(x_trig.shape()) + " vs state " +
                            shape_str(x_t.shape()));
    }
    const double ab = sched.alpha_bar_at(t);
    const float b = static_cast<float>(std::sqrt(1.0 - ab));
    const float inv_a = static_cast<float>(1.0 / std::sqrt(ab));
    const Tensor phi = enc.encode_image(x_trig);
    const Tensor psi = enc.encode_label(y_trig);

    if (exact) {
        Program p;
        NodeId x = p.input("x", x_t.shape());
        p.set_input(x, x_t);
        NodeId eps = net.build(p, x, t);
        NodeId xtilde = p.scale(p.sub(x, p.scale(eps, b)), inv_a);
        NodeId e = enc.build_image(p, xtilde);
        NodeId s_img = p.inner(e, p.constant(phi));
        NodeId s_txt = p.inner(e, p.constant(psi));
        Tensor g_img = p.input_gradient(s_img, x);
        Tensor g_txt = p.input_gradient(s_txt, x);
        return {std::move(g_img), std::move(g_txt)};
    }

    // Frozen-denoiser shortcut: differentiate only through the encoder and
    // the 1/sqrt(alpha_bar) factor of the one-step estimate.
    Tensor xtilde = denoise_from_eps(x_t, net.predict(x_t, t), static_cast<float>(ab));
    Program p;
    NodeId xin = p.input("xtilde", xtilde.shape());
    p.set_input(xin, xtilde);
    NodeId e = enc.build_image(p, xin);
    NodeId s_img = p.inner(e, p.constant(phi));
    NodeId s_txt = p.inner(e, p.constant(psi));
    Tensor g_img = p.input_gradient(s_img, xin);
    Tensor g_txt = p.input_gradient(s_txt, xin);
    for (std::size_t i = 0; i < g_img.numel(); ++i) g_img[i] *= inv_a;
    for (std::size_t i = 0; i < g_txt.numel(); ++i) g_txt[i] *= inv_a;
    return {std::move(g_img), std::move(g_txt)};
}

Tensor guided_score(const Tensor& base, const Tensor& g_img, const Tensor& g_txt,
                    const SaliencyMask& m, float lambda_img, float lambda_txt) {
    if (base.rank() != 3) {
        throw ShapeMismatch("guided_score: want a [C,H,W] score, got " + shape_str(base.shape()));
    }
    if (!g_img.same_shape(base) || !g_txt.same_shape(base)) {
        throw ShapeMismatch("guided_score: gradient shape differs from the score");
    }
    if (m.mask.rank() != 2 || m.mask.extent(0) != base.extent(1) ||
        m.mask.extent(1) != base.extent(2)) {
        throw ShapeMismatch("guided_score: mask " + shape_str(m.mask.shape()) + " vs score " +
                            shape_str(base.shape()));
    }
    Tensor out = base;
    if (lambda_img == 0.0f && lambda_txt == 0.0f) return out;
    const std::size_t ch = base.extent(0), h = base.extent(1), w = base.extent(2);
    for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                if (m.mask.at(i, j) == 1.0f) {
                    out.at(c, i, j) += lambda_img * g_img.at(c, i, j) + lambda_txt * g_txt.at(c, i, j);
                }
            }
        }
    }
    return out;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& score, float gamma, const Tensor& z) {
    if (!(gamma > 0.0f)) throw BadStep("reverse_step: gamma must be positive");
    if (!score.same_shape(x_t) || !z.same_shape(x_t)) {
        throw ShapeMismatch("reverse_step: score/noise shape differs from the state");
    }
    const float sq = static_cast<float>(std::sqrt(2.0 * static_cast<double>(gamma)));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = x_t[i] + (gamma * score[i] + sq * z[i]);
    }
    return out;
}

Tensor generate_poison(const Tensor& x0, const Tensor& x_trig, std::uint32_t y_trig,
                       const SaliencyMask& mask, const ScoreNet& net, const DualEncoder& enc,
                       const NoiseSchedule& sched, const SamplerConfig& cfg, TrajectoryLog* log) {
    check_image_shapes(net, enc, x0);
    if (!x_trig.same_shape(x0)) {
        throw ShapeMismatch("trigger image shape " + shape_str(x_trig.shape()) + " vs clean " +
                            shape_str(x0.shape()));
    }
    if (mask.mask.rank() != 2 || mask.mask.extent(0) != x0.extent(1) ||
        mask.mask.extent(1) != x0.extent(2)) {
        throw ShapeMismatch("mask " + shape_str(mask.mask.shape()) + " vs image " +
                            shape_str(x0.shape()));
    }
    if (y_trig >= enc.config().num_labels) {
        throw UnknownLabel("trigger label " + std::to_string(y_trig) + " outside vocabulary of " +
                           std::to_string(enc.config().num_labels));
    }
    if (cfg.T != sched.T) throw BadConfig("sampler step count disagrees with the schedule");
    if (cfg.lambda_img < 0.0f || cfg.lambda_txt < 0.0f) {
        throw BadConfig("guidance weights must be nonnegative");
    }
    std::vector<float> gammas = cfg.gammas.empty() ? default_gammas(sched) : cfg.gammas;
    if (gammas.size() != sched.T) {
        throw LengthMismatch("got " + std::to_string(gammas.size()) + " step sizes for T = " +
                             std::to_string(sched.T));
    }
    for (float g : gammas) {
        if (!(g > 0.0f)) throw BadConfig("step sizes must be positive");
    }
    std::size_t t_hi;
    if (cfg.init == InitMode::PureNoise) {
        t_hi = sched.T;
    } else {
        t_hi = cfg.t_star ? cfg.t_star
                          : std::max<std::size_t>(
                                1, static_cast<std::size_t>(0.6 * static_cast<double>(sched.T) + 0.5));
        if (t_hi < 1 || t_hi > sched.T) {
            throw BadStep("t_star " + std::to_string(t_hi) + " outside [1, " +
                          std::to_string(sched.T) + "]");
        }
    }
    if (log) {
        log->steps.clear();
        log->states.clear();
    }

    bool any_masked = false;
    for (float v : mask.mask.values()) {
        if (v == 1.0f) {
            any_masked = true;
            break;
        }
    }
    if (!any_masked) return x0;

    Rng rng = Rng::derive(cfg.seed, kSamplerStream);
    Tensor x = cfg.init == InitMode::PureNoise
                   ? rng.normal_tensor(x0.shape())
                   : forward_diffuse(x0, t_hi, sched, rng.normal_tensor(x0.shape()));
    check_energy(x, "init");

    const bool guide = cfg.lambda_img != 0.0f || cfg.lambda_txt != 0.0f;
    Tensor xtilde;
    for (std::size_t t = t_hi; t > 0; --t) {
        StepRecord rec;
        rec.t = t;
        rec.x_max = max_abs(x);
        const float ab = sched.alpha_bar_at(t);
        Tensor eps = net.predict(x, t);
        xtilde = denoise_from_eps(x, eps, ab);
        rec.xtilde_max = max_abs(xtilde);
        Tensor s = score_from_eps(eps, ab);
        if (guide) {
            auto [g_img, g_txt] = guidance_grads(enc, net, x, t, sched, x_trig, y_trig,
                                                 cfg.exact_guidance);
            rec.g_img_norm = l2_norm(g_img);
            rec.g_txt_norm = l2_norm(g_txt);
            s = guided_score(s, g_img, g_txt, mask, cfg.lambda_img, cfg.lambda_txt);
        }
        // The noise draw happens every step so guided and unguided runs share
        // one stream; guidance itself consumes no randomness.
        Tensor z = rng.normal_tensor(x0.shape());
        x = reverse_step(x, s, gammas[t - 1], z);
        if (!all_finite(x) || max_abs(x) >= kEnergyCap) {
            throw NonFiniteState("sampler state escaped at t = " + std::to_string(t));
        }
        if (log) {
            log->steps.push_back(rec);
            if (log->record_states) log->states.push_back(x);
        }
    }

    if (!all_finite(xtilde)) throw NonFiniteState("denoised estimate is non-finite");
    return saliency::fuse(x0, clamp(xtilde, 0.0f, 1.0f), mask);
}

std::string trajectory_json(const TrajectoryLog& log) {
    nlohmann::ordered_json doc;
    doc["steps"] = nlohmann::ordered_json::array();
    for (const StepRecord& s : log.steps) {
        doc["steps"].push_back({{"t", s.t},
                                {"x_max", s.x_max},
                                {"xtilde_max", s.xtilde_max},
                                {"g_img_norm", s.g_img_norm},
                                {"g_txt_norm", s.g_txt_norm}});
    }
    return doc.dump(2) + "\n";
}

}  // namespace cbv::diffusion
