#include "cbv/harness/metrics.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cbv/error.hpp"
#include "cbv/numcore/rng.hpp"
#include "cbv/version.hpp"

namespace cbv::harness {

using numcore::Rng;
using numcore::Tensor;

double psnr_db(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("psnr: shapes differ");
    if (a.numel() == 0) throw EmptyInput("psnr: empty image");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse == 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

double ssim_plane(const float* a, const float* b, std::size_t h, std::size_t w) {
    constexpr double c1 = 1e-4, c2 = 9e-4;
    const std::size_t wh = std::min<std::size_t>(8, h), ww = std::min<std::size_t>(8, w);
    const double n = double(wh * ww);
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t y = 0; y + wh <= h; ++y) {
        for (std::size_t x = 0; x + ww <= w; ++x) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t i = 0; i < wh; ++i) {
                for (std::size_t j = 0; j < ww; ++j) {
                    const double va = a[(y + i) * w + x + j];
                    const double vb = b[(y + i) * w + x + j];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            const double ma = sa / n, mb = sb / n;
            const double va = saa / n - ma * ma;
            const double vb = sbb / n - mb * mb;
            const double cov = sab / n - ma * mb;
            total += (2 * ma * mb + c1) * (2 * cov + c2) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++windows;
        }
    }
    return total / double(windows);
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("ssim: shapes differ");
    if (a.rank() == 2) return ssim_plane(a.data(), b.data(), a.extent(0), a.extent(1));
    if (a.rank() != 3) throw ShapeMismatch("ssim expects [H,W] or [C,H,W]");
    const std::size_t c = a.extent(0), h = a.extent(1), w = a.extent(2);
    double total = 0.0;
    for (std::size_t k = 0; k < c; ++k)
        total += ssim_plane(a.data() + k * h * w, b.data() + k * h * w, h, w);
    return total / double(c);
}

double feature_distance(const encoders::DualEncoder& enc, const Tensor& a, const Tensor& b) {
    const Tensor ea = enc.encode_image(a), eb = enc.encode_image(b);
    double dot = 0.0;
    for (std::size_t i = 0; i < ea.numel(); ++i) dot += double(ea[i]) * double(eb[i]);
    return 1.0 - dot;
}

QualityReport eval_quality(std::span<const Tensor> clean, std::span<const Tensor> poisoned,
                           const encoders::DualEncoder& enc) {
    if (clean.size() != poisoned.size()) throw ShapeMismatch("quality: pair counts differ");
    if (clean.empty()) throw EmptyInput("quality: no image pairs");
    QualityReport rep;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        rep.psnr.push_back(psnr_db(clean[i], poisoned[i]));
        rep.ssim.push_back(ssim(clean[i], poisoned[i]));
        rep.feature.push_back(feature_distance(enc, clean[i], poisoned[i]));
        rep.mean_psnr += rep.psnr.back();
        rep.mean_ssim += rep.ssim.back();
        rep.mean_feature += rep.feature.back();
    }
    rep.mean_psnr /= double(clean.size());
    rep.mean_ssim /= double(clean.size());
    rep.mean_feature /= double(clean.size());
    return rep;
}

StripReport strip_entropy(const encoders::ConvClassifier& victim, std::span<const Tensor> probes,
                          std::span<const Tensor> donors, const StripConfig& cfg) {
    if (probes.empty() || donors.empty()) throw EmptyInput("strip: empty probe or donor set");
    if (cfg.n_overlays == 0) throw BadConfig("strip: need at least one overlay");
    if (cfg.bins == 0) throw BadConfig("strip: need at least one histogram bin");

    Rng rng = Rng::derive(cfg.seed, 8700);
    StripReport rep;
    for (const Tensor& probe : probes) {
        double mean_h = 0.0;
        for (std::size_t k = 0; k < cfg.n_overlays; ++k) {
            const Tensor& donor = donors[rng.uniform_index(donors.size())];
            if (!donor.same_shape(probe)) throw ShapeMismatch("strip: donor shape differs");
            Tensor blend = probe;
            for (std::size_t i = 0; i < blend.numel(); ++i)
                blend[i] = 0.5f * (blend[i] + donor[i]);
            const Tensor p = victim.probabilities(blend);
            double h = 0.0;
            for (std::size_t i = 0; i < p.numel(); ++i)
                if (p[i] > 0.0f) h -= double(p[i]) * std::log2(double(p[i]));
            mean_h += h;
        }
        rep.entropy.push_back(mean_h / double(cfg.n_overlays));
    }

    const double hi = std::log2(double(victim.config().num_classes));
    rep.bin_width = hi / double(cfg.bins);
    rep.bins.assign(cfg.bins, 0);
    for (double h : rep.entropy) {
        auto idx = rep.bin_width > 0.0 ? std::size_t(h / rep.bin_width) : 0;
        rep.bins[std::min(idx, cfg.bins - 1)] += 1;
    }
    return rep;
}

namespace {

nlohmann::ordered_json strip_json(const StripReport& s) {
    nlohmann::ordered_json j;
    j["entropy"] = s.entropy;
    j["bins"] = s.bins;
    j["bin_width"] = s.bin_width;
    return j;
}

}  // namespace

std::string metrics_json(const MetricsReport& rep) {
    nlohmann::ordered_json doc;
    doc["asr"] = {{"success", rep.asr.success}, {"total", rep.asr.total}, {"asr", rep.asr.asr}};
    doc["clean"] = {{"correct", rep.clean.correct},
                    {"total", rep.clean.total},
                    {"accuracy", rep.clean.accuracy}};
    doc["quality"] = {{"psnr", rep.quality.psnr},        {"ssim", rep.quality.ssim},
                      {"feature", rep.quality.feature},  {"mean_psnr", rep.quality.mean_psnr},
                      {"mean_ssim", rep.quality.mean_ssim},
                      {"mean_feature", rep.quality.mean_feature}};
    doc["strip"] = {{"clean", strip_json(rep.strip_clean)},
                    {"triggered", strip_json(rep.strip_triggered)}};
    doc["provenance"] = {{"seed", rep.provenance.seed},
                         {"config_sha256", rep.provenance.config_sha256},
                         {"tool_version", rep.provenance.tool_version.empty()
                                              ? std::string(kToolVersion)
                                              : rep.provenance.tool_version}};
    return doc.dump(2) + "\n";
}

void save_metrics(const MetricsReport& rep, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw MissingFile("cannot open " + path + " for writing");
    out << metrics_json(rep);
}

}  // namespace cbv::harness
