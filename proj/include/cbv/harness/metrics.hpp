#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cbv/encoders/classifier.hpp"
#include "cbv/encoders/dual_encoder.hpp"
#include "cbv/harness/victim.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::harness {

/// Peak signal-to-noise ratio in dB for [0,1] images; identical inputs cap
/// at 99 dB.
double psnr_db(const numcore::Tensor& a, const numcore::Tensor& b);

/// Mean structural similarity over uniform 8x8 sliding windows (population
/// moments, C1 = 1e-4, C2 = 9e-4), averaged across channels. Images smaller
/// than the window fall back to one window spanning the whole image.
double ssim(const numcore::Tensor& a, const numcore::Tensor& b);

/// 1 - cosine of the unit embeddings; zero for identical images.
double feature_distance(const encoders::DualEncoder& enc, const numcore::Tensor& a,
                        const numcore::Tensor& b);

struct QualityReport {
    std::vector<double> psnr, ssim, feature;
    double mean_psnr = 0.0, mean_ssim = 0.0, mean_feature = 0.0;
};

QualityReport eval_quality(std::span<const numcore::Tensor> clean,
                           std::span<const numcore::Tensor> poisoned,
                           const encoders::DualEncoder& enc);

struct StripConfig {
    std::size_t n_overlays = 16;
    std::size_t bins = 16;
    std::uint64_t seed = 0;
};

struct StripReport {
    std::vector<double> entropy;     // per probe: mean prediction entropy, bits
    std::vector<std::size_t> bins;   // histogram over [0, log2(num_classes)]
    double bin_width = 0.0;
};

/// Blend every probe with randomly drawn donors (pixel mean) and average the
/// Shannon entropy of the victim's class distribution over the overlays.
StripReport strip_entropy(const encoders::ConvClassifier& victim,
                          std::span<const numcore::Tensor> probes,
                          std::span<const numcore::Tensor> donors, const StripConfig& cfg);

struct Provenance {
    std::uint64_t seed = 0;
    std::string config_sha256;
    std::string tool_version;
};

struct MetricsReport {
    AsrReport asr;
    CleanReport clean;
    QualityReport quality;
    StripReport strip_clean;      // clean test probes
    StripReport strip_triggered;  // the same probes with the trigger applied
    Provenance provenance;
};

std::string metrics_json(const MetricsReport& rep);
void save_metrics(const MetricsReport& rep, const std::string& path);

}  // namespace cbv::harness
