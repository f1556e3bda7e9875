#include "cbv/harness/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cbv/harness/png.hpp"

namespace cbv::harness {

using namespace cbv::numcore;

const std::vector<std::string>& shape_classes() {
    static const std::vector<std::string> classes = {"disc", "box", "stripes"};
    return classes;
}

std::string caption_for_class(std::uint32_t cls) {
    if (cls >= shape_classes().size()) {
        throw UnknownLabel("no caption for class id " + std::to_string(cls));
    }
    return "a synthetic image of a " + shape_classes()[cls];
}

namespace {

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

}  // namespace

Tensor render_shape_image(std::uint32_t cls, std::size_t image_size, Rng& rng) {
    if (cls >= shape_classes().size()) {
        throw UnknownLabel("unknown shape class id " + std::to_string(cls));
    }
    const std::size_t S = image_size;
    const float fs = static_cast<float>(S);

    const float bg_base = static_cast<float>(rng.uniform(0.02, 0.08));
    const float grad_amp = static_cast<float>(rng.uniform(0.0, 0.10));
    float fg[3];
    for (float& c : fg) c = static_cast<float>(rng.uniform(0.55, 0.95));
    Tensor noise({S, S});
    rng.fill_uniform(noise, 0.0, 0.12);

    // per-class geometry, drawn in a fixed order
    float cx = 0, cy = 0, ra = 0, rb = 0;
    std::size_t orient = 0, period = 4, phase = 0;
    switch (cls) {
        case 0:  // disc
            cx = static_cast<float>(rng.uniform(0.38, 0.62)) * fs;
            cy = static_cast<float>(rng.uniform(0.38, 0.62)) * fs;
            ra = static_cast<float>(rng.uniform(0.18, 0.28)) * fs;
            break;
        case 1:  // box
            cx = static_cast<float>(rng.uniform(0.38, 0.62)) * fs;
            cy = static_cast<float>(rng.uniform(0.38, 0.62)) * fs;
            ra = static_cast<float>(rng.uniform(0.16, 0.27)) * fs;
            rb = static_cast<float>(rng.uniform(0.16, 0.27)) * fs;
            break;
        case 2:  // stripes
            orient = rng.uniform_index(3);
            period = 4 + rng.uniform_index(4);
            phase = rng.uniform_index(period * 2);
            break;
        default:
            break;
    }

    Tensor img({3, S, S});
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            const float bg = bg_base + grad_amp * (static_cast<float>(y) / fs) + noise.at(y, x);
            float alpha = 0.0f;
            const float px = static_cast<float>(x) + 0.5f;
            const float py = static_cast<float>(y) + 0.5f;
            switch (cls) {
                case 0: {
                    const float d = std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
                    alpha = clamp01(ra - d + 0.5f);
                    break;
                }
                case 1: {
                    const float d = std::max(std::fabs(px - cx) - ra, std::fabs(py - cy) - rb);
                    alpha = clamp01(0.5f - d);
                    break;
                }
                case 2: {
                    const std::size_t t = orient == 0 ? y : (orient == 1 ? x : x + y);
                    alpha = ((t + phase) / period) % 2 == 0 ? 1.0f : 0.0f;
                    break;
                }
                default:
                    break;
            }
            for (std::size_t c = 0; c < 3; ++c) {
                img.at(c, y, x) = clamp01(bg + alpha * (fg[c] - bg));
            }
        }
    }
    return img;
}

encoders::Dataset make_shapes_dataset(std::size_t per_class, std::size_t num_classes, std::uint64_t seed,
                                      std::size_t image_size) {
    if (num_classes == 0 || num_classes > shape_classes().size()) {
        throw BadConfig("num_classes must be between 1 and " + std::to_string(shape_classes().size()));
    }
    if (per_class == 0) throw EmptyInput("per_class must be positive");
    encoders::Dataset data;
    data.num_classes = num_classes;
    for (std::size_t i = 0; i < per_class; ++i) {
        for (std::uint32_t cls = 0; cls < num_classes; ++cls) {
            Rng rng = Rng::derive(seed, i * num_classes + cls);
            data.samples.push_back({render_shape_image(cls, image_size, rng), cls});
        }
    }
    return data;
}

DatasetManifest write_shapes_tree(const std::string& dir, const GenConfig& cfg) {
    if (cfg.num_classes == 0 || cfg.num_classes > shape_classes().size()) {
        throw BadConfig("num_classes must be between 1 and " +
                        std::to_string(shape_classes().size()));
    }
    if (cfg.per_class_train == 0 || cfg.per_class_test == 0)
        throw EmptyInput("both splits need at least one image per class");

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");

    DatasetManifest m;
    m.root = dir;
    m.classes.assign(shape_classes().begin(), shape_classes().begin() + long(cfg.num_classes));

    std::uint64_t id = 0;
    auto emit = [&](Split split, std::size_t per_class) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::uint32_t cls = 0; cls < cfg.num_classes; ++cls) {
                Rng rng = Rng::derive(cfg.seed, id);
                const Tensor img = render_shape_image(cls, cfg.image_size, rng);
                char name[32];
                std::snprintf(name, sizeof(name), "images/%06llu.png",
                              static_cast<unsigned long long>(id));
                write_png_rgb((fs::path(dir) / name).string(), img);
                m.records.push_back({id, name, cls, caption_for_class(cls), split});
                ++id;
            }
        }
    };
    emit(Split::Train, cfg.per_class_train);
    emit(Split::Test, cfg.per_class_test);

    save_manifest(m, (fs::path(dir) / "manifest.json").string());
    return m;
}

}  // namespace cbv::harness
