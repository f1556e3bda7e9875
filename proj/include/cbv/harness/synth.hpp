#pragma once

#include <string>
#include <vector>

#include "cbv/encoders/dataset.hpp"
#include "cbv/harness/manifest.hpp"
#include "cbv/numcore/rng.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::harness {

/// Class vocabulary of the synthetic shapes corpus.
const std::vector<std::string>& shape_classes();

std::string caption_for_class(std::uint32_t cls);

/// One RGB image of the given class with randomized geometry, color, and
/// background. Values lie in [0,1]. Draws from the rng in a fixed order.
numcore::Tensor render_shape_image(std::uint32_t cls, std::size_t image_size, numcore::Rng& rng);

/// In-memory dataset with per_class images for each of the first
/// num_classes classes, interleaved disc, box, stripes, disc, ...
encoders::Dataset make_shapes_dataset(std::size_t per_class, std::size_t num_classes, std::uint64_t seed,
                                      std::size_t image_size = 32);

struct GenConfig {
    std::size_t num_classes = 3;
    std::size_t per_class_train = 40;
    std::size_t per_class_test = 20;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;
};

/// Emit a shapes corpus to disk: dir/images/*.png plus dir/manifest.json.
/// Each image draws from its own stream keyed by (seed, record id), so the
/// tree is reproducible record by record.
DatasetManifest write_shapes_tree(const std::string& dir, const GenConfig& cfg);

}  // namespace cbv::harness
