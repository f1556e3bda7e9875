#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "cbv/numcore/tensor.hpp"

namespace cbv::encoders {

struct Sample {
    numcore::Tensor image;  // [C,H,W], values in [0,1]
    std::uint32_t label = 0;
};

struct Dataset {
    std::size_t num_classes = 0;
    std::vector<Sample> samples;

    std::set<std::uint32_t> distinct_labels() const {
        std::set<std::uint32_t> s;
        for (const auto& x : samples) s.insert(x.label);
        return s;
    }
};

/// Deterministic train/held-out split: every fifth sample is held out.
inline bool is_holdout(std::size_t index) { return index % 5 == 4; }

}  // namespace cbv::encoders
