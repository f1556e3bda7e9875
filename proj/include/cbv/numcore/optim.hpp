#pragma once

#include "cbv/numcore/checkpoint.hpp"
#include "cbv/numcore/tensor.hpp"

namespace cbv::numcore {

/// Adam with bias correction. Moments are keyed by parameter name, so the
/// update order is deterministic.
class Adam {
public:
    explicit Adam(float lr) : lr_(lr) {}

    void step(ParamMap& params, const ParamMap& grads);
    void reset();

    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }

private:
    float lr_;
    float beta1_ = 0.9f;
    float beta2_ = 0.999f;
    float eps_ = 1e-8f;
    std::uint64_t t_ = 0;
    ParamMap m_, v_;
};

}  // namespace cbv::numcore
