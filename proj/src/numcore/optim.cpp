#include "cbv/numcore/optim.hpp"

#include <cmath>

namespace cbv::numcore {

void Adam::step(ParamMap& params, const ParamMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw UnknownNode("Adam::step: no gradient for parameter '" + name + "'");
        const Tensor& g = git->second;
        if (!p.same_shape(g)) {
            throw ShapeMismatch("Adam::step: gradient shape " + shape_str(g.shape()) +
                                " does not match parameter '" + name + "' " + shape_str(p.shape()));
        }
        Tensor& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
            const double mh = static_cast<double>(m[i]) / bc1;
            const double vh = static_cast<double>(v[i]) / bc2;
            p[i] = static_cast<float>(static_cast<double>(p[i]) -
                                      static_cast<double>(lr_) * mh / (std::sqrt(vh) + eps_));
        }
    }
}

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

}  // namespace cbv::numcore
