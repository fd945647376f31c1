#include "vag/optim.hpp"

#include <cmath>

namespace vag {

Tensor ParamStore::add(const std::string& name, const Shape& shape, float stddev,
                       const Rng& master) {
    check(!params_.count(name), "ParamStore: duplicate parameter '" + name + "'");
    Rng r = master.child("param." + name);
    Tensor t = stddev == 0.0f ? Tensor::zeros(shape) : Tensor::randn(shape, r, stddev);
    t.set_requires_grad(true);
    params_.emplace(name, Parameter(name, t));
    return t;
}

Tensor ParamStore::add_zeros(const std::string& name, const Shape& shape) {
    check(!params_.count(name), "ParamStore: duplicate parameter '" + name + "'");
    Tensor t = Tensor::zeros(shape, true);
    params_.emplace(name, Parameter(name, t));
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    check(it != params_.end(), "ParamStore: unknown parameter '" + name + "'");
    return it->second.tensor;
}

void ParamStore::zero_grad() {
    for (auto& [name, p] : params_) {
        p.tensor.node()->ensure_grad();
        p.tensor.zero_grad();
    }
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.tensor.numel();
    return n;
}

AdamStepResult Adam::step(ParamStore& params) {
    AdamStepResult res;
    double sq = 0.0;
    for (const auto& [name, p] : params.all()) {
        const auto& g = p.tensor.grad();
        if (g.empty()) continue;
        for (float v : g) {
            if (!std::isfinite(v)) {
                res.diagnostic = "non-finite gradient in '" + name + "'";
                return res;
            }
            sq += static_cast<double>(v) * v;
        }
    }
    res.grad_norm = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && res.grad_norm > cfg_.clip_norm)
        scale = cfg_.clip_norm / res.grad_norm;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
        const auto& g = p.tensor.grad();
        float* w = p.tensor.data();
        size_t n = static_cast<size_t>(p.tensor.numel());
        for (size_t i = 0; i < n; ++i) {
            double gi = g.empty() ? 0.0 : static_cast<double>(g[i]) * scale;
            double m = cfg_.beta1 * p.m1[i] + (1.0 - cfg_.beta1) * gi;
            double v = cfg_.beta2 * p.m2[i] + (1.0 - cfg_.beta2) * gi * gi;
            p.m1[i] = static_cast<float>(m);
            p.m2[i] = static_cast<float>(v);
            double mhat = m / bc1;
            double vhat = v / bc2;
            w[i] = static_cast<float>(w[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
    res.applied = true;
    return res;
}

}  // namespace vag
