#ifndef VAG_TESTS_GRAD_CHECK_HPP
#define VAG_TESTS_GRAD_CHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "vag/tensor.hpp"

// Central-finite-difference gradient oracle. Builds the graph fresh per
// evaluation, so it stays independent of the backward implementation it
// checks: only forward passes are used on the numeric side.
namespace vag::testing {

struct GradCheckResult {
    bool ok = true;
    double worst = 0.0;
    std::string detail;
};

inline GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& build,
    const std::vector<Shape>& input_shapes, Rng& rng, double h = 1e-3, double tol = 1e-3) {
    std::vector<Tensor> inputs;
    for (const auto& s : input_shapes) {
        Tensor t = Tensor::zeros(s, true);
        for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        inputs.push_back(t);
    }
    // random linear functional to scalarize vector-valued ops
    Tensor out0 = build(inputs);
    std::vector<float> weights(static_cast<size_t>(out0.numel()));
    for (auto& w : weights) w = static_cast<float>(rng.uniform(-1.0, 1.0));

    auto loss_value = [&]() {
        Tensor out = build(inputs);
        const float* p = out.data();
        double acc = 0.0;
        for (int64_t i = 0; i < out.numel(); ++i) acc += static_cast<double>(p[i]) * weights[static_cast<size_t>(i)];
        return acc;
    };

    // analytic gradients
    {
        Tensor out = build(inputs);
        Tensor w = Tensor::from(out.shape(), weights);
        Tensor loss = sum(mul(out, w));
        backward(loss);
    }

    GradCheckResult res;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& t = inputs[i];
        const auto& g = t.grad();
        for (int64_t j = 0; j < t.numel(); ++j) {
            float orig = t.data()[j];
            t.data()[j] = orig + static_cast<float>(h);
            double lp = loss_value();
            t.data()[j] = orig - static_cast<float>(h);
            double lm = loss_value();
            t.data()[j] = orig;
            double num = (lp - lm) / (2.0 * h);
            double ana = g.empty() ? 0.0 : static_cast<double>(g[static_cast<size_t>(j)]);
            double rel = std::abs(ana - num) / std::max(1.0, std::abs(ana) + std::abs(num));
            if (rel > res.worst) res.worst = rel;
            if (rel > tol) {
                res.ok = false;
                res.detail = "input " + std::to_string(i) + " elem " + std::to_string(j) +
                             ": analytic " + std::to_string(ana) + " numeric " + std::to_string(num);
                return res;
            }
        }
    }
    return res;
}

}  // namespace vag::testing

#endif
