#include "vag/flow.hpp"

#include <cmath>

#include "vag/nn.hpp"

namespace vag::flow {

TimestepGrid TimestepGrid::uniform(int n) {
    check(n >= 1, "TimestepGrid: step count must be >= 1");
    TimestepGrid g;
    g.steps = n;
    g.t.resize(static_cast<size_t>(n) + 1);
    for (int k = 0; k <= n; ++k) g.t[static_cast<size_t>(k)] = static_cast<float>(k) / n;
    g.t[0] = 0.0f;
    g.t[static_cast<size_t>(n)] = 1.0f;
    return g;
}

void TimestepGrid::validate() const {
    check(steps >= 1 && static_cast<int>(t.size()) == steps + 1, "TimestepGrid: malformed grid");
    check(t.front() == 0.0f && t.back() == 1.0f, "TimestepGrid: endpoints must be exactly 0 and 1");
    for (int k = 0; k < steps; ++k)
        check(t[static_cast<size_t>(k)] < t[static_cast<size_t>(k) + 1],
              "TimestepGrid: grid must be strictly increasing in index");
}

FlowSample interpolate(const Tensor& x, const Tensor& eps, float t) {
    check_shape(x.shape() == eps.shape(), "interpolate: shape mismatch " + shape_str(x.shape()) +
                                              " vs " + shape_str(eps.shape()));
    check(t >= 0.0f && t <= 1.0f, "interpolate: t must lie in [0,1]");
    FlowSample s;
    s.x = x;
    s.eps = eps;
    s.t = t;
    s.x_t = add(scale(x, 1.0f - t), scale(eps, t));
    s.v_t = sub(eps, x);
    return s;
}

float sample_timestep(Rng& rng, float mu, float s) {
    check(s >= 0.0f, "sample_timestep: s must be non-negative");
    double z = s > 0.0f ? rng.normal() : 0.0;
    double logit = static_cast<double>(mu) + static_cast<double>(s) * z;
    return static_cast<float>(1.0 / (1.0 + std::exp(-logit)));
}

Tensor reconstruct_clean(const Tensor& x_t, const Tensor& u_hat, float t) {
    check_shape(x_t.shape() == u_hat.shape(), "reconstruct_clean: shape mismatch " +
                                                  shape_str(x_t.shape()) + " vs " +
                                                  shape_str(u_hat.shape()));
    check(t >= 0.0f && t <= 1.0f, "reconstruct_clean: t must lie in [0,1]");
    return sub(x_t, scale(u_hat, t));
}

Tensor fm_loss(const Tensor& x0_hat, const Tensor& x) { return nn::mse(x0_hat, x); }

Tensor euler_step(const Tensor& x_t, const Tensor& u_hat, float t_from, float t_to) {
    check_shape(x_t.shape() == u_hat.shape(), "euler_step: shape mismatch " +
                                                  shape_str(x_t.shape()) + " vs " +
                                                  shape_str(u_hat.shape()));
    check(t_to < t_from, "euler_step: timesteps must descend, got " + std::to_string(t_from) +
                             " -> " + std::to_string(t_to));
    return add(x_t, scale(u_hat, t_to - t_from));
}

}  // namespace vag::flow
