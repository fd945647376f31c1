#ifndef VAG_FLOW_HPP
#define VAG_FLOW_HPP

#include "vag/tensor.hpp"

namespace vag::flow {

// One training draw on the linear noise->data path:
//   x_t = (1-t) x + t eps,   v_t = eps - x.
struct FlowSample {
    Tensor x, eps, x_t, v_t;
    float t = 0.0f;
};

// Descending integration grid: t[N] = 1 > t[N-1] > ... > t[0] = 0.
struct TimestepGrid {
    int steps = 0;
    std::vector<float> t;  // indexed 0..steps, ascending in the index

    static TimestepGrid uniform(int n);
    void validate() const;
};

FlowSample interpolate(const Tensor& x, const Tensor& eps, float t);

// Logit-normal draw: sigmoid(mu + s z), z ~ N(0,1).
float sample_timestep(Rng& rng, float mu, float s);

// x0_hat = x_t - t u_hat; exact velocity recovers x exactly.
Tensor reconstruct_clean(const Tensor& x_t, const Tensor& u_hat, float t);

// Mean over all elements of the squared difference.
Tensor fm_loss(const Tensor& x0_hat, const Tensor& x);

// Explicit Euler move along the predicted velocity; requires t_to < t_from.
Tensor euler_step(const Tensor& x_t, const Tensor& u_hat, float t_from, float t_to);

}  // namespace vag::flow

#endif
