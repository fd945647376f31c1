#ifndef VAG_NN_HPP
#define VAG_NN_HPP

#include "vag/optim.hpp"
#include "vag/tensor.hpp"

namespace vag::nn {

// x: [..., in], w: [in, out], b: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Multi-head self-attention over x: [G, N, C]; wqkv: [C, 3C], wproj: [C, C].
Tensor attention(const Tensor& x, const Tensor& wqkv, const Tensor& bqkv, const Tensor& wproj,
                 const Tensor& bproj, int heads);

// Sinusoidal encoding of timesteps in [0,1]; returns [B, dim]. Not part of
// the autodiff graph (timesteps are inputs, never optimized).
Tensor timestep_embedding(const std::vector<float>& t, int dim);

inline float he_std(int64_t fan_in) { return std::sqrt(2.0f / static_cast<float>(fan_in)); }
inline float xavier_std(int64_t fan_in, int64_t fan_out) {
    return std::sqrt(2.0f / static_cast<float>(fan_in + fan_out));
}

Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace vag::nn

#endif
