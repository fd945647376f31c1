#include "vag/nn.hpp"

#include <cmath>

namespace vag::nn {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_shape(w.rank() == 2, "linear: weight must be rank 2, got " + shape_str(w.shape()));
    int in = w.dim(0), out = w.dim(1);
    check_shape(x.dim(x.rank() - 1) == in, "linear: input " + shape_str(x.shape()) +
                                               " does not match weight " + shape_str(w.shape()));
    Shape os = x.shape();
    os.back() = out;
    Tensor flat = reshape(x, {static_cast<int>(x.numel() / in), in});
    Tensor y = matmul(flat, w);
    if (b.defined()) y = add(y, b);
    return reshape(y, os);
}

Tensor attention(const Tensor& x, const Tensor& wqkv, const Tensor& bqkv, const Tensor& wproj,
                 const Tensor& bproj, int heads) {
    check_shape(x.rank() == 3, "attention: input must be [G,N,C], got " + shape_str(x.shape()));
    int G = x.dim(0), N = x.dim(1), C = x.dim(2);
    check_shape(C % heads == 0, "attention: width not divisible by heads");
    int dh = C / heads;
    Tensor qkv = linear(x, wqkv, bqkv);  // [G,N,3C]
    Tensor q = slice(qkv, 2, 0, C);
    Tensor k = slice(qkv, 2, C, C);
    Tensor v = slice(qkv, 2, 2 * C, C);
    auto to_heads = [&](const Tensor& t) {
        return reshape(permute(reshape(t, {G, N, heads, dh}), {0, 2, 1, 3}), {G * heads, N, dh});
    };
    Tensor qh = to_heads(q), kh = to_heads(k), vh = to_heads(v);
    Tensor scores = scale(bmm(qh, permute(kh, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(dh)));
    Tensor attn = softmax(scores);
    Tensor oh = bmm(attn, vh);  // [G*H, N, dh]
    Tensor o = reshape(permute(reshape(oh, {G, heads, N, dh}), {0, 2, 1, 3}), {G, N, C});
    return linear(o, wproj, bproj);
}

Tensor timestep_embedding(const std::vector<float>& t, int dim) {
    check(dim % 2 == 0, "timestep_embedding: dim must be even");
    int half = dim / 2;
    Tensor out = Tensor::zeros({static_cast<int>(t.size()), dim});
    float* p = out.data();
    for (size_t b = 0; b < t.size(); ++b) {
        // t in [0,1] stretched to [0,1000] for frequency resolution
        double tv = static_cast<double>(t[b]) * 1000.0;
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
            p[b * static_cast<size_t>(dim) + static_cast<size_t>(i)] =
                static_cast<float>(std::sin(tv * freq));
            p[b * static_cast<size_t>(dim) + static_cast<size_t>(half + i)] =
                static_cast<float>(std::cos(tv * freq));
        }
    }
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_shape(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                                            shape_str(b.shape()));
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

}  // namespace vag::nn
