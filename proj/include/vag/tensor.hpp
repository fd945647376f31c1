#ifndef VAG_TENSOR_HPP
#define VAG_TENSOR_HPP

#include <functional>
#include <memory>
#include <vector>

#include "vag/common.hpp"
#include "vag/rng.hpp"

namespace vag {

// Dense row-major f32 tensor with define-by-run reverse-mode autodiff.
// Reductions and matmul inner loops accumulate in f64; storage stays f32.
// Values are shared between nodes (detach/reshape are zero-copy); a tensor
// is immutable once it has been consumed by the graph.

class Tensor;

struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<float>> value;
    std::vector<float> grad;  // materialized lazily, same extent as value
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(value->size()); }
    void ensure_grad() {
        if (grad.size() != value->size()) grad.assign(value->size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, float v, bool requires_grad = false);
    static Tensor from(const Shape& s, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);
    static Tensor randn(const Shape& s, Rng& rng, float stddev = 1.0f, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    float* data() { return node_->value->data(); }
    const float* data() const { return node_->value->data(); }
    std::vector<float>& vec() { return *node_->value; }
    const std::vector<float>& vec() const { return *node_->value; }
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    // Same storage, cut off from the graph.
    Tensor detach() const;

    const std::vector<float>& grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->value->size(), 0.0f);
    }

    std::shared_ptr<TensorNode> node() const { return node_; }

    static Tensor wrap(std::shared_ptr<TensorNode> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<TensorNode> node_;
};

// Builds an op output node; parents/backward recorded only when an input
// tracks gradients.
Tensor make_op(const char* op, const Shape& shape, std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward_fn);

// Elementwise with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// [m,k] x [k,n] -> [m,n]; f64 accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,m,k] x [B,k,n] -> [B,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);

// x: [B,C,L], w: [O,C,K] -> [B,O,Lo]
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x: [B,C,H,W], w: [O,C,Kh,Kw] -> [B,O,Ho,Wo]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x: [B,C,L], w: [C,O,K] -> [B,O,(L-1)*stride - 2*pad + K]
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x: [B,C,H,W], w: [C,O,Kh,Kw]
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);  // last dim

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axes(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);
Tensor mean_axes(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);

Tensor reshape(const Tensor& x, const Shape& s);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
// Appends `count` entries along `axis`; edge=true replicates the last entry,
// otherwise zero-fills.
Tensor pad_end(const Tensor& x, int axis, int count, bool edge);

// x * (1 + scale) + shift, with scale/shift broadcast against x.
Tensor scale_shift(const Tensor& x, const Tensor& sc, const Tensor& sh);

// Norms over the group dims; gamma/beta have extent C.
// x: [B,C,S...] flattened as [B,C,S].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
// Normalizes the last dim.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Reverse-mode sweep from a scalar loss.
void backward(const Tensor& loss);

}  // namespace vag

#endif
