#include "vag/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace vag {

using RMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<const RMatF>;
using MapFmut = Eigen::Map<RMatF>;

// ---------------------------------------------------------------------------
// construction

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = s;
    n->value = std::make_shared<std::vector<float>>(static_cast<size_t>(vag::numel(s)), 0.0f);
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::full(const Shape& s, float v, bool requires_grad) {
    Tensor t = zeros(s, requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), v);
    return t;
}

Tensor Tensor::from(const Shape& s, std::vector<float> data, bool requires_grad) {
    check_shape(static_cast<int64_t>(data.size()) == vag::numel(s),
                "Tensor::from: data size " + std::to_string(data.size()) + " does not match shape " +
                    shape_str(s));
    auto n = std::make_shared<TensorNode>();
    n->shape = s;
    n->value = std::make_shared<std::vector<float>>(std::move(data));
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::scalar(float v, bool requires_grad) { return full({1}, v, requires_grad); }

Tensor Tensor::randn(const Shape& s, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(s, requires_grad);
    for (auto& v : t.vec()) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

float Tensor::item() const {
    check_shape(numel() == 1, "item: tensor " + shape_str(shape()) + " is not scalar");
    return (*node_->value)[0];
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;  // shared storage
    n->requires_grad = false;
    n->op = "detach";
    return wrap(n);
}

Tensor make_op(const char* op, const Shape& shape, std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::make_shared<std::vector<float>>(static_cast<size_t>(numel(shape)), 0.0f);
    n->op = op;
    for (const auto& in : inputs)
        if (in.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(inputs);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// broadcasting helpers

static std::vector<int64_t> contig_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

struct BcPlan {
    Shape out;
    std::vector<int> ext;          // outer extents (odometer dims)
    std::vector<int64_t> sa, sb;   // per-dim strides into a and b (0 = broadcast)
    int64_t run = 1;               // contiguous inner run shared by a, b, out
    int64_t run_sa = 0, run_sb = 0;  // 1 if the operand advances in the run, else 0
};

static BcPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
    BcPlan p;
    size_t r = std::max(a.size(), b.size());
    Shape ea(r, 1), eb(r, 1);
    std::copy(a.begin(), a.end(), ea.begin() + static_cast<long>(r - a.size()));
    std::copy(b.begin(), b.end(), eb.begin() + static_cast<long>(r - b.size()));
    p.out.resize(r);
    for (size_t i = 0; i < r; ++i) {
        check_shape(ea[i] == eb[i] || ea[i] == 1 || eb[i] == 1,
                    std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " are not broadcast-compatible");
        p.out[i] = std::max(ea[i], eb[i]);
    }
    auto sta = contig_strides(ea), stb = contig_strides(eb);
    std::vector<int64_t> sa(r), sb(r);
    for (size_t i = 0; i < r; ++i) {
        sa[i] = ea[i] == 1 ? 0 : sta[i];
        sb[i] = eb[i] == 1 ? 0 : stb[i];
    }
    // Peel a contiguous suffix over which each operand either advances
    // linearly (extents match the output throughout) or stays constant
    // (broadcast throughout). Mixed patterns end the run.
    bool a_lin = true, a_con = true, b_lin = true, b_con = true;
    size_t cut = r;
    int64_t run = 1;
    for (size_t i = r; i-- > 0;) {
        bool na_lin = a_lin && ea[i] == p.out[i];
        bool na_con = a_con && ea[i] == 1;
        bool nb_lin = b_lin && eb[i] == p.out[i];
        bool nb_con = b_con && eb[i] == 1;
        if (!((na_lin || na_con) && (nb_lin || nb_con))) break;
        a_lin = na_lin;
        a_con = na_con;
        b_lin = nb_lin;
        b_con = nb_con;
        run *= p.out[i];
        cut = i;
    }
    p.run = run;
    p.run_sa = a_lin ? 1 : 0;
    p.run_sb = b_lin ? 1 : 0;
    p.ext.assign(p.out.begin(), p.out.begin() + static_cast<long>(cut));
    p.sa.assign(sa.begin(), sa.begin() + static_cast<long>(cut));
    p.sb.assign(sb.begin(), sb.begin() + static_cast<long>(cut));
    return p;
}

template <class F>
static void bc_apply(const BcPlan& p, const float* a, const float* b, float* out, F f) {
    size_t nd = p.ext.size();
    std::vector<int> idx(nd, 0);
    int64_t oa = 0, ob = 0, oo = 0;
    for (;;) {
        if (p.run_sa && p.run_sb) {
            for (int64_t i = 0; i < p.run; ++i) out[oo + i] = f(a[oa + i], b[ob + i]);
        } else if (p.run_sa) {
            float bv = b[ob];
            for (int64_t i = 0; i < p.run; ++i) out[oo + i] = f(a[oa + i], bv);
        } else if (p.run_sb) {
            float av = a[oa];
            for (int64_t i = 0; i < p.run; ++i) out[oo + i] = f(av, b[ob + i]);
        } else {
            float v = f(a[oa], b[ob]);
            for (int64_t i = 0; i < p.run; ++i) out[oo + i] = v;
        }
        oo += p.run;
        size_t d = nd;
        while (d > 0) {
            --d;
            oa += p.sa[d];
            ob += p.sb[d];
            if (++idx[d] < p.ext[d]) break;
            oa -= p.sa[d] * p.ext[d];
            ob -= p.sb[d] * p.ext[d];
            idx[d] = 0;
            if (d == 0) return;
        }
        if (nd == 0) return;
    }
}

// Accumulates g (shaped `from` = broadcast(to, other)) into a f64 buffer
// shaped `to`. When w_bc is non-null it holds the partner operand (shaped
// `other`) and each term is scaled by it: the product-rule backward.
static void reduce_into(const float* g, const Shape& from, const float* w_bc, const Shape& other,
                        double* acc, const Shape& to) {
    BcPlan p = broadcast_plan("reduce", to, other);
    check_shape(p.out == from, "reduce_into: internal shape mismatch");
    size_t nd = p.ext.size();
    std::vector<int> idx(nd, 0);
    int64_t oa = 0, ob = 0, oo = 0;
    for (;;) {
        if (p.run_sa) {
            if (w_bc) {
                if (p.run_sb)
                    for (int64_t i = 0; i < p.run; ++i)
                        acc[oa + i] += static_cast<double>(g[oo + i]) * w_bc[ob + i];
                else
                    for (int64_t i = 0; i < p.run; ++i)
                        acc[oa + i] += static_cast<double>(g[oo + i]) * w_bc[ob];
            } else {
                for (int64_t i = 0; i < p.run; ++i) acc[oa + i] += g[oo + i];
            }
        } else {
            double s = 0.0;
            if (w_bc) {
                if (p.run_sb)
                    for (int64_t i = 0; i < p.run; ++i)
                        s += static_cast<double>(g[oo + i]) * w_bc[ob + i];
                else
                    for (int64_t i = 0; i < p.run; ++i) s += static_cast<double>(g[oo + i]) * w_bc[ob];
            } else {
                for (int64_t i = 0; i < p.run; ++i) s += g[oo + i];
            }
            acc[oa] += s;
        }
        oo += p.run;
        size_t d = nd;
        while (d > 0) {
            --d;
            oa += p.sa[d];
            ob += p.sb[d];
            if (++idx[d] < p.ext[d]) break;
            oa -= p.sa[d] * p.ext[d];
            ob -= p.sb[d] * p.ext[d];
            idx[d] = 0;
            if (d == 0) return;
        }
        if (nd == 0) return;
    }
}

static void add_acc(std::vector<float>& grad, const std::vector<double>& acc) {
    for (size_t i = 0; i < grad.size(); ++i) grad[i] += static_cast<float>(acc[i]);
}

enum class BinKind { Add, Sub, Mul };

static Tensor binary_op(BinKind kind, const char* name, const Tensor& a, const Tensor& b) {
    BcPlan p = broadcast_plan(name, a.shape(), b.shape());
    Tensor out = make_op(name, p.out, {a, b}, [kind, a, b](TensorNode& self) {
        const float* g = self.grad.data();
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            std::vector<double> acc(static_cast<size_t>(a.numel()), 0.0);
            reduce_into(g, self.shape, kind == BinKind::Mul ? b.data() : nullptr, b.shape(),
                        acc.data(), a.shape());
            add_acc(a.node()->grad, acc);
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            std::vector<double> acc(static_cast<size_t>(b.numel()), 0.0);
            reduce_into(g, self.shape, kind == BinKind::Mul ? a.data() : nullptr, a.shape(),
                        acc.data(), b.shape());
            if (kind == BinKind::Sub)
                for (auto& v : acc) v = -v;
            add_acc(b.node()->grad, acc);
        }
    });
    switch (kind) {
        case BinKind::Add:
            bc_apply(p, a.data(), b.data(), out.data(), [](float x, float y) { return x + y; });
            break;
        case BinKind::Sub:
            bc_apply(p, a.data(), b.data(), out.data(), [](float x, float y) { return x - y; });
            break;
        case BinKind::Mul:
            bc_apply(p, a.data(), b.data(), out.data(), [](float x, float y) { return x * y; });
            break;
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Mul, "mul", a, b); }

Tensor scale(const Tensor& a, float s) {
    Tensor out = make_op("scale", a.shape(), {a}, [a, s](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        auto& g = a.node()->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
    const float* x = a.data();
    float* y = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) y[i] = x[i] * s;
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    Tensor out = make_op("add_scalar", a.shape(), {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        auto& g = a.node()->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    const float* x = a.data();
    float* y = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) y[i] = x[i] + s;
    return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

// ---------------------------------------------------------------------------
// matmul / bmm

static void gemm_f64(const float* a, const float* b, float* c, int m, int k, int n, bool add_to,
                     bool transpose_a = false, bool transpose_b = false) {
    // all matrices row-major; logical A: m x k, B: k x n
    RMatD Ad;
    if (transpose_a)
        Ad = MapF(a, k, m).cast<double>().transpose();
    else
        Ad = MapF(a, m, k).cast<double>();
    RMatD Bd;
    if (transpose_b)
        Bd = MapF(b, n, k).cast<double>().transpose();
    else
        Bd = MapF(b, k, n).cast<double>();
    RMatD Cd = Ad * Bd;
    MapFmut C(c, m, n);
    if (add_to)
        C += Cd.cast<float>();
    else
        C = Cd.cast<float>();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_op("matmul", {m, n}, {a, b}, [a, b, m, k, n](TensorNode& self) {
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            gemm_f64(self.grad.data(), b.data(), a.node()->grad.data(), m, n, k, true, false, true);
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            gemm_f64(a.data(), self.grad.data(), b.node()->grad.data(), k, m, n, true, true, false);
        }
    });
    gemm_f64(a.data(), b.data(), out.data(), m, k, n, false);
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check_shape(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out = make_op("bmm", {B, m, n}, {a, b}, [a, b, B, m, k, n](TensorNode& self) {
        for (int i = 0; i < B; ++i) {
            const float* ga = self.grad.data() + static_cast<int64_t>(i) * m * n;
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                gemm_f64(ga, b.data() + static_cast<int64_t>(i) * k * n,
                         a.node()->grad.data() + static_cast<int64_t>(i) * m * k, m, n, k, true,
                         false, true);
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                gemm_f64(a.data() + static_cast<int64_t>(i) * m * k, ga,
                         b.node()->grad.data() + static_cast<int64_t>(i) * k * n, k, m, n, true,
                         true, false);
            }
        }
    });
    for (int i = 0; i < B; ++i)
        gemm_f64(a.data() + static_cast<int64_t>(i) * m * k,
                 b.data() + static_cast<int64_t>(i) * k * n,
                 out.data() + static_cast<int64_t>(i) * m * n, m, k, n, false);
    return out;
}

// ---------------------------------------------------------------------------
// convolution: im2col / col2im cores shared by conv and conv-transpose

static int conv_out(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

// image: [C, H, W]; cols: [Lh*Lw, C*k*k] over the (Lh, Lw) grid
static void im2col2d(const float* img, int C, int H, int W, int k, int s, int p, int Lh, int Lw,
                     float* cols) {
    for (int lh = 0; lh < Lh; ++lh)
        for (int lw = 0; lw < Lw; ++lw) {
            float* row = cols + (static_cast<int64_t>(lh) * Lw + lw) * C * k * k;
            for (int c = 0; c < C; ++c)
                for (int dh = 0; dh < k; ++dh) {
                    int h = lh * s - p + dh;
                    for (int dw = 0; dw < k; ++dw) {
                        int w = lw * s - p + dw;
                        row[(c * k + dh) * k + dw] =
                            (h >= 0 && h < H && w >= 0 && w < W)
                                ? img[(static_cast<int64_t>(c) * H + h) * W + w]
                                : 0.0f;
                    }
                }
        }
}

static void col2im2d_add(const float* cols, int C, int H, int W, int k, int s, int p, int Lh,
                         int Lw, float* img) {
    for (int lh = 0; lh < Lh; ++lh)
        for (int lw = 0; lw < Lw; ++lw) {
            const float* row = cols + (static_cast<int64_t>(lh) * Lw + lw) * C * k * k;
            for (int c = 0; c < C; ++c)
                for (int dh = 0; dh < k; ++dh) {
                    int h = lh * s - p + dh;
                    if (h < 0 || h >= H) continue;
                    for (int dw = 0; dw < k; ++dw) {
                        int w = lw * s - p + dw;
                        if (w < 0 || w >= W) continue;
                        img[(static_cast<int64_t>(c) * H + h) * W + w] += row[(c * k + dh) * k + dw];
                    }
                }
        }
}

static void im2col1d(const float* img, int C, int L, int k, int s, int p, int Lo, float* cols) {
    for (int lo = 0; lo < Lo; ++lo) {
        float* row = cols + static_cast<int64_t>(lo) * C * k;
        for (int c = 0; c < C; ++c)
            for (int d = 0; d < k; ++d) {
                int l = lo * s - p + d;
                row[c * k + d] = (l >= 0 && l < L) ? img[static_cast<int64_t>(c) * L + l] : 0.0f;
            }
    }
}

static void col2im1d_add(const float* cols, int C, int L, int k, int s, int p, int Lo, float* img) {
    for (int lo = 0; lo < Lo; ++lo) {
        const float* row = cols + static_cast<int64_t>(lo) * C * k;
        for (int c = 0; c < C; ++c)
            for (int d = 0; d < k; ++d) {
                int l = lo * s - p + d;
                if (l >= 0 && l < L) img[static_cast<int64_t>(c) * L + l] += row[c * k + d];
            }
    }
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_shape(x.rank() == 4 && w.rank() == 4 && w.dim(2) == w.dim(3) && x.dim(1) == w.dim(1),
                "conv2d: incompatible shapes x=" + shape_str(x.shape()) + " w=" +
                    shape_str(w.shape()));
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int O = w.dim(0), k = w.dim(2);
    check_shape(!b.defined() || (b.rank() == 1 && b.dim(0) == O),
                "conv2d: bias shape mismatch for w=" + shape_str(w.shape()));
    int Ho = conv_out(H, k, stride, pad), Wo = conv_out(W, k, stride, pad);
    check_shape(Ho > 0 && Wo > 0, "conv2d: empty output for x=" + shape_str(x.shape()));
    int64_t L = static_cast<int64_t>(Ho) * Wo, CKK = static_cast<int64_t>(C) * k * k;

    auto run_fwd = [=](const Tensor& xi, const Tensor& wi, const Tensor& bi, float* outp) {
        std::vector<float> cols(static_cast<size_t>(L * CKK));
        RMatD Wd = MapF(wi.data(), O, static_cast<int>(CKK)).cast<double>();
        for (int bb = 0; bb < B; ++bb) {
            im2col2d(xi.data() + static_cast<int64_t>(bb) * C * H * W, C, H, W, k, stride, pad, Ho,
                     Wo, cols.data());
            RMatD colsd = MapF(cols.data(), static_cast<int>(L), static_cast<int>(CKK)).cast<double>();
            RMatD outd = Wd * colsd.transpose();  // [O, L]
            MapFmut om(outp + static_cast<int64_t>(bb) * O * L, O, static_cast<int>(L));
            om = outd.cast<float>();
            if (bi.defined())
                for (int o = 0; o < O; ++o) om.row(o).array() += bi.data()[o];
        }
    };

    Tensor out = make_op(
        "conv2d", {B, O, Ho, Wo}, {x, w, b.defined() ? b : Tensor::zeros({O})},
        [=](TensorNode& self) {
            std::vector<float> cols(static_cast<size_t>(L * CKK));
            RMatD dW = RMatD::Zero(O, CKK);
            std::vector<double> db(static_cast<size_t>(O), 0.0);
            RMatD Wd = MapF(w.data(), O, static_cast<int>(CKK)).cast<double>();
            if (x.requires_grad()) x.node()->ensure_grad();
            bool bias_rg = b.defined() && b.requires_grad();
            for (int bb = 0; bb < B; ++bb) {
                MapF g(self.grad.data() + static_cast<int64_t>(bb) * O * L, O, static_cast<int>(L));
                RMatD gd = g.cast<double>();
                if (w.requires_grad()) {
                    im2col2d(x.data() + static_cast<int64_t>(bb) * C * H * W, C, H, W, k, stride,
                             pad, Ho, Wo, cols.data());
                    RMatD colsd =
                        MapF(cols.data(), static_cast<int>(L), static_cast<int>(CKK)).cast<double>();
                    dW += gd * colsd;
                }
                if (bias_rg)
                    for (int o = 0; o < O; ++o) db[static_cast<size_t>(o)] += gd.row(o).sum();
                if (x.requires_grad()) {
                    RMatD dcols = gd.transpose() * Wd;  // [L, CKK]
                    RMatF dcf = dcols.cast<float>();
                    col2im2d_add(dcf.data(), C, H, W, k, stride, pad, Ho, Wo,
                                 x.node()->grad.data() + static_cast<int64_t>(bb) * C * H * W);
                }
            }
            if (w.requires_grad()) {
                w.node()->ensure_grad();
                MapFmut(w.node()->grad.data(), O, static_cast<int>(CKK)) += dW.cast<float>();
            }
            if (b.defined() && b.requires_grad()) {
                b.node()->ensure_grad();
                for (int o = 0; o < O; ++o) b.node()->grad[static_cast<size_t>(o)] +=
                    static_cast<float>(db[static_cast<size_t>(o)]);
            }
        });
    run_fwd(x, w, b, out.data());
    return out;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_shape(x.rank() == 3 && w.rank() == 3 && x.dim(1) == w.dim(1),
                "conv1d: incompatible shapes x=" + shape_str(x.shape()) + " w=" +
                    shape_str(w.shape()));
    int B = x.dim(0), C = x.dim(1), L = x.dim(2);
    int O = w.dim(0), k = w.dim(2);
    check_shape(!b.defined() || (b.rank() == 1 && b.dim(0) == O), "conv1d: bias shape mismatch");
    int Lo = conv_out(L, k, stride, pad);
    check_shape(Lo > 0, "conv1d: empty output for x=" + shape_str(x.shape()));
    int64_t CK = static_cast<int64_t>(C) * k;

    Tensor out = make_op(
        "conv1d", {B, O, Lo}, {x, w, b.defined() ? b : Tensor::zeros({O})}, [=](TensorNode& self) {
            std::vector<float> cols(static_cast<size_t>(Lo * CK));
            RMatD dW = RMatD::Zero(O, CK);
            std::vector<double> db(static_cast<size_t>(O), 0.0);
            RMatD Wd = MapF(w.data(), O, static_cast<int>(CK)).cast<double>();
            if (x.requires_grad()) x.node()->ensure_grad();
            bool bias_rg = b.defined() && b.requires_grad();
            for (int bb = 0; bb < B; ++bb) {
                MapF g(self.grad.data() + static_cast<int64_t>(bb) * O * Lo, O, Lo);
                RMatD gd = g.cast<double>();
                if (w.requires_grad()) {
                    im2col1d(x.data() + static_cast<int64_t>(bb) * C * L, C, L, k, stride, pad, Lo,
                             cols.data());
                    RMatD colsd = MapF(cols.data(), Lo, static_cast<int>(CK)).cast<double>();
                    dW += gd * colsd;
                }
                if (bias_rg)
                    for (int o = 0; o < O; ++o) db[static_cast<size_t>(o)] += gd.row(o).sum();
                if (x.requires_grad()) {
                    RMatD dcols = gd.transpose() * Wd;
                    RMatF dcf = dcols.cast<float>();
                    col2im1d_add(dcf.data(), C, L, k, stride, pad, Lo,
                                 x.node()->grad.data() + static_cast<int64_t>(bb) * C * L);
                }
            }
            if (w.requires_grad()) {
                w.node()->ensure_grad();
                MapFmut(w.node()->grad.data(), O, static_cast<int>(CK)) += dW.cast<float>();
            }
            if (b.defined() && b.requires_grad()) {
                b.node()->ensure_grad();
                for (int o = 0; o < O; ++o) b.node()->grad[static_cast<size_t>(o)] +=
                    static_cast<float>(db[static_cast<size_t>(o)]);
            }
        });
    std::vector<float> cols(static_cast<size_t>(Lo * CK));
    RMatD Wd = MapF(w.data(), O, static_cast<int>(CK)).cast<double>();
    for (int bb = 0; bb < B; ++bb) {
        im2col1d(x.data() + static_cast<int64_t>(bb) * C * L, C, L, k, stride, pad, Lo, cols.data());
        RMatD colsd = MapF(cols.data(), Lo, static_cast<int>(CK)).cast<double>();
        RMatD outd = Wd * colsd.transpose();
        MapFmut om(out.data() + static_cast<int64_t>(bb) * O * Lo, O, Lo);
        om = outd.cast<float>();
        if (b.defined())
            for (int o = 0; o < O; ++o) om.row(o).array() += b.data()[o];
    }
    return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_shape(x.rank() == 4 && w.rank() == 4 && w.dim(2) == w.dim(3) && x.dim(1) == w.dim(0),
                "conv_transpose2d: incompatible shapes x=" + shape_str(x.shape()) + " w=" +
                    shape_str(w.shape()));
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int O = w.dim(1), k = w.dim(2);
    check_shape(!b.defined() || (b.rank() == 1 && b.dim(0) == O),
                "conv_transpose2d: bias shape mismatch");
    int Ho = (H - 1) * stride - 2 * pad + k, Wo = (W - 1) * stride - 2 * pad + k;
    check_shape(Ho > 0 && Wo > 0, "conv_transpose2d: empty output");
    int64_t HW = static_cast<int64_t>(H) * W, OKK = static_cast<int64_t>(O) * k * k;

    Tensor out = make_op(
        "conv_transpose2d", {B, O, Ho, Wo}, {x, w, b.defined() ? b : Tensor::zeros({O})},
        [=](TensorNode& self) {
            std::vector<float> dcols(static_cast<size_t>(HW * OKK));
            RMatD dW = RMatD::Zero(C, OKK);
            std::vector<double> db(static_cast<size_t>(O), 0.0);
            RMatD Wd = MapF(w.data(), C, static_cast<int>(OKK)).cast<double>();
            if (x.requires_grad()) x.node()->ensure_grad();
            for (int bb = 0; bb < B; ++bb) {
                const float* gimg = self.grad.data() + static_cast<int64_t>(bb) * O * Ho * Wo;
                im2col2d(gimg, O, Ho, Wo, k, stride, pad, H, W, dcols.data());
                RMatD dcolsd =
                    MapF(dcols.data(), static_cast<int>(HW), static_cast<int>(OKK)).cast<double>();
                if (x.requires_grad()) {
                    RMatD dx = Wd * dcolsd.transpose();  // [C, HW]
                    MapFmut(x.node()->grad.data() + static_cast<int64_t>(bb) * C * HW, C,
                            static_cast<int>(HW)) += dx.cast<float>();
                }
                if (w.requires_grad()) {
                    MapF xs(x.data() + static_cast<int64_t>(bb) * C * HW, C, static_cast<int>(HW));
                    dW += xs.cast<double>() * dcolsd;
                }
                if (b.defined() && b.requires_grad()) {
                    for (int o = 0; o < O; ++o) {
                        double s = 0.0;
                        const float* go = gimg + static_cast<int64_t>(o) * Ho * Wo;
                        for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) s += go[i];
                        db[static_cast<size_t>(o)] += s;
                    }
                }
            }
            if (w.requires_grad()) {
                w.node()->ensure_grad();
                MapFmut(w.node()->grad.data(), C, static_cast<int>(OKK)) += dW.cast<float>();
            }
            if (b.defined() && b.requires_grad()) {
                b.node()->ensure_grad();
                for (int o = 0; o < O; ++o) b.node()->grad[static_cast<size_t>(o)] +=
                    static_cast<float>(db[static_cast<size_t>(o)]);
            }
        });
    RMatD Wd = MapF(w.data(), C, static_cast<int>(OKK)).cast<double>();
    std::fill(out.vec().begin(), out.vec().end(), 0.0f);
    for (int bb = 0; bb < B; ++bb) {
        MapF xs(x.data() + static_cast<int64_t>(bb) * C * HW, C, static_cast<int>(HW));
        RMatD colsd = xs.cast<double>().transpose() * Wd;  // [HW, OKK]
        RMatF colsf = colsd.cast<float>();
        float* oimg = out.data() + static_cast<int64_t>(bb) * O * Ho * Wo;
        col2im2d_add(colsf.data(), O, Ho, Wo, k, stride, pad, H, W, oimg);
        if (b.defined())
            for (int o = 0; o < O; ++o) {
                float* po = oimg + static_cast<int64_t>(o) * Ho * Wo;
                for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) po[i] += b.data()[o];
            }
    }
    return out;
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_shape(x.rank() == 3 && w.rank() == 3 && x.dim(1) == w.dim(0),
                "conv_transpose1d: incompatible shapes x=" + shape_str(x.shape()) + " w=" +
                    shape_str(w.shape()));
    int B = x.dim(0), C = x.dim(1), L = x.dim(2);
    int O = w.dim(1), k = w.dim(2);
    check_shape(!b.defined() || (b.rank() == 1 && b.dim(0) == O),
                "conv_transpose1d: bias shape mismatch");
    int Lo = (L - 1) * stride - 2 * pad + k;
    check_shape(Lo > 0, "conv_transpose1d: empty output");
    int64_t OK = static_cast<int64_t>(O) * k;

    Tensor out = make_op(
        "conv_transpose1d", {B, O, Lo}, {x, w, b.defined() ? b : Tensor::zeros({O})},
        [=](TensorNode& self) {
            std::vector<float> dcols(static_cast<size_t>(L * OK));
            RMatD dW = RMatD::Zero(C, OK);
            std::vector<double> db(static_cast<size_t>(O), 0.0);
            RMatD Wd = MapF(w.data(), C, static_cast<int>(OK)).cast<double>();
            if (x.requires_grad()) x.node()->ensure_grad();
            for (int bb = 0; bb < B; ++bb) {
                const float* gimg = self.grad.data() + static_cast<int64_t>(bb) * O * Lo;
                im2col1d(gimg, O, Lo, k, stride, pad, L, dcols.data());
                RMatD dcolsd = MapF(dcols.data(), L, static_cast<int>(OK)).cast<double>();
                if (x.requires_grad()) {
                    RMatD dx = Wd * dcolsd.transpose();
                    MapFmut(x.node()->grad.data() + static_cast<int64_t>(bb) * C * L, C, L) +=
                        dx.cast<float>();
                }
                if (w.requires_grad()) {
                    MapF xs(x.data() + static_cast<int64_t>(bb) * C * L, C, L);
                    dW += xs.cast<double>() * dcolsd;
                }
                if (b.defined() && b.requires_grad()) {
                    for (int o = 0; o < O; ++o) {
                        double s = 0.0;
                        const float* go = gimg + static_cast<int64_t>(o) * Lo;
                        for (int i = 0; i < Lo; ++i) s += go[i];
                        db[static_cast<size_t>(o)] += s;
                    }
                }
            }
            if (w.requires_grad()) {
                w.node()->ensure_grad();
                MapFmut(w.node()->grad.data(), C, static_cast<int>(OK)) += dW.cast<float>();
            }
            if (b.defined() && b.requires_grad()) {
                b.node()->ensure_grad();
                for (int o = 0; o < O; ++o) b.node()->grad[static_cast<size_t>(o)] +=
                    static_cast<float>(db[static_cast<size_t>(o)]);
            }
        });
    RMatD Wd = MapF(w.data(), C, static_cast<int>(OK)).cast<double>();
    std::fill(out.vec().begin(), out.vec().end(), 0.0f);
    for (int bb = 0; bb < B; ++bb) {
        MapF xs(x.data() + static_cast<int64_t>(bb) * C * L, C, L);
        RMatD colsd = xs.cast<double>().transpose() * Wd;
        RMatF colsf = colsd.cast<float>();
        float* oimg = out.data() + static_cast<int64_t>(bb) * O * Lo;
        col2im1d_add(colsf.data(), O, Lo, k, stride, pad, L, oimg);
        if (b.defined())
            for (int o = 0; o < O; ++o) {
                float* po = oimg + static_cast<int64_t>(o) * Lo;
                for (int i = 0; i < Lo; ++i) po[i] += b.data()[o];
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// nonlinearities / softmax

template <class FwdF, class BwdF>
static Tensor unary_op(const char* name, const Tensor& a, FwdF fv, BwdF dfv) {
    Tensor out = make_op(name, a.shape(), {a}, [a, dfv](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        const float* x = a.data();
        const float* y = self.value->data();
        auto& g = a.node()->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfv(x[i], y[i]);
    });
    const float* x = a.data();
    float* y = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) y[i] = fv(x[i]);
    return out;
}

static inline float sigf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        "sigmoid", x, [](float v) { return sigf(v); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor silu(const Tensor& x) {
    return unary_op(
        "silu", x, [](float v) { return v * sigf(v); },
        [](float v, float) {
            float s = sigf(v);
            return s * (1.0f + v * (1.0f - s));
        });
}

static constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

Tensor gelu(const Tensor& x) {
    constexpr float c = kGeluC;
    return unary_op(
        "gelu", x,
        [](float v) { return 0.5f * v * (1.0f + std::tanh(c * (v + 0.044715f * v * v * v))); },
        [](float v, float) {
            float u = c * (v + 0.044715f * v * v * v);
            float th = std::tanh(u);
            float du = c * (1.0f + 3.0f * 0.044715f * v * v);
            return 0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du;
        });
}

Tensor softmax(const Tensor& x) {
    check_shape(x.rank() >= 1, "softmax: rank-0 input");
    int n = x.dim(x.rank() - 1);
    int64_t rows = x.numel() / n;
    Tensor out = make_op("softmax", x.shape(), {x}, [x, rows, n](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        const float* y = self.value->data();
        const float* g = self.grad.data();
        auto& gx = x.node()->grad;
        for (int64_t r = 0; r < rows; ++r) {
            const float* yr = y + r * n;
            const float* gr = g + r * n;
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += static_cast<double>(gr[i]) * yr[i];
            float* gxr = gx.data() + r * n;
            for (int i = 0; i < n; ++i)
                gxr[i] += yr[i] * (gr[i] - static_cast<float>(dot));
        }
    });
    const float* xv = x.data();
    float* y = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv + r * n;
        float* yr = y + r * n;
        float mx = xr[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        double den = 0.0;
        for (int i = 0; i < n; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            den += yr[i];
        }
        float inv = static_cast<float>(1.0 / den);
        for (int i = 0; i < n; ++i) yr[i] *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
    Tensor out = make_op("sum", {1}, {x}, [x](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float g = self.grad[0];
        for (auto& v : x.node()->grad) v += g;
    });
    double acc = 0.0;
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += p[i];
    out.data()[0] = static_cast<float>(acc);
    return out;
}

Tensor mean(const Tensor& x) {
    double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = make_op("mean", {1}, {x}, [x, inv](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        float g = static_cast<float>(self.grad[0] * inv);
        for (auto& v : x.node()->grad) v += g;
    });
    double acc = 0.0;
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += p[i];
    out.data()[0] = static_cast<float>(acc * inv);
    return out;
}

// Maps each input linear index to its output index given reduced axes.
struct ReducePlan {
    Shape out_shape;          // with keepdim applied
    Shape full_out;           // same rank as input, reduced dims = 1
    int64_t count = 1;        // elements folded into each output slot
    std::vector<int64_t> in_strides, out_strides;
    Shape in_shape;
};

static ReducePlan reduce_plan(const Tensor& x, std::vector<int> axes, bool keepdim) {
    ReducePlan p;
    p.in_shape = x.shape();
    std::sort(axes.begin(), axes.end());
    std::vector<bool> red(x.shape().size(), false);
    for (int a : axes) {
        check_shape(a >= 0 && a < x.rank(), "reduce: axis out of range");
        red[static_cast<size_t>(a)] = true;
    }
    p.full_out = x.shape();
    for (size_t i = 0; i < red.size(); ++i)
        if (red[i]) {
            p.count *= p.full_out[i];
            p.full_out[i] = 1;
        }
    for (size_t i = 0; i < red.size(); ++i) {
        if (!red[i])
            p.out_shape.push_back(x.shape()[i]);
        else if (keepdim)
            p.out_shape.push_back(1);
    }
    if (p.out_shape.empty()) p.out_shape.push_back(1);
    p.in_strides = contig_strides(x.shape());
    auto fo = contig_strides(p.full_out);
    p.out_strides.resize(fo.size());
    for (size_t i = 0; i < fo.size(); ++i) p.out_strides[i] = red[i] ? 0 : fo[i];
    return p;
}

template <class Acc>
static void reduce_walk(const ReducePlan& p, Acc acc) {
    size_t r = p.in_shape.size();
    std::vector<int> idx(r, 0);
    int64_t iin = 0, iout = 0;
    for (;;) {
        acc(iin, iout);
        size_t d = r;
        bool done = true;
        while (d > 0) {
            --d;
            ++idx[d];
            iin += p.in_strides[d];
            iout += p.out_strides[d];
            if (idx[d] < p.in_shape[d]) {
                done = false;
                break;
            }
            iin -= p.in_strides[d] * p.in_shape[d];
            iout -= p.out_strides[d] * p.in_shape[d];
            idx[d] = 0;
        }
        if (done) return;
    }
}

Tensor sum_axes(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
    ReducePlan p = reduce_plan(x, axes, keepdim);
    Tensor out = make_op("sum_axes", p.out_shape, {x}, [x, p](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        auto& gx = x.node()->grad;
        const float* g = self.grad.data();
        reduce_walk(p, [&](int64_t iin, int64_t iout) { gx[static_cast<size_t>(iin)] += g[iout]; });
    });
    std::vector<double> acc(static_cast<size_t>(numel(p.out_shape)), 0.0);
    const float* xv = x.data();
    reduce_walk(p, [&](int64_t iin, int64_t iout) { acc[static_cast<size_t>(iout)] += xv[iin]; });
    for (size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i]);
    return out;
}

Tensor mean_axes(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
    ReducePlan p = reduce_plan(x, axes, keepdim);
    double inv = 1.0 / static_cast<double>(p.count);
    Tensor out = make_op("mean_axes", p.out_shape, {x}, [x, p, inv](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        auto& gx = x.node()->grad;
        const float* g = self.grad.data();
        float fi = static_cast<float>(inv);
        reduce_walk(p,
                    [&](int64_t iin, int64_t iout) { gx[static_cast<size_t>(iin)] += g[iout] * fi; });
    });
    std::vector<double> acc(static_cast<size_t>(numel(p.out_shape)), 0.0);
    const float* xv = x.data();
    reduce_walk(p, [&](int64_t iin, int64_t iout) { acc[static_cast<size_t>(iout)] += xv[iin]; });
    for (size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i] * inv);
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, const Shape& s) {
    check_shape(numel(s) == x.numel(), "reshape: cannot view " + shape_str(x.shape()) + " as " +
                                           shape_str(s));
    auto n = std::make_shared<TensorNode>();
    n->shape = s;
    n->value = x.node()->value;  // zero-copy view
    n->op = "reshape";
    n->requires_grad = x.requires_grad();
    if (n->requires_grad) {
        n->parents = {x};
        n->backward_fn = [x](TensorNode& self) {
            x.node()->ensure_grad();
            auto& g = x.node()->grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    }
    return Tensor::wrap(n);
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    check_shape(static_cast<int>(perm.size()) == x.rank(), "permute: rank mismatch");
    Shape os(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) os[i] = x.dim(perm[i]);
    auto ist = contig_strides(x.shape());
    std::vector<int64_t> gather(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) gather[i] = ist[static_cast<size_t>(perm[i])];

    auto walk = [os, gather](const float* src, float* dst, bool scatter) {
        size_t r = os.size();
        std::vector<int> idx(r, 0);
        int64_t isrc = 0;
        int64_t n = numel(os);
        for (int64_t o = 0; o < n; ++o) {
            if (scatter)
                dst[isrc] += src[o];
            else
                dst[o] = src[isrc];
            size_t d = r;
            while (d > 0) {
                --d;
                ++idx[d];
                isrc += gather[d];
                if (idx[d] < os[d]) break;
                isrc -= gather[d] * os[d];
                idx[d] = 0;
            }
        }
    };

    Tensor out = make_op("permute", os, {x}, [x, walk](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        walk(self.grad.data(), x.node()->grad.data(), true);
    });
    walk(x.data(), out.data(), false);
    return out;
}

// splits shape at `axis` into [outer, extent, inner]
static void axis_view(const Shape& s, int axis, int64_t& outer, int64_t& ext, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    ext = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    check_shape(!xs.empty(), "concat: empty input list");
    Shape os = xs[0].shape();
    check_shape(axis >= 0 && axis < static_cast<int>(os.size()), "concat: axis out of range");
    int total = 0;
    for (const auto& t : xs) {
        check_shape(t.rank() == static_cast<int>(os.size()), "concat: rank mismatch");
        for (int i = 0; i < t.rank(); ++i)
            check_shape(i == axis || t.dim(i) == os[static_cast<size_t>(i)],
                        "concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(os));
        total += t.dim(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    int64_t outer, ext, inner;
    axis_view(os, axis, outer, ext, inner);
    Tensor out = make_op("concat", os, xs, [xs, axis, outer, inner, ext](TensorNode& self) {
        int64_t off = 0;
        for (const auto& t : xs) {
            int64_t te = t.dim(axis);
            if (t.requires_grad()) {
                t.node()->ensure_grad();
                auto& g = t.node()->grad;
                for (int64_t o = 0; o < outer; ++o) {
                    const float* src = self.grad.data() + (o * ext + off) * inner;
                    float* dst = g.data() + o * te * inner;
                    for (int64_t i = 0; i < te * inner; ++i) dst[i] += src[i];
                }
            }
            off += te;
        }
    });
    int64_t off = 0;
    for (const auto& t : xs) {
        int64_t te = t.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * ext + off) * inner, t.data() + o * te * inner,
                        static_cast<size_t>(te * inner) * sizeof(float));
        off += te;
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    check_shape(axis >= 0 && axis < x.rank(), "slice: axis out of range");
    check_shape(start >= 0 && len > 0 && start + len <= x.dim(axis),
                "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                    ") exceeds extent " + std::to_string(x.dim(axis)) + " of " +
                    shape_str(x.shape()));
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    int64_t outer, ext, inner;
    axis_view(x.shape(), axis, outer, ext, inner);
    Tensor out = make_op("slice", os, {x}, [x, start, len, outer, ext, inner](TensorNode& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        auto& g = x.node()->grad;
        for (int64_t o = 0; o < outer; ++o) {
            const float* src = self.grad.data() + o * len * inner;
            float* dst = g.data() + (o * ext + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, x.data() + (o * ext + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(float));
    return out;
}

Tensor pad_end(const Tensor& x, int axis, int count, bool edge) {
    check_shape(axis >= 0 && axis < x.rank(), "pad_end: axis out of range");
    check_shape(count >= 0, "pad_end: negative count");
    if (count == 0) return reshape(x, x.shape());
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] += count;
    int64_t outer, ext, inner;
    axis_view(x.shape(), axis, outer, ext, inner);
    Tensor out =
        make_op("pad_end", os, {x}, [x, count, edge, outer, ext, inner](TensorNode& self) {
            if (!x.requires_grad()) return;
            x.node()->ensure_grad();
            auto& g = x.node()->grad;
            int64_t oext = ext + count;
            for (int64_t o = 0; o < outer; ++o) {
                const float* src = self.grad.data() + o * oext * inner;
                float* dst = g.data() + o * ext * inner;
                for (int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                if (edge) {
                    float* last = dst + (ext - 1) * inner;
                    for (int c = 0; c < count; ++c) {
                        const float* ps = src + (ext + c) * inner;
                        for (int64_t i = 0; i < inner; ++i) last[i] += ps[i];
                    }
                }
            }
        });
    int64_t oext = ext + count;
    for (int64_t o = 0; o < outer; ++o) {
        float* dst = out.data() + o * oext * inner;
        const float* src = x.data() + o * ext * inner;
        std::memcpy(dst, src, static_cast<size_t>(ext * inner) * sizeof(float));
        for (int c = 0; c < count; ++c) {
            float* pd = dst + (ext + c) * inner;
            if (edge)
                std::memcpy(pd, src + (ext - 1) * inner, static_cast<size_t>(inner) * sizeof(float));
            else
                std::memset(pd, 0, static_cast<size_t>(inner) * sizeof(float));
        }
    }
    return out;
}

Tensor scale_shift(const Tensor& x, const Tensor& sc, const Tensor& sh) {
    return add(mul(x, add_scalar(sc, 1.0f)), sh);
}

// ---------------------------------------------------------------------------
// normalization

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
    check_shape(x.rank() >= 2, "group_norm: input must be [B,C,...]");
    int B = x.dim(0), C = x.dim(1);
    check_shape(C % groups == 0, "group_norm: channels " + std::to_string(C) +
                                     " not divisible by groups " + std::to_string(groups));
    check_shape(gamma.numel() == C && beta.numel() == C, "group_norm: gamma/beta must have extent C");
    int64_t S = x.numel() / (static_cast<int64_t>(B) * C);
    int cg = C / groups;
    int64_t gsz = static_cast<int64_t>(cg) * S;

    // row stats cached for backward
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(B) * groups * 2);

    Tensor out = make_op(
        "group_norm", x.shape(), {x, gamma, beta},
        [x, gamma, beta, stats, B, C, groups, cg, S, gsz](TensorNode& self) {
            const float* xv = x.data();
            const float* g = self.grad.data();
            const float* gam = gamma.data();
            std::vector<double> dgam(static_cast<size_t>(C), 0.0), dbet(static_cast<size_t>(C), 0.0);
            if (x.requires_grad()) x.node()->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int gr = 0; gr < groups; ++gr) {
                    double mu = (*stats)[(static_cast<size_t>(b) * groups + gr) * 2];
                    double istd = (*stats)[(static_cast<size_t>(b) * groups + gr) * 2 + 1];
                    int64_t base = (static_cast<int64_t>(b) * C + static_cast<int64_t>(gr) * cg) * S;
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int c = 0; c < cg; ++c) {
                        double w = gam[gr * cg + c];
                        const float* gp = g + base + static_cast<int64_t>(c) * S;
                        const float* xp = xv + base + static_cast<int64_t>(c) * S;
                        double dg = 0.0, db = 0.0;
                        for (int64_t i = 0; i < S; ++i) {
                            double xh = (xp[i] - mu) * istd;
                            double dxh = gp[i] * w;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dg += gp[i] * xh;
                            db += gp[i];
                        }
                        dgam[static_cast<size_t>(gr * cg + c)] += dg;
                        dbet[static_cast<size_t>(gr * cg + c)] += db;
                    }
                    if (x.requires_grad()) {
                        double m1 = sum_dxh / static_cast<double>(gsz);
                        double m2 = sum_dxh_xh / static_cast<double>(gsz);
                        auto& gx = x.node()->grad;
                        for (int c = 0; c < cg; ++c) {
                            double w = gam[gr * cg + c];
                            const float* gp = g + base + static_cast<int64_t>(c) * S;
                            const float* xp = xv + base + static_cast<int64_t>(c) * S;
                            float* gxp = gx.data() + base + static_cast<int64_t>(c) * S;
                            for (int64_t i = 0; i < S; ++i) {
                                double xh = (xp[i] - mu) * istd;
                                gxp[i] += static_cast<float>(istd * (gp[i] * w - m1 - xh * m2));
                            }
                        }
                    }
                }
            if (gamma.requires_grad()) {
                gamma.node()->ensure_grad();
                add_acc(gamma.node()->grad, dgam);
            }
            if (beta.requires_grad()) {
                beta.node()->ensure_grad();
                add_acc(beta.node()->grad, dbet);
            }
        });
    const float* xv = x.data();
    float* y = out.data();
    const float* gam = gamma.data();
    const float* bet = beta.data();
    for (int b = 0; b < B; ++b)
        for (int gr = 0; gr < groups; ++gr) {
            int64_t base = (static_cast<int64_t>(b) * C + static_cast<int64_t>(gr) * cg) * S;
            double s1 = 0.0, s2 = 0.0;
            for (int64_t i = 0; i < gsz; ++i) {
                double v = xv[base + i];
                s1 += v;
                s2 += v * v;
            }
            double mu = s1 / static_cast<double>(gsz);
            double var = s2 / static_cast<double>(gsz) - mu * mu;
            double istd = 1.0 / std::sqrt(var + eps);
            (*stats)[(static_cast<size_t>(b) * groups + gr) * 2] = mu;
            (*stats)[(static_cast<size_t>(b) * groups + gr) * 2 + 1] = istd;
            for (int c = 0; c < cg; ++c) {
                float w = gam[gr * cg + c], bb = bet[gr * cg + c];
                const float* xp = xv + base + static_cast<int64_t>(c) * S;
                float* yp = y + base + static_cast<int64_t>(c) * S;
                for (int64_t i = 0; i < S; ++i)
                    yp[i] = static_cast<float>((xp[i] - mu) * istd) * w + bb;
            }
        }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    check_shape(x.rank() >= 1, "layer_norm: rank-0 input");
    int n = x.dim(x.rank() - 1);
    check_shape(gamma.numel() == n && beta.numel() == n,
                "layer_norm: gamma/beta must match last dim " + std::to_string(n));
    int64_t rows = x.numel() / n;
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);

    Tensor out = make_op(
        "layer_norm", x.shape(), {x, gamma, beta}, [x, gamma, beta, stats, rows, n](TensorNode& self) {
            const float* xv = x.data();
            const float* g = self.grad.data();
            const float* gam = gamma.data();
            std::vector<double> dgam(static_cast<size_t>(n), 0.0), dbet(static_cast<size_t>(n), 0.0);
            if (x.requires_grad()) x.node()->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                double mu = (*stats)[static_cast<size_t>(r) * 2];
                double istd = (*stats)[static_cast<size_t>(r) * 2 + 1];
                const float* xr = xv + r * n;
                const float* gr = g + r * n;
                double m1 = 0.0, m2 = 0.0;
                for (int i = 0; i < n; ++i) {
                    double xh = (xr[i] - mu) * istd;
                    double dxh = gr[i] * gam[i];
                    m1 += dxh;
                    m2 += dxh * xh;
                    dgam[static_cast<size_t>(i)] += gr[i] * xh;
                    dbet[static_cast<size_t>(i)] += gr[i];
                }
                m1 /= n;
                m2 /= n;
                if (x.requires_grad()) {
                    float* gxr = x.node()->grad.data() + r * n;
                    for (int i = 0; i < n; ++i) {
                        double xh = (xr[i] - mu) * istd;
                        gxr[i] += static_cast<float>(istd * (gr[i] * gam[i] - m1 - xh * m2));
                    }
                }
            }
            if (gamma.requires_grad()) {
                gamma.node()->ensure_grad();
                add_acc(gamma.node()->grad, dgam);
            }
            if (beta.requires_grad()) {
                beta.node()->ensure_grad();
                add_acc(beta.node()->grad, dbet);
            }
        });
    const float* xv = x.data();
    float* y = out.data();
    const float* gam = gamma.data();
    const float* bet = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv + r * n;
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
            s1 += xr[i];
            s2 += static_cast<double>(xr[i]) * xr[i];
        }
        double mu = s1 / n;
        double var = s2 / n - mu * mu;
        double istd = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>(r) * 2] = mu;
        (*stats)[static_cast<size_t>(r) * 2 + 1] = istd;
        float* yr = y + r * n;
        for (int i = 0; i < n; ++i)
            yr[i] = static_cast<float>((xr[i] - mu) * istd) * gam[i] + bet[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward sweep

void backward(const Tensor& loss) {
    check_shape(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    check(loss.requires_grad(),
          "backward: loss is not connected to any gradient-tracking tensor");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        size_t child;
    };
    std::vector<Frame> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.child < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.child++].node().get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->ensure_grad();  // nodes with no incoming grad contribute zeros
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

}  // namespace vag
