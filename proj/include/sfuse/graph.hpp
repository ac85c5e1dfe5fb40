#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/tensor.hpp"

namespace sfuse {

namespace detail {

// C (+)= A[m,k] * B[k,n]
template <class R>
void mm_nn(const R* a, const R* b, R* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        R* ci = c + static_cast<std::int64_t>(i) * n;
        if (!acc)
            for (int j = 0; j < n; ++j) ci[j] = R(0);
        const R* ai = a + static_cast<std::int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const R av = ai[kk];
            const R* bk = b + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C (+)= A[m,k] * B[n,k]^T
template <class R>
void mm_nt(const R* a, const R* b, R* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const R* ai = a + static_cast<std::int64_t>(i) * k;
        R* ci = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const R* bj = b + static_cast<std::int64_t>(j) * k;
            R dot = R(0);
            for (int kk = 0; kk < k; ++kk) dot += ai[kk] * bj[kk];
            if (acc)
                ci[j] += dot;
            else
                ci[j] = dot;
        }
    }
}

// C (+)= A[k,m]^T * B[k,n]
template <class R>
void mm_tn(const R* a, const R* b, R* c, int m, int k, int n, bool acc) {
    if (!acc)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i) c[i] = R(0);
    for (int kk = 0; kk < k; ++kk) {
        const R* ak = a + static_cast<std::int64_t>(kk) * m;
        const R* bk = b + static_cast<std::int64_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const R av = ak[i];
            R* ci = c + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

}  // namespace detail

// Reverse-mode tape. Nodes are created in topological order by construction;
// backward() walks the tape in reverse. Tensors inside the graph are immutable
// once created. The graph is single-threaded; parallelism lives above it.
template <class R>
class Graph {
public:
    struct Var {
        int i = -1;
        bool ok() const { return i >= 0; }
    };

    explicit Graph(bool check_finite = false) : check_finite_(check_finite) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor<R> v) { return add_node(std::move(v), true, "leaf"); }
    Var constant(Tensor<R> v) { return add_node(std::move(v), false, "const"); }

    const Tensor<R>& val(Var v) const { return nodes_[check(v)].val; }

    // gradient after backward(); zeros if the value had no influence
    const Tensor<R>& grad(Var v) {
        Node& n = nodes_[check(v)];
        if (n.grad.data.empty()) n.grad = Tensor<R>::zeros(n.val.shape);
        return n.grad;
    }

    bool needs_grad(Var v) const { return nodes_[check(v)].needs; }
    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // ---- elementwise ----

    Var add(Var a, Var b) { return binary_same(a, b, "add",
        [](R x, R y) { return x + y; },
        [](R, R, R) { return R(1); },
        [](R, R, R) { return R(1); }); }

    Var sub(Var a, Var b) { return binary_same(a, b, "sub",
        [](R x, R y) { return x - y; },
        [](R, R, R) { return R(1); },
        [](R, R, R) { return R(-1); }); }

    Var mul(Var a, Var b) { return binary_same(a, b, "mul",
        [](R x, R y) { return x * y; },
        [](R, R y, R) { return y; },
        [](R x, R, R) { return x; }); }

    Var div(Var a, Var b) { return binary_same(a, b, "div",
        [](R x, R y) { return x / y; },
        [](R, R y, R) { return R(1) / y; },
        [](R, R y, R out) { return -out / y; }); }

    Var neg(Var a) { return unary(a, "neg",
        [](R x) { return -x; },
        [](R, R) { return R(-1); }); }

    Var exp_op(Var a) { return unary(a, "exp",
        [](R x) { return std::exp(x); },
        [](R, R y) { return y; }); }

    // ln(max(x, eps)); zero slope below the floor
    Var log_clamped(Var a, R eps) { return unary(a, "log_clamped",
        [eps](R x) { return std::log(x < eps ? eps : x); },
        [eps](R x, R) { return x > eps ? R(1) / x : R(0); }); }

    Var sqrt_op(Var a) { return unary(a, "sqrt",
        [](R x) { return std::sqrt(x); },
        [](R, R y) { return R(1) / (R(2) * (y > R(1e-20) ? y : R(1e-20))); }); }

    Var square(Var a) { return unary(a, "square",
        [](R x) { return x * x; },
        [](R x, R) { return R(2) * x; }); }

    Var abs_op(Var a) { return unary(a, "abs",
        [](R x) { return std::abs(x); },
        [](R x, R) { return x > R(0) ? R(1) : (x < R(0) ? R(-1) : R(0)); }); }

    Var gelu(Var a) { return unary(a, "gelu",
        [](R x) {
            const R u = static_cast<R>(detail::kGeluC0) * (x + static_cast<R>(detail::kGeluC1) * x * x * x);
            return R(0.5) * x * (R(1) + std::tanh(u));
        },
        [](R x, R) {
            const R c0 = static_cast<R>(detail::kGeluC0);
            const R c1 = static_cast<R>(detail::kGeluC1);
            const R u = c0 * (x + c1 * x * x * x);
            const R t = std::tanh(u);
            const R du = c0 * (R(1) + R(3) * c1 * x * x);
            return R(0.5) * (R(1) + t) + R(0.5) * x * (R(1) - t * t) * du;
        }); }

    Var scale(Var a, R c) { return unary(a, "scale",
        [c](R x) { return c * x; },
        [c](R, R) { return c; }); }

    Var add_const(Var a, R c) { return unary(a, "add_const",
        [c](R x) { return x + c; },
        [](R, R) { return R(1); }); }

    // ---- broadcasts ----

    // a[..., n] + v[n]
    Var add_lastvec(Var a, Var v) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tv = nodes_[check(v)].val;
        const int n = ta.last_dim();
        require_shape(tv.rank() == 1 && tv.shape[0] == n, "add_lastvec", ta.shape, tv.shape);
        Tensor<R> out = ta;
        const std::int64_t rows = ta.outer_count();
        for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) out.data[r * n + j] += tv.data[j];
        Var y = add_node(std::move(out), needs(a) || needs(v), "add_lastvec");
        set_back(y, [this, a, v, y, rows, n] {
            const auto& gy = gref(y);
            if (needs(a)) axpy(gbuf(a), gy);
            if (needs(v)) {
                auto& gv = gbuf(v);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j) gv.data[j] += gy.data[r * n + j];
            }
        });
        return y;
    }

    // a[..., m, n] + b[m, n] broadcast over leading dims
    Var add_mat2(Var a, Var b) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tb = nodes_[check(b)].val;
        require_shape(ta.rank() >= 2 && tb.rank() == 2, "add_mat2", ta.shape, tb.shape);
        const int m = ta.shape[ta.rank() - 2];
        const int n = ta.shape[ta.rank() - 1];
        require_shape(tb.shape[0] == m && tb.shape[1] == n, "add_mat2", ta.shape, tb.shape);
        const std::int64_t mat = static_cast<std::int64_t>(m) * n;
        const std::int64_t batches = ta.numel() / mat;
        Tensor<R> out = ta;
        for (std::int64_t bb = 0; bb < batches; ++bb)
            for (std::int64_t e = 0; e < mat; ++e) out.data[bb * mat + e] += tb.data[e];
        Var y = add_node(std::move(out), needs(a) || needs(b), "add_mat2");
        set_back(y, [this, a, b, y, batches, mat] {
            const auto& gy = gref(y);
            if (needs(a)) axpy(gbuf(a), gy);
            if (needs(b)) {
                auto& gb = gbuf(b);
                for (std::int64_t bb = 0; bb < batches; ++bb)
                    for (std::int64_t e = 0; e < mat; ++e) gb.data[e] += gy.data[bb * mat + e];
            }
        });
        return y;
    }

    // a[m, n] + v[m] down columns
    Var add_colvec(Var a, Var v) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tv = nodes_[check(v)].val;
        require_shape(ta.rank() == 2 && tv.rank() == 1 && tv.shape[0] == ta.shape[0],
                      "add_colvec", ta.shape, tv.shape);
        const int m = ta.shape[0], n = ta.shape[1];
        Tensor<R> out = ta;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<std::int64_t>(i) * n + j] += tv.data[i];
        Var y = add_node(std::move(out), needs(a) || needs(v), "add_colvec");
        set_back(y, [this, a, v, y, m, n] {
            const auto& gy = gref(y);
            if (needs(a)) axpy(gbuf(a), gy);
            if (needs(v)) {
                auto& gv = gbuf(v);
                for (int i = 0; i < m; ++i) {
                    R s = R(0);
                    for (int j = 0; j < n; ++j) s += gy.data[static_cast<std::int64_t>(i) * n + j];
                    gv.data[i] += s;
                }
            }
        });
        return y;
    }

    // a * s and a / s with s a scalar Var of shape [1]
    Var mul_scalarv(Var a, Var s) { return scalarv(a, s, false); }
    Var div_scalarv(Var a, Var s) { return scalarv(a, s, true); }

    // a[..., n] op b[..., 1] (same leading shape)
    Var mul_keeplast1(Var a, Var b) { return keeplast1(a, b, false); }
    Var div_keeplast1(Var a, Var b) { return keeplast1(a, b, true); }

    // ---- linear algebra ----

    // a[..., m, k] * w[k, n], w shared across leading batches
    Var matmul(Var a, Var w) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tw = nodes_[check(w)].val;
        require_shape(ta.rank() >= 2 && tw.rank() == 2, "matmul", ta.shape, tw.shape);
        const int k = ta.shape[ta.rank() - 1];
        const int m = ta.shape[ta.rank() - 2];
        require_shape(tw.shape[0] == k, "matmul inner extent", ta.shape, tw.shape);
        const int n = tw.shape[1];
        const std::int64_t batches = ta.numel() / (static_cast<std::int64_t>(m) * k);
        std::vector<int> oshape(ta.shape.begin(), ta.shape.end() - 1);
        oshape.push_back(n);
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        for (std::int64_t bb = 0; bb < batches; ++bb)
            detail::mm_nn(ta.data.data() + bb * m * k, tw.data.data(),
                          out.data.data() + bb * static_cast<std::int64_t>(m) * n, m, k, n, true);
        Var y = add_node(std::move(out), needs(a) || needs(w), "matmul");
        set_back(y, [this, a, w, y, m, k, n, batches] {
            const auto& gy = gref(y);
            const auto& va = nodes_[a.i].val;
            const auto& vw = nodes_[w.i].val;
            if (needs(a)) {
                auto& ga = gbuf(a);
                // dA = dC * W^T  (row-dot form)
                for (std::int64_t bb = 0; bb < batches; ++bb)
                    detail::mm_nt(gy.data.data() + bb * static_cast<std::int64_t>(m) * n,
                                  vw.data.data(), ga.data.data() + bb * static_cast<std::int64_t>(m) * k,
                                  m, n, k, true);
            }
            if (needs(w)) {
                auto& gw = gbuf(w);
                for (std::int64_t bb = 0; bb < batches; ++bb)
                    detail::mm_tn(va.data.data() + bb * static_cast<std::int64_t>(m) * k,
                                  gy.data.data() + bb * static_cast<std::int64_t>(m) * n,
                                  gw.data.data(), k, m, n, true);
            }
        });
        return y;
    }

    // a[..., m, k] * b[..., k, n], identical leading dims
    Var bmatmul(Var a, Var b) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tb = nodes_[check(b)].val;
        require_shape(ta.rank() >= 2 && tb.rank() == ta.rank(), "bmatmul", ta.shape, tb.shape);
        const int m = ta.shape[ta.rank() - 2], k = ta.shape[ta.rank() - 1];
        const int k2 = tb.shape[tb.rank() - 2], n = tb.shape[tb.rank() - 1];
        require_shape(k2 == k, "bmatmul inner extent", ta.shape, tb.shape);
        for (int d = 0; d + 2 < ta.rank(); ++d)
            require_shape(ta.shape[d] == tb.shape[d], "bmatmul batch", ta.shape, tb.shape);
        const std::int64_t batches = ta.numel() / (static_cast<std::int64_t>(m) * k);
        std::vector<int> oshape(ta.shape.begin(), ta.shape.end());
        oshape[oshape.size() - 1] = n;
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        for (std::int64_t bb = 0; bb < batches; ++bb)
            detail::mm_nn(ta.data.data() + bb * static_cast<std::int64_t>(m) * k,
                          tb.data.data() + bb * static_cast<std::int64_t>(k) * n,
                          out.data.data() + bb * static_cast<std::int64_t>(m) * n, m, k, n, true);
        Var y = add_node(std::move(out), needs(a) || needs(b), "bmatmul");
        set_back(y, [this, a, b, y, m, k, n, batches] {
            const auto& gy = gref(y);
            const auto& va = nodes_[a.i].val;
            const auto& vb = nodes_[b.i].val;
            for (std::int64_t bb = 0; bb < batches; ++bb) {
                const R* gyp = gy.data.data() + bb * static_cast<std::int64_t>(m) * n;
                if (needs(a))
                    detail::mm_nt(gyp, vb.data.data() + bb * static_cast<std::int64_t>(k) * n,
                                  gbuf(a).data.data() + bb * static_cast<std::int64_t>(m) * k, m, n, k, true);
                if (needs(b))
                    detail::mm_tn(va.data.data() + bb * static_cast<std::int64_t>(m) * k, gyp,
                                  gbuf(b).data.data() + bb * static_cast<std::int64_t>(k) * n, k, m, n, true);
            }
        });
        return y;
    }

    // a[..., m, k] * b[..., n, k]^T, identical leading dims
    Var matmul_nt(Var a, Var b) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tb = nodes_[check(b)].val;
        require_shape(ta.rank() >= 2 && tb.rank() == ta.rank(), "matmul_nt", ta.shape, tb.shape);
        const int m = ta.shape[ta.rank() - 2], k = ta.shape[ta.rank() - 1];
        const int n = tb.shape[tb.rank() - 2];
        require_shape(tb.shape[tb.rank() - 1] == k, "matmul_nt inner extent", ta.shape, tb.shape);
        for (int d = 0; d + 2 < ta.rank(); ++d)
            require_shape(ta.shape[d] == tb.shape[d], "matmul_nt batch", ta.shape, tb.shape);
        const std::int64_t batches = ta.numel() / (static_cast<std::int64_t>(m) * k);
        std::vector<int> oshape(ta.shape.begin(), ta.shape.end());
        oshape[oshape.size() - 1] = n;
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        for (std::int64_t bb = 0; bb < batches; ++bb)
            detail::mm_nt(ta.data.data() + bb * static_cast<std::int64_t>(m) * k,
                          tb.data.data() + bb * static_cast<std::int64_t>(n) * k,
                          out.data.data() + bb * static_cast<std::int64_t>(m) * n, m, k, n, false);
        Var y = add_node(std::move(out), needs(a) || needs(b), "matmul_nt");
        set_back(y, [this, a, b, y, m, k, n, batches] {
            const auto& gy = gref(y);
            const auto& va = nodes_[a.i].val;
            const auto& vb = nodes_[b.i].val;
            for (std::int64_t bb = 0; bb < batches; ++bb) {
                const R* gyp = gy.data.data() + bb * static_cast<std::int64_t>(m) * n;
                // dA = dC * B ; dB = dC^T * A
                if (needs(a))
                    detail::mm_nn(gyp, vb.data.data() + bb * static_cast<std::int64_t>(n) * k,
                                  gbuf(a).data.data() + bb * static_cast<std::int64_t>(m) * k, m, n, k, true);
                if (needs(b))
                    detail::mm_tn(gyp, va.data.data() + bb * static_cast<std::int64_t>(m) * k,
                                  gbuf(b).data.data() + bb * static_cast<std::int64_t>(n) * k, n, m, k, true);
            }
        });
        return y;
    }

    Var transpose2d(Var a) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        require_shape(ta.rank() == 2, "transpose2d", ta.shape, ta.shape);
        const int m = ta.shape[0], n = ta.shape[1];
        Tensor<R> out = Tensor<R>::zeros({n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out.data[static_cast<std::int64_t>(j) * m + i] = ta.data[static_cast<std::int64_t>(i) * n + j];
        Var y = add_node(std::move(out), needs(a), "transpose2d");
        set_back(y, [this, a, y, m, n] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ga.data[static_cast<std::int64_t>(i) * n + j] += gy.data[static_cast<std::int64_t>(j) * m + i];
        });
        return y;
    }

    Var reshape(Var a, std::vector<int> shape) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        if (Tensor<R>::count(shape) != ta.numel())
            throw DimensionError("reshape: element count mismatch " + shape_str(ta.shape) +
                                 " -> " + shape_str(shape));
        Tensor<R> out(std::move(shape), ta.data);
        Var y = add_node(std::move(out), needs(a), "reshape");
        set_back(y, [this, a, y] {
            const auto& gy = gref(y);
            axpy(gbuf(a), gy);
        });
        return y;
    }

    // ---- normalization / softmax ----

    // softmax over the last axis, max-subtracted
    Var softmax_last(Var a) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const int n = ta.last_dim();
        const std::int64_t rows = ta.outer_count();
        Tensor<R> out = ta;
        for (std::int64_t r = 0; r < rows; ++r) {
            R* p = out.data.data() + r * n;
            R mx = p[0];
            for (int j = 1; j < n; ++j) mx = p[j] > mx ? p[j] : mx;
            R sum = R(0);
            for (int j = 0; j < n; ++j) {
                p[j] = std::exp(p[j] - mx);
                sum += p[j];
            }
            const R inv = R(1) / sum;
            for (int j = 0; j < n; ++j) p[j] *= inv;
        }
        Var y = add_node(std::move(out), needs(a), "softmax");
        set_back(y, [this, a, y, rows, n] {
            const auto& gy = gref(y);
            const auto& vy = nodes_[y.i].val;
            auto& ga = gbuf(a);
            for (std::int64_t r = 0; r < rows; ++r) {
                const R* yp = vy.data.data() + r * n;
                const R* gp = gy.data.data() + r * n;
                R dot = R(0);
                for (int j = 0; j < n; ++j) dot += gp[j] * yp[j];
                R* ap = ga.data.data() + r * n;
                for (int j = 0; j < n; ++j) ap[j] += yp[j] * (gp[j] - dot);
            }
        });
        return y;
    }

    Var log_softmax_last(Var a) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const int n = ta.last_dim();
        const std::int64_t rows = ta.outer_count();
        Tensor<R> out = ta;
        for (std::int64_t r = 0; r < rows; ++r) {
            R* p = out.data.data() + r * n;
            R mx = p[0];
            for (int j = 1; j < n; ++j) mx = p[j] > mx ? p[j] : mx;
            R sum = R(0);
            for (int j = 0; j < n; ++j) sum += std::exp(p[j] - mx);
            const R lse = mx + std::log(sum);
            for (int j = 0; j < n; ++j) p[j] -= lse;
        }
        Var y = add_node(std::move(out), needs(a), "log_softmax");
        set_back(y, [this, a, y, rows, n] {
            const auto& gy = gref(y);
            const auto& vy = nodes_[y.i].val;
            auto& ga = gbuf(a);
            for (std::int64_t r = 0; r < rows; ++r) {
                const R* yp = vy.data.data() + r * n;
                const R* gp = gy.data.data() + r * n;
                R gsum = R(0);
                for (int j = 0; j < n; ++j) gsum += gp[j];
                R* ap = ga.data.data() + r * n;
                for (int j = 0; j < n; ++j) ap[j] += gp[j] - std::exp(yp[j]) * gsum;
            }
        });
        return y;
    }

    // layer norm over the last axis with affine gain/bias of shape [d]
    Var layer_norm(Var x, Var gain, Var bias, R eps) {
        const Tensor<R>& tx = nodes_[check(x)].val;
        const Tensor<R>& tg = nodes_[check(gain)].val;
        const Tensor<R>& tb = nodes_[check(bias)].val;
        const int d = tx.last_dim();
        require_shape(tg.rank() == 1 && tg.shape[0] == d, "layer_norm gain", tx.shape, tg.shape);
        require_shape(tb.rank() == 1 && tb.shape[0] == d, "layer_norm bias", tx.shape, tb.shape);
        const std::int64_t rows = tx.outer_count();
        Tensor<R> out = Tensor<R>::zeros(tx.shape);
        auto xhat = std::make_shared<std::vector<R>>(tx.data.size());
        auto inv_std = std::make_shared<std::vector<R>>(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
            const R* p = tx.data.data() + r * d;
            R mean = R(0);
            for (int j = 0; j < d; ++j) mean += p[j];
            mean /= static_cast<R>(d);
            R var = R(0);
            for (int j = 0; j < d; ++j) {
                const R c = p[j] - mean;
                var += c * c;
            }
            var /= static_cast<R>(d);
            const R inv = R(1) / std::sqrt(var + eps);
            (*inv_std)[r] = inv;
            R* o = out.data.data() + r * d;
            R* h = xhat->data() + r * d;
            for (int j = 0; j < d; ++j) {
                h[j] = (p[j] - mean) * inv;
                o[j] = tg.data[j] * h[j] + tb.data[j];
            }
        }
        Var y = add_node(std::move(out), needs(x) || needs(gain) || needs(bias), "layer_norm");
        set_back(y, [this, x, gain, bias, y, rows, d, xhat, inv_std] {
            const auto& gy = gref(y);
            const auto& tg = nodes_[gain.i].val;
            for (std::int64_t r = 0; r < rows; ++r) {
                const R* gp = gy.data.data() + r * d;
                const R* h = xhat->data() + r * d;
                if (needs(gain)) {
                    auto& gg = gbuf(gain);
                    for (int j = 0; j < d; ++j) gg.data[j] += gp[j] * h[j];
                }
                if (needs(bias)) {
                    auto& gb = gbuf(bias);
                    for (int j = 0; j < d; ++j) gb.data[j] += gp[j];
                }
                if (needs(x)) {
                    auto& gx = gbuf(x);
                    R m1 = R(0), m2 = R(0);
                    for (int j = 0; j < d; ++j) {
                        const R gh = gp[j] * tg.data[j];
                        m1 += gh;
                        m2 += gh * h[j];
                    }
                    m1 /= static_cast<R>(d);
                    m2 /= static_cast<R>(d);
                    R* xp = gx.data.data() + r * d;
                    const R inv = (*inv_std)[r];
                    for (int j = 0; j < d; ++j) {
                        const R gh = gp[j] * tg.data[j];
                        xp[j] += (gh - m1 - h[j] * m2) * inv;
                    }
                }
            }
        });
        return y;
    }

    // ---- reductions ----

    Var sum_last(Var a) { return reduce_last(a, false, "sum_last"); }
    Var mean_last(Var a) { return reduce_last(a, true, "mean_last"); }

    // min over last axis; gradient routes to the first argmin
    Var min_last(Var a) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const int n = ta.last_dim();
        const std::int64_t rows = ta.outer_count();
        Tensor<R> out = Tensor<R>::zeros(drop_last(ta.shape));
        auto argmin = std::make_shared<std::vector<std::int64_t>>(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
            const R* p = ta.data.data() + r * n;
            int best = 0;
            for (int j = 1; j < n; ++j)
                if (p[j] < p[best]) best = j;
            (*argmin)[r] = r * n + best;
            out.data[r] = p[best];
        }
        Var y = add_node(std::move(out), needs(a), "min_last");
        set_back(y, [this, a, y, rows, argmin] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (std::int64_t r = 0; r < rows; ++r) ga.data[(*argmin)[r]] += gy.data[r];
        });
        return y;
    }

    Var sum_first(Var a) { return reduce_first(a, false, "sum_first"); }
    Var mean_first(Var a) { return reduce_first(a, true, "mean_first"); }

    Var sum_all(Var a) { return reduce_all(a, false); }
    Var mean_all(Var a) { return reduce_all(a, true); }

    // ---- indexing / assembly ----

    Var slice_last(Var a, int c0, int c1) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const int n = ta.last_dim();
        if (!(0 <= c0 && c0 < c1 && c1 <= n))
            throw DimensionError("slice_last: range [" + std::to_string(c0) + "," +
                                 std::to_string(c1) + ") for width " + std::to_string(n));
        const int w = c1 - c0;
        const std::int64_t rows = ta.outer_count();
        std::vector<int> oshape = ta.shape;
        oshape.back() = w;
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < w; ++j) out.data[r * w + j] = ta.data[r * n + c0 + j];
        Var y = add_node(std::move(out), needs(a), "slice_last");
        set_back(y, [this, a, y, rows, n, c0, w] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < w; ++j) ga.data[r * n + c0 + j] += gy.data[r * w + j];
        });
        return y;
    }

    Var concat_last(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_last: no inputs");
        const Tensor<R>& t0 = nodes_[check(parts[0])].val;
        const std::int64_t rows = t0.outer_count();
        int total = 0;
        bool ng = false;
        std::vector<int> widths(parts.size());
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const Tensor<R>& tp = nodes_[check(parts[p])].val;
            require_shape(drop_last(tp.shape) == drop_last(t0.shape), "concat_last", t0.shape, tp.shape);
            widths[p] = tp.last_dim();
            total += widths[p];
            ng = ng || needs(parts[p]);
        }
        std::vector<int> oshape = t0.shape;
        oshape.back() = total;
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        int off = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const Tensor<R>& tp = nodes_[parts[p].i].val;
            const int w = widths[p];
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < w; ++j) out.data[r * total + off + j] = tp.data[r * w + j];
            off += w;
        }
        Var y = add_node(std::move(out), ng, "concat_last");
        auto parts_copy = parts;
        set_back(y, [this, parts_copy, widths, y, rows, total] {
            const auto& gy = gref(y);
            int off = 0;
            for (std::size_t p = 0; p < parts_copy.size(); ++p) {
                const int w = widths[p];
                if (needs(parts_copy[p])) {
                    auto& gp = gbuf(parts_copy[p]);
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (int j = 0; j < w; ++j) gp.data[r * w + j] += gy.data[r * total + off + j];
                }
                off += w;
            }
        });
        return y;
    }

    Var concat_first(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_first: no inputs");
        const Tensor<R>& t0 = nodes_[check(parts[0])].val;
        std::vector<int> rest(t0.shape.begin() + 1, t0.shape.end());
        int total = 0;
        bool ng = false;
        for (Var p : parts) {
            const Tensor<R>& tp = nodes_[check(p)].val;
            require_shape(std::vector<int>(tp.shape.begin() + 1, tp.shape.end()) == rest,
                          "concat_first", t0.shape, tp.shape);
            total += tp.shape[0];
            ng = ng || needs(p);
        }
        std::vector<int> oshape;
        oshape.push_back(total);
        oshape.insert(oshape.end(), rest.begin(), rest.end());
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor<R>& tp = nodes_[p.i].val;
            std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + off);
            off += tp.data.size();
        }
        Var y = add_node(std::move(out), ng, "concat_first");
        auto parts_copy = parts;
        set_back(y, [this, parts_copy, y] {
            const auto& gy = gref(y);
            std::size_t off = 0;
            for (Var p : parts_copy) {
                const std::size_t sz = nodes_[p.i].val.data.size();
                if (needs(p)) {
                    auto& gp = gbuf(p);
                    for (std::size_t e = 0; e < sz; ++e) gp.data[e] += gy.data[off + e];
                }
                off += sz;
            }
        });
        return y;
    }

    // rows of a[m, rest...] selected by idx (repeats allowed)
    Var gather_first(Var a, std::vector<int> idx) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        if (ta.rank() < 1) throw DimensionError("gather_first: rank 0");
        const int m = ta.shape[0];
        const std::int64_t row = ta.numel() / m;
        for (int i : idx)
            if (i < 0 || i >= m)
                throw DimensionError("gather_first: index " + std::to_string(i) +
                                     " out of range for " + std::to_string(m) + " rows");
        std::vector<int> oshape = ta.shape;
        oshape[0] = static_cast<int>(idx.size());
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy(ta.data.begin() + idx[r] * row, ta.data.begin() + (idx[r] + 1) * row,
                      out.data.begin() + static_cast<std::int64_t>(r) * row);
        Var y = add_node(std::move(out), needs(a), "gather_first");
        auto idx_keep = std::make_shared<std::vector<int>>(std::move(idx));
        set_back(y, [this, a, y, idx_keep, row] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (std::size_t r = 0; r < idx_keep->size(); ++r) {
                const R* src = gy.data.data() + static_cast<std::int64_t>(r) * row;
                R* dst = ga.data.data() + static_cast<std::int64_t>((*idx_keep)[r]) * row;
                for (std::int64_t e = 0; e < row; ++e) dst[e] += src[e];
            }
        });
        return y;
    }

    // per-row element pick: a[..., n], idx sized outer_count
    Var pick_last(Var a, std::vector<int> idx) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const int n = ta.last_dim();
        const std::int64_t rows = ta.outer_count();
        if (static_cast<std::int64_t>(idx.size()) != rows)
            throw DimensionError("pick_last: index count " + std::to_string(idx.size()) +
                                 " != rows " + std::to_string(rows));
        for (int i : idx)
            if (i < 0 || i >= n)
                throw ContractError("pick_last: class index " + std::to_string(i) +
                                    " out of range [0," + std::to_string(n) + ")");
        Tensor<R> out = Tensor<R>::zeros(drop_last(ta.shape));
        for (std::int64_t r = 0; r < rows; ++r) out.data[r] = ta.data[r * n + idx[r]];
        Var y = add_node(std::move(out), needs(a), "pick_last");
        auto idx_keep = std::make_shared<std::vector<int>>(std::move(idx));
        set_back(y, [this, a, y, idx_keep, rows, n] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (std::int64_t r = 0; r < rows; ++r) ga.data[r * n + (*idx_keep)[r]] += gy.data[r];
        });
        return y;
    }

    // ---- 3D convolution ----

    // x[Ci, D, H, W] * w[Co, Ci, k, k, k] (+ b[Co]), stride 1, zero padding k/2
    Var conv3d(Var x, Var w, Var b) {
        const Tensor<R>& tx = nodes_[check(x)].val;
        const Tensor<R>& tw = nodes_[check(w)].val;
        require_shape(tx.rank() == 4 && tw.rank() == 5, "conv3d", tx.shape, tw.shape);
        require_shape(tw.shape[1] == tx.shape[0], "conv3d channels", tx.shape, tw.shape);
        const int ci = tx.shape[0], dd = tx.shape[1], hh = tx.shape[2], ww = tx.shape[3];
        const int co = tw.shape[0], k = tw.shape[2];
        require_shape(tw.shape[3] == k && tw.shape[4] == k, "conv3d kernel", tw.shape, tw.shape);
        const int pad = k / 2;
        const Tensor<R>* tb = nullptr;
        if (b.ok()) {
            tb = &nodes_[check(b)].val;
            require_shape(tb->rank() == 1 && tb->shape[0] == co, "conv3d bias", tw.shape, tb->shape);
        }
        Tensor<R> out = Tensor<R>::zeros({co, dd, hh, ww});
        const auto xat = [&](int c, int z, int y0, int x0) {
            return tx.data[((static_cast<std::int64_t>(c) * dd + z) * hh + y0) * ww + x0];
        };
        for (int oc = 0; oc < co; ++oc) {
            const R bias = tb ? tb->data[oc] : R(0);
            for (int z = 0; z < dd; ++z)
                for (int y0 = 0; y0 < hh; ++y0)
                    for (int x0 = 0; x0 < ww; ++x0) {
                        R acc = bias;
                        for (int ic = 0; ic < ci; ++ic)
                            for (int kz = 0; kz < k; ++kz) {
                                const int iz = z + kz - pad;
                                if (iz < 0 || iz >= dd) continue;
                                for (int ky = 0; ky < k; ++ky) {
                                    const int iy = y0 + ky - pad;
                                    if (iy < 0 || iy >= hh) continue;
                                    for (int kx = 0; kx < k; ++kx) {
                                        const int ix = x0 + kx - pad;
                                        if (ix < 0 || ix >= ww) continue;
                                        acc += xat(ic, iz, iy, ix) *
                                               tw.data[(((static_cast<std::int64_t>(oc) * ci + ic) * k + kz) * k + ky) * k + kx];
                                    }
                                }
                            }
                        out.data[((static_cast<std::int64_t>(oc) * dd + z) * hh + y0) * ww + x0] = acc;
                    }
        }
        const bool ng = needs(x) || needs(w) || (b.ok() && needs(b));
        Var y = add_node(std::move(out), ng, "conv3d");
        set_back(y, [this, x, w, b, y, ci, co, dd, hh, ww, k, pad] {
            const auto& gy = gref(y);
            const auto& tx = nodes_[x.i].val;
            const auto& tw = nodes_[w.i].val;
            const bool nx = needs(x), nw = needs(w), nb = b.ok() && needs(b);
            Tensor<R>* gx = nx ? &gbuf(x) : nullptr;
            Tensor<R>* gw = nw ? &gbuf(w) : nullptr;
            Tensor<R>* gb = nb ? &gbuf(b) : nullptr;
            for (int oc = 0; oc < co; ++oc)
                for (int z = 0; z < dd; ++z)
                    for (int y0 = 0; y0 < hh; ++y0)
                        for (int x0 = 0; x0 < ww; ++x0) {
                            const R g = gy.data[((static_cast<std::int64_t>(oc) * dd + z) * hh + y0) * ww + x0];
                            if (g == R(0)) continue;
                            if (gb) gb->data[oc] += g;
                            for (int ic = 0; ic < ci; ++ic)
                                for (int kz = 0; kz < k; ++kz) {
                                    const int iz = z + kz - pad;
                                    if (iz < 0 || iz >= dd) continue;
                                    for (int ky = 0; ky < k; ++ky) {
                                        const int iy = y0 + ky - pad;
                                        if (iy < 0 || iy >= hh) continue;
                                        for (int kx = 0; kx < k; ++kx) {
                                            const int ix = x0 + kx - pad;
                                            if (ix < 0 || ix >= ww) continue;
                                            const std::int64_t xi = ((static_cast<std::int64_t>(ic) * dd + iz) * hh + iy) * ww + ix;
                                            const std::int64_t wi = (((static_cast<std::int64_t>(oc) * ci + ic) * k + kz) * k + ky) * k + kx;
                                            if (gx) gx->data[xi] += g * tw.data[wi];
                                            if (gw) gw->data[wi] += g * tx.data[xi];
                                        }
                                    }
                                }
                        }
        });
        return y;
    }

    // x[Ci, D, H, W] upsampled by factor s with w[Ci, Co, s, s, s] (+ b[Co]);
    // kernel == stride, so output cells do not overlap
    Var conv_transpose3d(Var x, Var w, Var b) {
        const Tensor<R>& tx = nodes_[check(x)].val;
        const Tensor<R>& tw = nodes_[check(w)].val;
        require_shape(tx.rank() == 4 && tw.rank() == 5, "conv_transpose3d", tx.shape, tw.shape);
        require_shape(tw.shape[0] == tx.shape[0], "conv_transpose3d channels", tx.shape, tw.shape);
        const int ci = tx.shape[0], dd = tx.shape[1], hh = tx.shape[2], ww = tx.shape[3];
        const int co = tw.shape[1], s = tw.shape[2];
        require_shape(tw.shape[3] == s && tw.shape[4] == s, "conv_transpose3d kernel", tw.shape, tw.shape);
        const Tensor<R>* tb = nullptr;
        if (b.ok()) {
            tb = &nodes_[check(b)].val;
            require_shape(tb->rank() == 1 && tb->shape[0] == co, "conv_transpose3d bias", tw.shape, tb->shape);
        }
        const int od = dd * s, oh = hh * s, ow = ww * s;
        Tensor<R> out = Tensor<R>::zeros({co, od, oh, ow});
        if (tb)
            for (int oc = 0; oc < co; ++oc)
                for (std::int64_t e = 0; e < static_cast<std::int64_t>(od) * oh * ow; ++e)
                    out.data[static_cast<std::int64_t>(oc) * od * oh * ow + e] = tb->data[oc];
        for (int ic = 0; ic < ci; ++ic)
            for (int z = 0; z < dd; ++z)
                for (int y0 = 0; y0 < hh; ++y0)
                    for (int x0 = 0; x0 < ww; ++x0) {
                        const R v = tx.data[((static_cast<std::int64_t>(ic) * dd + z) * hh + y0) * ww + x0];
                        for (int oc = 0; oc < co; ++oc)
                            for (int dz = 0; dz < s; ++dz)
                                for (int dy = 0; dy < s; ++dy)
                                    for (int dx = 0; dx < s; ++dx)
                                        out.data[((static_cast<std::int64_t>(oc) * od + z * s + dz) * oh + y0 * s + dy) * ow + x0 * s + dx] +=
                                            v * tw.data[(((static_cast<std::int64_t>(ic) * co + oc) * s + dz) * s + dy) * s + dx];
                    }
        const bool ng = needs(x) || needs(w) || (b.ok() && needs(b));
        Var y = add_node(std::move(out), ng, "conv_transpose3d");
        set_back(y, [this, x, w, b, y, ci, co, dd, hh, ww, s] {
            const auto& gy = gref(y);
            const auto& tx = nodes_[x.i].val;
            const auto& tw = nodes_[w.i].val;
            const int od = dd * s, oh = hh * s, ow = ww * s;
            const bool nx = needs(x), nw = needs(w), nb = b.ok() && needs(b);
            Tensor<R>* gx = nx ? &gbuf(x) : nullptr;
            Tensor<R>* gw = nw ? &gbuf(w) : nullptr;
            if (nb) {
                auto& gb = gbuf(b);
                for (int oc = 0; oc < co; ++oc) {
                    R sum = R(0);
                    for (std::int64_t e = 0; e < static_cast<std::int64_t>(od) * oh * ow; ++e)
                        sum += gy.data[static_cast<std::int64_t>(oc) * od * oh * ow + e];
                    gb.data[oc] += sum;
                }
            }
            if (!nx && !nw) return;
            for (int ic = 0; ic < ci; ++ic)
                for (int z = 0; z < dd; ++z)
                    for (int y0 = 0; y0 < hh; ++y0)
                        for (int x0 = 0; x0 < ww; ++x0) {
                            const std::int64_t xi = ((static_cast<std::int64_t>(ic) * dd + z) * hh + y0) * ww + x0;
                            const R v = tx.data[xi];
                            R gxa = R(0);
                            for (int oc = 0; oc < co; ++oc)
                                for (int dz = 0; dz < s; ++dz)
                                    for (int dy = 0; dy < s; ++dy)
                                        for (int dx = 0; dx < s; ++dx) {
                                            const R g = gy.data[((static_cast<std::int64_t>(oc) * od + z * s + dz) * oh + y0 * s + dy) * ow + x0 * s + dx];
                                            const std::int64_t wi = (((static_cast<std::int64_t>(ic) * co + oc) * s + dz) * s + dy) * s + dx;
                                            gxa += g * tw.data[wi];
                                            if (gw) gw->data[wi] += g * v;
                                        }
                            if (gx) gx->data[xi] += gxa;
                        }
        });
        return y;
    }

    // ---- backward ----

    void backward(Var loss) {
        Node& ln = nodes_[check(loss)];
        if (ln.val.numel() != 1)
            throw ContractError("backward: loss must be scalar, got " + shape_str(ln.val.shape));
        for (auto& n : nodes_) n.grad.data.clear();
        gbuf(loss).data[0] = R(1);
        for (int i = loss.i; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && !n.grad.data.empty()) n.back();
        }
    }

private:
    struct Node {
        Tensor<R> val;
        Tensor<R> grad;
        std::function<void()> back;
        bool needs = false;
    };

    std::deque<Node> nodes_;
    bool check_finite_;

    int check(Var v) const {
        if (!v.ok() || v.i >= static_cast<int>(nodes_.size()))
            throw ContractError("invalid graph handle");
        return v.i;
    }

    bool needs(Var v) const { return nodes_[v.i].needs; }

    Var add_node(Tensor<R> v, bool needs_grad, const char* op) {
        if (check_finite_) {
            for (R x : v.data)
                if (!std::isfinite(static_cast<double>(x)))
                    throw ContractError(std::string("non-finite value produced by op '") + op + "'");
        }
        Node n;
        n.val = std::move(v);
        n.needs = needs_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var y, std::function<void()> fn) {
        if (nodes_[y.i].needs) nodes_[y.i].back = std::move(fn);
    }

    Tensor<R>& gbuf(Var v) {
        Node& n = nodes_[v.i];
        if (n.grad.data.empty()) n.grad = Tensor<R>::zeros(n.val.shape);
        return n.grad;
    }

    const Tensor<R>& gref(Var v) const { return nodes_[v.i].grad; }

    static void axpy(Tensor<R>& dst, const Tensor<R>& src) {
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
    }

    static std::vector<int> drop_last(const std::vector<int>& s) {
        if (s.size() <= 1) return {1};
        return std::vector<int>(s.begin(), s.end() - 1);
    }

    template <class F, class DA, class DB>
    Var binary_same(Var a, Var b, const char* op, F f, DA da, DB db) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tb = nodes_[check(b)].val;
        require_shape(ta.same_shape(tb), op, ta.shape, tb.shape);
        Tensor<R> out = Tensor<R>::zeros(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(ta.data[i], tb.data[i]);
        Var y = add_node(std::move(out), needs(a) || needs(b), op);
        set_back(y, [this, a, b, y, da, db] {
            const auto& gy = gref(y);
            const auto& ta = nodes_[a.i].val;
            const auto& tb = nodes_[b.i].val;
            const auto& ty = nodes_[y.i].val;
            if (needs(a)) {
                auto& ga = gbuf(a);
                for (std::size_t i = 0; i < ga.data.size(); ++i)
                    ga.data[i] += gy.data[i] * da(ta.data[i], tb.data[i], ty.data[i]);
            }
            if (needs(b)) {
                auto& gb = gbuf(b);
                for (std::size_t i = 0; i < gb.data.size(); ++i)
                    gb.data[i] += gy.data[i] * db(ta.data[i], tb.data[i], ty.data[i]);
            }
        });
        return y;
    }

    template <class F, class D>
    Var unary(Var a, const char* op, F f, D dfdx) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        Tensor<R> out = Tensor<R>::zeros(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(ta.data[i]);
        Var y = add_node(std::move(out), needs(a), op);
        set_back(y, [this, a, y, dfdx] {
            const auto& gy = gref(y);
            const auto& ta = nodes_[a.i].val;
            const auto& ty = nodes_[y.i].val;
            auto& ga = gbuf(a);
            for (std::size_t i = 0; i < ga.data.size(); ++i)
                ga.data[i] += gy.data[i] * dfdx(ta.data[i], ty.data[i]);
        });
        return y;
    }

    Var scalarv(Var a, Var s, bool divide) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& ts = nodes_[check(s)].val;
        require_shape(ts.numel() == 1, divide ? "div_scalarv" : "mul_scalarv", ta.shape, ts.shape);
        const R sv = ts.data[0];
        const R fac = divide ? R(1) / sv : sv;
        Tensor<R> out = Tensor<R>::zeros(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * fac;
        Var y = add_node(std::move(out), needs(a) || needs(s), divide ? "div_scalarv" : "mul_scalarv");
        set_back(y, [this, a, s, y, divide] {
            const auto& gy = gref(y);
            const auto& ta = nodes_[a.i].val;
            const R sv = nodes_[s.i].val.data[0];
            if (needs(a)) {
                auto& ga = gbuf(a);
                const R fac = divide ? R(1) / sv : sv;
                for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gy.data[i] * fac;
            }
            if (needs(s)) {
                R acc = R(0);
                for (std::size_t i = 0; i < ta.data.size(); ++i) acc += gy.data[i] * ta.data[i];
                gbuf(s).data[0] += divide ? -acc / (sv * sv) : acc;
            }
        });
        return y;
    }

    Var keeplast1(Var a, Var b, bool divide) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const Tensor<R>& tb = nodes_[check(b)].val;
        require_shape(tb.last_dim() == 1 && drop_last(tb.shape) == drop_last(ta.shape),
                      divide ? "div_keeplast1" : "mul_keeplast1", ta.shape, tb.shape);
        const int n = ta.last_dim();
        const std::int64_t rows = ta.outer_count();
        Tensor<R> out = Tensor<R>::zeros(ta.shape);
        for (std::int64_t r = 0; r < rows; ++r) {
            const R bv = tb.data[r];
            const R fac = divide ? R(1) / bv : bv;
            for (int j = 0; j < n; ++j) out.data[r * n + j] = ta.data[r * n + j] * fac;
        }
        Var y = add_node(std::move(out), needs(a) || needs(b), divide ? "div_keeplast1" : "mul_keeplast1");
        set_back(y, [this, a, b, y, rows, n, divide] {
            const auto& gy = gref(y);
            const auto& ta = nodes_[a.i].val;
            const auto& tb = nodes_[b.i].val;
            for (std::int64_t r = 0; r < rows; ++r) {
                const R bv = tb.data[r];
                if (needs(a)) {
                    auto& ga = gbuf(a);
                    const R fac = divide ? R(1) / bv : bv;
                    for (int j = 0; j < n; ++j) ga.data[r * n + j] += gy.data[r * n + j] * fac;
                }
                if (needs(b)) {
                    R acc = R(0);
                    for (int j = 0; j < n; ++j) acc += gy.data[r * n + j] * ta.data[r * n + j];
                    gbuf(b).data[r] += divide ? -acc / (bv * bv) : acc;
                }
            }
        });
        return y;
    }

    Var reduce_last(Var a, bool mean, const char* op) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const int n = ta.last_dim();
        const std::int64_t rows = ta.outer_count();
        const R fac = mean ? R(1) / static_cast<R>(n) : R(1);
        Tensor<R> out = Tensor<R>::zeros(drop_last(ta.shape));
        for (std::int64_t r = 0; r < rows; ++r) {
            R s = R(0);
            for (int j = 0; j < n; ++j) s += ta.data[r * n + j];
            out.data[r] = s * fac;
        }
        Var y = add_node(std::move(out), needs(a), op);
        set_back(y, [this, a, y, rows, n, fac] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (std::int64_t r = 0; r < rows; ++r) {
                const R g = gy.data[r] * fac;
                for (int j = 0; j < n; ++j) ga.data[r * n + j] += g;
            }
        });
        return y;
    }

    Var reduce_first(Var a, bool mean, const char* op) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        if (ta.rank() < 1) throw DimensionError("reduce_first: rank 0");
        const int m = ta.shape[0];
        const std::int64_t row = ta.numel() / m;
        const R fac = mean ? R(1) / static_cast<R>(m) : R(1);
        std::vector<int> oshape(ta.shape.begin() + 1, ta.shape.end());
        if (oshape.empty()) oshape.push_back(1);
        Tensor<R> out = Tensor<R>::zeros(std::move(oshape));
        for (int i = 0; i < m; ++i)
            for (std::int64_t e = 0; e < row; ++e) out.data[e] += ta.data[static_cast<std::int64_t>(i) * row + e];
        for (auto& x : out.data) x *= fac;
        Var y = add_node(std::move(out), needs(a), op);
        set_back(y, [this, a, y, m, row, fac] {
            const auto& gy = gref(y);
            auto& ga = gbuf(a);
            for (int i = 0; i < m; ++i)
                for (std::int64_t e = 0; e < row; ++e)
                    ga.data[static_cast<std::int64_t>(i) * row + e] += gy.data[e] * fac;
        });
        return y;
    }

    Var reduce_all(Var a, bool mean) {
        const Tensor<R>& ta = nodes_[check(a)].val;
        const R fac = mean ? R(1) / static_cast<R>(ta.numel()) : R(1);
        R s = R(0);
        for (R x : ta.data) s += x;
        Var y = add_node(Tensor<R>::scalar(s * fac), needs(a), mean ? "mean_all" : "sum_all");
        set_back(y, [this, a, y, fac] {
            const R g = gref(y).data[0] * fac;
            auto& ga = gbuf(a);
            for (auto& x : ga.data) x += g;
        });
        return y;
    }
};

}  // namespace sfuse
