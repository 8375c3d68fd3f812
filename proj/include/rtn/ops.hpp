#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "rtn/tensor.hpp"

namespace rtn {

namespace detail {

template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> data,
                         std::vector<std::shared_ptr<TensorNode<T>>> parents) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto node = std::make_shared<TensorNode<T>>(std::move(shape), std::move(data), rg);
    if (rg) node->parents = std::move(parents);
    return Tensor<T>(node);
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
    const std::int64_t a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " +
                                    std::to_string(rank));
    }
    return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    std::vector<T> d(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += b.data()[i];
    auto out = detail::make_op_output<T>(a.shape(), std::move(d), {a.node(), b.node()});
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, bn, on]() {
            an->accumulate_grad(on->grad_or_zeros());
            bn->accumulate_grad(on->grad_or_zeros());
        };
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    std::vector<T> d(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= b.data()[i];
    auto out = detail::make_op_output<T>(a.shape(), std::move(d), {a.node(), b.node()});
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, bn, on]() {
            auto g = on->grad_or_zeros();
            an->accumulate_grad(g);
            if (bn->requires_grad) {
                std::vector<T> nb(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) nb[i] = -g[i];
                bn->accumulate_grad(nb);
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    std::vector<T> d(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= b.data()[i];
    auto out = detail::make_op_output<T>(a.shape(), std::move(d), {a.node(), b.node()});
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, bn, on]() {
            auto g = on->grad_or_zeros();
            if (an->requires_grad) {
                std::vector<T> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bn->data[i];
                an->accumulate_grad(ga);
            }
            if (bn->requires_grad) {
                std::vector<T> gb(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * an->data[i];
                bn->accumulate_grad(gb);
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> d(a.data().begin(), a.data().end());
    for (auto& v : d) v *= c;
    auto out = detail::make_op_output<T>(a.shape(), std::move(d), {a.node()});
    if (out.requires_grad()) {
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, on, c]() {
            auto g = on->grad_or_zeros();
            std::vector<T> ga(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
            an->accumulate_grad(ga);
        };
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> d(a.data().begin(), a.data().end());
    for (auto& v : d) v += c;
    auto out = detail::make_op_output<T>(a.shape(), std::move(d), {a.node()});
    if (out.requires_grad()) {
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, on]() { an->accumulate_grad(on->grad_or_zeros()); };
    }
    return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// rows of x plus a rank-1 bias: [R, C] + [C]
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.shape()[1] != bias.shape()[0]) {
        throw std::invalid_argument("add_rowwise: need [R, C] + [C], got " + shape_str(x.shape()) +
                                    " + " + shape_str(bias.shape()));
    }
    const std::int64_t R = x.shape()[0], C = x.shape()[1];
    std::vector<T> d(x.data().begin(), x.data().end());
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) d[static_cast<std::size_t>(r * C + c)] += bias.data()[static_cast<std::size_t>(c)];
    auto out = detail::make_op_output<T>(x.shape(), std::move(d), {x.node(), bias.node()});
    if (out.requires_grad()) {
        auto xn = x.node(), bn = bias.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, bn, on, R, C]() {
            auto g = on->grad_or_zeros();
            xn->accumulate_grad(g);
            if (bn->requires_grad) {
                std::vector<T> gb(static_cast<std::size_t>(C), T(0));
                for (std::int64_t r = 0; r < R; ++r)
                    for (std::int64_t c = 0; c < C; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * C + c)];
                bn->accumulate_grad(gb);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul: [.., p, q] x [.., q, r] -> [.., p, r]
// Leading batch extents must match exactly, or one operand is rank-2 and is
// broadcast across the other's batch. No other broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void mm_accum(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t r) {
    // c[p, r] += a[p, q] * b[q, r]
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * q;
        T* crow = c + i * r;
        for (std::int64_t k = 0; k < q; ++k) {
            const T av = arow[k];
            const T* brow = b + k * r;
            for (std::int64_t j = 0; j < r; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[p, q] += a[p, r] * b[q, r]^T
template <typename T>
void mm_accum_bt(const T* a, const T* b, T* c, std::int64_t p, std::int64_t r, std::int64_t q) {
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * r;
        T* crow = c + i * q;
        for (std::int64_t k = 0; k < q; ++k) {
            const T* brow = b + k * r;
            T acc = 0;
            for (std::int64_t j = 0; j < r; ++j) acc += arow[j] * brow[j];
            crow[k] += acc;
        }
    }
}

// c[q, r] += a[p, q]^T * b[p, r]
template <typename T>
void mm_accum_at(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t r) {
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * q;
        const T* brow = b + i * r;
        for (std::int64_t k = 0; k < q; ++k) {
            const T av = arow[k];
            T* crow = c + k * r;
            for (std::int64_t j = 0; j < r; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw std::invalid_argument("matmul: operands must be at least rank 2, got " +
                                    shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto& as = a.shape();
    const auto& bs = b.shape();
    const std::int64_t p = as[as.size() - 2], q = as[as.size() - 1];
    const std::int64_t q2 = bs[bs.size() - 2], r = bs[bs.size() - 1];
    if (q != q2) {
        throw std::invalid_argument("matmul: inner extents differ, " + shape_str(as) + " x " +
                                    shape_str(bs));
    }
    Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
    Shape batch;
    bool a_bcast = false, b_bcast = false;
    if (abatch == bbatch) {
        batch = abatch;
    } else if (abatch.empty()) {
        batch = bbatch;
        a_bcast = true;
    } else if (bbatch.empty()) {
        batch = abatch;
        b_bcast = true;
    } else {
        throw std::invalid_argument("matmul: leading batch extents not broadcastable, " +
                                    shape_str(as) + " x " + shape_str(bs));
    }
    const std::int64_t nbatch = numel(batch);

    Shape oshape = batch;
    oshape.push_back(p);
    oshape.push_back(r);
    std::vector<T> d(static_cast<std::size_t>(nbatch * p * r), T(0));
    for (std::int64_t n = 0; n < nbatch; ++n) {
        const T* ap = a.data().data() + (a_bcast ? 0 : n * p * q);
        const T* bp = b.data().data() + (b_bcast ? 0 : n * q * r);
        detail::mm_accum(ap, bp, d.data() + n * p * r, p, q, r);
    }
    auto out = detail::make_op_output<T>(std::move(oshape), std::move(d), {a.node(), b.node()});
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, bn, on, nbatch, p, q, r, a_bcast, b_bcast]() {
            auto g = on->grad_or_zeros();
            if (an->requires_grad) {
                std::vector<T> ga(an->data.size(), T(0));
                for (std::int64_t n = 0; n < nbatch; ++n) {
                    const T* gp = g.data() + n * p * r;
                    const T* bp = bn->data.data() + (b_bcast ? 0 : n * q * r);
                    detail::mm_accum_bt(gp, bp, ga.data() + (a_bcast ? 0 : n * p * q), p, r, q);
                }
                an->accumulate_grad(ga);
            }
            if (bn->requires_grad) {
                std::vector<T> gb(bn->data.size(), T(0));
                for (std::int64_t n = 0; n < nbatch; ++n) {
                    const T* ap = an->data.data() + (a_bcast ? 0 : n * p * q);
                    const T* gp = g.data() + n * p * r;
                    detail::mm_accum_at(ap, gp, gb.data() + (b_bcast ? 0 : n * q * r), p, q, r);
                }
                bn->accumulate_grad(gb);
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 only, got " + shape_str(a.shape()));
    const std::int64_t R = a.shape()[0], C = a.shape()[1];
    std::vector<T> d(static_cast<std::size_t>(R * C));
    for (std::int64_t i = 0; i < R; ++i)
        for (std::int64_t j = 0; j < C; ++j) d[static_cast<std::size_t>(j * R + i)] = a.data()[static_cast<std::size_t>(i * C + j)];
    auto out = detail::make_op_output<T>(Shape{C, R}, std::move(d), {a.node()});
    if (out.requires_grad()) {
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, on, R, C]() {
            auto g = on->grad_or_zeros();
            std::vector<T> ga(static_cast<std::size_t>(R * C));
            for (std::int64_t j = 0; j < C; ++j)
                for (std::int64_t i = 0; i < R; ++i) ga[static_cast<std::size_t>(i * C + j)] = g[static_cast<std::size_t>(j * R + i)];
            an->accumulate_grad(ga);
        };
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    check_shape_valid(shape);
    if (numel(shape) != a.size()) {
        throw std::invalid_argument("reshape: element count mismatch, " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    }
    std::vector<T> d(a.data().begin(), a.data().end());
    auto out = detail::make_op_output<T>(std::move(shape), std::move(d), {a.node()});
    if (out.requires_grad()) {
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, on]() { an->accumulate_grad(on->grad_or_zeros()); };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    auto out = detail::make_op_output<T>(Shape{}, std::vector<T>{s}, {a.node()});
    if (out.requires_grad()) {
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [an, on]() {
            const T g = on->grad_or_zeros()[0];
            std::vector<T> ga(an->data.size(), g);
            an->accumulate_grad(ga);
        };
    }
    return out;
}

// numerically stable softmax along `axis` (max subtraction per lane)
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis = -1) {
    const std::int64_t ax = detail::normalize_axis(axis, std::max<std::int64_t>(x.rank(), 1));
    if (x.rank() == 0) throw std::invalid_argument("softmax: scalar input");
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::int64_t i = ax + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
    const std::int64_t n = s[static_cast<std::size_t>(ax)];

    std::vector<T> d(x.data().size());
    const T* xp = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T mx = xp[base];
            for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xp[base + i * inner]);
            T denom = 0;
            for (std::int64_t i = 0; i < n; ++i) {
                const T e = std::exp(xp[base + i * inner] - mx);
                d[static_cast<std::size_t>(base + i * inner)] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::int64_t i = 0; i < n; ++i) d[static_cast<std::size_t>(base + i * inner)] *= inv;
        }
    }
    auto out = detail::make_op_output<T>(x.shape(), std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, outer, inner, n]() {
            auto g = on->grad_or_zeros();
            const T* y = on->data.data();
            std::vector<T> gx(g.size());
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    T dot = 0;
                    for (std::int64_t i = 0; i < n; ++i) dot += g[static_cast<std::size_t>(base + i * inner)] * y[base + i * inner];
                    for (std::int64_t i = 0; i < n; ++i) {
                        const std::int64_t k = base + i * inner;
                        gx[static_cast<std::size_t>(k)] = y[k] * (g[static_cast<std::size_t>(k)] - dot);
                    }
                }
            }
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

// layer normalization over the last axis, then per-feature affine transform
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    if (x.rank() < 1) throw std::invalid_argument("layernorm: input must have rank >= 1");
    const std::int64_t F = x.shape().back();
    if (gain.rank() != 1 || gain.shape()[0] != F || bias.rank() != 1 || bias.shape()[0] != F) {
        throw std::invalid_argument("layernorm: gain/bias must be [" + std::to_string(F) + "]");
    }
    const std::int64_t rows = x.size() / F;
    std::vector<T> d(x.data().size());
    std::vector<T> xhat(x.data().size());
    std::vector<T> invstd(static_cast<std::size_t>(rows));
    const T* xp = x.data().data();
    for (std::int64_t rI = 0; rI < rows; ++rI) {
        const T* row = xp + rI * F;
        T mu = 0;
        for (std::int64_t f = 0; f < F; ++f) mu += row[f];
        mu /= static_cast<T>(F);
        T var = 0;
        for (std::int64_t f = 0; f < F; ++f) {
            const T c = row[f] - mu;
            var += c * c;
        }
        var /= static_cast<T>(F);
        const T is = T(1) / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(rI)] = is;
        for (std::int64_t f = 0; f < F; ++f) {
            const T xh = (row[f] - mu) * is;
            xhat[static_cast<std::size_t>(rI * F + f)] = xh;
            d[static_cast<std::size_t>(rI * F + f)] = xh * gain.data()[static_cast<std::size_t>(f)] + bias.data()[static_cast<std::size_t>(f)];
        }
    }
    auto out = detail::make_op_output<T>(x.shape(), std::move(d), {x.node(), gain.node(), bias.node()});
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, gn, bn, on, rows, F, xhat = std::move(xhat), invstd = std::move(invstd)]() {
            auto g = on->grad_or_zeros();
            if (bn->requires_grad) {
                std::vector<T> gb(static_cast<std::size_t>(F), T(0));
                for (std::int64_t rI = 0; rI < rows; ++rI)
                    for (std::int64_t f = 0; f < F; ++f) gb[static_cast<std::size_t>(f)] += g[static_cast<std::size_t>(rI * F + f)];
                bn->accumulate_grad(gb);
            }
            if (gn->requires_grad) {
                std::vector<T> gg(static_cast<std::size_t>(F), T(0));
                for (std::int64_t rI = 0; rI < rows; ++rI)
                    for (std::int64_t f = 0; f < F; ++f)
                        gg[static_cast<std::size_t>(f)] += g[static_cast<std::size_t>(rI * F + f)] * xhat[static_cast<std::size_t>(rI * F + f)];
                gn->accumulate_grad(gg);
            }
            if (xn->requires_grad) {
                std::vector<T> gx(xn->data.size());
                for (std::int64_t rI = 0; rI < rows; ++rI) {
                    T sum_dxh = 0, sum_dxh_xh = 0;
                    for (std::int64_t f = 0; f < F; ++f) {
                        const std::size_t k = static_cast<std::size_t>(rI * F + f);
                        const T dxh = g[k] * gn->data[static_cast<std::size_t>(f)];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[k];
                    }
                    const T is = invstd[static_cast<std::size_t>(rI)];
                    for (std::int64_t f = 0; f < F; ++f) {
                        const std::size_t k = static_cast<std::size_t>(rI * F + f);
                        const T dxh = g[k] * gn->data[static_cast<std::size_t>(f)];
                        gx[k] = is / static_cast<T>(F) * (static_cast<T>(F) * dxh - sum_dxh - xhat[k] * sum_dxh_xh);
                    }
                }
                xn->accumulate_grad(gx);
            }
        };
    }
    return out;
}

// exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form)
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    std::vector<T> d(x.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const T v = x.data()[i];
        d[i] = v * T(0.5) * (T(1) + std::erf(v * T(0.7071067811865475244)));
    }
    auto out = detail::make_op_output<T>(x.shape(), std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = xn->data[i];
                const T phi = T(0.5) * (T(1) + std::erf(v * T(0.7071067811865475244)));
                const T pdf = std::exp(-T(0.5) * v * v) * T(0.3989422804014326779);
                gx[i] = g[i] * (phi + v * pdf);
            }
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> d(x.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::max(x.data()[i], T(0));
    auto out = detail::make_op_output<T>(x.shape(), std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xn->data[i] > T(0) ? g[i] : T(0);
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    std::vector<T> d(x.data().size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::log(x.data()[i]);
    auto out = detail::make_op_output<T>(x.shape(), std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / xn->data[i];
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// 3D convolution: x [C_in, D, H, W], w [C_out, C_in, k, k, k], bias [C_out]
// Cross-correlation with symmetric zero padding and a single stride for all
// three spatial axes. Bias may be an undefined tensor.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t padding) {
    if (x.rank() != 4 || w.rank() != 5) {
        throw std::invalid_argument("conv3d: need x [C,D,H,W] and w [O,C,kd,kh,kw], got " +
                                    shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv3d: stride must be >= 1, padding >= 0");
    const std::int64_t Cin = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t Cout = w.shape()[0], KD = w.shape()[2], KH = w.shape()[3], KW = w.shape()[4];
    if (w.shape()[1] != Cin) {
        throw std::invalid_argument("conv3d: channel mismatch, x " + shape_str(x.shape()) + " vs w " +
                                    shape_str(w.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != Cout)) {
        throw std::invalid_argument("conv3d: bias must be [" + std::to_string(Cout) + "]");
    }
    const std::int64_t Dp = D + 2 * padding, Hp = H + 2 * padding, Wp = W + 2 * padding;
    if (KD > Dp || KH > Hp || KW > Wp) {
        throw std::invalid_argument("conv3d: kernel " + shape_str(w.shape()) +
                                    " larger than padded input " + shape_str({Cin, Dp, Hp, Wp}));
    }
    const std::int64_t OD = (Dp - KD) / stride + 1;
    const std::int64_t OH = (Hp - KH) / stride + 1;
    const std::int64_t OW = (Wp - KW) / stride + 1;

    // contiguous zero-padded copy removes all bounds handling from the kernels
    std::vector<T> xpad(static_cast<std::size_t>(Cin * Dp * Hp * Wp), T(0));
    for (std::int64_t c = 0; c < Cin; ++c)
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y) {
                const T* src = x.data().data() + ((c * D + z) * H + y) * W;
                T* dst = xpad.data() + ((c * Dp + z + padding) * Hp + y + padding) * Wp + padding;
                std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(W));
            }

    std::vector<T> d(static_cast<std::size_t>(Cout * OD * OH * OW), T(0));
    if (bias.defined()) {
        for (std::int64_t co = 0; co < Cout; ++co)
            std::fill_n(d.begin() + co * OD * OH * OW, OD * OH * OW, bias.data()[static_cast<std::size_t>(co)]);
    }
    const T* wp_all = w.data().data();
    for (std::int64_t co = 0; co < Cout; ++co) {
        T* oplane = d.data() + co * OD * OH * OW;
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
            const T* iplane = xpad.data() + ci * Dp * Hp * Wp;
            const T* wblock = wp_all + (co * Cin + ci) * KD * KH * KW;
            for (std::int64_t kd = 0; kd < KD; ++kd)
                for (std::int64_t kh = 0; kh < KH; ++kh)
                    for (std::int64_t kw = 0; kw < KW; ++kw) {
                        const T wv = wblock[(kd * KH + kh) * KW + kw];
                        if (wv == T(0)) continue;
                        for (std::int64_t od = 0; od < OD; ++od) {
                            const std::int64_t id = od * stride + kd;
                            for (std::int64_t oh = 0; oh < OH; ++oh) {
                                const T* irow = iplane + (id * Hp + oh * stride + kh) * Wp + kw;
                                T* orow = oplane + (od * OH + oh) * OW;
                                if (stride == 1) {
                                    for (std::int64_t ow = 0; ow < OW; ++ow) orow[ow] += wv * irow[ow];
                                } else {
                                    for (std::int64_t ow = 0; ow < OW; ++ow) orow[ow] += wv * irow[ow * stride];
                                }
                            }
                        }
                    }
        }
    }

    std::vector<std::shared_ptr<TensorNode<T>>> parents{x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    auto out = detail::make_op_output<T>(Shape{Cout, OD, OH, OW}, std::move(d), std::move(parents));
    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, wn, bn, on, xpad = std::move(xpad), Cin, D, H, W, Cout, KD, KH,
                                   KW, stride, padding, Dp, Hp, Wp, OD, OH, OW]() {
            auto g = on->grad_or_zeros();
            if (bn && bn->requires_grad) {
                std::vector<T> gb(static_cast<std::size_t>(Cout), T(0));
                for (std::int64_t co = 0; co < Cout; ++co) {
                    const T* gplane = g.data() + co * OD * OH * OW;
                    T acc = 0;
                    for (std::int64_t i = 0; i < OD * OH * OW; ++i) acc += gplane[i];
                    gb[static_cast<std::size_t>(co)] = acc;
                }
                bn->accumulate_grad(gb);
            }
            if (wn->requires_grad) {
                std::vector<T> gw(wn->data.size(), T(0));
                for (std::int64_t co = 0; co < Cout; ++co) {
                    const T* gplane = g.data() + co * OD * OH * OW;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T* iplane = xpad.data() + ci * Dp * Hp * Wp;
                        T* gwblock = gw.data() + (co * Cin + ci) * KD * KH * KW;
                        for (std::int64_t kd = 0; kd < KD; ++kd)
                            for (std::int64_t kh = 0; kh < KH; ++kh)
                                for (std::int64_t kw = 0; kw < KW; ++kw) {
                                    T acc = 0;
                                    for (std::int64_t od = 0; od < OD; ++od) {
                                        const std::int64_t id = od * stride + kd;
                                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                                            const T* irow = iplane + (id * Hp + oh * stride + kh) * Wp + kw;
                                            const T* grow = gplane + (od * OH + oh) * OW;
                                            for (std::int64_t ow = 0; ow < OW; ++ow) acc += grow[ow] * irow[ow * stride];
                                        }
                                    }
                                    gwblock[(kd * KH + kh) * KW + kw] += acc;
                                }
                    }
                }
                wn->accumulate_grad(gw);
            }
            if (xn->requires_grad) {
                std::vector<T> gxpad(static_cast<std::size_t>(Cin * Dp * Hp * Wp), T(0));
                for (std::int64_t co = 0; co < Cout; ++co) {
                    const T* gplane = g.data() + co * OD * OH * OW;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        T* iplane = gxpad.data() + ci * Dp * Hp * Wp;
                        const T* wblock = wn->data.data() + (co * Cin + ci) * KD * KH * KW;
                        for (std::int64_t kd = 0; kd < KD; ++kd)
                            for (std::int64_t kh = 0; kh < KH; ++kh)
                                for (std::int64_t kw = 0; kw < KW; ++kw) {
                                    const T wv = wblock[(kd * KH + kh) * KW + kw];
                                    if (wv == T(0)) continue;
                                    for (std::int64_t od = 0; od < OD; ++od) {
                                        const std::int64_t id = od * stride + kd;
                                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                                            T* irow = iplane + (id * Hp + oh * stride + kh) * Wp + kw;
                                            const T* grow = gplane + (od * OH + oh) * OW;
                                            for (std::int64_t ow = 0; ow < OW; ++ow) irow[ow * stride] += wv * grow[ow];
                                        }
                                    }
                                }
                    }
                }
                std::vector<T> gx(xn->data.size());
                for (std::int64_t c = 0; c < Cin; ++c)
                    for (std::int64_t z = 0; z < D; ++z)
                        for (std::int64_t y = 0; y < H; ++y) {
                            const T* src = gxpad.data() + ((c * Dp + z + padding) * Hp + y + padding) * Wp + padding;
                            T* dst = gx.data() + ((c * D + z) * H + y) * W;
                            std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(W));
                        }
                xn->accumulate_grad(gx);
            }
        };
    }
    return out;
}

// mean over all spatial positions, per channel: [C, D, H, W] -> [C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: need [C,D,H,W], got " + shape_str(x.shape()));
    const std::int64_t C = x.shape()[0];
    const std::int64_t S = x.shape()[1] * x.shape()[2] * x.shape()[3];
    std::vector<T> d(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        const T* p = x.data().data() + c * S;
        T acc = 0;
        for (std::int64_t i = 0; i < S; ++i) acc += p[i];
        d[static_cast<std::size_t>(c)] = acc / static_cast<T>(S);
    }
    auto out = detail::make_op_output<T>(Shape{C}, std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, C, S]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(xn->data.size());
            for (std::int64_t c = 0; c < C; ++c) {
                const T gv = g[static_cast<std::size_t>(c)] / static_cast<T>(S);
                std::fill_n(gx.begin() + c * S, S, gv);
            }
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// classification loss: mean negative log-likelihood over logit rows,
// computed through log-sum-exp
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy_logits: need [batch, classes], got " + shape_str(logits.shape()));
    const std::int64_t B = logits.shape()[0], C = logits.shape()[1];
    if (static_cast<std::int64_t>(labels.size()) != B) {
        throw std::invalid_argument("cross_entropy_logits: " + std::to_string(labels.size()) +
                                    " labels for batch " + std::to_string(B));
    }
    for (int y : labels) {
        if (y < 0 || y >= C) throw std::invalid_argument("cross_entropy_logits: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    }
    std::vector<T> probs(logits.data().size());
    T loss = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        const T* row = logits.data().data() + b * C;
        T mx = row[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T denom = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            const T e = std::exp(row[c] - mx);
            probs[static_cast<std::size_t>(b * C + c)] = e;
            denom += e;
        }
        for (std::int64_t c = 0; c < C; ++c) probs[static_cast<std::size_t>(b * C + c)] /= denom;
        loss += std::log(denom) + mx - row[labels[static_cast<std::size_t>(b)]];
    }
    loss /= static_cast<T>(B);
    auto out = detail::make_op_output<T>(Shape{}, std::vector<T>{loss}, {logits.node()});
    if (out.requires_grad()) {
        auto ln = logits.node();
        auto* on = out.node().get();
        std::vector<int> ylab(labels.begin(), labels.end());
        out.node()->backward_fn = [ln, on, B, C, probs = std::move(probs), ylab = std::move(ylab)]() {
            const T g = on->grad_or_zeros()[0];
            std::vector<T> gl(ln->data.size());
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::size_t k = static_cast<std::size_t>(b * C + c);
                    gl[k] = g * (probs[k] - (ylab[static_cast<std::size_t>(b)] == c ? T(1) : T(0))) / static_cast<T>(B);
                }
            ln->accumulate_grad(gl);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// slicing / stitching along rows and columns (row-major rank-2 layouts)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
    if (x.rank() < 1) throw std::invalid_argument("slice_rows: scalar input");
    const std::int64_t R = x.shape()[0];
    if (begin < 0 || end > R || begin >= end) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") invalid for " + shape_str(x.shape()));
    }
    const std::int64_t rowsz = x.size() / R;
    Shape oshape = x.shape();
    oshape[0] = end - begin;
    std::vector<T> d(x.data().begin() + begin * rowsz, x.data().begin() + end * rowsz);
    auto out = detail::make_op_output<T>(std::move(oshape), std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, begin, rowsz]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(xn->data.size(), T(0));
            std::copy(g.begin(), g.end(), gx.begin() + begin * rowsz);
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::int64_t R = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    for (const auto& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (p.rank() < 1 || t != tail) {
            throw std::invalid_argument("concat_rows: incompatible part shape " + shape_str(p.shape()));
        }
        R += p.shape()[0];
        parents.push_back(p.node());
    }
    Shape oshape = parts[0].shape();
    oshape[0] = R;
    std::vector<T> d;
    d.reserve(static_cast<std::size_t>(numel(oshape)));
    for (const auto& p : parts) d.insert(d.end(), p.data().begin(), p.data().end());
    auto out = detail::make_op_output<T>(std::move(oshape), std::move(d), parents);
    if (out.requires_grad()) {
        auto* on = out.node().get();
        out.node()->backward_fn = [parents, on]() {
            auto g = on->grad_or_zeros();
            std::size_t off = 0;
            for (const auto& p : parents) {
                p->accumulate_grad(g.subspan(off, p->data.size()));
                off += p->data.size();
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(std::initializer_list<Tensor<T>> parts) {
    std::vector<Tensor<T>> v(parts);
    return concat_rows(std::span<const Tensor<T>>(v));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
    if (x.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 only, got " + shape_str(x.shape()));
    const std::int64_t R = x.shape()[0], C = x.shape()[1];
    if (begin < 0 || end > C || begin >= end) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") invalid for " + shape_str(x.shape()));
    }
    const std::int64_t W = end - begin;
    std::vector<T> d(static_cast<std::size_t>(R * W));
    for (std::int64_t r = 0; r < R; ++r)
        std::copy_n(x.data().begin() + r * C + begin, W, d.begin() + r * W);
    auto out = detail::make_op_output<T>(Shape{R, W}, std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, R, C, W, begin]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(xn->data.size(), T(0));
            for (std::int64_t r = 0; r < R; ++r)
                std::copy_n(g.begin() + r * W, W, gx.begin() + r * C + begin);
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::int64_t R = parts[0].shape()[0];
    std::int64_t C = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::vector<std::int64_t> widths;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != R) {
            throw std::invalid_argument("concat_cols: incompatible part shape " + shape_str(p.shape()));
        }
        C += p.shape()[1];
        widths.push_back(p.shape()[1]);
        parents.push_back(p.node());
    }
    std::vector<T> d(static_cast<std::size_t>(R * C));
    std::int64_t off = 0;
    for (std::size_t i = 0; i < parents.size(); ++i) {
        const std::int64_t w = widths[i];
        for (std::int64_t r = 0; r < R; ++r)
            std::copy_n(parents[i]->data.begin() + r * w, w, d.begin() + r * C + off);
        off += w;
    }
    auto out = detail::make_op_output<T>(Shape{R, C}, std::move(d), parents);
    if (out.requires_grad()) {
        auto* on = out.node().get();
        out.node()->backward_fn = [parents, widths, on, R, C]() {
            auto g = on->grad_or_zeros();
            std::int64_t off = 0;
            for (std::size_t i = 0; i < parents.size(); ++i) {
                const std::int64_t w = widths[i];
                if (parents[i]->requires_grad) {
                    std::vector<T> gp(static_cast<std::size_t>(R * w));
                    for (std::int64_t r = 0; r < R; ++r)
                        std::copy_n(g.begin() + r * C + off, w, gp.begin() + r * w);
                    parents[i]->accumulate_grad(gp);
                }
                off += w;
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(std::initializer_list<Tensor<T>> parts) {
    std::vector<Tensor<T>> v(parts);
    return concat_cols(std::span<const Tensor<T>>(v));
}

// out row i = x row indices[i]; duplicate indices accumulate on backward
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> indices) {
    if (x.rank() < 1) throw std::invalid_argument("gather_rows: scalar input");
    if (indices.empty()) throw std::invalid_argument("gather_rows: empty index list");
    const std::int64_t R = x.shape()[0];
    const std::int64_t rowsz = x.size() / R;
    for (int i : indices) {
        if (i < 0 || i >= R) throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " outside [0, " + std::to_string(R) + ")");
    }
    Shape oshape = x.shape();
    oshape[0] = static_cast<std::int64_t>(indices.size());
    std::vector<T> d(static_cast<std::size_t>(numel(oshape)));
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(x.data().begin() + indices[i] * rowsz, rowsz, d.begin() + static_cast<std::int64_t>(i) * rowsz);
    auto out = detail::make_op_output<T>(std::move(oshape), std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        std::vector<int> idx(indices.begin(), indices.end());
        out.node()->backward_fn = [xn, on, rowsz, idx = std::move(idx)]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(xn->data.size(), T(0));
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::int64_t j = 0; j < rowsz; ++j)
                    gx[static_cast<std::size_t>(idx[i] * rowsz + j)] += g[static_cast<std::size_t>(static_cast<std::int64_t>(i) * rowsz + j)];
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

template <typename T>
Tensor<T> mean_over_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw std::invalid_argument("mean_over_rows: rank-2 only, got " + shape_str(x.shape()));
    const std::int64_t R = x.shape()[0], C = x.shape()[1];
    std::vector<T> d(static_cast<std::size_t>(C), T(0));
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) d[static_cast<std::size_t>(c)] += x.data()[static_cast<std::size_t>(r * C + c)];
    for (auto& v : d) v /= static_cast<T>(R);
    auto out = detail::make_op_output<T>(Shape{1, C}, std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, R, C]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(xn->data.size());
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t c = 0; c < C; ++c) gx[static_cast<std::size_t>(r * C + c)] = g[static_cast<std::size_t>(c)] / static_cast<T>(R);
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

// columnwise max over rows; ties resolve to the lowest row index
template <typename T>
Tensor<T> max_over_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw std::invalid_argument("max_over_rows: rank-2 only, got " + shape_str(x.shape()));
    const std::int64_t R = x.shape()[0], C = x.shape()[1];
    std::vector<T> d(static_cast<std::size_t>(C));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(C), 0);
    for (std::int64_t c = 0; c < C; ++c) d[static_cast<std::size_t>(c)] = x.data()[static_cast<std::size_t>(c)];
    for (std::int64_t r = 1; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) {
            const T v = x.data()[static_cast<std::size_t>(r * C + c)];
            if (v > d[static_cast<std::size_t>(c)]) {
                d[static_cast<std::size_t>(c)] = v;
                arg[static_cast<std::size_t>(c)] = r;
            }
        }
    auto out = detail::make_op_output<T>(Shape{1, C}, std::move(d), {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, C, arg = std::move(arg)]() {
            auto g = on->grad_or_zeros();
            std::vector<T> gx(xn->data.size(), T(0));
            for (std::int64_t c = 0; c < C; ++c)
                gx[static_cast<std::size_t>(arg[static_cast<std::size_t>(c)] * C + c)] = g[static_cast<std::size_t>(c)];
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

// single element as a scalar tensor, by flat index
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.size()) {
        throw std::invalid_argument("pick: index " + std::to_string(flat_index) + " outside tensor of size " +
                                    std::to_string(x.size()));
    }
    auto out = detail::make_op_output<T>(Shape{}, std::vector<T>{x.data()[static_cast<std::size_t>(flat_index)]}, {x.node()});
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* on = out.node().get();
        out.node()->backward_fn = [xn, on, flat_index]() {
            std::vector<T> gx(xn->data.size(), T(0));
            gx[static_cast<std::size_t>(flat_index)] = on->grad_or_zeros()[0];
            xn->accumulate_grad(gx);
        };
    }
    return out;
}

}  // namespace rtn
