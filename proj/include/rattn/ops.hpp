#pragma once

#include <algorithm>
#include <cmath>

#include "rattn/parallel.hpp"
#include "rattn/tensor.hpp"

namespace rattn {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void mm_acc(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = C + i * n;
        const T* arow = A + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T a = arow[kk];
            if (a == T(0)) continue;
            const T* brow = B + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// GA[m,k] += G[m,n] * B[k,n]^T
template <class T>
void mm_acc_gbt(const T* G, const T* B, T* GA, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* grow = G + i * n;
        T* garow = GA + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T* brow = B + kk * n;
            T s = 0;
            for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            garow[kk] += s;
        }
    }
}

// GB[k,n] += A[m,k]^T * G[m,n]
template <class T>
void mm_acc_atg(const T* A, const T* G, T* GB, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        const T* grow = G + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            T a = arow[kk];
            if (a == T(0)) continue;
            T* gbrow = GB + kk * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += a * grow[j];
        }
    }
}

template <class T>
void softmax_row(const T* x, T* y, int64_t d) {
    T m = x[0];
    for (int64_t i = 1; i < d; ++i) m = std::max(m, x[i]);
    T s = 0;
    for (int64_t i = 0; i < d; ++i) {
        y[i] = std::exp(x[i] - m);
        s += y[i];
    }
    T inv = T(1) / s;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
}

// dx = y .* (g - dot(g, y)), written as +=
template <class T>
void softmax_row_backward(const T* y, const T* g, T* dx, int64_t d) {
    T dot = 0;
    for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
    for (int64_t i = 0; i < d; ++i) dx[i] += y[i] * (g[i] - dot);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    check_finite("add", po, out.numel());
    Tape<T>* tp = result_tape<T>({&a, &b});
    if (!tp) return out;
    int na = a.node(), nb = b.node();
    int64_t n = out.numel();
    return tp->record("add", {na, nb}, std::move(out),
                      [na, nb, n](Tape<T>& t, const T* g, int64_t) {
                          if (na >= 0) {
                              T* ga = t.grad_buf(na, n);
                              for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
                          }
                          if (nb >= 0) {
                              T* gb = t.grad_buf(nb, n);
                              for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
                          }
                      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        shape_error("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    check_finite("mul", po, out.numel());
    Tape<T>* tp = result_tape<T>({&a, &b});
    if (!tp) return out;
    int na = a.node(), nb = b.node();
    int64_t n = out.numel();
    auto sa = a.storage(), sb = b.storage();
    return tp->record("mul", {na, nb}, std::move(out),
                      [na, nb, n, sa, sb](Tape<T>& t, const T* g, int64_t) {
                          if (na >= 0) {
                              T* ga = t.grad_buf(na, n);
                              const T* pb = sb->data();
                              for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
                          }
                          if (nb >= 0) {
                              T* gb = t.grad_buf(nb, n);
                              const T* pa = sa->data();
                              for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
                          }
                      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * c;
    check_finite("scale", po, out.numel());
    Tape<T>* tp = result_tape<T>({&a});
    if (!tp) return out;
    int na = a.node();
    int64_t n = out.numel();
    return tp->record("scale", {na}, std::move(out), [na, n, c](Tape<T>& t, const T* g, int64_t) {
        T* ga = t.grad_buf(na, n);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T s = T(1) / (T(1) + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    check_finite("silu", po, out.numel());
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    int64_t n = out.numel();
    auto sx = x.storage();
    return tp->record("silu", {nx}, std::move(out), [nx, n, sx](Tape<T>& t, const T* g, int64_t) {
        T* gx = t.grad_buf(nx, n);
        const T* px = sx->data();
        for (int64_t i = 0; i < n; ++i) {
            T s = T(1) / (T(1) + std::exp(-px[i]));
            gx[i] += g[i] * s * (T(1) + px[i] * (T(1) - s));
        }
    });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    // tanh approximation
    const T c = static_cast<T>(std::sqrt(2.0 / M_PI));
    const T a = static_cast<T>(0.044715);
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T u = c * (px[i] + a * px[i] * px[i] * px[i]);
        po[i] = T(0.5) * px[i] * (T(1) + std::tanh(u));
    }
    check_finite("gelu", po, out.numel());
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    int64_t n = out.numel();
    auto sx = x.storage();
    return tp->record("gelu", {nx}, std::move(out), [nx, n, sx, c, a](Tape<T>& t, const T* g, int64_t) {
        T* gx = t.grad_buf(nx, n);
        const T* px = sx->data();
        for (int64_t i = 0; i < n; ++i) {
            T v = px[i];
            T u = c * (v + a * v * v * v);
            T th = std::tanh(u);
            T du = c * (T(1) + T(3) * a * v * v);
            gx[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du);
        }
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    int64_t n = out.numel();
    auto sx = x.storage();
    return tp->record("relu", {nx}, std::move(out), [nx, n, sx](Tape<T>& t, const T* g, int64_t) {
        T* gx = t.grad_buf(nx, n);
        const T* px = sx->data();
        for (int64_t i = 0; i < n; ++i)
            if (px[i] > T(0)) gx[i] += g[i];
    });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out({1});
    const T* px = x.data();
    T s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
    out[0] = s;
    check_finite("sum_all", out.data(), 1);
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    int64_t n = x.numel();
    return tp->record("sum_all", {nx}, std::move(out), [nx, n](Tape<T>& t, const T* g, int64_t) {
        T* gx = t.grad_buf(nx, n);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
    Tensor<T> out = x.reshaped(std::move(s));
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    // fresh storage so the node owns its output independent of the input
    out = Tensor<T>(out.shape(), std::vector<T>(x.data(), x.data() + x.numel()));
    int nx = x.node();
    int64_t n = x.numel();
    return tp->record("reshape", {nx}, std::move(out), [nx, n](Tape<T>& t, const T* g, int64_t) {
        T* gx = t.grad_buf(nx, n);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
}

namespace detail {
// swap axes a0 < a1 of a row-major array
template <class T>
void swap_axes(const T* in, T* out, const Shape& s, int a0, int a1) {
    int64_t outer = 1, mid = 1, inner = 1;
    for (int i = 0; i < a0; ++i) outer *= s[i];
    for (int i = a0 + 1; i < a1; ++i) mid *= s[i];
    for (size_t i = a1 + 1; i < s.size(); ++i) inner *= s[i];
    int64_t A = s[a0], B = s[a1];
    // in index [o, a, m, b, i] -> out index [o, b, m, a, i]
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < A; ++a)
            for (int64_t m = 0; m < mid; ++m)
                for (int64_t b = 0; b < B; ++b) {
                    const T* src = in + (((o * A + a) * mid + m) * B + b) * inner;
                    T* dst = out + (((o * B + b) * mid + m) * A + a) * inner;
                    std::copy(src, src + inner, dst);
                }
}
}  // namespace detail

template <class T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
    int r = x.rank();
    if (axis0 < 0) axis0 += r;
    if (axis1 < 0) axis1 += r;
    if (axis0 > axis1) std::swap(axis0, axis1);
    if (axis0 == axis1 || axis1 >= r) shape_error("transpose", "bad axes");
    Shape os = x.shape();
    std::swap(os[axis0], os[axis1]);
    Tensor<T> out(os);
    detail::swap_axes(x.data(), out.data(), x.shape(), axis0, axis1);
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    Shape xs = x.shape();
    return tp->record("transpose", {nx}, std::move(out),
                      [nx, xs, os, axis0, axis1](Tape<T>& t, const T* g, int64_t) {
                          Tensor<T> gin(xs);
                          detail::swap_axes(g, gin.data(), os, axis0, axis1);
                          T* gx = t.grad_buf(nx, gin.numel());
                          for (int64_t i = 0; i < gin.numel(); ++i) gx[i] += gin[i];
                      });
}

// ---------------------------------------------------------------------------
// matmul: a[..,m,k] x b[..,k,n]. b may be rank-2 (shared across batch) or carry
// batch dims identical to a's.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", "inputs must have rank >= 2");
    int64_t m = a.dim(-2), k = a.dim(-1);
    int64_t k2 = b.dim(-2), n = b.dim(-1);
    if (k != k2)
        shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    bool b_shared = b.rank() == 2;
    if (!b_shared) {
        if (Shape(a.shape().begin(), a.shape().end() - 2) !=
            Shape(b.shape().begin(), b.shape().end() - 2))
            shape_error("matmul", "batch extents not broadcastable: " + shape_str(a.shape()) +
                                      " x " + shape_str(b.shape()));
    }
    int64_t batch = 1;
    for (int i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);
    Shape os(a.shape().begin(), a.shape().end() - 2);
    os.push_back(m);
    os.push_back(n);
    Tensor<T> out(os);
    {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        parallel_for(batch, [&](int64_t s) {
            detail::mm_acc(pa + s * m * k, b_shared ? pb : pb + s * k * n, po + s * m * n, m, k, n);
        });
    }
    check_finite("matmul", out.data(), out.numel());
    Tape<T>* tp = result_tape<T>({&a, &b});
    if (!tp) return out;
    int na = a.node(), nb = b.node();
    auto sa = a.storage(), sb = b.storage();
    return tp->record(
        "matmul", {na, nb}, std::move(out),
        [na, nb, sa, sb, m, k, n, batch, b_shared](Tape<T>& t, const T* g, int64_t) {
            if (na >= 0) {
                T* ga = t.grad_buf(na, batch * m * k);
                const T* pb = sb->data();
                parallel_for(batch, [&](int64_t s) {
                    detail::mm_acc_gbt(g + s * m * n, b_shared ? pb : pb + s * k * n,
                                       ga + s * m * k, m, k, n);
                });
            }
            if (nb >= 0) {
                T* gb = t.grad_buf(nb, b_shared ? k * n : batch * k * n);
                const T* pa = sa->data();
                for (int64_t s = 0; s < batch; ++s)
                    detail::mm_acc_atg(pa + s * m * k, g + s * m * n,
                                       b_shared ? gb : gb + s * k * n, m, k, n);
            }
        });
}

// ---------------------------------------------------------------------------
// softmax over the last axis, max-subtracted
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    parallel_for(rows, [&](int64_t r) { detail::softmax_row(px + r * d, po + r * d, d); });
    check_finite("softmax", out.data(), out.numel());
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    auto so = out.storage();
    return tp->record("softmax", {nx}, std::move(out),
                      [nx, so, rows, d](Tape<T>& t, const T* g, int64_t) {
                          T* gx = t.grad_buf(nx, rows * d);
                          const T* y = so->data();
                          for (int64_t r = 0; r < rows; ++r)
                              detail::softmax_row_backward(y + r * d, g + r * d, gx + r * d, d);
                      });
}

// ---------------------------------------------------------------------------
// RMS norm over the last axis: y = x / sqrt(mean(x^2) + eps) .* scale
// scale is [d] (shared) or [h,d] applied per head to x[b,h,L,d].
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& s, T eps = T(1e-6)) {
    if (eps <= T(0)) shape_error("rms_norm", "eps must be positive");
    int64_t d = x.dim(-1);
    bool per_head = s.rank() == 2;
    if (per_head) {
        if (x.rank() != 4 || s.dim(0) != x.dim(1) || s.dim(1) != d)
            shape_error("rms_norm", "per-head scale " + shape_str(s.shape()) +
                                        " incompatible with " + shape_str(x.shape()));
    } else if (s.rank() != 1 || s.dim(0) != d) {
        shape_error("rms_norm", "scale " + shape_str(s.shape()) + " incompatible with " +
                                    shape_str(x.shape()));
    }
    int64_t rows = x.numel() / d;
    int64_t rows_per_head = per_head ? x.dim(2) : 0;
    int64_t heads = per_head ? x.dim(1) : 0;
    auto scale_row = [&](const T* sp, int64_t r) {
        return per_head ? sp + ((r / rows_per_head) % heads) * d : sp;
    };
    Tensor<T> out(x.shape());
    const T* px = x.data();
    const T* ps = s.data();
    T* po = out.data();
    parallel_for(rows, [&](int64_t r) {
        const T* xr = px + r * d;
        const T* sr = scale_row(ps, r);
        T ms = 0;
        for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
        T rinv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
        T* yr = po + r * d;
        for (int64_t i = 0; i < d; ++i) yr[i] = xr[i] * rinv * sr[i];
    });
    check_finite("rms_norm", out.data(), out.numel());
    Tape<T>* tp = result_tape<T>({&x, &s});
    if (!tp) return out;
    int nx = x.node(), ns = s.node();
    auto sx = x.storage(), ss = s.storage();
    int64_t snumel = s.numel();
    return tp->record(
        "rms_norm", {nx, ns}, std::move(out),
        [nx, ns, sx, ss, rows, d, eps, per_head, rows_per_head, heads, snumel, scale_row](
            Tape<T>& t, const T* g, int64_t) {
            const T* px = sx->data();
            const T* ps = ss->data();
            T* gx = nx >= 0 ? t.grad_buf(nx, rows * d) : nullptr;
            T* gs = ns >= 0 ? t.grad_buf(ns, snumel) : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = px + r * d;
                const T* sr = scale_row(ps, r);
                const T* gr = g + r * d;
                T ms = 0;
                for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
                T rinv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
                if (gs) {
                    T* gsr = per_head ? gs + ((r / rows_per_head) % heads) * d : gs;
                    for (int64_t i = 0; i < d; ++i) gsr[i] += gr[i] * xr[i] * rinv;
                }
                if (gx) {
                    T dot = 0;
                    for (int64_t i = 0; i < d; ++i) dot += gr[i] * sr[i] * xr[i];
                    T c = rinv * rinv * rinv * dot / static_cast<T>(d);
                    T* gxr = gx + r * d;
                    for (int64_t i = 0; i < d; ++i) gxr[i] += rinv * gr[i] * sr[i] - c * xr[i];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// token embedding and cross entropy
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int32_t>& ids, int64_t b, int64_t L) {
    if (table.rank() != 2) shape_error("embedding", "table must be [vocab, dim]");
    if (static_cast<int64_t>(ids.size()) != b * L) shape_error("embedding", "id count mismatch");
    int64_t V = table.dim(0), d = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || id >= V)
            throw std::out_of_range("embedding: token id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(V) + ")");
    Tensor<T> out({b, L, d});
    const T* pt = table.data();
    T* po = out.data();
    for (int64_t i = 0; i < b * L; ++i)
        std::copy(pt + ids[i] * d, pt + (ids[i] + 1) * d, po + i * d);
    Tape<T>* tp = result_tape<T>({&table});
    if (!tp) return out;
    int nt = table.node();
    return tp->record("embedding", {nt}, std::move(out),
                      [nt, ids, b, L, d, V](Tape<T>& t, const T* g, int64_t) {
                          T* gt = t.grad_buf(nt, V * d);
                          for (int64_t i = 0; i < b * L; ++i) {
                              T* row = gt + ids[i] * d;
                              const T* gr = g + i * d;
                              for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
                          }
                      });
}

/// Mean token-level NLL over positions whose target != ignore_index.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                        int32_t ignore_index = -1) {
    int64_t V = logits.dim(-1);
    int64_t rows = logits.numel() / V;
    if (static_cast<int64_t>(targets.size()) != rows)
        shape_error("cross_entropy", "target count mismatch");
    const T* pl = logits.data();
    double loss = 0;
    int64_t valid = 0;
    for (int64_t r = 0; r < rows; ++r) {
        int32_t tgt = targets[r];
        if (tgt == ignore_index) continue;
        if (tgt < 0 || tgt >= V)
            throw std::out_of_range("cross_entropy: target " + std::to_string(tgt) + " out of range");
        const T* row = pl + r * V;
        T m = row[0];
        for (int64_t i = 1; i < V; ++i) m = std::max(m, row[i]);
        double s = 0;
        for (int64_t i = 0; i < V; ++i) s += std::exp(static_cast<double>(row[i] - m));
        loss += std::log(s) + static_cast<double>(m) - static_cast<double>(row[tgt]);
        ++valid;
    }
    if (valid == 0) throw std::runtime_error("cross_entropy: every position is ignored");
    Tensor<T> out({1});
    out[0] = static_cast<T>(loss / static_cast<double>(valid));
    check_finite("cross_entropy", out.data(), 1);
    Tape<T>* tp = result_tape<T>({&logits});
    if (!tp) return out;
    int nl = logits.node();
    auto sl = logits.storage();
    return tp->record(
        "cross_entropy", {nl}, std::move(out),
        [nl, sl, targets, rows, V, valid, ignore_index](Tape<T>& t, const T* g, int64_t) {
            T* gl = t.grad_buf(nl, rows * V);
            const T* pl = sl->data();
            T w = g[0] / static_cast<T>(valid);
            std::vector<T> sm(V);
            for (int64_t r = 0; r < rows; ++r) {
                int32_t tgt = targets[r];
                if (tgt == ignore_index) continue;
                detail::softmax_row(pl + r * V, sm.data(), V);
                T* grow = gl + r * V;
                for (int64_t i = 0; i < V; ++i) grow[i] += w * sm[i];
                grow[tgt] -= w;
            }
        });
}

}  // namespace rattn
