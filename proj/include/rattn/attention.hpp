#pragma once

#include "rattn/ops.hpp"

namespace rattn {

enum class FeatureMapKind {
    Softmax,
    Relu,
    Identity,
    Zero,  // diagnostic: silences the linear branch so the SWA path can be isolated
};

inline const char* to_string(FeatureMapKind k) {
    switch (k) {
        case FeatureMapKind::Softmax: return "softmax";
        case FeatureMapKind::Relu: return "relu";
        case FeatureMapKind::Identity: return "identity";
        case FeatureMapKind::Zero: return "zero";
    }
    return "?";
}

/// Geometry and switches for one attention layer.
struct AttnConfig {
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t n_kv_heads = 2;
    int64_t head_dim = 16;
    int64_t window = 16;
    double rope_theta = 5e5;
    bool use_rope = true;          // local layers only; global layers pass false
    FeatureMapKind feature_map = FeatureMapKind::Softmax;
    int64_t chunk_size = 8;
    int64_t save_stride = 2;
    bool use_group_norm = true;    // per-head branch-norm scales vs one shared vector
    bool use_qk_norm = true;
    bool rla_uses_rope = false;    // default: linear branch consumes pre-rotation q/k
    bool use_chunkwise = true;     // linear branch path selection
    double norm_eps = 1e-6;

    int64_t group_size() const { return n_heads / n_kv_heads; }

    void validate() const {
        if (n_heads <= 0 || n_kv_heads <= 0 || n_heads % n_kv_heads != 0)
            shape_error("AttnConfig", "n_heads must be a positive multiple of n_kv_heads");
        if (d_model != n_heads * head_dim)
            shape_error("AttnConfig", "d_model must equal n_heads * head_dim");
        if (use_rope && head_dim % 2 != 0) shape_error("AttnConfig", "head_dim must be even for RoPE");
        if (window < 0) shape_error("AttnConfig", "window must be >= 0");
        if (chunk_size < 1 || save_stride < 1)
            shape_error("AttnConfig", "chunk_size and save_stride must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// rotary embedding: per-position rotation of (even, odd) pairs with
// frequencies theta^(-2i/d). Absolute 0-based positions by default.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void rope_rotate(const T* in, T* out, int64_t bh, int64_t L, int64_t d,
                 const std::vector<int64_t>& pos, double theta, bool inverse) {
    int64_t half = d / 2;
    std::vector<double> freq(half);
    for (int64_t i = 0; i < half; ++i)
        freq[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    for (int64_t s = 0; s < bh; ++s)
        for (int64_t l = 0; l < L; ++l) {
            const T* xr = in + (s * L + l) * d;
            T* yr = out + (s * L + l) * d;
            double p = static_cast<double>(pos[l]);
            for (int64_t i = 0; i < half; ++i) {
                double ang = p * freq[i];
                T c = static_cast<T>(std::cos(ang));
                T sn = static_cast<T>(inverse ? -std::sin(ang) : std::sin(ang));
                T x0 = xr[2 * i], x1 = xr[2 * i + 1];
                yr[2 * i] = x0 * c - x1 * sn;
                yr[2 * i + 1] = x0 * sn + x1 * c;
            }
        }
}
}  // namespace detail

template <class T>
Tensor<T> apply_rope(const Tensor<T>& x, double theta, std::vector<int64_t> positions = {}) {
    if (x.rank() != 4) shape_error("apply_rope", "expected [b,h,L,d], got " + shape_str(x.shape()));
    int64_t d = x.dim(-1);
    if (d % 2 != 0) shape_error("apply_rope", "head dim must be even");
    int64_t L = x.dim(2);
    int64_t bh = x.dim(0) * x.dim(1);
    if (positions.empty()) {
        positions.resize(L);
        for (int64_t i = 0; i < L; ++i) positions[i] = i;
    }
    if (static_cast<int64_t>(positions.size()) != L)
        shape_error("apply_rope", "positions length must equal sequence length");
    Tensor<T> out(x.shape());
    detail::rope_rotate(x.data(), out.data(), bh, L, d, positions, theta, false);
    check_finite("apply_rope", out.data(), out.numel());
    Tape<T>* tp = result_tape<T>({&x});
    if (!tp) return out;
    int nx = x.node();
    Shape xs = x.shape();
    return tp->record("apply_rope", {nx}, std::move(out),
                      [nx, xs, bh, L, d, positions, theta](Tape<T>& t, const T* g, int64_t gn) {
                          // rotations are orthogonal: the adjoint is the inverse rotation
                          Tensor<T> gin(xs);
                          detail::rope_rotate(g, gin.data(), bh, L, d, positions, theta, true);
                          T* gx = t.grad_buf(nx, gn);
                          for (int64_t i = 0; i < gn; ++i) gx[i] += gin[i];
                      });
}

// ---------------------------------------------------------------------------
// GQA: replicate each kv head group_size times, group-contiguous
// (query head q reads kv head q / group_size).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> gqa_expand(const Tensor<T>& kv, int64_t n_heads) {
    if (kv.rank() != 4) shape_error("gqa_expand", "expected [b,h_kv,L,d]");
    int64_t b = kv.dim(0), hkv = kv.dim(1), L = kv.dim(2), d = kv.dim(3);
    if (n_heads % hkv != 0)
        shape_error("gqa_expand", std::to_string(n_heads) + " heads not divisible by " +
                                      std::to_string(hkv) + " kv heads");
    int64_t g = n_heads / hkv;
    Tensor<T> out({b, n_heads, L, d});
    const T* pi = kv.data();
    T* po = out.data();
    int64_t slice = L * d;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < n_heads; ++h)
            std::copy(pi + (bi * hkv + h / g) * slice, pi + (bi * hkv + h / g + 1) * slice,
                      po + (bi * n_heads + h) * slice);
    Tape<T>* tp = result_tape<T>({&kv});
    if (!tp) return out;
    int nk = kv.node();
    return tp->record("gqa_expand", {nk}, std::move(out),
                      [nk, b, hkv, g, slice, n_heads](Tape<T>& t, const T* grad, int64_t) {
                          T* gk = t.grad_buf(nk, b * hkv * slice);
                          for (int64_t bi = 0; bi < b; ++bi)
                              for (int64_t h = 0; h < n_heads; ++h) {
                                  const T* src = grad + (bi * n_heads + h) * slice;
                                  T* dst = gk + (bi * hkv + h / g) * slice;
                                  for (int64_t i = 0; i < slice; ++i) dst[i] += src[i];
                              }
                      });
}

// ---------------------------------------------------------------------------
// sliding-window softmax attention, banded: query t attends keys
// [max(0, t-w), t]. w >= L-1 gives full causal attention. Scores are scaled
// by `scale` (1/sqrt(d) unless a caller overrides).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sliding_window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                   int64_t window, T scale) {
    if (q.rank() != 4 || k.shape() != q.shape() || v.shape() != q.shape())
        shape_error("sliding_window_attention", "q/k/v must share shape [b,h,L,d], got " +
                                                    shape_str(q.shape()) + " " + shape_str(k.shape()) +
                                                    " " + shape_str(v.shape()));
    if (window < 0) shape_error("sliding_window_attention", "window must be >= 0");
    int64_t bh = q.dim(0) * q.dim(1), L = q.dim(2), d = q.dim(3);
    int64_t W = std::min<int64_t>(window, L - 1);  // keys strictly before t that are visible
    int64_t band = W + 1;

    Tensor<T> out(q.shape());
    // weights[t][j] is the probability on key index (t - W + j); leading columns
    // that fall before the sequence start stay zero.
    auto weights = std::make_shared<std::vector<T>>(bh * L * band, T(0));
    {
        const T* pq = q.data();
        const T* pk = k.data();
        const T* pv = v.data();
        T* po = out.data();
        T* pw = weights->data();
        parallel_for(bh, [&](int64_t s) {
            const T* qs = pq + s * L * d;
            const T* ks = pk + s * L * d;
            const T* vs = pv + s * L * d;
            T* os = po + s * L * d;
            T* ws = pw + s * L * band;
            std::vector<T> sc(band);
            for (int64_t t = 0; t < L; ++t) {
                int64_t lo = std::max<int64_t>(0, t - W);
                int64_t cnt = t - lo + 1;
                const T* qt = qs + t * d;
                for (int64_t i = 0; i < cnt; ++i) {
                    const T* kr = ks + (lo + i) * d;
                    T dot = 0;
                    for (int64_t c = 0; c < d; ++c) dot += qt[c] * kr[c];
                    sc[i] = dot * scale;
                }
                detail::softmax_row(sc.data(), sc.data(), cnt);
                T* wt = ws + t * band + (lo - (t - W));
                T* ot = os + t * d;
                for (int64_t i = 0; i < cnt; ++i) {
                    wt[i] = sc[i];
                    const T* vr = vs + (lo + i) * d;
                    for (int64_t c = 0; c < d; ++c) ot[c] += sc[i] * vr[c];
                }
            }
        });
    }
    check_finite("sliding_window_attention", out.data(), out.numel());
    Tape<T>* tp = result_tape<T>({&q, &k, &v});
    if (!tp) return out;
    int nq = q.node(), nk = k.node(), nv = v.node();
    auto sq = q.storage(), sk = k.storage(), sv = v.storage();
    return tp->record(
        "sliding_window_attention", {nq, nk, nv}, std::move(out),
        [nq, nk, nv, sq, sk, sv, weights, bh, L, d, W, band, scale](Tape<T>& t, const T* g,
                                                                    int64_t) {
            int64_t n = bh * L * d;
            T* gq = nq >= 0 ? t.grad_buf(nq, n) : nullptr;
            T* gk = nk >= 0 ? t.grad_buf(nk, n) : nullptr;
            T* gv = nv >= 0 ? t.grad_buf(nv, n) : nullptr;
            const T* pq = sq->data();
            const T* pk = sk->data();
            const T* pv = sv->data();
            const T* pw = weights->data();
            parallel_for(bh, [&](int64_t s) {
                const T* qs = pq + s * L * d;
                const T* ks = pk + s * L * d;
                const T* vs = pv + s * L * d;
                const T* ws = pw + s * L * band;
                const T* gs = g + s * L * d;
                std::vector<T> da(band), dsc(band);
                for (int64_t t = 0; t < L; ++t) {
                    int64_t lo = std::max<int64_t>(0, t - W);
                    int64_t cnt = t - lo + 1;
                    const T* wt = ws + t * band + (lo - (t - W));
                    const T* gt = gs + t * d;
                    const T* qt = qs + t * d;
                    T dot_aw = 0;
                    for (int64_t i = 0; i < cnt; ++i) {
                        const T* vr = vs + (lo + i) * d;
                        T acc = 0;
                        for (int64_t c = 0; c < d; ++c) acc += gt[c] * vr[c];
                        da[i] = acc;
                        dot_aw += acc * wt[i];
                    }
                    for (int64_t i = 0; i < cnt; ++i) dsc[i] = wt[i] * (da[i] - dot_aw) * scale;
                    for (int64_t i = 0; i < cnt; ++i) {
                        const T* kr = ks + (lo + i) * d;
                        if (gq) {
                            T* gqt = gq + s * L * d + t * d;
                            for (int64_t c = 0; c < d; ++c) gqt[c] += dsc[i] * kr[c];
                        }
                        if (gk) {
                            T* gkr = gk + s * L * d + (lo + i) * d;
                            for (int64_t c = 0; c < d; ++c) gkr[c] += dsc[i] * qt[c];
                        }
                        if (gv) {
                            T* gvr = gv + s * L * d + (lo + i) * d;
                            for (int64_t c = 0; c < d; ++c) gvr[c] += wt[i] * gt[c];
                        }
                    }
                }
            });
        });
}

template <class T>
Tensor<T> sliding_window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                   int64_t window) {
    return sliding_window_attention(q, k, v, window,
                                    static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(-1)))));
}

/// Full causal attention: the same code path with the window covering the
/// whole prefix.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    return sliding_window_attention(q, k, v, q.dim(2) - 1);
}

}  // namespace rattn
