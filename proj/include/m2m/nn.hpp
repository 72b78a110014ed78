#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

/// Flat store of named parameter tensors. Layers keep integer handles into
/// the table; gradient buffers mirror it index-for-index, which keeps
/// per-worker gradient accumulation and optimizer bookkeeping trivial.
struct ParamTable {
    std::vector<std::string> names;
    std::vector<Tensor> values;

    int add(std::string name, Tensor t) {
        names.push_back(std::move(name));
        values.push_back(std::move(t));
        return static_cast<int>(values.size()) - 1;
    }
    int find(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        return -1;
    }
    int64_t total_scalars() const {
        int64_t n = 0;
        for (const Tensor& t : values) n += t.numel();
        return n;
    }
    size_t size() const { return values.size(); }
};

/// Gradient buffer parallel to a ParamTable.
struct Grads {
    std::vector<Tensor> g;

    Grads() = default;
    explicit Grads(const ParamTable& pt) {
        g.reserve(pt.size());
        for (const Tensor& t : pt.values) g.emplace_back(t.shape);
    }
    void zero() {
        for (Tensor& t : g) std::fill(t.v.begin(), t.v.end(), 0.0);
    }
    void add(const Grads& o) {
        for (size_t i = 0; i < g.size(); ++i) {
            const double* src = o.g[i].data();
            double* dst = g[i].data();
            for (int64_t k = 0; k < g[i].numel(); ++k) dst[k] += src[k];
        }
    }
};

// ---------------------------------------------------------------------------
// Scalar activations

/// tanh through exp; bit-identical across platforms that agree on exp, and
/// measurably faster than libm tanh.
inline double fast_tanh(double x) {
    const double a = std::fabs(x);
    const double t = 1.0 - 2.0 / (std::exp(2.0 * a) + 1.0);
    return std::copysign(t, x);
}

enum class Activation { gelu, relu };

inline double gelu(double x) {
    constexpr double k0 = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k1 = 0.044715;
    return 0.5 * x * (1.0 + fast_tanh(k0 * (x + k1 * x * x * x)));
}
inline double gelu_grad(double x) {
    constexpr double k0 = 0.7978845608028654;
    constexpr double k1 = 0.044715;
    const double t = fast_tanh(k0 * (x + k1 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k0 * (1.0 + 3.0 * k1 * x * x);
}

void activation_fwd(Activation act, const Tensor& x, Tensor& y);
/// gx[i] = gy[i] * act'(x[i])
void activation_bwd(Activation act, const Tensor& x, const Tensor& gy, Tensor& gx);

// ---------------------------------------------------------------------------
// Linear on row batches: x [n, in] -> y [n, out]

struct Linear {
    int w = -1;  // [out, in]
    int b = -1;  // [out]
    int64_t in = 0, out = 0;
};

Linear make_linear(ParamTable& pt, const std::string& name, int64_t in, int64_t out, Rng& rng);
Tensor linear_fwd(const ParamTable& pt, const Linear& l, const Tensor& x);
Tensor linear_bwd(const ParamTable& pt, const Linear& l, const Tensor& x, const Tensor& gy,
                  Grads& grads);

// ---------------------------------------------------------------------------
// 1x1 convolution over channels: x [B, Cin, H, W] -> y [B, Cout, H, W]

struct Pointwise {
    int w = -1;  // [out, in]
    int b = -1;  // [out]
    int64_t in = 0, out = 0;
};

Pointwise make_pointwise(ParamTable& pt, const std::string& name, int64_t in, int64_t out,
                         Rng& rng);
Tensor pointwise_fwd(const ParamTable& pt, const Pointwise& l, const Tensor& x);
Tensor pointwise_bwd(const ParamTable& pt, const Pointwise& l, const Tensor& x, const Tensor& gy,
                     Grads& grads);

// ---------------------------------------------------------------------------
// Spectral convolution: rfft2 -> per-mode channel mixing on the low-frequency
// modes x modes corner of the half spectrum -> irfft2. Complex weights are
// stored as separate real/imaginary tensors [out, in, modes, modes].

struct SpectralConv {
    int w_re = -1;
    int w_im = -1;
    int64_t in = 0, out = 0;
    int modes = 0;
};

struct SpectralCtx {
    CVec x_corner;  // [in, modes, modes] saved input spectrum corner
    int h = 0, w = 0;
    int64_t batch = 0;
};

SpectralConv make_spectral(ParamTable& pt, const std::string& name, int64_t in, int64_t out,
                           int modes, Rng& rng);
/// Requires modes <= floor(H/2)+1 and modes <= floor(W/2)+1 (mode-overflow otherwise).
Tensor spectral_fwd(const ParamTable& pt, const SpectralConv& sc, const Tensor& x,
                    SpectralCtx* ctx);
Tensor spectral_bwd(const ParamTable& pt, const SpectralConv& sc, const SpectralCtx& ctx,
                    const Tensor& gy, Grads& grads);

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension of [n, d]

struct LayerNorm {
    int gamma = -1;
    int beta = -1;
    int64_t dim = 0;
    double eps = 1e-5;
};

struct LayerNormCtx {
    Tensor xhat;  // [n, d]
    std::vector<double> rstd;
};

LayerNorm make_layernorm(ParamTable& pt, const std::string& name, int64_t dim);
Tensor layernorm_fwd(const ParamTable& pt, const LayerNorm& ln, const Tensor& x,
                     LayerNormCtx* ctx);
Tensor layernorm_bwd(const ParamTable& pt, const LayerNorm& ln, const LayerNormCtx& ctx,
                     const Tensor& gy, Grads& grads);

// ---------------------------------------------------------------------------
// Row-wise softmax on [n, d]

Tensor softmax_rows(const Tensor& x);
/// gx given probs p and upstream gy: gx = p * (gy - sum(gy * p))
Tensor softmax_rows_bwd(const Tensor& p, const Tensor& gy);

// ---------------------------------------------------------------------------
// Multi-head self-attention on a single sequence x [T, d]

struct Mha {
    Linear wq, wk, wv, wo;
    int heads = 1;
    int64_t dim = 0;
};

struct MhaCtx {
    Tensor x, q, k, v;
    Tensor att;     // [heads, T, T]
    Tensor concat;  // [T, d] pre-output-projection
};

Mha make_mha(ParamTable& pt, const std::string& name, int64_t dim, int heads, Rng& rng);
Tensor mha_fwd(const ParamTable& pt, const Mha& m, const Tensor& x, MhaCtx* ctx);
Tensor mha_bwd(const ParamTable& pt, const Mha& m, const MhaCtx& ctx, const Tensor& gy,
               Grads& grads);

// ---------------------------------------------------------------------------
// Post-norm transformer encoder layer: LN1(x + MHA(x)), LN2(x1 + FF(x1))

struct EncoderLayer {
    Mha mha;
    LayerNorm ln1, ln2;
    Linear ff1, ff2;
};

struct EncoderLayerCtx {
    MhaCtx mha;
    LayerNormCtx ln1, ln2;
    Tensor x, x1, ff_pre;  // saved inputs for the residual and FF paths
};

EncoderLayer make_encoder_layer(ParamTable& pt, const std::string& name, int64_t dim, int heads,
                                int64_t ff_dim, Rng& rng);
Tensor encoder_layer_fwd(const ParamTable& pt, const EncoderLayer& e, const Tensor& x,
                         EncoderLayerCtx* ctx);
Tensor encoder_layer_bwd(const ParamTable& pt, const EncoderLayer& e, const EncoderLayerCtx& ctx,
                         const Tensor& gy, Grads& grads);

// ---------------------------------------------------------------------------
// Adam over a subset of a ParamTable

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<int> indices;
    std::vector<Tensor> m, v;
    int64_t t = 0;

    Adam() = default;
    Adam(const ParamTable& pt, std::vector<int> param_indices, double learning_rate);
    void step(ParamTable& pt, const Grads& grads);
};

// ---------------------------------------------------------------------------
// Fork-join helper; determinism of callers must not depend on the schedule.

void parallel_for(int n, int threads, const std::function<void(int)>& fn);

/// Resolves a thread-count setting: 0 means hardware concurrency.
int resolve_threads(int requested);

}  // namespace m2m
