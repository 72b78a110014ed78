#include "m2m/nn.hpp"

#include <atomic>
#include <mutex>
#include <thread>

#include "m2m/errors.hpp"
#include "m2m/fft.hpp"

namespace m2m {

void activation_fwd(Activation act, const Tensor& x, Tensor& y) {
    const int64_t n = x.numel();
    const double* xs = x.data();
    double* ys = y.data();
    if (act == Activation::gelu) {
        for (int64_t i = 0; i < n; ++i) ys[i] = gelu(xs[i]);
    } else {
        for (int64_t i = 0; i < n; ++i) ys[i] = xs[i] > 0.0 ? xs[i] : 0.0;
    }
}

void activation_bwd(Activation act, const Tensor& x, const Tensor& gy, Tensor& gx) {
    const int64_t n = x.numel();
    const double* xs = x.data();
    const double* gys = gy.data();
    double* gxs = gx.data();
    if (act == Activation::gelu) {
        for (int64_t i = 0; i < n; ++i) gxs[i] = gys[i] * gelu_grad(xs[i]);
    } else {
        for (int64_t i = 0; i < n; ++i) gxs[i] = xs[i] > 0.0 ? gys[i] : 0.0;
    }
}

// ---------------------------------------------------------------------------

Linear make_linear(ParamTable& pt, const std::string& name, int64_t in, int64_t out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    Tensor w({out, in});
    Tensor b({out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& x : w.v) x = rng.uniform(-bound, bound);
    for (double& x : b.v) x = rng.uniform(-bound, bound);
    l.w = pt.add(name + ".w", std::move(w));
    l.b = pt.add(name + ".b", std::move(b));
    return l;
}

Tensor linear_fwd(const ParamTable& pt, const Linear& l, const Tensor& x) {
    const int64_t n = x.dim(0);
    if (x.rank() != 2 || x.dim(1) != l.in) throw ShapeError("linear: bad input " + x.shape_str());
    const Tensor& w = pt.values[static_cast<size_t>(l.w)];
    const Tensor& b = pt.values[static_cast<size_t>(l.b)];
    Tensor y({n, l.out});
    for (int64_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * l.in;
        double* yr = y.data() + r * l.out;
        for (int64_t o = 0; o < l.out; ++o) {
            const double* wo = w.data() + o * l.in;
            double acc = b.at(o);
            for (int64_t i = 0; i < l.in; ++i) acc += wo[i] * xr[i];
            yr[o] = acc;
        }
    }
    return y;
}

Tensor linear_bwd(const ParamTable& pt, const Linear& l, const Tensor& x, const Tensor& gy,
                  Grads& grads) {
    const int64_t n = x.dim(0);
    const Tensor& w = pt.values[static_cast<size_t>(l.w)];
    Tensor& gw = grads.g[static_cast<size_t>(l.w)];
    Tensor& gb = grads.g[static_cast<size_t>(l.b)];
    Tensor gx({n, l.in});
    for (int64_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * l.in;
        const double* gyr = gy.data() + r * l.out;
        double* gxr = gx.data() + r * l.in;
        for (int64_t o = 0; o < l.out; ++o) {
            const double g = gyr[o];
            gb.at(o) += g;
            const double* wo = w.data() + o * l.in;
            double* gwo = gw.data() + o * l.in;
            for (int64_t i = 0; i < l.in; ++i) {
                gwo[i] += g * xr[i];
                gxr[i] += g * wo[i];
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------

Pointwise make_pointwise(ParamTable& pt, const std::string& name, int64_t in, int64_t out,
                         Rng& rng) {
    Pointwise l;
    l.in = in;
    l.out = out;
    Tensor w({out, in});
    Tensor b({out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& x : w.v) x = rng.uniform(-bound, bound);
    for (double& x : b.v) x = rng.uniform(-bound, bound);
    l.w = pt.add(name + ".w", std::move(w));
    l.b = pt.add(name + ".b", std::move(b));
    return l;
}

Tensor pointwise_fwd(const ParamTable& pt, const Pointwise& l, const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != l.in)
        throw ShapeError("pointwise: bad input " + x.shape_str());
    const int64_t b = x.dim(0), h = x.dim(2), w_ = x.dim(3), plane = h * w_;
    const Tensor& w = pt.values[static_cast<size_t>(l.w)];
    const Tensor& bias = pt.values[static_cast<size_t>(l.b)];
    Tensor y({b, l.out, h, w_});
    for (int64_t bb = 0; bb < b; ++bb)
        for (int64_t o = 0; o < l.out; ++o) {
            double* yp = y.data() + (bb * l.out + o) * plane;
            std::fill(yp, yp + plane, bias.at(o));
            for (int64_t i = 0; i < l.in; ++i) {
                const double a = w.at(o, i);
                const double* xp = x.data() + (bb * l.in + i) * plane;
                for (int64_t p = 0; p < plane; ++p) yp[p] += a * xp[p];
            }
        }
    return y;
}

Tensor pointwise_bwd(const ParamTable& pt, const Pointwise& l, const Tensor& x, const Tensor& gy,
                     Grads& grads) {
    const int64_t b = x.dim(0), h = x.dim(2), w_ = x.dim(3), plane = h * w_;
    const Tensor& w = pt.values[static_cast<size_t>(l.w)];
    Tensor& gw = grads.g[static_cast<size_t>(l.w)];
    Tensor& gb = grads.g[static_cast<size_t>(l.b)];
    Tensor gx({b, l.in, h, w_});
    for (int64_t bb = 0; bb < b; ++bb)
        for (int64_t o = 0; o < l.out; ++o) {
            const double* gyp = gy.data() + (bb * l.out + o) * plane;
            double gsum = 0.0;
            for (int64_t p = 0; p < plane; ++p) gsum += gyp[p];
            gb.at(o) += gsum;
            for (int64_t i = 0; i < l.in; ++i) {
                const double a = w.at(o, i);
                const double* xp = x.data() + (bb * l.in + i) * plane;
                double* gxp = gx.data() + (bb * l.in + i) * plane;
                double acc = 0.0;
                for (int64_t p = 0; p < plane; ++p) {
                    acc += gyp[p] * xp[p];
                    gxp[p] += a * gyp[p];
                }
                gw.at(o, i) += acc;
            }
        }
    return gx;
}

// ---------------------------------------------------------------------------

namespace {

inline bool self_row(int a, int h) { return a == 0 || 2 * a == h; }
inline bool self_col(int b, int w) { return b == 0 || 2 * b == w; }

// Mirrors self-mapped columns of a corner-supported half spectrum so the
// buffer is Hermitian-consistent before a c2r synthesis, and zeroes the
// imaginary parts of self-conjugate bins.
void hermitian_fix(std::complex<double>* spec, int h, int w, int modes) {
    const int hw = fft::half_w(w);
    for (int b = 0; b < modes; ++b) {
        if (!self_col(b, w)) continue;
        for (int a = 1; a < modes; ++a) {
            if (2 * a == h) continue;
            spec[static_cast<size_t>(h - a) * hw + b] =
                std::conj(spec[static_cast<size_t>(a) * hw + b]);
        }
        for (int a = 0; a < modes; ++a)
            if (self_row(a, h))
                spec[static_cast<size_t>(a) * hw + b] =
                    {spec[static_cast<size_t>(a) * hw + b].real(), 0.0};
    }
}

}  // namespace

SpectralConv make_spectral(ParamTable& pt, const std::string& name, int64_t in, int64_t out,
                           int modes, Rng& rng) {
    if (modes < 1) throw ConfigError("spectral: modes must be >= 1");
    SpectralConv sc;
    sc.in = in;
    sc.out = out;
    sc.modes = modes;
    Tensor wre({out, in, modes, modes});
    Tensor wim({out, in, modes, modes});
    const double scale = 1.0 / static_cast<double>(in * out);
    for (double& x : wre.v) x = rng.uniform(0.0, scale);
    for (double& x : wim.v) x = rng.uniform(0.0, scale);
    sc.w_re = pt.add(name + ".w_re", std::move(wre));
    sc.w_im = pt.add(name + ".w_im", std::move(wim));
    return sc;
}

Tensor spectral_fwd(const ParamTable& pt, const SpectralConv& sc, const Tensor& x,
                    SpectralCtx* ctx) {
    if (x.rank() != 4 || x.dim(1) != sc.in) throw ShapeError("spectral: bad input " + x.shape_str());
    const int64_t batch = x.dim(0);
    const int h = static_cast<int>(x.dim(2));
    const int w = static_cast<int>(x.dim(3));
    if (sc.modes > h / 2 + 1 || sc.modes > w / 2 + 1)
        throw ShapeError("spectral: mode-overflow, modes=" + std::to_string(sc.modes) +
                         " exceeds representable spectrum of " + std::to_string(h) + "x" +
                         std::to_string(w));
    const int hw = fft::half_w(w);
    const int m = sc.modes;
    const double norm = 1.0 / (static_cast<double>(h) * w);
    const Tensor& wre = pt.values[static_cast<size_t>(sc.w_re)];
    const Tensor& wim = pt.values[static_cast<size_t>(sc.w_im)];

    if (ctx) {
        ctx->h = h;
        ctx->w = w;
        ctx->batch = batch;
        ctx->x_corner.assign(static_cast<size_t>(batch) * sc.in * m * m, {0.0, 0.0});
    }

    Tensor y({batch, sc.out, h, w});
    CVec xhat(static_cast<size_t>(sc.in) * h * hw);
    CVec yhat(static_cast<size_t>(h) * hw);
    for (int64_t bb = 0; bb < batch; ++bb) {
        for (int64_t i = 0; i < sc.in; ++i)
            fft::r2c(h, w, x.data() + (bb * sc.in + i) * h * w,
                     xhat.data() + static_cast<size_t>(i) * h * hw);
        if (ctx) {
            for (int64_t i = 0; i < sc.in; ++i)
                for (int a = 0; a < m; ++a)
                    for (int b = 0; b < m; ++b)
                        ctx->x_corner[static_cast<size_t>(((bb * sc.in + i) * m + a) * m + b)] =
                            xhat[static_cast<size_t>(i) * h * hw + static_cast<size_t>(a) * hw + b];
        }
        for (int64_t o = 0; o < sc.out; ++o) {
            std::fill(yhat.begin(), yhat.end(), std::complex<double>{0.0, 0.0});
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) {
                    std::complex<double> acc{0.0, 0.0};
                    for (int64_t i = 0; i < sc.in; ++i) {
                        const size_t wi = static_cast<size_t>(((o * sc.in + i) * m + a) * m + b);
                        const std::complex<double> wc{wre.v[wi], wim.v[wi]};
                        acc += wc * xhat[static_cast<size_t>(i) * h * hw +
                                         static_cast<size_t>(a) * hw + b];
                    }
                    yhat[static_cast<size_t>(a) * hw + b] = acc;
                }
            hermitian_fix(yhat.data(), h, w, m);
            double* yp = y.data() + (bb * sc.out + o) * h * w;
            fft::c2r(h, w, yhat.data(), yp);
            for (int64_t p = 0; p < static_cast<int64_t>(h) * w; ++p) yp[p] *= norm;
        }
    }
    return y;
}

Tensor spectral_bwd(const ParamTable& pt, const SpectralConv& sc, const SpectralCtx& ctx,
                    const Tensor& gy, Grads& grads) {
    const int h = ctx.h, w = ctx.w, m = sc.modes;
    const int hw = fft::half_w(w);
    const int64_t batch = ctx.batch;
    const double norm = 1.0 / (static_cast<double>(h) * w);
    const Tensor& wre = pt.values[static_cast<size_t>(sc.w_re)];
    const Tensor& wim = pt.values[static_cast<size_t>(sc.w_im)];
    Tensor& gwre = grads.g[static_cast<size_t>(sc.w_re)];
    Tensor& gwim = grads.g[static_cast<size_t>(sc.w_im)];

    Tensor gx({batch, sc.in, h, w});
    CVec ghat(static_cast<size_t>(sc.out) * h * hw);
    CVec gy_corner(static_cast<size_t>(sc.out) * m * m);
    CVec z(static_cast<size_t>(h) * hw);
    for (int64_t bb = 0; bb < batch; ++bb) {
        for (int64_t o = 0; o < sc.out; ++o)
            fft::r2c(h, w, gy.data() + (bb * sc.out + o) * h * w,
                     ghat.data() + static_cast<size_t>(o) * h * hw);
        // Gradient w.r.t. the retained corner of the output spectrum. Bins
        // with a distinct conjugate partner enter the synthesis twice.
        for (int64_t o = 0; o < sc.out; ++o)
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) {
                    std::complex<double> g =
                        ghat[static_cast<size_t>(o) * h * hw + static_cast<size_t>(a) * hw + b];
                    if (self_row(a, h) && self_col(b, w))
                        g = {g.real() * norm, 0.0};
                    else
                        g *= 2.0 * norm;
                    gy_corner[static_cast<size_t>((o * m + a) * m + b)] = g;
                }
        // Weight and input-spectrum gradients on the corner.
        for (int64_t i = 0; i < sc.in; ++i) {
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) {
                    const std::complex<double> xc =
                        ctx.x_corner[static_cast<size_t>(((bb * sc.in + i) * m + a) * m + b)];
                    std::complex<double> gxc{0.0, 0.0};
                    for (int64_t o = 0; o < sc.out; ++o) {
                        const std::complex<double> g =
                            gy_corner[static_cast<size_t>((o * m + a) * m + b)];
                        const size_t wi = static_cast<size_t>(((o * sc.in + i) * m + a) * m + b);
                        const std::complex<double> gw = g * std::conj(xc);
                        gwre.v[wi] += gw.real();
                        gwim.v[wi] += gw.imag();
                        gxc += std::conj(std::complex<double>{wre.v[wi], wim.v[wi]}) * g;
                    }
                    // Adjoint of r2c: halve bins whose conjugate partner is
                    // accounted for by the synthesis below.
                    const size_t zi = static_cast<size_t>(a) * hw + b;
                    if (self_row(a, h) && self_col(b, w))
                        z[zi] = {gxc.real(), 0.0};
                    else
                        z[zi] = gxc * 0.5;
                }
            hermitian_fix(z.data(), h, w, m);
            fft::c2r(h, w, z.data(), gx.data() + (bb * sc.in + i) * h * w);
            std::fill(z.begin(), z.end(), std::complex<double>{0.0, 0.0});
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------

LayerNorm make_layernorm(ParamTable& pt, const std::string& name, int64_t dim) {
    LayerNorm ln;
    ln.dim = dim;
    ln.gamma = pt.add(name + ".gamma", Tensor::full({dim}, 1.0));
    ln.beta = pt.add(name + ".beta", Tensor({dim}));
    return ln;
}

Tensor layernorm_fwd(const ParamTable& pt, const LayerNorm& ln, const Tensor& x,
                     LayerNormCtx* ctx) {
    const int64_t n = x.dim(0), d = x.dim(1);
    if (d != ln.dim) throw ShapeError("layernorm: bad input " + x.shape_str());
    const Tensor& gamma = pt.values[static_cast<size_t>(ln.gamma)];
    const Tensor& beta = pt.values[static_cast<size_t>(ln.beta)];
    Tensor y({n, d});
    if (ctx) {
        ctx->xhat = Tensor({n, d});
        ctx->rstd.assign(static_cast<size_t>(n), 0.0);
    }
    for (int64_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + ln.eps);
        double* yr = y.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * rstd;
            if (ctx) ctx->xhat.at(r, j) = xh;
            yr[j] = gamma.at(j) * xh + beta.at(j);
        }
        if (ctx) ctx->rstd[static_cast<size_t>(r)] = rstd;
    }
    return y;
}

Tensor layernorm_bwd(const ParamTable& pt, const LayerNorm& ln, const LayerNormCtx& ctx,
                     const Tensor& gy, Grads& grads) {
    const int64_t n = gy.dim(0), d = gy.dim(1);
    const Tensor& gamma = pt.values[static_cast<size_t>(ln.gamma)];
    Tensor& ggamma = grads.g[static_cast<size_t>(ln.gamma)];
    Tensor& gbeta = grads.g[static_cast<size_t>(ln.beta)];
    Tensor gx({n, d});
    for (int64_t r = 0; r < n; ++r) {
        const double* gyr = gy.data() + r * d;
        const double* xh = ctx.xhat.data() + r * d;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double gxh = gyr[j] * gamma.at(j);
            m1 += gxh;
            m2 += gxh * xh[j];
            ggamma.at(j) += gyr[j] * xh[j];
            gbeta.at(j) += gyr[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double rstd = ctx.rstd[static_cast<size_t>(r)];
        double* gxr = gx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            const double gxh = gyr[j] * gamma.at(j);
            gxr[j] = rstd * (gxh - m1 - xh[j] * m2);
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor p({n, d});
    for (int64_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * d;
        double* pr = p.data() + r * d;
        double mx = xr[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < d; ++j) pr[j] *= inv;
    }
    return p;
}

Tensor softmax_rows_bwd(const Tensor& p, const Tensor& gy) {
    const int64_t n = p.dim(0), d = p.dim(1);
    Tensor gx({n, d});
    for (int64_t r = 0; r < n; ++r) {
        const double* pr = p.data() + r * d;
        const double* gyr = gy.data() + r * d;
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += gyr[j] * pr[j];
        double* gxr = gx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) gxr[j] = pr[j] * (gyr[j] - dot);
    }
    return gx;
}

// ---------------------------------------------------------------------------

Mha make_mha(ParamTable& pt, const std::string& name, int64_t dim, int heads, Rng& rng) {
    if (dim % heads != 0) throw ConfigError("mha: dim must be divisible by heads");
    Mha m;
    m.dim = dim;
    m.heads = heads;
    m.wq = make_linear(pt, name + ".wq", dim, dim, rng);
    m.wk = make_linear(pt, name + ".wk", dim, dim, rng);
    m.wv = make_linear(pt, name + ".wv", dim, dim, rng);
    m.wo = make_linear(pt, name + ".wo", dim, dim, rng);
    return m;
}

Tensor mha_fwd(const ParamTable& pt, const Mha& m, const Tensor& x, MhaCtx* ctx) {
    const int64_t t = x.dim(0), d = x.dim(1);
    const int64_t dk = d / m.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor q = linear_fwd(pt, m.wq, x);
    Tensor k = linear_fwd(pt, m.wk, x);
    Tensor v = linear_fwd(pt, m.wv, x);
    Tensor att({m.heads, t, t});
    Tensor concat({t, d});
    for (int h = 0; h < m.heads; ++h) {
        const int64_t off = h * dk;
        Tensor scores({t, t});
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j < t; ++j) {
                double acc = 0.0;
                for (int64_t c = 0; c < dk; ++c) acc += q.at(i, off + c) * k.at(j, off + c);
                scores.at(i, j) = acc * scale;
            }
        Tensor p = softmax_rows(scores);
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j < t; ++j) att.at(h, i, j) = p.at(i, j);
        for (int64_t i = 0; i < t; ++i)
            for (int64_t c = 0; c < dk; ++c) {
                double acc = 0.0;
                for (int64_t j = 0; j < t; ++j) acc += p.at(i, j) * v.at(j, off + c);
                concat.at(i, off + c) = acc;
            }
    }
    Tensor out = linear_fwd(pt, m.wo, concat);
    if (ctx) {
        ctx->x = x;
        ctx->q = std::move(q);
        ctx->k = std::move(k);
        ctx->v = std::move(v);
        ctx->att = std::move(att);
        ctx->concat = std::move(concat);
    }
    return out;
}

Tensor mha_bwd(const ParamTable& pt, const Mha& m, const MhaCtx& ctx, const Tensor& gy,
               Grads& grads) {
    const int64_t t = ctx.x.dim(0), d = ctx.x.dim(1);
    const int64_t dk = d / m.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor gconcat = linear_bwd(pt, m.wo, ctx.concat, gy, grads);
    Tensor gq({t, d}), gk({t, d}), gv({t, d});
    for (int h = 0; h < m.heads; ++h) {
        const int64_t off = h * dk;
        Tensor p({t, t}), gatt({t, t});
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j < t; ++j) {
                p.at(i, j) = ctx.att.at(h, i, j);
                double acc = 0.0;
                for (int64_t c = 0; c < dk; ++c) acc += gconcat.at(i, off + c) * ctx.v.at(j, off + c);
                gatt.at(i, j) = acc;
            }
        for (int64_t j = 0; j < t; ++j)
            for (int64_t c = 0; c < dk; ++c) {
                double acc = 0.0;
                for (int64_t i = 0; i < t; ++i) acc += p.at(i, j) * gconcat.at(i, off + c);
                gv.at(j, off + c) = acc;
            }
        Tensor gscores = softmax_rows_bwd(p, gatt);
        for (int64_t i = 0; i < t; ++i)
            for (int64_t c = 0; c < dk; ++c) {
                double accq = 0.0;
                for (int64_t j = 0; j < t; ++j) accq += gscores.at(i, j) * ctx.k.at(j, off + c);
                gq.at(i, off + c) = accq * scale;
            }
        for (int64_t j = 0; j < t; ++j)
            for (int64_t c = 0; c < dk; ++c) {
                double acck = 0.0;
                for (int64_t i = 0; i < t; ++i) acck += gscores.at(i, j) * ctx.q.at(i, off + c);
                gk.at(j, off + c) = acck * scale;
            }
    }
    Tensor gx = linear_bwd(pt, m.wq, ctx.x, gq, grads);
    Tensor gx2 = linear_bwd(pt, m.wk, ctx.x, gk, grads);
    Tensor gx3 = linear_bwd(pt, m.wv, ctx.x, gv, grads);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.v[i] += gx2.v[i] + gx3.v[i];
    return gx;
}

// ---------------------------------------------------------------------------

EncoderLayer make_encoder_layer(ParamTable& pt, const std::string& name, int64_t dim, int heads,
                                int64_t ff_dim, Rng& rng) {
    EncoderLayer e;
    e.mha = make_mha(pt, name + ".mha", dim, heads, rng);
    e.ln1 = make_layernorm(pt, name + ".ln1", dim);
    e.ln2 = make_layernorm(pt, name + ".ln2", dim);
    e.ff1 = make_linear(pt, name + ".ff1", dim, ff_dim, rng);
    e.ff2 = make_linear(pt, name + ".ff2", ff_dim, dim, rng);
    return e;
}

Tensor encoder_layer_fwd(const ParamTable& pt, const EncoderLayer& e, const Tensor& x,
                         EncoderLayerCtx* ctx) {
    Tensor a = mha_fwd(pt, e.mha, x, ctx ? &ctx->mha : nullptr);
    for (int64_t i = 0; i < a.numel(); ++i) a.v[i] += x.v[i];
    Tensor x1 = layernorm_fwd(pt, e.ln1, a, ctx ? &ctx->ln1 : nullptr);
    Tensor ff_pre = linear_fwd(pt, e.ff1, x1);
    Tensor ffa(ff_pre.shape);
    activation_fwd(Activation::gelu, ff_pre, ffa);
    Tensor f = linear_fwd(pt, e.ff2, ffa);
    for (int64_t i = 0; i < f.numel(); ++i) f.v[i] += x1.v[i];
    Tensor x2 = layernorm_fwd(pt, e.ln2, f, ctx ? &ctx->ln2 : nullptr);
    if (ctx) {
        ctx->x = x;
        ctx->x1 = std::move(x1);
        ctx->ff_pre = std::move(ff_pre);
    }
    return x2;
}

Tensor encoder_layer_bwd(const ParamTable& pt, const EncoderLayer& e, const EncoderLayerCtx& ctx,
                         const Tensor& gy, Grads& grads) {
    Tensor gr2 = layernorm_bwd(pt, e.ln2, ctx.ln2, gy, grads);
    // FF branch; gr2 also flows straight to x1 through the residual.
    Tensor ffa(ctx.ff_pre.shape);
    activation_fwd(Activation::gelu, ctx.ff_pre, ffa);
    Tensor gffa = linear_bwd(pt, e.ff2, ffa, gr2, grads);
    Tensor gffpre(gffa.shape);
    activation_bwd(Activation::gelu, ctx.ff_pre, gffa, gffpre);
    Tensor gx1 = linear_bwd(pt, e.ff1, ctx.x1, gffpre, grads);
    for (int64_t i = 0; i < gx1.numel(); ++i) gx1.v[i] += gr2.v[i];
    Tensor gr1 = layernorm_bwd(pt, e.ln1, ctx.ln1, gx1, grads);
    Tensor gx = mha_bwd(pt, e.mha, ctx.mha, gr1, grads);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.v[i] += gr1.v[i];
    return gx;
}

// ---------------------------------------------------------------------------

Adam::Adam(const ParamTable& pt, std::vector<int> param_indices, double learning_rate)
    : lr(learning_rate), indices(std::move(param_indices)) {
    m.reserve(indices.size());
    v.reserve(indices.size());
    for (int idx : indices) {
        m.emplace_back(pt.values[static_cast<size_t>(idx)].shape);
        v.emplace_back(pt.values[static_cast<size_t>(idx)].shape);
    }
}

void Adam::step(ParamTable& pt, const Grads& grads) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t k = 0; k < indices.size(); ++k) {
        Tensor& p = pt.values[static_cast<size_t>(indices[k])];
        const Tensor& g = grads.g[static_cast<size_t>(indices[k])];
        Tensor& mk = m[k];
        Tensor& vk = v[k];
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gi = g.v[i];
            mk.v[i] = beta1 * mk.v[i] + (1.0 - beta1) * gi;
            vk.v[i] = beta2 * vk.v[i] + (1.0 - beta2) * gi * gi;
            const double mhat = mk.v[i] / bc1;
            const double vhat = vk.v[i] / bc2;
            p.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    const int k = std::min(std::max(threads, 1), n);
    if (k == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(k));
    for (int w = 0; w < k; ++w)
        pool.emplace_back([&]() {
            try {
                for (;;) {
                    const int i = next.fetch_add(1);
                    if (i >= n) return;
                    fn(i);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace m2m
