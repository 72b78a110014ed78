#include "m2m/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "m2m/errors.hpp"

namespace m2m {

void RouterConfig::validate() const {
    if (embed_dim < 1 || num_heads < 1 || num_layers < 1 || pool_size < 1)
        throw ConfigError("RouterConfig: dimensions must be positive");
    if (embed_dim % num_heads != 0)
        throw ConfigError("RouterConfig: embed_dim must be divisible by num_heads");
    if (num_experts < 1) throw ConfigError("RouterConfig: num_experts must be >= 1");
    if (!(epsilon_prior > 0.0 && epsilon_prior < 0.1))
        throw ConfigError("RouterConfig: epsilon_prior must lie in (0, 0.1)");
}

namespace {

void validate_prior_row(const std::vector<double>& w, int num_experts, const char* what) {
    if (static_cast<int>(w.size()) != num_experts)
        throw ConfigError(std::string("PriorSpec: ") + what + ": expected " +
                          std::to_string(num_experts) + " weights, got " +
                          std::to_string(w.size()));
    double sum = 0.0;
    for (double x : w) {
        if (x < 0.0 || !std::isfinite(x)) throw ConfigError("PriorSpec: weights must be >= 0");
        sum += x;
    }
    if (sum <= 0.0)
        throw ConfigError("PriorSpec: weights must not all be zero for soft/hard mode");
}

}  // namespace

void PriorSpec::validate(int num_experts) const {
    if (has_per_patch()) {
        if (per_patch.rank() != 2 || per_patch.dim(1) != num_experts)
            throw ConfigError("PriorSpec: per_patch must be [S^2, num_experts]");
        if (mode == PriorMode::none)
            throw ConfigError("PriorSpec: per-patch weights require soft or hard mode");
        for (int64_t p = 0; p < per_patch.dim(0); ++p)
            validate_prior_row(weights_for(p, num_experts), num_experts, "per_patch row");
        return;
    }
    if (mode == PriorMode::none) {
        if (!weights.empty() && static_cast<int>(weights.size()) != num_experts)
            throw ConfigError("PriorSpec: weight length does not match expert count");
        return;
    }
    validate_prior_row(weights, num_experts, "weights");
}

std::vector<double> PriorSpec::weights_for(int64_t patch_index, int num_experts) const {
    if (has_per_patch()) {
        const int64_t row = patch_index % per_patch.dim(0);
        std::vector<double> w(static_cast<size_t>(num_experts));
        for (int j = 0; j < num_experts; ++j) w[static_cast<size_t>(j)] = per_patch.at(row, j);
        return w;
    }
    if (mode == PriorMode::none || weights.empty())
        return std::vector<double>(static_cast<size_t>(num_experts), 1.0 / num_experts);
    return weights;
}

std::vector<double> PriorSpec::smoothed(int num_experts, double eps, int64_t patch_index) const {
    std::vector<double> q = weights_for(patch_index, num_experts);
    const double sum = std::accumulate(q.begin(), q.end(), 0.0);
    for (double& x : q) x = (1.0 - eps * num_experts) * (x / sum) + eps;
    return q;
}

RouterNet make_router(ParamTable& pt, const RouterConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    RouterNet r;
    r.cfg = cfg;
    const size_t first = pt.size();
    const int64_t feat = static_cast<int64_t>(cfg.pool_size) * cfg.pool_size;
    r.embed = make_linear(pt, "router.embed", feat, cfg.embed_dim, rng);
    if (cfg.pooling == Pooling::cls_token) {
        Tensor cls({1, cfg.embed_dim});
        for (double& x : cls.v) x = rng.normal(0.0, 0.02);
        r.cls = pt.add("router.cls", std::move(cls));
    }
    for (int l = 0; l < cfg.num_layers; ++l)
        r.encoder.push_back(make_encoder_layer(pt, "router.enc" + std::to_string(l),
                                               cfg.embed_dim, cfg.num_heads, 4 * cfg.embed_dim,
                                               rng));
    r.head = make_linear(pt, "router.head", cfg.embed_dim, cfg.num_experts, rng);
    for (size_t i = first; i < pt.size(); ++i) r.param_indices.push_back(static_cast<int>(i));
    return r;
}

namespace {

// Adaptive average pooling of one [h, w] plane to [out, out] (torch-style
// bins: [floor(i*h/out), ceil((i+1)*h/out)) so undersized inputs still fill
// every bin).
void adaptive_pool_plane(const double* in, int64_t h, int64_t w, double* out, int64_t o) {
    for (int64_t r = 0; r < o; ++r) {
        const int64_t r0 = (r * h) / o;
        const int64_t r1 = std::max(r0 + 1, ((r + 1) * h + o - 1) / o);
        for (int64_t c = 0; c < o; ++c) {
            const int64_t c0 = (c * w) / o;
            const int64_t c1 = std::max(c0 + 1, ((c + 1) * w + o - 1) / o);
            double acc = 0.0;
            for (int64_t rr = r0; rr < r1; ++rr)
                for (int64_t cc = c0; cc < c1; ++cc) acc += in[rr * w + cc];
            out[r * o + c] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
        }
    }
}

Tensor sinusoidal_pe(int64_t t, int64_t d) {
    Tensor pe({t, d});
    for (int64_t pos = 0; pos < t; ++pos)
        for (int64_t i = 0; i < d; ++i) {
            const double angle =
                static_cast<double>(pos) /
                std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
            pe.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

}  // namespace

Tensor router_logits(const ParamTable& pt, const RouterNet& r, const Tensor& patch_thw,
                     RouterRowCtx* ctx) {
    if (patch_thw.rank() != 3) throw ShapeError("router_logits: expected [T,H,W]");
    const int64_t t = patch_thw.dim(0), h = patch_thw.dim(1), w = patch_thw.dim(2);
    const int64_t o = r.cfg.pool_size;
    Tensor tokens({t, o * o});
    for (int64_t tt = 0; tt < t; ++tt)
        adaptive_pool_plane(patch_thw.data() + tt * h * w, h, w, tokens.data() + tt * o * o, o);
    if (ctx) ctx->tokens_raw = tokens;

    Tensor emb = linear_fwd(pt, r.embed, tokens);
    const Tensor pe = sinusoidal_pe(t, r.cfg.embed_dim);
    for (int64_t i = 0; i < emb.numel(); ++i) emb.v[i] += pe.v[i];

    Tensor rows;
    if (r.cfg.pooling == Pooling::cls_token) {
        rows = Tensor({t + 1, r.cfg.embed_dim});
        const Tensor& cls = pt.values[static_cast<size_t>(r.cls)];
        std::copy(cls.v.begin(), cls.v.end(), rows.v.begin());
        std::copy(emb.v.begin(), emb.v.end(), rows.v.begin() + static_cast<size_t>(r.cfg.embed_dim));
    } else {
        rows = std::move(emb);
    }

    if (ctx) ctx->enc.resize(r.encoder.size());
    for (size_t l = 0; l < r.encoder.size(); ++l)
        rows = encoder_layer_fwd(pt, r.encoder[l], rows, ctx ? &ctx->enc[l] : nullptr);
    if (ctx) ctx->enc_out = rows;

    Tensor pooled({1, r.cfg.embed_dim});
    if (r.cfg.pooling == Pooling::cls_token) {
        for (int64_t j = 0; j < r.cfg.embed_dim; ++j) pooled.at(0, j) = rows.at(0, j);
    } else {
        const int64_t n = rows.dim(0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < r.cfg.embed_dim; ++j) pooled.at(0, j) += rows.at(i, j);
        for (double& x : pooled.v) x /= static_cast<double>(rows.dim(0));
    }
    if (ctx) ctx->pooled = pooled;
    Tensor logits = linear_fwd(pt, r.head, pooled);
    logits.shape = {r.cfg.num_experts};
    return logits;
}

void router_backward(const ParamTable& pt, const RouterNet& r, const RouterRowCtx& ctx,
                     const Tensor& glogits, Grads& grads) {
    Tensor gl = glogits;
    gl.shape = {1, r.cfg.num_experts};
    Tensor gpooled = linear_bwd(pt, r.head, ctx.pooled, gl, grads);
    const int64_t n = ctx.enc_out.dim(0);
    Tensor grows({n, r.cfg.embed_dim});
    if (r.cfg.pooling == Pooling::cls_token) {
        for (int64_t j = 0; j < r.cfg.embed_dim; ++j) grows.at(0, j) = gpooled.at(0, j);
    } else {
        const double inv = 1.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < r.cfg.embed_dim; ++j) grows.at(i, j) = gpooled.at(0, j) * inv;
    }
    for (size_t l = r.encoder.size(); l-- > 0;)
        grows = encoder_layer_bwd(pt, r.encoder[l], ctx.enc[l], grows, grads);

    Tensor gemb;
    if (r.cfg.pooling == Pooling::cls_token) {
        Tensor& gcls = grads.g[static_cast<size_t>(r.cls)];
        for (int64_t j = 0; j < r.cfg.embed_dim; ++j) gcls.at(0, j) += grows.at(0, j);
        gemb = Tensor({n - 1, r.cfg.embed_dim});
        std::copy(grows.v.begin() + static_cast<size_t>(r.cfg.embed_dim), grows.v.end(),
                  gemb.v.begin());
    } else {
        gemb = std::move(grows);
    }
    linear_bwd(pt, r.embed, ctx.tokens_raw, gemb, grads);
}

Tensor probs_from_logits(const Tensor& logits, const PriorSpec& prior, double eps,
                         int64_t patch_period) {
    const int64_t n = logits.dim(0), m = logits.dim(1);
    prior.validate(static_cast<int>(m));
    if (prior.mode == PriorMode::none) return softmax_rows(logits);
    const double msum = eps * static_cast<double>(m);
    Tensor probs({n, m});
    for (int64_t r = 0; r < n; ++r) {
        const int64_t patch = patch_period > 0 ? r % patch_period : r;
        const std::vector<double> w = prior.weights_for(patch, static_cast<int>(m));
        if (prior.mode == PriorMode::soft) {
            const std::vector<double> q = prior.smoothed(static_cast<int>(m), eps, patch);
            double mx = -1e300;
            for (int64_t j = 0; j < m; ++j)
                mx = std::max(mx, logits.at(r, j) + std::log(q[static_cast<size_t>(j)]));
            double sum = 0.0;
            for (int64_t j = 0; j < m; ++j) {
                probs.at(r, j) =
                    std::exp(logits.at(r, j) + std::log(q[static_cast<size_t>(j)]) - mx);
                sum += probs.at(r, j);
            }
            for (int64_t j = 0; j < m; ++j) probs.at(r, j) /= sum;
            continue;
        }
        // hard: the prior enters the output directly; experts outside the
        // support keep exactly the smoothing floor regardless of logits.
        double mx = -1e300;
        for (int64_t j = 0; j < m; ++j)
            if (w[static_cast<size_t>(j)] > 0.0)
                mx = std::max(mx, logits.at(r, j) + std::log(w[static_cast<size_t>(j)]));
        double sum = 0.0;
        for (int64_t j = 0; j < m; ++j) {
            if (w[static_cast<size_t>(j)] > 0.0) {
                const double z =
                    std::exp(logits.at(r, j) + std::log(w[static_cast<size_t>(j)]) - mx);
                probs.at(r, j) = z;
                sum += z;
            }
        }
        for (int64_t j = 0; j < m; ++j) {
            const double masked_softmax =
                w[static_cast<size_t>(j)] > 0.0 ? probs.at(r, j) / sum : 0.0;
            probs.at(r, j) = (1.0 - msum) * masked_softmax + eps;
        }
    }
    return probs;
}

Tensor probs_backward(const Tensor& probs, const Tensor& gprobs, const PriorSpec& prior,
                      double eps, int64_t patch_period) {
    const int64_t n = probs.dim(0), m = probs.dim(1);
    if (prior.mode != PriorMode::hard) {
        // softmax with a constant additive shift; gradient is plain softmax'.
        return softmax_rows_bwd(probs, gprobs);
    }
    // probs = (1 - eps*M) * s + eps on the support, eps outside it, where s is
    // the masked softmax. Recover s, apply softmax' on the support, rescale.
    Tensor gx({n, m});
    const double scale = 1.0 - eps * static_cast<double>(m);
    for (int64_t r = 0; r < n; ++r) {
        const std::vector<double> w =
            prior.weights_for(patch_period > 0 ? r % patch_period : r, static_cast<int>(m));
        double dot = 0.0;
        for (int64_t j = 0; j < m; ++j) {
            if (w[static_cast<size_t>(j)] <= 0.0) continue;
            const double s = (probs.at(r, j) - eps) / scale;
            dot += gprobs.at(r, j) * s;
        }
        for (int64_t j = 0; j < m; ++j) {
            if (w[static_cast<size_t>(j)] <= 0.0) {
                gx.at(r, j) = 0.0;
                continue;
            }
            const double s = (probs.at(r, j) - eps) / scale;
            gx.at(r, j) = scale * s * (gprobs.at(r, j) - dot);
        }
    }
    return gx;
}

RoutingOutput route(const ParamTable& pt, const RouterNet& r, const PatchBatch& patches,
                    const PriorSpec& prior, std::vector<RouterRowCtx>* ctxs) {
    if (!patches.patches.all_finite()) throw ShapeError("route: non-finite patches");
    const int64_t b = patches.patches.dim(0), p = patches.patches.dim(1);
    const int64_t t = patches.patches.dim(2), h = patches.patches.dim(3),
                  w = patches.patches.dim(4);
    const int64_t rows = b * p;
    const int m = r.cfg.num_experts;
    prior.validate(m);
    RoutingOutput out;
    out.logits = Tensor({rows, m});
    if (ctxs) ctxs->resize(static_cast<size_t>(rows));
    Tensor patch({t, h, w});
    for (int64_t row = 0; row < rows; ++row) {
        const double* src = patches.patches.data() + row * t * h * w;
        std::copy(src, src + t * h * w, patch.v.begin());
        Tensor logits =
            router_logits(pt, r, patch, ctxs ? &(*ctxs)[static_cast<size_t>(row)] : nullptr);
        for (int j = 0; j < m; ++j) out.logits.at(row, j) = logits.at(j);
    }
    out.probs = probs_from_logits(out.logits, prior, r.cfg.epsilon_prior, p);
    return out;
}

namespace {

std::vector<int> topk_row(const Tensor& probs, int64_t row, int k) {
    const int64_t m = probs.dim(1);
    std::vector<int> order(static_cast<size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double pa = probs.at(row, a), pb = probs.at(row, b);
        if (pa != pb) return pa > pb;
        return a < b;  // ties to the lower expert index
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace

void select_topk(RoutingOutput& out, int k) {
    const int64_t rows = out.rows();
    const int64_t m = out.num_experts();
    if (k < 1 || k > m) throw ConfigError("select_topk: k out of range 1.." + std::to_string(m));
    out.k = k;
    out.topk_indices.assign(static_cast<size_t>(rows * k), 0);
    out.topk_weights = Tensor({rows, k});
    for (int64_t r = 0; r < rows; ++r) {
        const std::vector<int> sel = topk_row(out.probs, r, k);
        double sum = 0.0;
        for (int j : sel) sum += out.probs.at(r, j);
        for (int i = 0; i < k; ++i) {
            out.topk_indices[static_cast<size_t>(r * k + i)] = sel[static_cast<size_t>(i)];
            out.topk_weights.at(r, i) = out.probs.at(r, sel[static_cast<size_t>(i)]) / sum;
        }
    }
}

Field dispatch(const ParamTable& pt, const PatchBatch& patches, const Ensemble& ens,
               const RoutingOutput& out, DispatchStrategy strategy, int k,
               const ResampleSpec& resample) {
    const int64_t b = patches.patches.dim(0), p = patches.patches.dim(1);
    const int64_t t = patches.patches.dim(2), h = patches.patches.dim(3),
                  w = patches.patches.dim(4);
    const int s = patches.scale;
    const int64_t ph = h / s, pw = w / s;
    const int m = ens.size();
    if (out.rows() != b * p || out.num_experts() != m)
        throw ShapeError("dispatch: routing output does not match patches/ensemble");

    RoutingOutput selected;
    const RoutingOutput* sel = &out;
    if (strategy == DispatchStrategy::topk && out.k != k) {
        selected = out;
        select_topk(selected, k);
        sel = &selected;
    }

    const int64_t tout = ens.out_channels;
    Tensor result({b, tout, ph * s, pw * s});
    Tensor patch({1, t, h, w});
    for (int64_t row = 0; row < b * p; ++row) {
        const int64_t bb = row / p;
        const int pi = PatchBatch::patch_row(static_cast<int>(row % p), s);
        const int pj = PatchBatch::patch_col(static_cast<int>(row % p), s);
        const double* src = patches.patches.data() + row * t * h * w;
        std::copy(src, src + t * h * w, patch.v.begin());

        Tensor combined({1, tout, h, w});
        if (strategy == DispatchStrategy::dense) {
            for (int j = 0; j < m; ++j) {
                const double wj = sel->probs.at(row, j);
                ens.count_call(j);
                Tensor pred = expert_forward(pt, ens.experts[static_cast<size_t>(j)], patch);
                for (int64_t i = 0; i < combined.numel(); ++i) combined.v[i] += wj * pred.v[i];
            }
        } else {
            for (int i = 0; i < sel->k; ++i) {
                const int j = sel->topk_indices[static_cast<size_t>(row * sel->k + i)];
                const double wj = sel->topk_weights.at(row, i);
                ens.count_call(j);
                Tensor pred = expert_forward(pt, ens.experts[static_cast<size_t>(j)], patch);
                for (int64_t i2 = 0; i2 < combined.numel(); ++i2) combined.v[i2] += wj * pred.v[i2];
            }
        }
        Tensor down = downsample(combined, ph, pw, resample);
        for (int64_t tt = 0; tt < tout; ++tt)
            for (int64_t r2 = 0; r2 < ph; ++r2)
                for (int64_t c2 = 0; c2 < pw; ++c2)
                    result.at(bb, tt, pi * ph + r2, pj * pw + c2) = down.at(0, tt, r2, c2);
    }
    return Field(std::move(result), Field::unchecked_tag{});
}

double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] <= 0.0)
            throw std::domain_error("kl_divergence: zero q entry without smoothing");
        acc += p[i] * std::log(p[i] / q[i]);
    }
    return acc;
}

double kl_divergence_row(const Tensor& probs, int64_t row, const std::vector<double>& q) {
    double acc = 0.0;
    const int64_t m = probs.dim(1);
    for (int64_t j = 0; j < m; ++j) {
        const double pj = probs.at(row, j);
        if (pj == 0.0) continue;
        if (q[static_cast<size_t>(j)] <= 0.0)
            throw std::domain_error("kl_divergence: zero q entry without smoothing");
        acc += pj * std::log(pj / q[static_cast<size_t>(j)]);
    }
    return acc;
}

double load_entropy(const Tensor& probs) {
    double acc = 0.0;
    for (double p : probs.v)
        if (p > 0.0) acc -= p * std::log(p);
    return acc;
}

double router_loss(const RoutingOutput& out, const PriorSpec& prior, double eps,
                   double load_weight, int64_t patch_period) {
    const int64_t rows = out.rows();
    double kl = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const std::vector<double> q = prior.smoothed(
            static_cast<int>(out.num_experts()), eps, patch_period > 0 ? r % patch_period : r);
        kl += kl_divergence_row(out.probs, r, q);
    }
    return kl / static_cast<double>(rows) + load_weight * load_entropy(out.probs);
}

}  // namespace m2m
