#include "m2m/experts.hpp"

#include "m2m/errors.hpp"

namespace m2m {

void ExpertSpec::validate() const {
    if (modes < 1) throw ConfigError("ExpertSpec: modes must be >= 1");
    if (hidden_channels < 1) throw ConfigError("ExpertSpec: hidden_channels must be >= 1");
    if (num_layers < 1) throw ConfigError("ExpertSpec: num_layers must be >= 1");
    if (in_channels < 1 || out_channels < 1)
        throw ConfigError("ExpertSpec: channel counts must be >= 1");
}

FnoExpert make_expert(ParamTable& pt, const std::string& name, const ExpertSpec& spec,
                      uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    FnoExpert e;
    e.spec = spec;
    const size_t first = pt.size();
    e.lift = make_pointwise(pt, name + ".lift", spec.in_channels, spec.hidden_channels, rng);
    for (int l = 0; l < spec.num_layers; ++l) {
        const std::string ln = name + ".layer" + std::to_string(l);
        e.spectral.push_back(
            make_spectral(pt, ln + ".spectral", spec.hidden_channels, spec.hidden_channels,
                          spec.modes, rng));
        e.pointwise.push_back(
            make_pointwise(pt, ln + ".pointwise", spec.hidden_channels, spec.hidden_channels, rng));
    }
    e.proj = make_pointwise(pt, name + ".proj", spec.hidden_channels, spec.out_channels, rng);
    for (size_t i = first; i < pt.size(); ++i) e.param_indices.push_back(static_cast<int>(i));
    return e;
}

Tensor expert_forward(const ParamTable& pt, const FnoExpert& e, const Tensor& x,
                      FnoExpertCtx* ctx) {
    if (x.rank() != 4 || x.dim(1) != e.spec.in_channels)
        throw ShapeError("expert_forward: expected [B," + std::to_string(e.spec.in_channels) +
                         ",H,W], got " + x.shape_str());
    if (ctx) {
        ctx->x0 = x;
        ctx->layers.resize(static_cast<size_t>(e.spec.num_layers));
    }
    Tensor h = pointwise_fwd(pt, e.lift, x);
    const int last = e.spec.num_layers - 1;
    for (int l = 0; l <= last; ++l) {
        FnoLayerCtx* lc = ctx ? &ctx->layers[static_cast<size_t>(l)] : nullptr;
        Tensor s = spectral_fwd(pt, e.spectral[static_cast<size_t>(l)], h, lc ? &lc->spectral : nullptr);
        Tensor p = pointwise_fwd(pt, e.pointwise[static_cast<size_t>(l)], h);
        for (int64_t i = 0; i < s.numel(); ++i) s.v[i] += p.v[i];
        if (lc) {
            lc->x = std::move(h);
            lc->pre = s;
        }
        if (l < last) {
            Tensor a(s.shape);
            activation_fwd(e.spec.activation, s, a);
            h = std::move(a);
        } else {
            h = std::move(s);
        }
    }
    if (ctx) ctx->last = h;
    return pointwise_fwd(pt, e.proj, h);
}

Tensor expert_backward(const ParamTable& pt, const FnoExpert& e, const FnoExpertCtx& ctx,
                       const Tensor& gy, Grads& grads) {
    Tensor gh = pointwise_bwd(pt, e.proj, ctx.last, gy, grads);
    const int last = e.spec.num_layers - 1;
    for (int l = last; l >= 0; --l) {
        const FnoLayerCtx& lc = ctx.layers[static_cast<size_t>(l)];
        Tensor gpre;
        if (l < last) {
            gpre = Tensor(gh.shape);
            activation_bwd(e.spec.activation, lc.pre, gh, gpre);
        } else {
            gpre = std::move(gh);
        }
        Tensor gx = spectral_bwd(pt, e.spectral[static_cast<size_t>(l)], lc.spectral, gpre, grads);
        Tensor gx2 = pointwise_bwd(pt, e.pointwise[static_cast<size_t>(l)], lc.x, gpre, grads);
        for (int64_t i = 0; i < gx.numel(); ++i) gx.v[i] += gx2.v[i];
        gh = std::move(gx);
    }
    return pointwise_bwd(pt, e.lift, ctx.x0, gh, grads);
}

int64_t count_params(const ParamTable& pt, const FnoExpert& e) {
    int64_t n = 0;
    for (int idx : e.param_indices) n += pt.values[static_cast<size_t>(idx)].numel();
    return n;
}

Ensemble build_ensemble(ParamTable& pt, const std::vector<ExpertSpec>& specs, uint64_t seed) {
    if (specs.empty()) throw ConfigError("build_ensemble: at least one expert spec required");
    for (const ExpertSpec& s : specs) {
        s.validate();
        if (s.in_channels != specs.front().in_channels ||
            s.out_channels != specs.front().out_channels)
            throw ConfigError("build_ensemble: all experts must share in/out channel counts");
    }
    Ensemble ens;
    ens.in_channels = specs.front().in_channels;
    ens.out_channels = specs.front().out_channels;
    for (size_t j = 0; j < specs.size(); ++j) {
        ens.experts.push_back(make_expert(pt, "expert" + std::to_string(j), specs[j],
                                          derive_seed(seed, /*stream=*/1, j)));
        for (int idx : ens.experts.back().param_indices) ens.param_indices.push_back(idx);
    }
    ens.calls = std::make_unique<std::atomic<uint64_t>[]>(specs.size());
    ens.reset_calls();
    return ens;
}

}  // namespace m2m
