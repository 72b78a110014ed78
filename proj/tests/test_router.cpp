#include "m2m/router.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace m2m;
using namespace m2m::testing;

namespace {

RouterConfig mini_router_cfg(int m, int embed = 16) {
    RouterConfig c;
    c.embed_dim = embed;
    c.num_heads = 4;
    c.num_layers = 2;
    c.num_experts = m;
    c.pool_size = 4;
    return c;
}

ExpertSpec mini_spec(int modes) {
    ExpertSpec s;
    s.modes = modes;
    s.hidden_channels = 3;
    s.num_layers = 2;
    return s;
}

PatchBatch make_patches(int64_t b, int scale, int64_t t, int64_t h, int64_t w, uint64_t seed) {
    Rng rng(seed);
    PatchBatch pb;
    pb.scale = scale;
    pb.patches = random_tensor({b, static_cast<int64_t>(scale) * scale, t, h, w}, rng);
    return pb;
}

}  // namespace

TEST_CASE("uniform prior and zero logits give uniform rows") {
    Tensor logits({3, 4});
    PriorSpec prior;  // none
    const Tensor p = probs_from_logits(logits, prior, 1e-3);
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t j = 0; j < 4; ++j) CHECK(p.at(r, j) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax of logits (1,2) with uniform prior") {
    Tensor logits({1, 2}, {1.0, 2.0});
    PriorSpec prior;
    const Tensor p = probs_from_logits(logits, prior, 1e-3);
    CHECK(p.at(0, 0) == doctest::Approx(0.2689414213699951).epsilon(1e-9));
    CHECK(p.at(0, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-9));
}

TEST_CASE("hard prior [0,1,0,0] pins expert 1 regardless of logits") {
    PriorSpec prior;
    prior.mode = PriorMode::hard;
    prior.weights = {0.0, 1.0, 0.0, 0.0};
    const double eps = 1e-3;
    Rng rng(41);
    const double bound = -std::log(eps);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits({1, 4});
        for (double& v : logits.v) v = rng.uniform(-bound, bound);
        const Tensor p = probs_from_logits(logits, prior, eps);
        CHECK(p.at(0, 1) >= 1.0 - 3.0 * eps - 1e-12);
        for (int j : {0, 2, 3}) CHECK(p.at(0, j) <= eps * 4.0 + 1e-12);
    }
}

TEST_CASE("simplex property holds for random logits in every prior mode") {
    Rng rng(42);
    for (int mode = 0; mode < 3; ++mode) {
        PriorSpec prior;
        prior.mode = static_cast<PriorMode>(mode);
        if (prior.mode != PriorMode::none) prior.weights = {0.4, 0.1, 0.25, 0.25};
        for (int trial = 0; trial < 25; ++trial) {
            Tensor logits = random_tensor({4, 4}, rng, -8.0, 8.0);
            const Tensor p = probs_from_logits(logits, prior, 1e-3);
            for (int64_t r = 0; r < 4; ++r) {
                double sum = 0.0;
                for (int64_t j = 0; j < 4; ++j) {
                    CHECK(p.at(r, j) >= 0.0);
                    sum += p.at(r, j);
                }
                CHECK(std::fabs(sum - 1.0) < 1e-6);
            }
        }
    }
}

TEST_CASE("adding a uniform prior never changes the argmax or top-k set") {
    Rng rng(43);
    PriorSpec none;
    PriorSpec uniform_soft;
    uniform_soft.mode = PriorMode::soft;
    uniform_soft.weights = {0.25, 0.25, 0.25, 0.25};
    for (int trial = 0; trial < 30; ++trial) {
        Tensor logits = random_tensor({6, 4}, rng, -5.0, 5.0);
        RoutingOutput a, b;
        a.logits = logits;
        a.probs = probs_from_logits(logits, none, 1e-3);
        b.logits = logits;
        b.probs = probs_from_logits(logits, uniform_soft, 1e-3);
        select_topk(a, 2);
        select_topk(b, 2);
        CHECK(a.topk_indices == b.topk_indices);
    }
}

TEST_CASE("select_topk keeps the largest probabilities and renormalizes") {
    RoutingOutput out;
    out.probs = Tensor({1, 4}, {0.5, 0.3, 0.15, 0.05});
    out.logits = Tensor({1, 4});
    select_topk(out, 2);
    CHECK(out.topk_indices == std::vector<int>{0, 1});
    CHECK(out.topk_weights.at(0, 0) == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(out.topk_weights.at(0, 1) == doctest::Approx(0.375).epsilon(1e-12));

    select_topk(out, 1);
    CHECK(out.topk_indices == std::vector<int>{0});
    CHECK(out.topk_weights.at(0, 0) == doctest::Approx(1.0));

    // k = M renormalizes the full row, which is the identity.
    select_topk(out, 4);
    for (int j = 0; j < 4; ++j)
        CHECK(out.topk_weights.at(0, j) == doctest::Approx(out.probs.at(0, j)).epsilon(1e-12));

    CHECK_THROWS_AS(select_topk(out, 0), ConfigError);
    CHECK_THROWS_AS(select_topk(out, 5), ConfigError);
}

TEST_CASE("select_topk breaks ties by lower expert index") {
    RoutingOutput out;
    out.probs = Tensor({1, 4}, {0.25, 0.25, 0.25, 0.25});
    out.logits = Tensor({1, 4});
    select_topk(out, 2);
    CHECK(out.topk_indices == std::vector<int>{0, 1});
}

TEST_CASE("kl divergence basics") {
    CHECK(kl_divergence({0.3, 0.7}, {0.3, 0.7}) == doctest::Approx(0.0));
    CHECK(kl_divergence({1.0, 0.0}, {0.5, 0.5}) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    CHECK_THROWS_AS(kl_divergence({0.5, 0.5}, {1.0, 0.0}), std::domain_error);
    Rng rng(44);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(4), q(4);
        double sp = 0, sq = 0;
        for (int j = 0; j < 4; ++j) {
            p[static_cast<size_t>(j)] = rng.uniform(1e-4, 1.0);
            q[static_cast<size_t>(j)] = rng.uniform(1e-4, 1.0);
            sp += p[static_cast<size_t>(j)];
            sq += q[static_cast<size_t>(j)];
        }
        for (int j = 0; j < 4; ++j) {
            p[static_cast<size_t>(j)] /= sp;
            q[static_cast<size_t>(j)] /= sq;
        }
        CHECK(kl_divergence(p, q) >= -1e-12);
    }
}

TEST_CASE("load entropy values and bounds") {
    CHECK(load_entropy(Tensor({1, 4}, {1.0, 0.0, 0.0, 0.0})) == doctest::Approx(0.0));
    CHECK(load_entropy(Tensor({1, 4}, {0.25, 0.25, 0.25, 0.25})) ==
          doctest::Approx(1.3862943611198906).epsilon(1e-12));
    CHECK(load_entropy(Tensor({1, 4}, {0.5, 0.5, 0.0, 0.0})) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    Rng rng(45);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits = random_tensor({1, 5}, rng, -4.0, 4.0);
        const Tensor p = softmax_rows(logits);
        const double h = load_entropy(p);
        CHECK(h >= 0.0);
        CHECK(h <= std::log(5.0) + 1e-12);
    }
}

TEST_CASE("router_loss of a uniform-matching row is ln M") {
    RoutingOutput out;
    out.probs = Tensor({1, 4}, {0.25, 0.25, 0.25, 0.25});
    out.logits = Tensor({1, 4});
    PriorSpec prior;  // uniform
    CHECK(router_loss(out, prior, 1e-3) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("router_loss of a hard one-hot row is near zero") {
    PriorSpec prior;
    prior.mode = PriorMode::hard;
    prior.weights = {0.0, 1.0, 0.0, 0.0};
    const double eps = 1e-3;
    RoutingOutput out;
    Tensor logits({1, 4});
    out.logits = logits;
    out.probs = probs_from_logits(logits, prior, eps);
    const double loss = router_loss(out, prior, eps);
    CHECK(std::fabs(loss) < 0.05);  // entropy of the eps-smoothed one-hot row
}

TEST_CASE("router_loss stays finite for any simplex probs against a smoothed prior") {
    Rng rng(46);
    PriorSpec prior;
    prior.mode = PriorMode::hard;
    prior.weights = {1.0, 0.0, 0.0, 0.0};
    for (int trial = 0; trial < 20; ++trial) {
        RoutingOutput out;
        out.logits = random_tensor({3, 4}, rng, -30.0, 30.0);
        PriorSpec none;
        out.probs = probs_from_logits(out.logits, none, 1e-3);
        CHECK(std::isfinite(router_loss(out, prior, 1e-3)));
    }
}

TEST_CASE("one-hot rows minimize the entropy term") {
    Rng rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor interior = softmax_rows(random_tensor({1, 4}, rng, -2.0, 2.0));
        Tensor onehot({1, 4});
        onehot.at(0, static_cast<int64_t>(rng.below(4))) = 1.0;
        CHECK(load_entropy(onehot) < load_entropy(interior));
    }
}

TEST_CASE("route produces simplex rows and is deterministic") {
    ParamTable pt;
    const RouterNet r = make_router(pt, mini_router_cfg(3), 51);
    const PatchBatch pb = make_patches(2, 2, 1, 8, 8, 52);
    PriorSpec prior;
    const RoutingOutput a = route(pt, r, pb, prior);
    const RoutingOutput b = route(pt, r, pb, prior);
    CHECK(a.probs.v == b.probs.v);
    CHECK(a.rows() == 8);
    for (int64_t row = 0; row < a.rows(); ++row) {
        double sum = 0.0;
        for (int64_t j = 0; j < 3; ++j) sum += a.probs.at(row, j);
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
    PriorSpec bad;
    bad.mode = PriorMode::hard;
    bad.weights = {1.0, 0.0};  // wrong length
    CHECK_THROWS_AS(route(pt, r, pb, bad), ConfigError);
}

TEST_CASE("dispatch with one expert equals that expert for any strategy") {
    ParamTable pt;
    const Ensemble ens = build_ensemble(pt, {mini_spec(3)}, 53);
    const RouterNet r = make_router(pt, mini_router_cfg(1), 54);
    Rng rng(56);
    Field f(random_tensor({1, 1, 8, 8}, rng));
    const ResampleSpec rs;
    const PatchBatch pb = segment_and_upsample(f, 1, rs);
    const RoutingOutput out = route(pt, r, pb, PriorSpec{});
    const Tensor direct = expert_forward(pt, ens.experts[0], f.values);
    for (auto strategy : {DispatchStrategy::topk, DispatchStrategy::dense}) {
        const Field pred = dispatch(pt, pb, ens, out, strategy, 1, rs);
        CHECK(pred.values.v == direct.v);
    }
}

TEST_CASE("dense dispatch with one-hot probs equals top-1 dispatch") {
    ParamTable pt;
    const Ensemble ens = build_ensemble(pt, {mini_spec(2), mini_spec(3)}, 57);
    Rng rng(58);
    Field f(random_tensor({1, 1, 8, 8}, rng));
    const ResampleSpec rs;
    const PatchBatch pb = segment_and_upsample(f, 2, rs);
    RoutingOutput out;
    out.logits = Tensor({4, 2});
    out.probs = Tensor({4, 2});
    for (int64_t row = 0; row < 4; ++row) out.probs.at(row, row % 2) = 1.0;
    const Field dense = dispatch(pt, pb, ens, out, DispatchStrategy::dense, 1, rs);
    const Field top1 = dispatch(pt, pb, ens, out, DispatchStrategy::topk, 1, rs);
    for (int64_t i = 0; i < dense.values.numel(); ++i)
        CHECK(dense.values.v[i] == doctest::Approx(top1.values.v[i]).epsilon(1e-12));
}

TEST_CASE("top-k dispatch evaluates exactly k experts per patch") {
    ParamTable pt;
    std::vector<ExpertSpec> specs(4, mini_spec(2));
    const Ensemble ens = build_ensemble(pt, specs, 59);
    const RouterNet r = make_router(pt, mini_router_cfg(4), 60);
    Rng rng(61);
    Field f(random_tensor({1, 1, 8, 8}, rng));
    const ResampleSpec rs;
    const PatchBatch pb = segment_and_upsample(f, 2, rs);
    const RoutingOutput out = route(pt, r, pb, PriorSpec{});
    ens.reset_calls();
    (void)dispatch(pt, pb, ens, out, DispatchStrategy::topk, 2, rs);
    uint64_t total = 0;
    for (int j = 0; j < 4; ++j) total += ens.call_count(j);
    CHECK(total == 2 * 4);  // 2 experts x 4 patches
}

TEST_CASE("dense dispatch equals top-M dispatch exactly") {
    ParamTable pt;
    const Ensemble ens = build_ensemble(pt, {mini_spec(2), mini_spec(3), mini_spec(4)}, 62);
    const RouterNet r = make_router(pt, mini_router_cfg(3), 63);
    Rng rng(64);
    Field f(random_tensor({2, 1, 8, 8}, rng));
    const ResampleSpec rs;
    const PatchBatch pb = segment_and_upsample(f, 2, rs);
    const RoutingOutput out = route(pt, r, pb, PriorSpec{});
    const Field dense = dispatch(pt, pb, ens, out, DispatchStrategy::dense, 3, rs);
    const Field topm = dispatch(pt, pb, ens, out, DispatchStrategy::topk, 3, rs);
    for (int64_t i = 0; i < dense.values.numel(); ++i)
        CHECK(dense.values.v[i] == doctest::Approx(topm.values.v[i]).epsilon(1e-12));
}

TEST_CASE("router logits gradients match finite differences") {
    ParamTable pt;
    const RouterNet r = make_router(pt, mini_router_cfg(3, 8), 65);
    Rng rng(66);
    Tensor patch = random_tensor({2, 8, 8}, rng);
    auto loss = [&]() { return sin_sum(router_logits(pt, r, patch, nullptr)); };
    RouterRowCtx ctx;
    const Tensor logits = router_logits(pt, r, patch, &ctx);
    Grads grads(pt);
    router_backward(pt, r, ctx, sin_sum_grad(logits), grads);
    CHECK(fd_check_params(pt, r.param_indices, loss, grads, 1e-6).rel_err < 1e-5);
}

TEST_CASE("cls-token pooling router works and has gradients") {
    ParamTable pt;
    RouterConfig cfg = mini_router_cfg(2, 8);
    cfg.pooling = Pooling::cls_token;
    const RouterNet r = make_router(pt, cfg, 67);
    Rng rng(68);
    Tensor patch = random_tensor({3, 8, 8}, rng);
    auto loss = [&]() { return sin_sum(router_logits(pt, r, patch, nullptr)); };
    RouterRowCtx ctx;
    const Tensor logits = router_logits(pt, r, patch, &ctx);
    CHECK(logits.numel() == 2);
    Grads grads(pt);
    router_backward(pt, r, ctx, sin_sum_grad(logits), grads);
    CHECK(fd_check_params(pt, r.param_indices, loss, grads, 1e-6).rel_err < 1e-5);
}

TEST_CASE("probs_backward matches finite differences in every prior mode") {
    Rng rng(69);
    for (int mode = 0; mode < 3; ++mode) {
        PriorSpec prior;
        prior.mode = static_cast<PriorMode>(mode);
        if (prior.mode != PriorMode::none) prior.weights = {0.5, 0.5, 0.0};
        const double eps = 1e-3;
        Tensor logits = random_tensor({2, 3}, rng, -2.0, 2.0);
        auto loss = [&]() { return sin_sum(probs_from_logits(logits, prior, eps)); };
        const Tensor p = probs_from_logits(logits, prior, eps);
        const Tensor glogits = probs_backward(p, sin_sum_grad(p), prior, eps);
        CHECK(fd_check_input(logits, loss, glogits, 1e-7).rel_err < 1e-6);
    }
}

TEST_CASE("per-patch hard priors pin different experts per patch position") {
    PriorSpec prior;
    prior.mode = PriorMode::hard;
    prior.weights = {1.0, 0.0, 0.0};  // fallback row, unused with per_patch
    prior.per_patch = Tensor({4, 3}, {1, 0, 0,  0, 1, 0,  0, 0, 1,  0, 1, 0});
    Rng rng(75);
    // Two samples (8 rows); rows cycle through the 4 patch positions.
    Tensor logits = random_tensor({8, 3}, rng, -3.0, 3.0);
    const Tensor p = probs_from_logits(logits, prior, 1e-3, /*patch_period=*/4);
    const int want[4] = {0, 1, 2, 1};
    for (int64_t r = 0; r < 8; ++r) {
        int arg = 0;
        double best = -1.0;
        for (int64_t j = 0; j < 3; ++j)
            if (p.at(r, j) > best) {
                best = p.at(r, j);
                arg = static_cast<int>(j);
            }
        CHECK(arg == want[r % 4]);
        CHECK(best >= 1.0 - 3e-3 - 1e-12);
    }
    // Gradients stay consistent with the per-row masks.
    auto loss = [&]() { return sin_sum(probs_from_logits(logits, prior, 1e-3, 4)); };
    const Tensor probs = probs_from_logits(logits, prior, 1e-3, 4);
    const Tensor gl = probs_backward(probs, sin_sum_grad(probs), prior, 1e-3, 4);
    CHECK(fd_check_input(logits, loss, gl, 1e-7).rel_err < 1e-6);
    // Validation: wrong row width rejected.
    PriorSpec bad = prior;
    bad.per_patch = Tensor({4, 2});
    CHECK_THROWS_AS(bad.validate(3), ConfigError);
}

TEST_CASE("router config validation") {
    RouterConfig c = mini_router_cfg(2);
    c.embed_dim = 10;  // not divisible by 4 heads
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = mini_router_cfg(2);
    c.epsilon_prior = 0.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    PriorSpec p;
    p.mode = PriorMode::hard;
    p.weights = {0.0, 0.0};
    CHECK_THROWS_AS(p.validate(2), ConfigError);
}
