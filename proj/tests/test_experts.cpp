#include "m2m/experts.hpp"

#include <cmath>
#include <complex>

#include "doctest.h"
#include "m2m/fft.hpp"
#include "test_util.hpp"

using namespace m2m;
using namespace m2m::testing;

namespace {

ExpertSpec mini_spec(int modes, int hidden = 4, int layers = 2) {
    ExpertSpec s;
    s.modes = modes;
    s.hidden_channels = hidden;
    s.num_layers = layers;
    s.in_channels = 1;
    s.out_channels = 1;
    return s;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.v) m = std::max(m, std::fabs(v));
    return m;
}

}  // namespace

TEST_CASE("expert forward preserves spatial shape") {
    ParamTable pt;
    const FnoExpert e = make_expert(pt, "e", mini_spec(4, 6, 4), 1);
    Rng rng(31);
    const Tensor x = random_tensor({1, 1, 64, 64}, rng);
    const Tensor y = expert_forward(pt, e, x);
    CHECK(y.shape == std::vector<int64_t>{1, 1, 64, 64});
    CHECK_THROWS_AS(expert_forward(pt, e, Tensor({1, 2, 8, 8})), ShapeError);
}

TEST_CASE("expert with all weights zero returns zero") {
    ParamTable pt;
    const FnoExpert e = make_expert(pt, "e", mini_spec(3), 2);
    for (Tensor& t : pt.values) std::fill(t.v.begin(), t.v.end(), 0.0);
    Rng rng(32);
    const Tensor y = expert_forward(pt, e, random_tensor({1, 1, 8, 8}, rng));
    CHECK(max_abs(y) == 0.0);
}

TEST_CASE("expert evaluation is deterministic") {
    ParamTable pt;
    const FnoExpert e = make_expert(pt, "e", mini_spec(4), 3);
    Rng rng(33);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng);
    const Tensor y1 = expert_forward(pt, e, x);
    const Tensor y2 = expert_forward(pt, e, x);
    CHECK(y1.v == y2.v);
}

TEST_CASE("spectral path is band-limited with the pointwise path zeroed") {
    ParamTable pt;
    ExpertSpec spec = mini_spec(4, 3, 3);
    const FnoExpert e = make_expert(pt, "e", spec, 4);
    // Zero the pointwise bypass and the biases so only the spectral path and
    // channel-mixing lifting/projection remain.
    for (size_t i = 0; i < pt.size(); ++i) {
        const std::string& n = pt.names[i];
        if (n.find("pointwise") != std::string::npos || n.find(".b") == n.size() - 2)
            std::fill(pt.values[i].v.begin(), pt.values[i].v.end(), 0.0);
    }
    Rng rng(34);
    const int64_t h = 16, w = 16;
    const Tensor x = random_tensor({1, 1, h, w}, rng);
    const Tensor y = expert_forward(pt, e, x);
    // FFT oracle: no output frequency may have both |kx| and |ky| >= modes.
    CVec spec_out(static_cast<size_t>(h) * fft::half_w(static_cast<int>(w)));
    fft::r2c(static_cast<int>(h), static_cast<int>(w), y.data(), spec_out.data());
    double in_band = 0.0, out_band = 0.0;
    for (int a = 0; a < h; ++a) {
        const int ka = std::min(a, static_cast<int>(h) - a);
        for (int b = 0; b < fft::half_w(static_cast<int>(w)); ++b) {
            const double mag = std::abs(spec_out[static_cast<size_t>(a) * fft::half_w(16) + b]);
            if (ka >= spec.modes && b >= spec.modes)
                out_band = std::max(out_band, mag);
            else
                in_band = std::max(in_band, mag);
        }
    }
    CHECK(out_band < 1e-6 * std::max(in_band, 1e-30));
}

TEST_CASE("expert parameter gradients match finite differences at 64-bit") {
    // Miniature instance: 2 layers, modes 2, 8x8.
    ParamTable pt;
    const FnoExpert e = make_expert(pt, "e", mini_spec(2, 3, 2), 5);
    Rng rng(35);
    Tensor x = random_tensor({1, 1, 8, 8}, rng);
    auto loss = [&]() { return sin_sum(expert_forward(pt, e, x)); };
    FnoExpertCtx ctx;
    const Tensor y = expert_forward(pt, e, x, &ctx);
    Grads grads(pt);
    const Tensor gx = expert_backward(pt, e, ctx, sin_sum_grad(y), grads);
    const auto rep = fd_check_params(pt, e.param_indices, loss, grads, 1e-6);
    CHECK(rep.rel_err < 1e-4);
    CHECK(fd_check_input(x, loss, gx, 1e-6).rel_err < 1e-4);
}

TEST_CASE("build_ensemble keeps order and independent initializations") {
    ParamTable pt;
    std::vector<ExpertSpec> specs(2, mini_spec(3));
    const Ensemble ens = build_ensemble(pt, specs, 99);
    REQUIRE(ens.size() == 2);
    // Duplicate specs must be distinct parameter instances.
    const Tensor& w0 = pt.values[static_cast<size_t>(ens.experts[0].spectral[0].w_re)];
    const Tensor& w1 = pt.values[static_cast<size_t>(ens.experts[1].spectral[0].w_re)];
    CHECK(w0.v != w1.v);
    CHECK(pt.names[static_cast<size_t>(ens.experts[0].param_indices[0])].substr(0, 7) ==
          "expert0");
    CHECK(pt.names[static_cast<size_t>(ens.experts[1].param_indices[0])].substr(0, 7) ==
          "expert1");
}

TEST_CASE("build_ensemble default paper ensemble has four experts") {
    ParamTable pt;
    std::vector<ExpertSpec> specs;
    for (int m : {32, 128, 64, 16}) {
        ExpertSpec s = mini_spec(m, 6, 4);
        specs.push_back(s);
    }
    const Ensemble ens = build_ensemble(pt, specs, 7);
    CHECK(ens.size() == 4);
    CHECK(ens.experts[0].spec.modes == 32);
    CHECK(ens.experts[3].spec.modes == 16);
}

TEST_CASE("build_ensemble rejects inconsistent channel counts and a single spec is fine") {
    ParamTable pt;
    ExpertSpec a = mini_spec(3);
    ExpertSpec b = mini_spec(3);
    b.out_channels = 2;
    CHECK_THROWS_AS(build_ensemble(pt, {a, b}, 1), ConfigError);
    ParamTable pt2;
    CHECK(build_ensemble(pt2, {a}, 1).size() == 1);
    ParamTable pt3;
    CHECK_THROWS_AS(build_ensemble(pt3, {}, 1), ConfigError);
}

TEST_CASE("count_params of FNO_16 at hidden 6 lies in the published band") {
    ParamTable pt;
    ExpertSpec s = mini_spec(16, 6, 4);
    const FnoExpert e = make_expert(pt, "e", s, 1);
    const int64_t n = count_params(pt, e);
    CHECK(n >= 20000);   // 0.02M
    CHECK(n <= 100000);  // 0.10M
}

TEST_CASE("zero-layer spec is rejected at build time") {
    ParamTable pt;
    ExpertSpec s = mini_spec(4);
    s.num_layers = 0;
    CHECK_THROWS_AS(make_expert(pt, "e", s, 1), ConfigError);
    s.num_layers = 2;
    s.hidden_channels = 0;
    CHECK_THROWS_AS(make_expert(pt, "e", s, 1), ConfigError);
}

TEST_CASE("doubling modes quadruples the spectral weight count") {
    // Parameter counts are quadratic in modes: the second difference ratio of
    // counts at modes 4, 8, 16 is exactly 4.
    auto count_at = [](int modes) {
        ParamTable pt;
        const FnoExpert e = make_expert(pt, "e", mini_spec(modes, 6, 4), 1);
        return count_params(pt, e);
    };
    const int64_t c4 = count_at(4), c8 = count_at(8), c16 = count_at(16);
    CHECK((c16 - c8) % (c8 - c4) == 0);
    CHECK((c16 - c8) / (c8 - c4) == 4);
}
