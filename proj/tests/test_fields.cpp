#include "m2m/fields.hpp"

#include <map>

#include "doctest.h"
#include "m2m/rng.hpp"
#include "test_util.hpp"

using namespace m2m;
using m2m::testing::random_tensor;

TEST_CASE("field invariants") {
    CHECK_NOTHROW(Field(Tensor({1, 1, 2, 2})));
    CHECK_THROWS_AS(Field(Tensor({1, 1, 1, 4})), ShapeError);
    CHECK_THROWS_AS(Field(Tensor({1, 1, 4, 1})), ShapeError);
    CHECK_THROWS_AS(Field(Tensor({1, 2, 3})), ShapeError);
    Tensor bad({1, 1, 2, 2});
    bad.v[1] = std::nan("");
    CHECK_THROWS_AS(Field(std::move(bad)), ShapeError);
    Field f(Tensor({2, 3, 65, 65}));
    CHECK(f.grid_spacing == doctest::Approx(1.0 / 64.0));
}

TEST_CASE("segment splits 128x128 into four 64x64 quadrants") {
    Rng rng(1);
    Tensor u = random_tensor({1, 1, 128, 128}, rng);
    const auto patches = segment(u, 2);
    REQUIRE(patches.size() == 4);
    for (const Tensor& p : patches) {
        CHECK(p.dim(2) == 64);
        CHECK(p.dim(3) == 64);
    }
    CHECK(patches[0].at(0, 0, 0, 0) == u.at(0, 0, 0, 0));
    CHECK(patches[1].at(0, 0, 0, 0) == u.at(0, 0, 0, 64));
    CHECK(patches[2].at(0, 0, 0, 0) == u.at(0, 0, 64, 0));
    CHECK(patches[3].at(0, 0, 63, 63) == u.at(0, 0, 127, 127));
}

TEST_CASE("segment with scale 1 is the identity") {
    Rng rng(2);
    Tensor u = random_tensor({2, 3, 8, 10}, rng);
    const auto patches = segment(u, 1);
    REQUIRE(patches.size() == 1);
    CHECK(patches[0].v == u.v);
}

TEST_CASE("segment index arithmetic on a 6x6 field at scale 3") {
    // Oracle: enumerate every cell, derive its patch index and local offset.
    Tensor u({1, 1, 6, 6});
    for (int64_t r = 0; r < 6; ++r)
        for (int64_t c = 0; c < 6; ++c) u.at(0, 0, r, c) = static_cast<double>(10 * r + c);
    const auto patches = segment(u, 3);
    REQUIRE(patches.size() == 9);
    for (int64_t r = 0; r < 6; ++r)
        for (int64_t c = 0; c < 6; ++c) {
            const int64_t pi = r / 2, pj = c / 2;
            const int64_t idx = pi * 3 + pj;
            CHECK(patches[static_cast<size_t>(idx)].at(0, 0, r % 2, c % 2) == u.at(0, 0, r, c));
        }
    // Patch 7 = (i=2, j=1) holds rows 4-5, cols 2-3.
    CHECK(patches[7].at(0, 0, 0, 0) == u.at(0, 0, 4, 2));
    CHECK(patches[7].at(0, 0, 1, 1) == u.at(0, 0, 5, 3));
}

TEST_CASE("segment rejects indivisible dimensions") {
    Tensor u({1, 1, 6, 6});
    CHECK_THROWS_AS(segment(u, 4), ShapeError);
    CHECK_THROWS_AS(segment(u, 0), ShapeError);
}

TEST_CASE("partition property: every cell lands in exactly one patch") {
    Rng rng(3);
    for (int s : {1, 2, 4, 8}) {
        Tensor u = random_tensor({1, 2, 16, 16}, rng);
        const auto patches = segment(u, s);
        std::map<double, int> seen;
        for (const Tensor& p : patches)
            for (double v : p.v) seen[v]++;
        int64_t total = 0;
        for (auto& [v, count] : seen) {
            CHECK(count == 1);  // random doubles are unique w.p. 1
            total += count;
        }
        CHECK(total == u.numel());
    }
}

TEST_CASE("interpolate_up preserves constants for both methods") {
    for (auto method : {UpMethod::nearest, UpMethod::bilinear}) {
        ResampleSpec spec{method, DownMethod::area, false};
        Tensor p = Tensor::full({1, 1, 3, 3}, 4.25);
        const Tensor up = interpolate_up(p, 9, 9, spec);
        for (double v : up.v) CHECK(v == 4.25);
    }
}

TEST_CASE("nearest upsampling of a 2x2 patch") {
    Tensor p({1, 1, 2, 2}, {1, 2, 3, 4});
    ResampleSpec spec{UpMethod::nearest, DownMethod::nearest, false};
    const Tensor up = interpolate_up(p, 4, 4, spec);
    const std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    CHECK(up.v == want);
}

TEST_CASE("bilinear upsampling of a ramp stays a ramp") {
    Tensor p({1, 1, 2, 2}, {0, 1, 0, 1});
    ResampleSpec spec{UpMethod::bilinear, DownMethod::area, false};
    const Tensor up = interpolate_up(p, 4, 4, spec);
    for (int64_t r = 0; r < 4; ++r) {
        CHECK(up.at(0, 0, r, 0) == doctest::Approx(0.0));
        CHECK(up.at(0, 0, r, 1) == doctest::Approx(1.0 / 3.0));
        CHECK(up.at(0, 0, r, 2) == doctest::Approx(2.0 / 3.0));
        CHECK(up.at(0, 0, r, 3) == doctest::Approx(1.0));
    }
}

TEST_CASE("interpolation respects mean and min/max bounds") {
    Rng rng(4);
    for (auto method : {UpMethod::nearest, UpMethod::bilinear}) {
        ResampleSpec spec{method, DownMethod::area, false};
        Tensor p = random_tensor({2, 1, 4, 4}, rng);
        const Tensor up = interpolate_up(p, 16, 16, spec);
        double lo = p.v[0], hi = p.v[0], mean_in = 0, mean_out = 0;
        for (double v : p.v) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            mean_in += v;
        }
        for (double v : up.v) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
            mean_out += v;
        }
        mean_in /= static_cast<double>(p.numel());
        mean_out /= static_cast<double>(up.numel());
        CHECK(mean_out == doctest::Approx(mean_in).epsilon(0.15));
    }
}

TEST_CASE("interpolate_up rejects non-multiple targets") {
    Tensor p({1, 1, 3, 3});
    ResampleSpec spec;
    CHECK_THROWS_AS(interpolate_up(p, 7, 9, spec), ShapeError);
    CHECK_THROWS_AS(interpolate_up(p, 9, 2, spec), ShapeError);
}

TEST_CASE("area downsampling computes block means") {
    Tensor f({1, 1, 4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    ResampleSpec spec{UpMethod::bilinear, DownMethod::area, false};
    const Tensor down = downsample(f, 2, 2, spec);
    CHECK(down.v == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("downsample preserves constants and rejects bad targets") {
    ResampleSpec spec;
    Tensor f = Tensor::full({1, 2, 8, 8}, -0.5);
    for (double v : downsample(f, 2, 2, spec).v) CHECK(v == -0.5);
    CHECK_THROWS_AS(downsample(f, 3, 2, spec), ShapeError);
}

TEST_CASE("matched nearest resampling round-trips exactly") {
    Rng rng(5);
    const ResampleSpec spec = ResampleSpec::matched_nearest();
    for (int s : {2, 3, 4}) {
        Tensor p = random_tensor({1, 1, 2, 2}, rng);
        const Tensor up = interpolate_up(p, 2 * s, 2 * s, spec);
        const Tensor back = downsample(up, 2, 2, spec);
        CHECK(back.v == p.v);
    }
    Tensor p = random_tensor({2, 3, 5, 7}, rng);
    const Tensor up = interpolate_up(p, 15, 28, spec);
    CHECK(downsample(up, 5, 7, spec).v == p.v);
}

TEST_CASE("matched spec permits only nearest/nearest") {
    ResampleSpec bad{UpMethod::bilinear, DownMethod::nearest, true};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("aggregate is the exact inverse of segment") {
    Rng rng(6);
    Tensor u = random_tensor({2, 1, 128, 128}, rng);
    for (int s : {1, 2, 4, 8}) {
        const Tensor back = aggregate(segment(u, s), s);
        CHECK(back.v == u.v);
    }
}

TEST_CASE("aggregate tiles constant patches in row-major order") {
    std::vector<Tensor> patches;
    for (int c = 1; c <= 4; ++c) patches.push_back(Tensor::full({1, 1, 2, 2}, c));
    const Tensor out = aggregate(patches, 2);
    CHECK(out.at(0, 0, 0, 0) == 1);
    CHECK(out.at(0, 0, 0, 3) == 2);
    CHECK(out.at(0, 0, 3, 0) == 3);
    CHECK(out.at(0, 0, 3, 3) == 4);
}

TEST_CASE("aggregate validates patch count and shapes") {
    std::vector<Tensor> three(3, Tensor({1, 1, 2, 2}));
    CHECK_THROWS_AS(aggregate(three, 2), ShapeError);
    std::vector<Tensor> bad = {Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 2}),
                               Tensor({1, 1, 2, 3})};
    CHECK_THROWS_AS(aggregate(bad, 2), ShapeError);
    std::vector<Tensor> one = {Tensor::full({1, 1, 2, 2}, 7.0)};
    CHECK(aggregate(one, 1).v == one[0].v);
}

TEST_CASE("patch layout index map is a row-major bijection") {
    for (int s : {1, 2, 3, 8}) {
        std::vector<bool> hit(static_cast<size_t>(s) * s, false);
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < s; ++j) {
                const int p = PatchBatch::patch_index(i, j, s);
                REQUIRE(p >= 0);
                REQUIRE(p < s * s);
                CHECK(!hit[static_cast<size_t>(p)]);
                hit[static_cast<size_t>(p)] = true;
                CHECK(PatchBatch::patch_row(p, s) == i);
                CHECK(PatchBatch::patch_col(p, s) == j);
            }
    }
}

TEST_CASE("segment_and_upsample produces [B,S^2,T,H,W] with identity at scale 1") {
    Rng rng(7);
    Field f(random_tensor({2, 3, 8, 8}, rng));
    const PatchBatch pb = segment_and_upsample(f, 2, ResampleSpec::matched_nearest());
    CHECK(pb.patches.shape == std::vector<int64_t>{2, 4, 3, 8, 8});
    const PatchBatch id = segment_and_upsample(f, 1, ResampleSpec::matched_nearest());
    CHECK(id.patches.shape == std::vector<int64_t>{2, 1, 3, 8, 8});
    for (int64_t i = 0; i < f.values.numel() / 2; ++i) CHECK(id.patches.v[i] == f.values.v[i]);
}
