#include "m2m/evalbench.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace m2m;
using m2m::testing::random_tensor;

TEST_CASE("relative_l2 basics") {
    Rng rng(81);
    Tensor truth = random_tensor({2, 1, 4, 4}, rng);
    CHECK(relative_l2(truth, truth) == doctest::Approx(0.0));
    Tensor zero(truth.shape);
    CHECK(relative_l2(zero, truth) == doctest::Approx(1.0).epsilon(1e-12));
    Tensor pred({1, 2}, {1.0, 0.0});
    Tensor t2({1, 2}, {0.0, 1.0});
    CHECK(relative_l2(pred, t2) == doctest::Approx(1.4142135623730951).epsilon(1e-12));
    CHECK_THROWS_AS(relative_l2(pred, Tensor({1, 2})), std::domain_error);
}

TEST_CASE("relative_l2 is invariant under common rescaling") {
    Rng rng(82);
    Tensor pred = random_tensor({3, 2, 4, 4}, rng);
    Tensor truth = random_tensor({3, 2, 4, 4}, rng);
    const double base = relative_l2(pred, truth);
    for (double c : {-3.0, 0.5, 100.0}) {
        Tensor ps = pred, ts = truth;
        for (double& v : ps.v) v *= c;
        for (double& v : ts.v) v *= c;
        CHECK(relative_l2(ps, ts) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("rmse and mae examples and ordering") {
    Tensor a({1, 2}, {0.0, 2.0});
    Tensor b({1, 2}, {0.0, 0.0});
    CHECK(rmse(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    CHECK(mae(a, b) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rmse(a, a) == 0.0);
    CHECK(mae(a, a) == 0.0);
    // Constant offset: rmse == mae == |d|.
    Tensor c = Tensor::full({2, 3}, 1.25);
    Tensor d = Tensor::full({2, 3}, 0.75);
    CHECK(rmse(c, d) == doctest::Approx(0.5));
    CHECK(mae(c, d) == doctest::Approx(0.5));
    Rng rng(83);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({4, 4}, rng);
        Tensor y = random_tensor({4, 4}, rng);
        CHECK(rmse(x, y) >= mae(x, y) - 1e-12);
    }
}

namespace {

BenchRecord rec(const std::string& name, double ms, double l2) {
    BenchRecord r;
    r.model_name = name;
    r.forward_ms = ms;
    r.rel_l2 = l2;
    return r;
}

// Brute-force O(n^2) dominance oracle, independent of the sweep in the
// implementation.
std::vector<bool> brute_force_flags(const std::vector<BenchRecord>& rs) {
    std::vector<bool> eff(rs.size(), true);
    for (size_t i = 0; i < rs.size(); ++i)
        for (size_t j = 0; j < rs.size(); ++j) {
            if (i == j) continue;
            const bool no_worse =
                rs[j].forward_ms <= rs[i].forward_ms && rs[j].rel_l2 <= rs[i].rel_l2;
            const bool strict =
                rs[j].forward_ms < rs[i].forward_ms || rs[j].rel_l2 < rs[i].rel_l2;
            if (no_worse && strict) eff[i] = false;
        }
    return eff;
}

}  // namespace

TEST_CASE("pareto flags: single, dominated, and interior records") {
    CHECK(pareto_flags({rec("a", 1.0, 0.5)}) == std::vector<bool>{true});
    CHECK(pareto_flags({rec("a", 1.0, 0.5), rec("b", 2.0, 0.9)}) ==
          std::vector<bool>{true, false});
    // Three-point frontier with one interior point.
    const auto flags = pareto_flags(
        {rec("fast", 1.0, 0.9), rec("slow", 9.0, 0.1), rec("mid", 5.0, 0.5), rec("bad", 6.0, 0.8)});
    CHECK(flags == std::vector<bool>{true, true, true, false});
    // Duplicates do not dominate each other.
    CHECK(pareto_flags({rec("x", 1.0, 1.0), rec("y", 1.0, 1.0)}) ==
          std::vector<bool>{true, true});
}

TEST_CASE("pareto flags equal the brute-force dominance scan on random records") {
    Rng rng(84);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<BenchRecord> rs;
        const int n = 1 + static_cast<int>(rng.below(12));
        for (int i = 0; i < n; ++i)
            rs.push_back(rec("m" + std::to_string(i), 1.0 + rng.below(5), 0.1 * (1 + rng.below(5))));
        CHECK(pareto_flags(rs) == brute_force_flags(rs));
    }
}

TEST_CASE("pareto_report fills flags and serializes") {
    auto report = pareto_report({rec("a", 1.0, 0.5), rec("b", 2.0, 0.9)});
    CHECK(report.records[0].pareto_efficient);
    CHECK(!report.records[1].pareto_efficient);
    const std::string csv = report_csv(report);
    CHECK(csv.find("model,parameters,forward_ms") == 0);
    const auto j = report_json(report);
    CHECK(j["records"].size() == 2);
    CHECK_THROWS_AS(pareto_report({}), ConfigError);
}

TEST_CASE("routing summary extracts matrices and argmax trajectories") {
    nlohmann::json sidecar;
    sidecar["router_probs"] = {
        {{0.25, 0.25, 0.25, 0.25}, {0.1, 0.7, 0.1, 0.1}},
        {{0.1, 0.2, 0.3, 0.4}, {0.0, 1.0, 0.0, 0.0}},
    };
    const RoutingSummary s = routing_summary(sidecar);
    REQUIRE(s.per_epoch.size() == 2);
    CHECK(s.per_epoch[0].at(0, 0) == doctest::Approx(0.25));
    CHECK(s.argmax[0] == std::vector<int>{0, 1});
    CHECK(s.argmax[1] == std::vector<int>{3, 1});
    CHECK_THROWS_AS(routing_summary(nlohmann::json::object()), DataError);
    // Single-epoch log passes through.
    nlohmann::json one;
    one["router_probs"] = {{{0.5, 0.5}}};
    CHECK(routing_summary(one).per_epoch.size() == 1);
}
