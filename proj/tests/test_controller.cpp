#include "m2m/controller.hpp"

#include <cmath>

#include "doctest.h"
#include "m2m/errors.hpp"
#include "m2m/rng.hpp"

using namespace m2m;

TEST_CASE("proportional term at zero error is kp/2") {
    ControllerState s = ControllerState::with_lambda0(0.5, 0.001, 0.001, 0.0, 1.0, 0.0);
    const ControllerTrace t = controller_step(s, 0.0);
    CHECK(t.p == doctest::Approx(0.0005).epsilon(1e-15));
}

TEST_CASE("worked example: in-bounds step with loss 0.5") {
    // kp = ki = 0.001, bounds [0,1], I = 0, target 0; expected values frozen
    // from a hand evaluation of the update arithmetic.
    ControllerState s = ControllerState::with_lambda0(0.5, 0.001, 0.001, 0.0, 1.0, 0.0);
    s.started = true;  // mid-run, previous lambda strictly inside
    s.prev_raw = 0.5;
    s.integral = 0.0;
    const ControllerTrace t = controller_step(s, 0.5);
    CHECK(std::fabs(t.e - 0.5) < 1e-12);
    CHECK(std::fabs(t.p - 0.00037754066879814544) < 1e-12);
    CHECK(std::fabs(t.integral - (-0.0005)) < 1e-12);
    CHECK(std::fabs(s.prev_raw - (-0.00012245933120185457)) < 1e-12);
    CHECK(t.lambda == 0.0);  // clamped at lambda_min
}

TEST_CASE("anti-windup: integral frozen while lambda sits at a bound") {
    ControllerState s = ControllerState::with_lambda0(1.0, 0.001, 0.001, 0.0, 1.0, 0.0);
    s.started = true;
    s.prev_raw = 1.3;  // previous step saturated above lambda_max
    s.integral = 0.25;
    const ControllerTrace t = controller_step(s, 7.0);
    CHECK(t.integral == 0.25);
    s.prev_raw = -0.2;  // saturated below lambda_min
    const ControllerTrace t2 = controller_step(s, -3.0);
    CHECK(t2.integral == 0.25);
}

TEST_CASE("the very first step always integrates, even from lambda0 = lambda_min") {
    ControllerState s = ControllerState::with_lambda0(0.0, 0.001, 0.001, 0.0, 1.0, 0.0);
    const ControllerTrace t = controller_step(s, -1.0);  // e = -1 -> I increases
    CHECK(t.integral == doctest::Approx(0.001).epsilon(1e-12));
}

TEST_CASE("output bounds hold for arbitrary loss sequences") {
    Rng rng(71);
    ControllerState s = ControllerState::with_lambda0(0.3, 0.05, 0.2, 0.1, 0.9, 0.0);
    for (int i = 0; i < 5000; ++i) {
        const double loss = rng.uniform(-50.0, 50.0);
        const ControllerTrace t = controller_step(s, loss);
        CHECK(t.lambda >= 0.1);
        CHECK(t.lambda <= 0.9);
    }
}

TEST_CASE("P lies in (0, kp) and strictly decreases in e") {
    ControllerState s = ControllerState::with_lambda0(0.5, 0.01, 0.0, 0.0, 1.0, 0.0);
    double prev = 1e9;
    for (double e = -30.0; e <= 30.0; e += 0.25) {
        ControllerState tmp = s;
        const ControllerTrace t = controller_step(tmp, e);  // target 0 -> e == loss
        CHECK(t.p > 0.0);
        CHECK(t.p < 0.01);
        CHECK(t.p < prev);
        prev = t.p;
    }
}

TEST_CASE("anti-windup freeze property over random loss sequences") {
    Rng rng(72);
    for (int trial = 0; trial < 20; ++trial) {
        ControllerState s = ControllerState::with_lambda0(0.0, 0.02, 0.5, 0.0, 1.0, 0.0);
        bool prev_at_bound = false;
        double prev_integral = s.integral;
        for (int i = 0; i < 400; ++i) {
            const ControllerTrace t = controller_step(s, rng.uniform(-4.0, 4.0));
            if (prev_at_bound) CHECK(t.integral == prev_integral);
            prev_at_bound = t.lambda == s.lambda_min || t.lambda == s.lambda_max;
            prev_integral = t.integral;
        }
    }
}

TEST_CASE("closed loop on the synthetic plant keeps loss non-increasing") {
    for (double c : {0.3, 1.0}) {
        ControllerState s = ControllerState::with_lambda0(0.0, 0.001, 0.001, 0.0, 1.0, 0.0);
        double loss = 1.0;
        double prev_loss = loss;
        for (int t = 0; t < 10000; ++t) {
            const ControllerTrace tr = controller_step(s, loss);
            loss = loss - c * tr.lambda * loss;
            CHECK(loss <= prev_loss + 1e-15);
            CHECK(tr.lambda >= 0.0);
            CHECK(tr.lambda <= 1.0);
            prev_loss = loss;
        }
    }
}

TEST_CASE("a step is a pure function of state and loss") {
    ControllerState a = ControllerState::with_lambda0(0.4, 0.01, 0.02, 0.0, 1.0, 0.1);
    a.started = true;
    a.prev_raw = 0.4;
    a.integral = 0.05;
    ControllerState b = a;
    const ControllerTrace ta = controller_step(a, 1.25);
    const ControllerTrace tb = controller_step(b, 1.25);
    CHECK(ta.lambda == tb.lambda);
    CHECK(ta.integral == tb.integral);
    CHECK(a.prev_raw == b.prev_raw);
}

TEST_CASE("validation rejects bad gains, bounds, and non-finite loss") {
    CHECK_THROWS_AS(ControllerState::with_lambda0(0.0, 0.0, 0.001, 0.0, 1.0, 0.0), ConfigError);
    CHECK_THROWS_AS(ControllerState::with_lambda0(0.0, 0.001, -0.1, 0.0, 1.0, 0.0), ConfigError);
    CHECK_THROWS_AS(ControllerState::with_lambda0(0.0, 0.001, 0.001, 1.0, 1.0, 0.0), ConfigError);
    CHECK_THROWS_AS(ControllerState::with_lambda0(2.0, 0.001, 0.001, 0.0, 1.0, 0.0), ConfigError);
    ControllerState s = ControllerState::with_lambda0(0.0, 0.001, 0.001, 0.0, 1.0, 0.0);
    CHECK_THROWS_AS(controller_step(s, std::nan("")), DivergenceError);
}
