#pragma once

#include <cmath>

namespace m2m {

/// State of the nonlinear PI scheduler producing the router-loss weight
/// lambda(t) from a training-loss feedback signal.
struct ControllerState {
    double lambda = 0.0;      // clamped lambda(t-1)
    double integral = 0.0;    // I(t-1)
    double kp = 0.001;
    double ki = 0.001;
    double lambda_min = 0.0;
    double lambda_max = 1.0;
    double target = 0.0;      // desired loss L-hat

    // Anti-windup bookkeeping: the interiority test uses the pre-clamp lambda
    // of the previous step, and the very first step always integrates
    // (otherwise lambda0 == lambda_min would freeze the integral at start).
    double prev_raw = 0.0;
    bool started = false;

    void validate() const;
    static ControllerState with_lambda0(double lambda0, double kp, double ki, double lambda_min,
                                        double lambda_max, double target);
};

/// Trace of one controller step, in run-log column order.
struct ControllerTrace {
    double loss = 0.0;
    double e = 0.0;
    double p = 0.0;
    double integral = 0.0;
    double lambda = 0.0;
};

/// One step: e = loss - target; P = kp / (1 + exp(e)); the integral
/// accumulates I -= ki*e only while the previous pre-clamp lambda was
/// strictly inside (lambda_min, lambda_max); lambda = clamp(P + I + lambda_min).
ControllerTrace controller_step(ControllerState& state, double loss);

}  // namespace m2m
