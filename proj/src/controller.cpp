#include "m2m/controller.hpp"

#include "m2m/errors.hpp"

namespace m2m {

void ControllerState::validate() const {
    if (!(lambda_min < lambda_max))
        throw ConfigError("controller: lambda_min must be < lambda_max");
    if (!(kp > 0.0)) throw ConfigError("controller: kp must be > 0");
    if (ki < 0.0) throw ConfigError("controller: ki must be >= 0");
    if (!std::isfinite(target)) throw ConfigError("controller: target must be finite");
}

ControllerState ControllerState::with_lambda0(double lambda0, double kp, double ki,
                                              double lambda_min, double lambda_max,
                                              double target) {
    ControllerState s;
    s.kp = kp;
    s.ki = ki;
    s.lambda_min = lambda_min;
    s.lambda_max = lambda_max;
    s.target = target;
    s.validate();
    if (lambda0 < lambda_min || lambda0 > lambda_max)
        throw ConfigError("controller: lambda0 outside [lambda_min, lambda_max]");
    s.lambda = lambda0;
    s.prev_raw = lambda0;
    s.started = false;
    return s;
}

ControllerTrace controller_step(ControllerState& state, double loss) {
    if (!std::isfinite(loss)) throw DivergenceError("controller: non-finite loss");
    const double e = loss - state.target;
    const double p = state.kp / (1.0 + std::exp(e));
    const bool interior =
        !state.started || (state.prev_raw > state.lambda_min && state.prev_raw < state.lambda_max);
    if (interior) state.integral -= state.ki * e;
    const double raw = p + state.integral + state.lambda_min;
    double lambda = raw;
    if (lambda < state.lambda_min) lambda = state.lambda_min;
    if (lambda > state.lambda_max) lambda = state.lambda_max;
    state.prev_raw = raw;
    state.lambda = lambda;
    state.started = true;
    return ControllerTrace{loss, e, p, state.integral, lambda};
}

}  // namespace m2m
