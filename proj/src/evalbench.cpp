#include "m2m/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "m2m/errors.hpp"
#include "m2m/rng.hpp"

namespace m2m {

double relative_l2(const Tensor& pred, const Tensor& truth) {
    require_same_shape(pred, truth, "relative_l2");
    if (pred.rank() < 1) throw ShapeError("relative_l2: scalar input");
    const int64_t b = pred.dim(0);
    const int64_t per = pred.numel() / b;
    double acc = 0.0;
    for (int64_t s = 0; s < b; ++s) {
        double num = 0.0, den = 0.0;
        const double* pp = pred.data() + s * per;
        const double* tt = truth.data() + s * per;
        for (int64_t i = 0; i < per; ++i) {
            const double d = pp[i] - tt[i];
            num += d * d;
            den += tt[i] * tt[i];
        }
        if (den <= 0.0) throw std::domain_error("relative_l2: zero-norm truth");
        acc += std::sqrt(num) / std::sqrt(den);
    }
    return acc / static_cast<double>(b);
}

double relative_l2(const Field& pred, const Field& truth) {
    return relative_l2(pred.values, truth.values);
}

double rmse(const Tensor& pred, const Tensor& truth) {
    require_same_shape(pred, truth, "rmse");
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.v[i] - truth.v[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(pred.numel()));
}

double mae(const Tensor& pred, const Tensor& truth) {
    require_same_shape(pred, truth, "mae");
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) acc += std::fabs(pred.v[i] - truth.v[i]);
    return acc / static_cast<double>(pred.numel());
}

TimingResult time_forward(const M2mModel& model, const std::vector<int64_t>& sample_shape,
                          int repeats, int warmup) {
    if (repeats < 1) throw ConfigError("time_forward: repeats must be >= 1");
    if (sample_shape.size() != 4) throw ShapeError("time_forward: expected [B,T,H,W]");
    Tensor input(sample_shape);
    Rng rng(12345);
    for (double& x : input.v) x = rng.uniform(-1.0, 1.0);
    const Field field(std::move(input));
    for (int i = 0; i < warmup; ++i) (void)predict(model, field);
    std::vector<double> ms(static_cast<size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)predict(model, field);
        const auto t1 = std::chrono::steady_clock::now();
        ms[static_cast<size_t>(i)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::sort(ms.begin(), ms.end());
    TimingResult r;
    r.repeats = repeats;
    r.warmup = warmup;
    r.device = "cpu";
    r.median_ms = repeats % 2 == 1 ? ms[static_cast<size_t>(repeats / 2)]
                                   : 0.5 * (ms[static_cast<size_t>(repeats / 2 - 1)] +
                                            ms[static_cast<size_t>(repeats / 2)]);
    return r;
}

std::vector<bool> pareto_flags(const std::vector<BenchRecord>& records) {
    // Sweep in time order, tracking the best error seen at strictly smaller
    // times; within a time group only a strictly better error dominates.
    const size_t n = records.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (records[a].forward_ms != records[b].forward_ms)
            return records[a].forward_ms < records[b].forward_ms;
        return records[a].rel_l2 < records[b].rel_l2;
    });
    std::vector<bool> efficient(n, true);
    double best_prev = std::numeric_limits<double>::infinity();  // over strictly earlier times
    size_t g = 0;
    while (g < n) {
        size_t g_end = g;
        while (g_end < n &&
               records[order[g_end]].forward_ms == records[order[g]].forward_ms)
            ++g_end;
        const double group_min = records[order[g]].rel_l2;
        for (size_t i = g; i < g_end; ++i) {
            const BenchRecord& r = records[order[i]];
            if (best_prev <= r.rel_l2 || group_min < r.rel_l2) efficient[order[i]] = false;
        }
        best_prev = std::min(best_prev, group_min);
        g = g_end;
    }
    return efficient;
}

ParetoReport pareto_report(std::vector<BenchRecord> records, const std::string& protocol) {
    if (records.empty()) throw ConfigError("pareto_report: at least one record required");
    const std::vector<bool> flags = pareto_flags(records);
    for (size_t i = 0; i < records.size(); ++i) records[i].pareto_efficient = flags[i];
    ParetoReport rep;
    rep.records = std::move(records);
    rep.protocol = protocol.empty()
                       ? "median wall-clock of timed repeats after warmup, cpu, data loading and "
                         "host transfers excluded"
                       : protocol;
    return rep;
}

std::string report_csv(const ParetoReport& report) {
    std::ostringstream os;
    os << "model,parameters,forward_ms,rel_l2,rmse,mae,pareto_efficient\n";
    os.precision(10);
    for (const BenchRecord& r : report.records)
        os << r.model_name << ',' << r.parameter_count << ',' << r.forward_ms << ',' << r.rel_l2
           << ',' << r.rmse << ',' << r.mae << ',' << (r.pareto_efficient ? 1 : 0) << '\n';
    return os.str();
}

nlohmann::json report_json(const ParetoReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const BenchRecord& r : report.records)
        rows.push_back({{"model", r.model_name},
                        {"parameters", r.parameter_count},
                        {"forward_ms", r.forward_ms},
                        {"rel_l2", r.rel_l2},
                        {"rmse", r.rmse},
                        {"mae", r.mae},
                        {"pareto_efficient", r.pareto_efficient}});
    return {{"protocol", report.protocol}, {"records", rows}};
}

RoutingSummary routing_summary(const nlohmann::json& sidecar) {
    if (!sidecar.contains("router_probs") || !sidecar["router_probs"].is_array() ||
        sidecar["router_probs"].empty())
        throw DataError("routing_summary: run log contains no router probability snapshots");
    RoutingSummary summary;
    for (const auto& mat : sidecar["router_probs"]) {
        const int64_t p = static_cast<int64_t>(mat.size());
        const int64_t m = static_cast<int64_t>(mat.at(0).size());
        Tensor t({p, m});
        std::vector<int> arg(static_cast<size_t>(p), 0);
        for (int64_t i = 0; i < p; ++i) {
            double best = -1.0;
            for (int64_t j = 0; j < m; ++j) {
                const double v = mat.at(static_cast<size_t>(i)).at(static_cast<size_t>(j)).get<double>();
                t.at(i, j) = v;
                if (v > best) {
                    best = v;
                    arg[static_cast<size_t>(i)] = static_cast<int>(j);
                }
            }
        }
        summary.per_epoch.push_back(std::move(t));
        summary.argmax.push_back(std::move(arg));
    }
    return summary;
}

}  // namespace m2m
