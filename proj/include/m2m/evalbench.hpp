#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/fields.hpp"
#include "m2m/model.hpp"

namespace m2m {

/// Mean over batch of per-sample ||pred - truth||_2 / ||truth||_2 (flattened
/// per sample). Throws on zero-norm truth.
double relative_l2(const Field& pred, const Field& truth);
double relative_l2(const Tensor& pred, const Tensor& truth);

double rmse(const Tensor& pred, const Tensor& truth);
double mae(const Tensor& pred, const Tensor& truth);

struct BenchRecord {
    std::string model_name;
    int64_t parameter_count = 0;
    double forward_ms = 0.0;
    double rel_l2 = 0.0;
    double rmse = 0.0;
    double mae = 0.0;
    bool pareto_efficient = false;
};

struct TimingResult {
    double median_ms = 0.0;
    int repeats = 0;
    int warmup = 0;
    std::string device;
};

/// Median wall-clock milliseconds of predict() on a seeded random input of
/// the given [B,T,H,W] shape; timing excludes input construction.
TimingResult time_forward(const M2mModel& model, const std::vector<int64_t>& sample_shape,
                          int repeats, int warmup = 3);

/// Pareto efficiency flags in the (forward_ms, rel_l2) plane: a record is
/// efficient when no other record is at least as good on both axes and
/// strictly better on one.
std::vector<bool> pareto_flags(const std::vector<BenchRecord>& records);

struct ParetoReport {
    std::vector<BenchRecord> records;  // pareto_efficient filled
    std::string protocol;              // measurement protocol description
};

ParetoReport pareto_report(std::vector<BenchRecord> records, const std::string& protocol = "");
std::string report_csv(const ParetoReport& report);
nlohmann::json report_json(const ParetoReport& report);

/// Per-patch expert-weight matrices over epochs, extracted from the
/// router_snapshots.json sidecar of a run.
struct RoutingSummary {
    std::vector<Tensor> per_epoch;              // each [S^2, M]
    std::vector<std::vector<int>> argmax;       // [epochs][S^2]
};
RoutingSummary routing_summary(const nlohmann::json& sidecar);

}  // namespace m2m
