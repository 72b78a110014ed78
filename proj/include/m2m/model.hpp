#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/experts.hpp"
#include "m2m/fields.hpp"
#include "m2m/router.hpp"

namespace m2m {

struct ModelConfig {
    int scale = 1;
    std::vector<ExpertSpec> experts;
    RouterConfig router;       // num_experts is filled from the expert list
    PriorSpec prior;
    ResampleSpec resample;
    DispatchStrategy strategy = DispatchStrategy::topk;
    int k = 1;
    int rollout_steps = 1;
    bool normalize = true;     // fit a scalar input/output normalizer at train time
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Scalar affine normalization of the model's input/output spaces, fitted on
/// the training split. The spectral pipeline runs in normalized units;
/// checkpoints carry the statistics, and all reported metrics stay in raw
/// data units.
struct Normalizer {
    bool active = false;
    double in_mean = 0.0, in_std = 1.0;
    double out_mean = 0.0, out_std = 1.0;

    void normalize_in(Tensor& t) const {
        if (!active) return;
        for (double& v : t.v) v = (v - in_mean) / in_std;
    }
    void normalize_out(Tensor& t) const {
        if (!active) return;
        for (double& v : t.v) v = (v - out_mean) / out_std;
    }
    void denormalize_out(Tensor& t) const {
        if (!active) return;
        for (double& v : t.v) v = v * out_std + out_mean;
    }
};

/// The assembled multi-scale multi-expert model: segmentation policy,
/// spectral expert ensemble, gate router and prior, plus the dispatch mode
/// used for prediction.
struct M2mModel {
    ModelConfig cfg;
    ParamTable params;
    Ensemble ensemble;
    RouterNet router;
    Normalizer norm;

    int num_experts() const { return ensemble.size(); }
    int64_t parameter_count() const { return params.total_scalars(); }
};

M2mModel build_model(const ModelConfig& cfg);

/// segment -> interpolate_up -> route -> dispatch -> downsample -> aggregate.
/// With rollout_steps > 1 the output is fed back as the next input
/// (requires T_in == T_out).
Field predict(const M2mModel& model, const Field& input);

/// Routing of a field's patches with the model's prior (eval mode).
RoutingOutput route_field(const M2mModel& model, const Field& input);

/// Checkpoint directory: weights.bin (f64 named arrays) + manifest.json
/// holding the model config and any extra entries supplied by the caller.
void save_checkpoint(const M2mModel& model, const std::filesystem::path& dir,
                     const nlohmann::json& extra = nlohmann::json::object());
M2mModel load_checkpoint(const std::filesystem::path& dir);
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace m2m
