#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/controller.hpp"
#include "m2m/datagen.hpp"
#include "m2m/model.hpp"
#include "m2m/training.hpp"

namespace m2m {

inline constexpr const char* kVersion = "0.1.0";

/// The single configuration surface binding all modules. Parsing is strict:
/// unknown keys are rejected, defaults depend on the dataset kind (poisson /
/// cylinder use the custom-dataset defaults, ns its own), and the resolved
/// form round-trips bit-for-bit through to_json/parse.
struct RunConfig {
    uint64_t seed = 0;
    std::string output_dir = "m2m_out";
    DatasetKind kind = DatasetKind::poisson;
    std::string dataset_path;
    PoissonConfig poisson;
    NsConfig ns;
    ModelConfig model;
    TrainConfig training;

    // Controller init (Algorithm init line).
    bool controller_enabled = true;
    double lambda0 = 0.0;
    double kp = 0.001;
    double ki = 0.001;
    double lambda_min = 0.0;
    double lambda_max = 1.0;
    double target = 0.0;

    int eval_repeats = 20;
    int eval_warmup = 3;

    struct BenchVariant {
        std::string name;
        std::string checkpoint;
    };
    std::string bench_dataset;
    std::vector<BenchVariant> bench_variants;
    int bench_repeats = 20;

    ControllerState controller_state() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);
/// Fully-resolved form; parse(to_json(cfg)) yields an identical config.
nlohmann::json run_config_to_json(const RunConfig& cfg);

/// Applies a dotted-path override "a.b.c=value" onto a raw config json.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace m2m
