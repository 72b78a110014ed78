#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "m2m/datagen.hpp"
#include "m2m/errors.hpp"
#include "m2m/evalbench.hpp"
#include "m2m/model.hpp"
#include "m2m/runconfig.hpp"
#include "m2m/svgplot.hpp"
#include "m2m/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

std::string device_from_env() {
    const char* dev = std::getenv("M2M_DEVICE");
    if (!dev || std::string(dev).empty()) return "cpu";
    if (std::string(dev) != "cpu")
        throw m2m::ConfigError("M2M_DEVICE: unsupported device '" + std::string(dev) +
                               "' (this build targets cpu)");
    return dev;
}

json load_raw_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw m2m::ConfigError("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw m2m::ConfigError("config parse error in " + path + ": " + e.what());
    }
    for (const std::string& o : overrides) m2m::apply_override(j, o);
    return j;
}

void write_text(const fs::path& file, const std::string& text) {
    fs::create_directories(file.parent_path());
    std::ofstream os(file);
    if (!os) throw m2m::DataError("cannot write " + file.string());
    os << text;
}

// Every output directory carries enough to rerun the command exactly.
void write_manifest(const fs::path& dir, const std::string& command, const json& resolved_config,
                    const json& extra = json::object()) {
    json manifest = extra;
    manifest["command"] = command;
    manifest["version"] = m2m::kVersion;
    manifest["device"] = device_from_env();
    manifest["config"] = resolved_config;
    write_text(dir / "run_manifest.json", manifest.dump(2) + "\n");
}

m2m::Dataset load_dataset_for(const m2m::RunConfig& cfg, const std::string& explicit_path) {
    const std::string path = explicit_path.empty() ? cfg.dataset_path : explicit_path;
    if (path.empty())
        throw m2m::ConfigError("no dataset path: set dataset.path or pass --data");
    return m2m::load_dataset(path, cfg.kind);
}

int cmd_generate(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_override) {
    m2m::RunConfig cfg = m2m::parse_run_config(load_raw_config(config_path, overrides));
    const fs::path out = out_override.empty() ? fs::path(cfg.dataset_path) : fs::path(out_override);
    if (out.empty()) throw m2m::ConfigError("generate: dataset.path (or --out) is required");
    m2m::Dataset ds;
    switch (cfg.kind) {
        case m2m::DatasetKind::poisson:
            ds = m2m::generate_poisson_dataset(cfg.poisson);
            break;
        case m2m::DatasetKind::ns:
            if (!cfg.ns.generate)
                throw m2m::ConfigError("generate: dataset.ns.source is 'load'");
            ds = m2m::ns_generate(cfg.ns, cfg.ns.n_samples, cfg.ns.seed);
            break;
        case m2m::DatasetKind::cylinder:
            throw m2m::ConfigError(
                "generate: cylinder data is externally produced; only loading is supported");
    }
    ds.manifest["version"] = m2m::kVersion;
    ds.manifest["generator_config"] = m2m::run_config_to_json(cfg);
    m2m::save_dataset(ds, out);
    std::cout << "wrote " << (ds.train.size() + ds.test.size()) << " samples ("
              << ds.train.size() << " train / " << ds.test.size() << " test) to " << out.string()
              << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_override, const std::string& out_override) {
    m2m::RunConfig cfg = m2m::parse_run_config(load_raw_config(config_path, overrides));
    const m2m::Dataset ds = load_dataset_for(cfg, data_override);
    if (!ds.train.empty()) {
        const int64_t t_in = ds.train.front().input.dim(0);
        if (t_in != cfg.model.experts.front().in_channels)
            throw m2m::DataError("train: dataset T_in=" + std::to_string(t_in) +
                                 " does not match the model's in_channels");
    }
    const fs::path out = out_override.empty() ? fs::path(cfg.output_dir) : fs::path(out_override);
    const json resolved = m2m::run_config_to_json(cfg);

    m2m::M2mModel model = m2m::build_model(cfg.model);
    std::cout << "training " << model.num_experts() << " experts, "
              << model.parameter_count() << " parameters, " << cfg.training.epochs
              << " epochs on " << ds.train.size() << " samples\n";
    try {
        const m2m::TrainResult result =
            m2m::train(model, ds, cfg.training, cfg.controller_state(), &out);
        m2m::save_checkpoint(model, out / "checkpoint",
                             {{"final_train_rel_l2", result.log.rows.back().train_rel_l2},
                              {"final_val_rel_l2", result.log.rows.back().val_rel_l2},
                              {"final_train_rmse", result.log.rows.back().train_rmse},
                              {"epochs", cfg.training.epochs},
                              {"seed", cfg.seed}});
        write_manifest(out, "train", resolved);
        const auto& last = result.log.rows.back();
        std::cout << "done: train rel_l2 " << last.train_rel_l2 << ", val rel_l2 "
                  << last.val_rel_l2 << ", lambda " << last.lambda << "\n"
                  << "checkpoint: " << (out / "checkpoint").string() << "\n";
    } catch (const m2m::DivergenceError&) {
        write_manifest(out, "train", resolved, {{"aborted", "divergence"}});
        throw;
    }
    return kExitOk;
}

m2m::BenchRecord eval_checkpoint(const std::string& name, const fs::path& checkpoint,
                                 const m2m::Dataset& ds, bool use_train_split, int repeats,
                                 int warmup) {
    const m2m::M2mModel model = m2m::load_checkpoint(checkpoint);
    const auto& samples = use_train_split ? ds.train : ds.test;
    if (samples.empty()) throw m2m::DataError("eval: selected split is empty");
    const m2m::EvalMetrics metrics = m2m::evaluate_model(
        model, samples, model.cfg.strategy, model.cfg.k, /*load_weight=*/1.0, /*threads=*/0);
    const auto& s0 = samples.front();
    const m2m::TimingResult timing = m2m::time_forward(
        model, {1, s0.input.dim(0), s0.input.dim(1), s0.input.dim(2)}, repeats, warmup);
    m2m::BenchRecord rec;
    rec.model_name = name;
    rec.parameter_count = model.parameter_count();
    rec.forward_ms = timing.median_ms;
    rec.rel_l2 = metrics.rel_l2;
    rec.rmse = metrics.rmse;
    rec.mae = 0.0;
    // mae over the split needs one more pass; reuse predictions would be
    // cheaper but metrics are cheap relative to training.
    {
        double acc = 0.0;
        int64_t cells = 0;
        for (const auto& s : samples) {
            m2m::Tensor in({1, s.input.dim(0), s.input.dim(1), s.input.dim(2)});
            in.v = s.input.v;
            const m2m::Field pred = m2m::predict(model, m2m::Field(std::move(in)));
            for (int64_t i = 0; i < pred.values.numel(); ++i)
                acc += std::fabs(pred.values.v[i] - s.target.v[i]);
            cells += pred.values.numel();
        }
        rec.mae = acc / static_cast<double>(cells);
    }
    return rec;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             const std::string& split, const std::string& out_path, int repeats,
             const std::string& name) {
    const json ckpt_manifest = m2m::read_checkpoint_manifest(checkpoint);
    // Dataset kind comes from the dataset's own manifest.
    std::ifstream is(fs::path(data_path) / "manifest.json");
    if (!is) throw m2m::DataError("eval: missing dataset manifest in " + data_path);
    json ds_manifest;
    is >> ds_manifest;
    const m2m::DatasetKind kind = m2m::dataset_kind_from(ds_manifest.value("kind", ""));
    const m2m::Dataset ds = m2m::load_dataset(data_path, kind);
    const m2m::BenchRecord rec = eval_checkpoint(
        name.empty() ? "checkpoint" : name, checkpoint, ds, split == "train", repeats, 3);
    m2m::ParetoReport report = m2m::pareto_report({rec});
    const std::string csv = m2m::report_csv(report);
    std::cout << csv;
    if (!out_path.empty()) {
        write_text(out_path, csv);
        write_text(fs::path(out_path).replace_extension(".json"),
                   m2m::report_json(report).dump(2) + "\n");
    }
    return kExitOk;
}

int cmd_bench(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_override) {
    m2m::RunConfig cfg = m2m::parse_run_config(load_raw_config(config_path, overrides));
    if (cfg.bench_variants.empty())
        throw m2m::ConfigError("bench: bench.variants must list at least one checkpoint");
    if (cfg.bench_dataset.empty()) throw m2m::ConfigError("bench: bench.dataset is required");
    const m2m::Dataset ds = m2m::load_dataset(cfg.bench_dataset, cfg.kind);
    std::vector<m2m::BenchRecord> records;
    for (const auto& v : cfg.bench_variants) {
        std::cout << "benchmarking " << v.name << "...\n";
        records.push_back(
            eval_checkpoint(v.name, v.checkpoint, ds, false, cfg.bench_repeats, cfg.eval_warmup));
    }
    const m2m::ParetoReport report = m2m::pareto_report(std::move(records));
    const fs::path out = out_override.empty() ? fs::path(cfg.output_dir) : fs::path(out_override);
    write_text(out / "bench_report.csv", m2m::report_csv(report));
    write_text(out / "bench_report.json", m2m::report_json(report).dump(2) + "\n");
    write_manifest(out, "bench", m2m::run_config_to_json(cfg));
    std::cout << m2m::report_csv(report) << "report: " << (out / "bench_report.csv").string()
              << "\n";
    return kExitOk;
}

int cmd_plot(const std::string& report_path, const std::string& run_dir,
             const std::string& out_dir) {
    fs::create_directories(out_dir);
    bool wrote = false;
    if (!report_path.empty()) {
        std::ifstream is(report_path);
        if (!is) throw m2m::DataError("plot: cannot open " + report_path);
        json j;
        is >> j;
        m2m::ParetoReport report;
        report.protocol = j.value("protocol", "");
        for (const auto& r : j.at("records")) {
            m2m::BenchRecord rec;
            rec.model_name = r.at("model").get<std::string>();
            rec.parameter_count = r.value("parameters", 0);
            rec.forward_ms = r.at("forward_ms").get<double>();
            rec.rel_l2 = r.at("rel_l2").get<double>();
            rec.rmse = r.value("rmse", 0.0);
            rec.mae = r.value("mae", 0.0);
            rec.pareto_efficient = r.value("pareto_efficient", false);
            report.records.push_back(rec);
        }
        write_text(fs::path(out_dir) / "pareto.svg", m2m::pareto_svg(report));
        std::cout << "wrote " << (fs::path(out_dir) / "pareto.svg").string() << "\n";
        wrote = true;
    }
    if (!run_dir.empty()) {
        std::ifstream is(fs::path(run_dir) / "router_snapshots.json");
        if (!is) throw m2m::DataError("plot: missing router_snapshots.json in " + run_dir);
        json sidecar;
        is >> sidecar;
        const m2m::RoutingSummary summary = m2m::routing_summary(sidecar);
        const size_t last = summary.per_epoch.size() - 1;
        write_text(fs::path(out_dir) / "router_first_epoch.svg",
                   m2m::router_heatmap_svg(summary.per_epoch.front(), "router weights, epoch 1"));
        write_text(fs::path(out_dir) / "router_last_epoch.svg",
                   m2m::router_heatmap_svg(summary.per_epoch[last],
                                           "router weights, epoch " + std::to_string(last + 1)));
        std::cout << "wrote router heatmaps to " << out_dir << "\n";
        wrote = true;
    }
    if (!wrote) throw m2m::ConfigError("plot: pass --report and/or --run");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"m2m: multi-scale multi-expert neural PDE surrogate toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, checkpoint, split = "test", name,
                report_path, run_dir;
    std::vector<std::string> overrides;
    int repeats = 20;

    auto* gen = app.add_subcommand("generate", "Generate a dataset container");
    gen->add_option("--config", config_path, "Run configuration (json)")->required();
    gen->add_option("--set", overrides, "Override config keys, e.g. dataset.poisson.grid=64");
    gen->add_option("--out", out_path, "Output dataset directory (default: dataset.path)");

    auto* train = app.add_subcommand("train", "Train a model and write checkpoint + run logs");
    train->add_option("--config", config_path, "Run configuration (json)")->required();
    train->add_option("--set", overrides, "Override config keys");
    train->add_option("--data", data_path, "Dataset directory (default: dataset.path)");
    train->add_option("--out", out_path, "Output directory (default: output_dir)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    eval->add_option("--data", data_path, "Dataset directory")->required();
    eval->add_option("--split", split, "Split to evaluate: test|train")
        ->check(CLI::IsMember({"test", "train"}));
    eval->add_option("--out", out_path, "Write the record CSV here (json alongside)");
    eval->add_option("--repeats", repeats, "Timing repeats (>= 20 for reports)");
    eval->add_option("--name", name, "Row name for the record");

    auto* bench = app.add_subcommand("bench", "Pareto report over a checkpoint sweep");
    bench->add_option("--config", config_path, "Run configuration with a bench section")
        ->required();
    bench->add_option("--set", overrides, "Override config keys");
    bench->add_option("--out", out_path, "Output directory (default: output_dir)");

    auto* plot = app.add_subcommand("plot", "Render Pareto scatter / router heatmaps as SVG");
    plot->add_option("--report", report_path, "bench_report.json from the bench command");
    plot->add_option("--run", run_dir, "Training output directory with router_snapshots.json");
    plot->add_option("--out", out_path, "Output directory for SVG files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        device_from_env();
        if (gen->parsed()) return cmd_generate(config_path, overrides, out_path);
        if (train->parsed()) return cmd_train(config_path, overrides, data_path, out_path);
        if (eval->parsed())
            return cmd_eval(checkpoint, data_path, split, out_path, repeats, name);
        if (bench->parsed()) return cmd_bench(config_path, overrides, out_path);
        if (plot->parsed()) return cmd_plot(report_path, run_dir, out_path);
    } catch (const m2m::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const m2m::DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const m2m::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}
