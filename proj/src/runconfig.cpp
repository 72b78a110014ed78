#include "m2m/runconfig.hpp"

#include <fstream>
#include <set>

#include "m2m/errors.hpp"

namespace m2m {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& path) {
    if (!obj.is_object()) throw ConfigError("config: expected object at '" + path + "'");
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) +
                              "'");
}

template <class T>
T get_or(const json& obj, const std::string& key, T def) {
    if (!obj.contains(key)) return def;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value for '" + key + "'");
    }
}

Supervision supervision_from(const std::string& s) {
    if (s == "per_expert") return Supervision::per_expert;
    if (s == "aggregate") return Supervision::aggregate;
    if (s == "per_expert_dense") return Supervision::per_expert_dense;
    throw ConfigError("config: unknown supervision '" + s + "'");
}
std::string supervision_name(Supervision s) {
    switch (s) {
        case Supervision::per_expert: return "per_expert";
        case Supervision::aggregate: return "aggregate";
        case Supervision::per_expert_dense: return "per_expert_dense";
    }
    return "per_expert";
}
Alternation alternation_from(const std::string& s) {
    if (s == "per_epoch") return Alternation::per_epoch;
    if (s == "per_batch") return Alternation::per_batch;
    throw ConfigError("config: unknown alternation '" + s + "'");
}
std::string alternation_name(Alternation a) {
    return a == Alternation::per_epoch ? "per_epoch" : "per_batch";
}
Feedback feedback_from(const std::string& s) {
    if (s == "rmse") return Feedback::rmse;
    if (s == "total_loss") return Feedback::total_loss;
    throw ConfigError("config: unknown feedback '" + s + "'");
}
std::string feedback_name(Feedback f) { return f == Feedback::rmse ? "rmse" : "total_loss"; }
RouterObjective router_objective_from(const std::string& s) {
    if (s == "joint") return RouterObjective::joint;
    if (s == "router_only") return RouterObjective::router_only;
    throw ConfigError("config: unknown router_objective '" + s + "'");
}
std::string router_objective_name(RouterObjective r) {
    return r == RouterObjective::joint ? "joint" : "router_only";
}

}  // namespace

ControllerState RunConfig::controller_state() const {
    return ControllerState::with_lambda0(lambda0, kp, ki, lambda_min, lambda_max, target);
}

RunConfig parse_run_config(const json& j) {
    check_keys(j, {"seed", "output_dir", "dataset", "model", "training", "controller", "eval",
                   "bench"},
               "");
    RunConfig cfg;
    cfg.seed = get_or<uint64_t>(j, "seed", 0);
    cfg.output_dir = get_or<std::string>(j, "output_dir", "m2m_out");

    if (!j.contains("dataset") || !j.at("dataset").contains("kind"))
        throw ConfigError("config: dataset.kind is required");
    const json& dj = j.at("dataset");
    check_keys(dj, {"kind", "path", "poisson", "ns"}, "dataset");
    cfg.kind = dataset_kind_from(dj.at("kind").get<std::string>());
    cfg.dataset_path = get_or<std::string>(dj, "path", "");
    const bool is_ns = cfg.kind == DatasetKind::ns;

    cfg.poisson.seed = cfg.seed;
    if (dj.contains("poisson")) {
        const json& p = dj.at("poisson");
        check_keys(p,
                   {"grid", "block_rows", "block_cols", "mu_mean", "mu_std", "n_samples",
                    "train_split", "high_freq_factor", "seed"},
                   "dataset.poisson");
        cfg.poisson.grid = get_or<int>(p, "grid", cfg.poisson.grid);
        cfg.poisson.block_rows = get_or<int>(p, "block_rows", cfg.poisson.block_rows);
        cfg.poisson.block_cols = get_or<int>(p, "block_cols", cfg.poisson.block_cols);
        cfg.poisson.mu_mean = get_or<double>(p, "mu_mean", cfg.poisson.mu_mean);
        cfg.poisson.mu_std = get_or<double>(p, "mu_std", cfg.poisson.mu_std);
        cfg.poisson.n_samples = get_or<int>(p, "n_samples", cfg.poisson.n_samples);
        cfg.poisson.train_split = get_or<int>(p, "train_split", cfg.poisson.train_split);
        cfg.poisson.high_freq_factor =
            get_or<double>(p, "high_freq_factor", cfg.poisson.high_freq_factor);
        cfg.poisson.seed = get_or<uint64_t>(p, "seed", cfg.seed);
    }
    cfg.ns.seed = cfg.seed;
    if (dj.contains("ns")) {
        const json& p = dj.at("ns");
        check_keys(p,
                   {"grid", "viscosity", "t_in", "t_out", "source", "dt", "record_stride",
                    "warmup", "forcing_amplitude", "n_samples", "seed"},
                   "dataset.ns");
        cfg.ns.grid = get_or<int>(p, "grid", cfg.ns.grid);
        cfg.ns.viscosity = get_or<double>(p, "viscosity", cfg.ns.viscosity);
        cfg.ns.t_in = get_or<int>(p, "t_in", cfg.ns.t_in);
        cfg.ns.t_out = get_or<int>(p, "t_out", cfg.ns.t_out);
        const std::string src = get_or<std::string>(p, "source", "generate");
        if (src != "generate" && src != "load")
            throw ConfigError("config: dataset.ns.source must be generate|load");
        cfg.ns.generate = src == "generate";
        cfg.ns.dt = get_or<double>(p, "dt", cfg.ns.dt);
        cfg.ns.record_stride = get_or<int>(p, "record_stride", cfg.ns.record_stride);
        cfg.ns.warmup = get_or<double>(p, "warmup", cfg.ns.warmup);
        cfg.ns.forcing_amplitude = get_or<double>(p, "forcing_amplitude", cfg.ns.forcing_amplitude);
        cfg.ns.n_samples = get_or<int>(p, "n_samples", cfg.ns.n_samples);
        cfg.ns.seed = get_or<uint64_t>(p, "seed", cfg.seed);
    }

    const int t_in = is_ns ? cfg.ns.t_in : 1;
    const int t_out = is_ns ? cfg.ns.t_out : 1;

    if (!j.contains("model")) throw ConfigError("config: model section is required");
    const json& mj = j.at("model");
    check_keys(mj, {"scale", "experts", "router", "prior", "resample", "strategy", "k",
                    "rollout_steps", "normalize"},
               "model");
    cfg.model.scale = get_or<int>(mj, "scale", 1);
    if (!mj.contains("experts") || !mj.at("experts").is_array() || mj.at("experts").empty())
        throw ConfigError("config: model.experts must be a non-empty array");
    for (const auto& e : mj.at("experts")) {
        check_keys(e, {"modes", "hidden_channels", "num_layers", "activation"}, "model.experts[]");
        ExpertSpec spec;
        if (!e.contains("modes")) throw ConfigError("config: expert entry needs modes");
        spec.modes = e.at("modes").get<int>();
        spec.hidden_channels = get_or<int>(e, "hidden_channels", 6);
        spec.num_layers = get_or<int>(e, "num_layers", 4);
        spec.in_channels = t_in;
        spec.out_channels = t_out;
        const std::string act = get_or<std::string>(e, "activation", "gelu");
        if (act == "gelu")
            spec.activation = Activation::gelu;
        else if (act == "relu")
            spec.activation = Activation::relu;
        else
            throw ConfigError("config: unknown activation '" + act + "'");
        cfg.model.experts.push_back(spec);
    }
    const int m = static_cast<int>(cfg.model.experts.size());
    cfg.model.router.embed_dim = is_ns ? 64 : 128;
    if (mj.contains("router")) {
        const json& r = mj.at("router");
        check_keys(r, {"embed_dim", "num_heads", "num_layers", "pooling", "epsilon_prior",
                       "pool_size"},
                   "model.router");
        cfg.model.router.embed_dim = get_or<int>(r, "embed_dim", cfg.model.router.embed_dim);
        cfg.model.router.num_heads = get_or<int>(r, "num_heads", 4);
        cfg.model.router.num_layers = get_or<int>(r, "num_layers", 2);
        const std::string pool = get_or<std::string>(r, "pooling", "mean");
        if (pool == "mean")
            cfg.model.router.pooling = Pooling::mean;
        else if (pool == "cls-token")
            cfg.model.router.pooling = Pooling::cls_token;
        else
            throw ConfigError("config: unknown pooling '" + pool + "'");
        cfg.model.router.epsilon_prior = get_or<double>(r, "epsilon_prior", 1e-3);
        cfg.model.router.pool_size = get_or<int>(r, "pool_size", 16);
    }
    cfg.model.router.num_experts = m;
    if (mj.contains("prior")) {
        const json& p = mj.at("prior");
        check_keys(p, {"mode", "weights", "per_patch"}, "model.prior");
        const std::string mode = get_or<std::string>(p, "mode", "none");
        if (mode == "none")
            cfg.model.prior.mode = PriorMode::none;
        else if (mode == "soft")
            cfg.model.prior.mode = PriorMode::soft;
        else if (mode == "hard")
            cfg.model.prior.mode = PriorMode::hard;
        else
            throw ConfigError("config: unknown prior mode '" + mode + "'");
        cfg.model.prior.weights = get_or<std::vector<double>>(p, "weights", {});
        if (p.contains("per_patch")) {
            const auto rows = p.at("per_patch");
            if (!rows.is_array() || rows.empty() || !rows.at(0).is_array())
                throw ConfigError("config: model.prior.per_patch must be an array of rows");
            const int64_t nr = static_cast<int64_t>(rows.size());
            const int64_t nc = static_cast<int64_t>(rows.at(0).size());
            Tensor t({nr, nc});
            for (int64_t r = 0; r < nr; ++r)
                for (int64_t c = 0; c < nc; ++c)
                    t.at(r, c) = rows.at(static_cast<size_t>(r)).at(static_cast<size_t>(c)).get<double>();
            cfg.model.prior.per_patch = std::move(t);
        }
    }
    if (mj.contains("resample")) {
        const json& r = mj.at("resample");
        check_keys(r, {"up", "down", "matched"}, "model.resample");
        const std::string up = get_or<std::string>(r, "up", "bilinear");
        const std::string down = get_or<std::string>(r, "down", "area");
        cfg.model.resample.up_method = up == "nearest" ? UpMethod::nearest : UpMethod::bilinear;
        if (up != "nearest" && up != "bilinear")
            throw ConfigError("config: unknown up method '" + up + "'");
        cfg.model.resample.down_method = down == "nearest" ? DownMethod::nearest : DownMethod::area;
        if (down != "nearest" && down != "area")
            throw ConfigError("config: unknown down method '" + down + "'");
        cfg.model.resample.matched = get_or<bool>(r, "matched", false);
    }
    const std::string strat = get_or<std::string>(mj, "strategy", "topk");
    if (strat == "topk")
        cfg.model.strategy = DispatchStrategy::topk;
    else if (strat == "dense")
        cfg.model.strategy = DispatchStrategy::dense;
    else
        throw ConfigError("config: unknown strategy '" + strat + "'");
    cfg.model.k = get_or<int>(mj, "k", std::min(2, m));
    cfg.model.rollout_steps = get_or<int>(mj, "rollout_steps", 1);
    cfg.model.normalize = get_or<bool>(mj, "normalize", true);
    cfg.model.seed = cfg.seed;

    cfg.training.epochs = is_ns ? 200 : 100;
    cfg.training.batch_size = is_ns ? 4 : 8;
    if (j.contains("training")) {
        const json& t = j.at("training");
        check_keys(t,
                   {"epochs", "batch_size", "learning_rate", "optimizer", "supervision",
                    "alternation", "load_weight", "router_objective", "feedback", "threads"},
                   "training");
        cfg.training.epochs = get_or<int>(t, "epochs", cfg.training.epochs);
        cfg.training.batch_size = get_or<int>(t, "batch_size", cfg.training.batch_size);
        cfg.training.learning_rate = get_or<double>(t, "learning_rate", 1e-3);
        const std::string opt = get_or<std::string>(t, "optimizer", "adam");
        if (opt != "adam") throw ConfigError("config: only the adam optimizer is supported");
        cfg.training.supervision =
            supervision_from(get_or<std::string>(t, "supervision", "per_expert"));
        cfg.training.alternation =
            alternation_from(get_or<std::string>(t, "alternation", "per_epoch"));
        cfg.training.load_weight = get_or<double>(t, "load_weight", 1.0);
        cfg.training.router_objective =
            router_objective_from(get_or<std::string>(t, "router_objective", "joint"));
        cfg.training.feedback = feedback_from(get_or<std::string>(t, "feedback", "rmse"));
        cfg.training.threads = get_or<int>(t, "threads", 0);
    }
    cfg.training.strategy = cfg.model.strategy;
    cfg.training.k = cfg.model.k;
    cfg.training.seed = cfg.seed;
    cfg.training.rollout_steps = 1;

    if (j.contains("controller")) {
        const json& c = j.at("controller");
        check_keys(c,
                   {"enabled", "lambda0", "kp", "ki", "lambda_min", "lambda_max", "target",
                    "fixed_lambda"},
                   "controller");
        cfg.controller_enabled = get_or<bool>(c, "enabled", true);
        cfg.lambda0 = get_or<double>(c, "lambda0", 0.0);
        cfg.kp = get_or<double>(c, "kp", 0.001);
        cfg.ki = get_or<double>(c, "ki", 0.001);
        cfg.lambda_min = get_or<double>(c, "lambda_min", 0.0);
        cfg.lambda_max = get_or<double>(c, "lambda_max", 1.0);
        cfg.target = get_or<double>(c, "target", 0.0);
        cfg.training.fixed_lambda = get_or<double>(c, "fixed_lambda", 0.0);
    }
    cfg.training.controller_enabled = cfg.controller_enabled;

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, {"repeats", "warmup"}, "eval");
        cfg.eval_repeats = get_or<int>(e, "repeats", 20);
        cfg.eval_warmup = get_or<int>(e, "warmup", 3);
    }
    if (j.contains("bench")) {
        const json& b = j.at("bench");
        check_keys(b, {"dataset", "variants", "repeats"}, "bench");
        cfg.bench_dataset = get_or<std::string>(b, "dataset", "");
        cfg.bench_repeats = get_or<int>(b, "repeats", 20);
        if (b.contains("variants")) {
            for (const auto& v : b.at("variants")) {
                check_keys(v, {"name", "checkpoint"}, "bench.variants[]");
                cfg.bench_variants.push_back(
                    {v.at("name").get<std::string>(), v.at("checkpoint").get<std::string>()});
            }
        }
    }

    // Validate the assembled pieces eagerly so errors surface at load time.
    cfg.model.validate();
    cfg.training.validate(m);
    cfg.controller_state();
    if (cfg.kind == DatasetKind::poisson) cfg.poisson.validate();
    if (is_ns) cfg.ns.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw ConfigError("config: cannot open " + file.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: parse error in " + file.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    const bool is_ns = cfg.kind == DatasetKind::ns;
    json prior_json = {{"mode", cfg.model.prior.mode == PriorMode::none
                                    ? "none"
                                    : (cfg.model.prior.mode == PriorMode::soft ? "soft" : "hard")},
                       {"weights", cfg.model.prior.weights}};
    if (cfg.model.prior.has_per_patch()) {
        json rows = json::array();
        for (int64_t r = 0; r < cfg.model.prior.per_patch.dim(0); ++r) {
            json row = json::array();
            for (int64_t c = 0; c < cfg.model.prior.per_patch.dim(1); ++c)
                row.push_back(cfg.model.prior.per_patch.at(r, c));
            rows.push_back(row);
        }
        prior_json["per_patch"] = rows;
    }
    json experts = json::array();
    for (const ExpertSpec& e : cfg.model.experts)
        experts.push_back({{"modes", e.modes},
                           {"hidden_channels", e.hidden_channels},
                           {"num_layers", e.num_layers},
                           {"activation", e.activation == Activation::gelu ? "gelu" : "relu"}});
    json j = {
        {"seed", cfg.seed},
        {"output_dir", cfg.output_dir},
        {"dataset",
         {{"kind", dataset_kind_name(cfg.kind)},
          {"path", cfg.dataset_path},
          {"poisson", cfg.poisson.to_json()},
          {"ns", cfg.ns.to_json()}}},
        {"model",
         {{"scale", cfg.model.scale},
          {"experts", experts},
          {"router",
           {{"embed_dim", cfg.model.router.embed_dim},
            {"num_heads", cfg.model.router.num_heads},
            {"num_layers", cfg.model.router.num_layers},
            {"pooling", cfg.model.router.pooling == Pooling::mean ? "mean" : "cls-token"},
            {"epsilon_prior", cfg.model.router.epsilon_prior},
            {"pool_size", cfg.model.router.pool_size}}},
          {"prior", prior_json},
          {"resample",
           {{"up", cfg.model.resample.up_method == UpMethod::nearest ? "nearest" : "bilinear"},
            {"down", cfg.model.resample.down_method == DownMethod::nearest ? "nearest" : "area"},
            {"matched", cfg.model.resample.matched}}},
          {"strategy", cfg.model.strategy == DispatchStrategy::topk ? "topk" : "dense"},
          {"k", cfg.model.k},
          {"rollout_steps", cfg.model.rollout_steps},
          {"normalize", cfg.model.normalize}}},
        {"training",
         {{"epochs", cfg.training.epochs},
          {"batch_size", cfg.training.batch_size},
          {"learning_rate", cfg.training.learning_rate},
          {"optimizer", "adam"},
          {"supervision", supervision_name(cfg.training.supervision)},
          {"alternation", alternation_name(cfg.training.alternation)},
          {"load_weight", cfg.training.load_weight},
          {"router_objective", router_objective_name(cfg.training.router_objective)},
          {"feedback", feedback_name(cfg.training.feedback)},
          {"threads", cfg.training.threads}}},
        {"controller",
         {{"enabled", cfg.controller_enabled},
          {"lambda0", cfg.lambda0},
          {"kp", cfg.kp},
          {"ki", cfg.ki},
          {"lambda_min", cfg.lambda_min},
          {"lambda_max", cfg.lambda_max},
          {"target", cfg.target},
          {"fixed_lambda", cfg.training.fixed_lambda}}},
        {"eval", {{"repeats", cfg.eval_repeats}, {"warmup", cfg.eval_warmup}}}};
    if (!cfg.bench_dataset.empty() || !cfg.bench_variants.empty()) {
        json variants = json::array();
        for (const auto& v : cfg.bench_variants)
            variants.push_back({{"name", v.name}, {"checkpoint", v.checkpoint}});
        j["bench"] = {{"dataset", cfg.bench_dataset},
                      {"variants", variants},
                      {"repeats", cfg.bench_repeats}};
    }
    (void)is_ns;
    return j;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;  // plain string
    }
    nlohmann::json* node = &j;
    size_t start = 0;
    for (;;) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
        if (dot == std::string::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace m2m
