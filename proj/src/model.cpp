#include "m2m/model.hpp"

#include <fstream>

#include "m2m/container.hpp"
#include "m2m/errors.hpp"

namespace m2m {

namespace {

std::string activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }
Activation activation_from(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw ConfigError("unknown activation '" + s + "'");
}

std::string strategy_name(DispatchStrategy s) {
    return s == DispatchStrategy::topk ? "topk" : "dense";
}
DispatchStrategy strategy_from(const std::string& s) {
    if (s == "topk") return DispatchStrategy::topk;
    if (s == "dense") return DispatchStrategy::dense;
    throw ConfigError("unknown dispatch strategy '" + s + "'");
}

std::string prior_mode_name(PriorMode m) {
    switch (m) {
        case PriorMode::none: return "none";
        case PriorMode::soft: return "soft";
        case PriorMode::hard: return "hard";
    }
    return "?";
}
PriorMode prior_mode_from(const std::string& s) {
    if (s == "none") return PriorMode::none;
    if (s == "soft") return PriorMode::soft;
    if (s == "hard") return PriorMode::hard;
    throw ConfigError("unknown prior mode '" + s + "'");
}

std::string up_name(UpMethod m) { return m == UpMethod::nearest ? "nearest" : "bilinear"; }
UpMethod up_from(const std::string& s) {
    if (s == "nearest") return UpMethod::nearest;
    if (s == "bilinear") return UpMethod::bilinear;
    throw ConfigError("unknown up_method '" + s + "'");
}
std::string down_name(DownMethod m) { return m == DownMethod::nearest ? "nearest" : "area"; }
DownMethod down_from(const std::string& s) {
    if (s == "nearest") return DownMethod::nearest;
    if (s == "area") return DownMethod::area;
    throw ConfigError("unknown down_method '" + s + "'");
}

}  // namespace

void ModelConfig::validate() const {
    if (scale < 1) throw ConfigError("model: scale must be >= 1");
    if (experts.empty()) throw ConfigError("model: at least one expert required");
    for (const ExpertSpec& e : experts) e.validate();
    if (k < 1 || k > static_cast<int>(experts.size()))
        throw ConfigError("model: k must lie in 1..num_experts");
    if (rollout_steps < 1) throw ConfigError("model: rollout_steps must be >= 1");
    resample.validate();
    if (prior.has_per_patch() &&
        prior.per_patch.dim(0) != static_cast<int64_t>(scale) * scale)
        throw ConfigError("model: per-patch prior must have scale^2 rows");
    RouterConfig rc = router;
    rc.num_experts = static_cast<int>(experts.size());
    rc.validate();
    prior.validate(static_cast<int>(experts.size()));
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json experts_j = nlohmann::json::array();
    for (const ExpertSpec& e : experts)
        experts_j.push_back({{"modes", e.modes},
                             {"hidden_channels", e.hidden_channels},
                             {"num_layers", e.num_layers},
                             {"in_channels", e.in_channels},
                             {"out_channels", e.out_channels},
                             {"activation", activation_name(e.activation)}});
    return {{"scale", scale},
            {"experts", experts_j},
            {"router",
             {{"embed_dim", router.embed_dim},
              {"num_heads", router.num_heads},
              {"num_layers", router.num_layers},
              {"pooling", router.pooling == Pooling::mean ? "mean" : "cls-token"},
              {"epsilon_prior", router.epsilon_prior},
              {"pool_size", router.pool_size}}},
            {"prior",
             {{"mode", prior_mode_name(prior.mode)},
              {"weights", prior.weights},
              {"per_patch", prior.per_patch.v},
              {"per_patch_rows", prior.per_patch.numel() > 0 ? prior.per_patch.dim(0) : 0}}},
            {"resample",
             {{"up", up_name(resample.up_method)},
              {"down", down_name(resample.down_method)},
              {"matched", resample.matched}}},
            {"strategy", strategy_name(strategy)},
            {"k", k},
            {"rollout_steps", rollout_steps},
            {"normalize", normalize},
            {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.scale = j.at("scale").get<int>();
    for (const auto& e : j.at("experts")) {
        ExpertSpec spec;
        spec.modes = e.at("modes").get<int>();
        spec.hidden_channels = e.at("hidden_channels").get<int>();
        spec.num_layers = e.at("num_layers").get<int>();
        spec.in_channels = e.at("in_channels").get<int>();
        spec.out_channels = e.at("out_channels").get<int>();
        spec.activation = activation_from(e.at("activation").get<std::string>());
        cfg.experts.push_back(spec);
    }
    const auto& r = j.at("router");
    cfg.router.embed_dim = r.at("embed_dim").get<int>();
    cfg.router.num_heads = r.at("num_heads").get<int>();
    cfg.router.num_layers = r.at("num_layers").get<int>();
    cfg.router.pooling =
        r.at("pooling").get<std::string>() == "mean" ? Pooling::mean : Pooling::cls_token;
    cfg.router.epsilon_prior = r.at("epsilon_prior").get<double>();
    cfg.router.pool_size = r.at("pool_size").get<int>();
    const auto& p = j.at("prior");
    cfg.prior.mode = prior_mode_from(p.at("mode").get<std::string>());
    cfg.prior.weights = p.at("weights").get<std::vector<double>>();
    const auto pp = p.value("per_patch", std::vector<double>{});
    const int64_t pp_rows = p.value("per_patch_rows", static_cast<int64_t>(0));
    if (pp_rows > 0)
        cfg.prior.per_patch =
            Tensor({pp_rows, static_cast<int64_t>(pp.size()) / pp_rows}, pp);
    const auto& rs = j.at("resample");
    cfg.resample.up_method = up_from(rs.at("up").get<std::string>());
    cfg.resample.down_method = down_from(rs.at("down").get<std::string>());
    cfg.resample.matched = rs.at("matched").get<bool>();
    cfg.strategy = strategy_from(j.at("strategy").get<std::string>());
    cfg.k = j.at("k").get<int>();
    cfg.rollout_steps = j.at("rollout_steps").get<int>();
    cfg.normalize = j.value("normalize", true);
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

M2mModel build_model(const ModelConfig& cfg) {
    cfg.validate();
    M2mModel m;
    m.cfg = cfg;
    m.ensemble = build_ensemble(m.params, cfg.experts, cfg.seed);
    RouterConfig rc = cfg.router;
    rc.num_experts = static_cast<int>(cfg.experts.size());
    m.cfg.router = rc;
    m.router = make_router(m.params, rc, derive_seed(cfg.seed, /*stream=*/4));
    return m;
}

namespace {

Field predict_once(const M2mModel& model, const Field& input) {
    Field work = input;
    model.norm.normalize_in(work.values);
    const PatchBatch patches = segment_and_upsample(work, model.cfg.scale, model.cfg.resample);
    RoutingOutput out = route(model.params, model.router, patches, model.cfg.prior);
    if (model.cfg.strategy == DispatchStrategy::topk) select_topk(out, model.cfg.k);
    Field pred = dispatch(model.params, patches, model.ensemble, out, model.cfg.strategy,
                          model.cfg.k, model.cfg.resample);
    model.norm.denormalize_out(pred.values);
    return pred;
}

}  // namespace

Field predict(const M2mModel& model, const Field& input) {
    if (input.tsteps() != model.ensemble.in_channels)
        throw ShapeError("predict: field has T=" + std::to_string(input.tsteps()) +
                         " but the experts take T_in=" + std::to_string(model.ensemble.in_channels));
    Field current = input;
    Field result;
    for (int step = 0; step < model.cfg.rollout_steps; ++step) {
        if (step > 0 && model.ensemble.in_channels != model.ensemble.out_channels)
            throw ShapeError("predict: autoregressive rollout requires T_in == T_out");
        result = predict_once(model, current);
        current = result;
    }
    return result;
}

RoutingOutput route_field(const M2mModel& model, const Field& input) {
    Field work = input;
    model.norm.normalize_in(work.values);
    const PatchBatch patches = segment_and_upsample(work, model.cfg.scale, model.cfg.resample);
    return route(model.params, model.router, patches, model.cfg.prior);
}

void save_checkpoint(const M2mModel& model, const std::filesystem::path& dir,
                     const nlohmann::json& extra) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("save_checkpoint: cannot create " + dir.string());
    std::vector<NamedArray> arrays;
    arrays.reserve(model.params.size());
    for (size_t i = 0; i < model.params.size(); ++i)
        arrays.push_back(NamedArray{model.params.names[i], model.params.values[i].shape, true,
                                    model.params.values[i].v});
    write_container(dir / "weights.bin", arrays);
    nlohmann::json manifest = extra;
    manifest["model"] = model.cfg.to_json();
    manifest["parameter_count"] = model.parameter_count();
    manifest["normalizer"] = {{"active", model.norm.active},
                              {"in_mean", model.norm.in_mean},
                              {"in_std", model.norm.in_std},
                              {"out_mean", model.norm.out_mean},
                              {"out_std", model.norm.out_std}};
    std::ofstream os(dir / "manifest.json");
    if (!os) throw DataError("save_checkpoint: cannot write manifest");
    os << manifest.dump(2) << "\n";
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw DataError("checkpoint: missing manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: bad manifest: " + std::string(e.what()));
    }
    return manifest;
}

M2mModel load_checkpoint(const std::filesystem::path& dir) {
    const nlohmann::json manifest = read_checkpoint_manifest(dir);
    M2mModel model = build_model(ModelConfig::from_json(manifest.at("model")));
    if (manifest.contains("normalizer")) {
        const auto& n = manifest.at("normalizer");
        model.norm.active = n.value("active", false);
        model.norm.in_mean = n.value("in_mean", 0.0);
        model.norm.in_std = n.value("in_std", 1.0);
        model.norm.out_mean = n.value("out_mean", 0.0);
        model.norm.out_std = n.value("out_std", 1.0);
    }
    const auto arrays = read_container(dir / "weights.bin");
    for (size_t i = 0; i < model.params.size(); ++i) {
        const NamedArray& a = find_array(arrays, model.params.names[i]);
        Tensor& dst = model.params.values[i];
        if (a.shape != dst.shape)
            throw DataError("checkpoint: shape mismatch for '" + model.params.names[i] + "'");
        dst.v = a.data;
    }
    return model;
}

}  // namespace m2m
