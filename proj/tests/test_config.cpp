#include "m2m/runconfig.hpp"

#include "doctest.h"

using namespace m2m;
using nlohmann::json;

namespace {

json minimal_poisson() {
    return json{{"dataset", {{"kind", "poisson"}}},
                {"model", {{"experts", json::array({{{"modes", 4}}, {{"modes", 8}}})}}}};
}

}  // namespace

TEST_CASE("defaults follow the dataset kind") {
    const RunConfig p = parse_run_config(minimal_poisson());
    CHECK(p.training.epochs == 100);
    CHECK(p.training.batch_size == 8);
    CHECK(p.model.router.embed_dim == 128);
    CHECK(p.model.experts[0].in_channels == 1);
    CHECK(p.kind == DatasetKind::poisson);

    json nsj = minimal_poisson();
    nsj["dataset"]["kind"] = "ns";
    const RunConfig n = parse_run_config(nsj);
    CHECK(n.training.epochs == 200);
    CHECK(n.training.batch_size == 4);
    CHECK(n.model.router.embed_dim == 64);
    CHECK(n.model.experts[0].in_channels == 10);
    CHECK(n.model.experts[0].out_channels == 10);
}

TEST_CASE("unknown keys are rejected at every level") {
    json j = minimal_poisson();
    j["nope"] = 1;
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["model"]["bogus"] = true;
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["dataset"]["poisson"] = {{"grid", 64}, {"typo_key", 3}};
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["model"]["experts"][0]["weird"] = 1;
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
}

TEST_CASE("config round-trips through the resolved form") {
    json j = minimal_poisson();
    j["seed"] = 7;
    j["model"]["scale"] = 2;
    j["model"]["k"] = 2;
    j["controller"] = {{"enabled", false}, {"fixed_lambda", 0.25}};
    const RunConfig a = parse_run_config(j);
    const json ja = run_config_to_json(a);
    const RunConfig b = parse_run_config(ja);
    CHECK(run_config_to_json(b) == ja);
    CHECK(b.seed == 7);
    CHECK(b.training.fixed_lambda == 0.25);
    CHECK_FALSE(b.controller_enabled);
}

TEST_CASE("dotted-path overrides") {
    json j = minimal_poisson();
    apply_override(j, "training.epochs=5");
    apply_override(j, "model.strategy=dense");
    apply_override(j, "dataset.poisson.grid=64");
    apply_override(j, "controller.enabled=false");
    const RunConfig cfg = parse_run_config(j);
    CHECK(cfg.training.epochs == 5);
    CHECK(cfg.model.strategy == DispatchStrategy::dense);
    CHECK(cfg.poisson.grid == 64);
    CHECK_FALSE(cfg.controller_enabled);
    CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
}

TEST_CASE("invalid settings surface as ConfigError at load time") {
    json j = minimal_poisson();
    j["model"]["k"] = 3;  // only 2 experts
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["model"]["router"] = {{"embed_dim", 10}};  // not divisible by 4 heads
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["training"] = {{"optimizer", "sgd"}};
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["controller"] = {{"lambda0", 2.0}};
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    j = minimal_poisson();
    j["dataset"]["kind"] = "wavelets";
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    CHECK_THROWS_AS(load_run_config("/definitely/missing.json"), ConfigError);
}

TEST_CASE("prior and strategy options parse") {
    json j = minimal_poisson();
    j["model"]["experts"] = json::array({{{"modes", 2}}, {{"modes", 2}}, {{"modes", 2}},
                                         {{"modes", 2}}});
    j["model"]["prior"] = {{"mode", "hard"}, {"weights", {0, 1, 0, 0}}};
    j["model"]["strategy"] = "topk";
    j["model"]["k"] = 2;
    const RunConfig cfg = parse_run_config(j);
    CHECK(cfg.model.prior.mode == PriorMode::hard);
    CHECK(cfg.model.prior.weights == std::vector<double>{0, 1, 0, 0});
}
