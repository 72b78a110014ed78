#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/controller.hpp"
#include "m2m/datagen.hpp"
#include "m2m/model.hpp"

namespace m2m {

// per_expert restricts each expert's MSE to the patches routed to it;
// per_expert_dense supervises every expert on every patch; aggregate
// supervises the dispatch-weighted prediction.
enum class Supervision { per_expert, aggregate, per_expert_dense };
enum class Alternation { per_epoch, per_batch };
enum class Feedback { rmse, total_loss };
enum class RouterObjective { joint, router_only };

struct TrainConfig {
    int epochs = 100;
    int batch_size = 8;
    double learning_rate = 1e-3;
    DispatchStrategy strategy = DispatchStrategy::topk;
    int k = 2;
    Supervision supervision = Supervision::per_expert;
    Alternation alternation = Alternation::per_epoch;
    uint64_t seed = 0;
    int rollout_steps = 1;
    double load_weight = 1.0;
    RouterObjective router_objective = RouterObjective::joint;
    Feedback feedback = Feedback::rmse;
    int threads = 0;
    bool controller_enabled = true;
    double fixed_lambda = 0.0;  // lambda when the controller is disabled

    void validate(int num_experts) const;
};

struct EpochLog {
    int epoch = 0;
    double train_rmse = 0.0;
    double train_rel_l2 = 0.0;
    double val_rel_l2 = 0.0;
    double lambda = 0.0;
    double e = 0.0;
    double p = 0.0;
    double integral = 0.0;
    double feedback_loss = 0.0;
};

struct RunLog {
    std::vector<EpochLog> rows;
    std::vector<Tensor> snapshots;  // per-epoch mean router probs [S^2, M]

    /// CSV columns: epoch, train_rmse, train_rel_l2, val_rel_l2, lambda, e, P, I
    std::string csv() const;
    /// CSV columns: t, loss, e, P, I, lambda
    std::string controller_csv() const;
    nlohmann::json snapshots_json() const;
};

struct TrainResult {
    RunLog log;
};

struct TrainHooks {
    std::function<void(int epoch, const std::string& phase, const M2mModel&)> after_phase;
};

/// lambda(t) * router_loss + expert_loss.
double total_loss(double router_loss_value, double expert_loss_value, double lambda);

/// Mean squared error over all cells.
double mse(const Tensor& pred, const Tensor& truth);
double expert_loss_aggregate(const Field& pred, const Field& truth);

/// Sum over experts of the mean per-served-patch MSE: pairs[j] lists the
/// (prediction, truth) patch pairs routed to expert j with nonzero weight.
double expert_loss_per_expert(
    const std::vector<std::vector<std::pair<Tensor, Tensor>>>& pairs_by_expert);

/// Joint objective lambda * router_loss + dispatch-weighted expert MSE on one
/// sample, with gradients for every parameter (experts and router). The
/// continuous dispatch weights carry the gradient; the discrete top-k
/// selection itself does not.
double joint_loss_and_grad(const M2mModel& model, const Sample& s, DispatchStrategy strategy,
                           int k, double lambda, double load_weight, Grads& grads);

/// Forward metrics of the current weights over a sample set.
struct EvalMetrics {
    double rmse = 0.0;
    double rel_l2 = 0.0;
    double mse = 0.0;
    double router_loss_mean = 0.0;  // per-sample router loss, batch-averaged
    Tensor mean_probs;              // [S^2, M] averaged over samples
};
EvalMetrics evaluate_model(const M2mModel& model, const std::vector<Sample>& samples,
                           DispatchStrategy strategy, int k, double load_weight, int threads);

/// Alternating optimization: per period, (a) experts update on the expert
/// loss with the router frozen, (b) the router updates on
/// lambda * router_loss (+ the dispatch-weighted expert term under the joint
/// objective) with experts frozen, (c) the controller consumes the epoch
/// feedback. Run logs flush per epoch when out_dir is given; a non-finite
/// loss aborts with DivergenceError after flushing.
TrainResult train(M2mModel& model, const Dataset& data, const TrainConfig& cfg,
                  ControllerState ctrl, const std::filesystem::path* out_dir = nullptr,
                  const TrainHooks* hooks = nullptr);

}  // namespace m2m
