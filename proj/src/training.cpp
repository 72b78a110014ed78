#include "m2m/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "m2m/errors.hpp"

namespace m2m {

void TrainConfig::validate(int num_experts) const {
    if (epochs < 1) throw ConfigError("training: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("training: learning_rate must be > 0");
    if (k < 1 || k > num_experts) throw ConfigError("training: k must lie in 1..num_experts");
    if (rollout_steps != 1)
        throw ConfigError("training: only rollout_steps=1 is supported for training");
    if (threads < 0) throw ConfigError("training: threads must be >= 0");
}

double total_loss(double router_loss_value, double expert_loss_value, double lambda) {
    return lambda * router_loss_value + expert_loss_value;
}

double mse(const Tensor& pred, const Tensor& truth) {
    require_same_shape(pred, truth, "mse");
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.v[i] - truth.v[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

double expert_loss_aggregate(const Field& pred, const Field& truth) {
    return mse(pred.values, truth.values);
}

double expert_loss_per_expert(
    const std::vector<std::vector<std::pair<Tensor, Tensor>>>& pairs_by_expert) {
    double acc = 0.0;
    for (const auto& pairs : pairs_by_expert) {
        if (pairs.empty()) continue;
        double sum = 0.0;
        for (const auto& [pred, truth] : pairs) sum += mse(pred, truth);
        acc += sum / static_cast<double>(pairs.size());
    }
    return acc;
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

Field sample_input_field(const Sample& s) {
    Tensor t({1, s.input.dim(0), s.input.dim(1), s.input.dim(2)});
    t.v = s.input.v;
    return Field(std::move(t));
}

Sample normalized_sample(const Normalizer& n, const Sample& s) {
    if (!n.active) return s;
    Sample out = s;
    n.normalize_in(out.input);
    n.normalize_out(out.target);
    return out;
}

Normalizer fit_normalizer(const std::vector<Sample>& train) {
    Normalizer n;
    double in_sum = 0.0, in_sq = 0.0, out_sum = 0.0, out_sq = 0.0;
    int64_t in_n = 0, out_n = 0;
    for (const Sample& s : train) {
        for (double v : s.input.v) {
            in_sum += v;
            in_sq += v * v;
        }
        in_n += s.input.numel();
        for (double v : s.target.v) {
            out_sum += v;
            out_sq += v * v;
        }
        out_n += s.target.numel();
    }
    n.in_mean = in_sum / static_cast<double>(in_n);
    n.out_mean = out_sum / static_cast<double>(out_n);
    const double in_var = in_sq / static_cast<double>(in_n) - n.in_mean * n.in_mean;
    const double out_var = out_sq / static_cast<double>(out_n) - n.out_mean * n.out_mean;
    n.in_std = in_var > 1e-24 ? std::sqrt(in_var) : 1.0;
    n.out_std = out_var > 1e-24 ? std::sqrt(out_var) : 1.0;
    n.active = true;
    return n;
}

// Weights actually used by dispatch for one row: (expert, weight) pairs.
std::vector<std::pair<int, double>> row_weights(const RoutingOutput& out, int64_t row,
                                                DispatchStrategy strategy) {
    std::vector<std::pair<int, double>> w;
    if (strategy == DispatchStrategy::dense) {
        for (int64_t j = 0; j < out.num_experts(); ++j)
            w.emplace_back(static_cast<int>(j), out.probs.at(row, j));
    } else {
        for (int i = 0; i < out.k; ++i)
            w.emplace_back(out.topk_indices[static_cast<size_t>(row * out.k + i)],
                           out.topk_weights.at(row, i));
    }
    return w;
}

// Copies patch `p` of [B=1] PatchBatch into [1,T,H,W].
Tensor patch_tensor(const PatchBatch& pb, int64_t p) {
    const int64_t t = pb.patches.dim(2), h = pb.patches.dim(3), w = pb.patches.dim(4);
    Tensor out({1, t, h, w});
    const double* src = pb.patches.data() + p * t * h * w;
    std::copy(src, src + t * h * w, out.v.begin());
    return out;
}

// Native-resolution truth tile (i,j) of [T,H,W] targets as [1,T,ph,pw].
Tensor truth_tile(const Tensor& target, int scale, int64_t p) {
    const int64_t t = target.dim(0), h = target.dim(1), w = target.dim(2);
    const int64_t ph = h / scale, pw = w / scale;
    const int i = PatchBatch::patch_row(static_cast<int>(p), scale);
    const int j = PatchBatch::patch_col(static_cast<int>(p), scale);
    Tensor out({1, t, ph, pw});
    for (int64_t tt = 0; tt < t; ++tt)
        for (int64_t r = 0; r < ph; ++r)
            for (int64_t c = 0; c < pw; ++c)
                out.at(0, tt, r, c) = target.at(tt, i * ph + r, j * pw + c);
    return out;
}

struct SampleEval {
    double sq_err = 0.0;     // sum of squared errors
    int64_t cells = 0;
    double rel_l2 = 0.0;
    double router_loss_v = 0.0;
    Tensor probs;            // [S^2, M]
};

SampleEval eval_one(const M2mModel& model, const Sample& s, DispatchStrategy strategy, int k,
                    double load_weight) {
    SampleEval ev;
    Field input = sample_input_field(s);
    model.norm.normalize_in(input.values);
    const PatchBatch patches = segment_and_upsample(input, model.cfg.scale, model.cfg.resample);
    RoutingOutput out = route(model.params, model.router, patches, model.cfg.prior);
    if (strategy == DispatchStrategy::topk) select_topk(out, k);
    Field pred =
        dispatch(model.params, patches, model.ensemble, out, strategy, k, model.cfg.resample);
    model.norm.denormalize_out(pred.values);
    double sq = 0.0, nt = 0.0;
    for (int64_t i = 0; i < pred.values.numel(); ++i) {
        const double d = pred.values.v[i] - s.target.v[i];
        sq += d * d;
        nt += s.target.v[i] * s.target.v[i];
    }
    ev.sq_err = sq;
    ev.cells = pred.values.numel();
    ev.rel_l2 = nt > 0.0 ? std::sqrt(sq) / std::sqrt(nt) : std::sqrt(sq);
    ev.router_loss_v = router_loss(out, model.cfg.prior, model.cfg.router.epsilon_prior,
                                   load_weight, patches.num_patches());
    ev.probs = out.probs;
    return ev;
}

}  // namespace

EvalMetrics evaluate_model(const M2mModel& model, const std::vector<Sample>& samples,
                           DispatchStrategy strategy, int k, double load_weight, int threads) {
    EvalMetrics m;
    const int n = static_cast<int>(samples.size());
    if (n == 0) return m;
    std::vector<SampleEval> evals(static_cast<size_t>(n));
    parallel_for(n, resolve_threads(threads), [&](int i) {
        evals[static_cast<size_t>(i)] =
            eval_one(model, samples[static_cast<size_t>(i)], strategy, k, load_weight);
    });
    double sq = 0.0, rel = 0.0, rl = 0.0;
    int64_t cells = 0;
    const int64_t p = evals.front().probs.dim(0);
    const int64_t me = evals.front().probs.dim(1);
    m.mean_probs = Tensor({p, me});
    for (const SampleEval& ev : evals) {
        sq += ev.sq_err;
        cells += ev.cells;
        rel += ev.rel_l2;
        rl += ev.router_loss_v;
        for (int64_t i = 0; i < ev.probs.numel(); ++i) m.mean_probs.v[i] += ev.probs.v[i];
    }
    for (double& x : m.mean_probs.v) x /= static_cast<double>(n);
    m.mse = sq / static_cast<double>(cells);
    m.rmse = std::sqrt(m.mse);
    m.rel_l2 = rel / static_cast<double>(n);
    m.router_loss_mean = rl / static_cast<double>(n);
    return m;
}

namespace {

// One sample's contribution to the expert-phase gradient.
void expert_phase_sample(const M2mModel& model, const Sample& raw, const TrainConfig& cfg,
                         const RoutingOutput& routing, int64_t row_base,
                         const std::vector<int64_t>& served_counts, int64_t batch_samples,
                         Grads& grads, double* loss_acc) {
    const Sample s = normalized_sample(model.norm, raw);
    const Field input = sample_input_field(s);
    const int scale = model.cfg.scale;
    const PatchBatch patches = segment_and_upsample(input, scale, model.cfg.resample);
    const int64_t np = patches.num_patches();
    const int64_t ph = input.height() / scale, pw = input.width() / scale;

    const bool dense_supervision = cfg.supervision == Supervision::per_expert_dense;
    for (int64_t p = 0; p < np; ++p) {
        const Tensor up = patch_tensor(patches, p);
        const Tensor truth = truth_tile(s.target, scale, p);
        std::vector<std::pair<int, double>> weights;
        if (dense_supervision) {
            // Literal form: every expert on every patch.
            for (int j = 0; j < model.num_experts(); ++j) weights.emplace_back(j, 0.0);
        } else {
            weights = row_weights(routing, row_base + p, cfg.strategy);
        }
        if (cfg.supervision != Supervision::aggregate) {
            // Each served expert is supervised on its own prediction.
            for (const auto& [j, wj] : weights) {
                (void)wj;
                FnoExpertCtx ctx;
                model.ensemble.count_call(j);
                const Tensor pred =
                    expert_forward(model.params, model.ensemble.experts[static_cast<size_t>(j)],
                                   up, &ctx);
                const Tensor down = downsample(pred, ph, pw, model.cfg.resample);
                const double wnorm =
                    1.0 / static_cast<double>(served_counts[static_cast<size_t>(j)]);
                double sq = 0.0;
                Tensor gdown(down.shape);
                const double gscale = 2.0 / static_cast<double>(down.numel()) * wnorm;
                for (int64_t i = 0; i < down.numel(); ++i) {
                    const double d = down.v[i] - truth.v[i];
                    sq += d * d;
                    gdown.v[i] = gscale * d;
                }
                *loss_acc += sq / static_cast<double>(down.numel()) * wnorm;
                const Tensor gpred =
                    downsample_adjoint(gdown, pred.dim(2), pred.dim(3), model.cfg.resample);
                expert_backward(model.params, model.ensemble.experts[static_cast<size_t>(j)], ctx,
                                gpred, grads);
            }
        } else {
            // Aggregate supervision: MSE of the dispatch-weighted prediction;
            // gradients reach every selected expert through its weight.
            std::vector<FnoExpertCtx> ctxs(weights.size());
            std::vector<Tensor> preds(weights.size());
            Tensor combined;
            for (size_t wi = 0; wi < weights.size(); ++wi) {
                model.ensemble.count_call(weights[wi].first);
                preds[wi] = expert_forward(
                    model.params, model.ensemble.experts[static_cast<size_t>(weights[wi].first)],
                    up, &ctxs[wi]);
                if (wi == 0) combined = Tensor(preds[wi].shape);
                for (int64_t i = 0; i < combined.numel(); ++i)
                    combined.v[i] += weights[wi].second * preds[wi].v[i];
            }
            const Tensor down = downsample(combined, ph, pw, model.cfg.resample);
            const double patch_weight =
                1.0 / static_cast<double>(batch_samples) / static_cast<double>(np);
            double sq = 0.0;
            Tensor gdown(down.shape);
            const double gscale = 2.0 / static_cast<double>(down.numel()) * patch_weight;
            for (int64_t i = 0; i < down.numel(); ++i) {
                const double d = down.v[i] - truth.v[i];
                sq += d * d;
                gdown.v[i] = gscale * d;
            }
            *loss_acc += sq / static_cast<double>(down.numel()) * patch_weight;
            const Tensor gcombined =
                downsample_adjoint(gdown, combined.dim(2), combined.dim(3), model.cfg.resample);
            for (size_t wi = 0; wi < weights.size(); ++wi) {
                Tensor gpred(gcombined.shape);
                for (int64_t i = 0; i < gpred.numel(); ++i)
                    gpred.v[i] = gcombined.v[i] * weights[wi].second;
                expert_backward(model.params,
                                model.ensemble.experts[static_cast<size_t>(weights[wi].first)],
                                ctxs[wi], gpred, grads);
            }
        }
    }
}

// One sample's contribution to the router-phase gradient.
void router_phase_sample(const M2mModel& model, const Sample& raw, const TrainConfig& cfg,
                         double lambda, int64_t batch_samples, Grads& grads, double* loss_acc) {
    const Sample s = normalized_sample(model.norm, raw);
    const Field input = sample_input_field(s);
    const int scale = model.cfg.scale;
    const PatchBatch patches = segment_and_upsample(input, scale, model.cfg.resample);
    const int64_t np = patches.num_patches();
    const int64_t ph = input.height() / scale, pw = input.width() / scale;
    const int m = model.num_experts();
    const double eps = model.cfg.router.epsilon_prior;

    std::vector<RouterRowCtx> ctxs;
    RoutingOutput out = route(model.params, model.router, patches, model.cfg.prior, &ctxs);
    if (cfg.strategy == DispatchStrategy::topk) select_topk(out, cfg.k);

    Tensor gprobs({np, m});
    for (int64_t p = 0; p < np; ++p) {
        const std::vector<double> q = model.cfg.prior.smoothed(m, eps, p);
        const auto weights = row_weights(out, p, cfg.strategy);
        if (cfg.router_objective == RouterObjective::joint) {
            const Tensor up = patch_tensor(patches, p);
            const Tensor truth = truth_tile(s.target, scale, p);
            Tensor combined;
            std::vector<Tensor> downs(weights.size());
            for (size_t wi = 0; wi < weights.size(); ++wi) {
                model.ensemble.count_call(weights[wi].first);
                const Tensor pred = expert_forward(
                    model.params, model.ensemble.experts[static_cast<size_t>(weights[wi].first)],
                    up, nullptr);
                downs[wi] = downsample(pred, ph, pw, model.cfg.resample);
                if (wi == 0) combined = Tensor(downs[wi].shape);
                for (int64_t i = 0; i < combined.numel(); ++i)
                    combined.v[i] += weights[wi].second * downs[wi].v[i];
            }
            const double patch_weight =
                1.0 / static_cast<double>(batch_samples) / static_cast<double>(np);
            double sq = 0.0;
            Tensor gdown(combined.shape);
            const double gscale = 2.0 / static_cast<double>(combined.numel()) * patch_weight;
            for (int64_t i = 0; i < combined.numel(); ++i) {
                const double d = combined.v[i] - truth.v[i];
                sq += d * d;
                gdown.v[i] = gscale * d;
            }
            *loss_acc += sq / static_cast<double>(combined.numel()) * patch_weight;
            // d(loss)/d(weight_j) = <g, downsampled prediction_j>
            std::vector<double> gw(weights.size(), 0.0);
            for (size_t wi = 0; wi < weights.size(); ++wi) {
                double acc = 0.0;
                for (int64_t i = 0; i < gdown.numel(); ++i) acc += gdown.v[i] * downs[wi].v[i];
                gw[wi] = acc;
            }
            if (cfg.strategy == DispatchStrategy::dense) {
                for (size_t wi = 0; wi < weights.size(); ++wi)
                    gprobs.at(p, weights[wi].first) += gw[wi];
            } else {
                // Through the renormalization w_i = p_i / sum(selected p).
                double ssum = 0.0;
                for (const auto& [j, wj] : weights) ssum += out.probs.at(p, j);
                double dot = 0.0;
                for (size_t wi = 0; wi < weights.size(); ++wi)
                    dot += gw[wi] * weights[wi].second;
                for (size_t wi = 0; wi < weights.size(); ++wi)
                    gprobs.at(p, weights[wi].first) += (gw[wi] - dot) / ssum;
            }
        }
        // Router-loss terms: lambda * (mean-row KL + load_weight * entropy).
        double kl = 0.0;
        for (int j = 0; j < m; ++j) {
            const double pj = out.probs.at(p, j);
            const double gkl = (std::log(std::max(pj, 1e-300) / q[static_cast<size_t>(j)]) + 1.0) *
                               lambda / static_cast<double>(batch_samples * np);
            const double gent = -(std::log(std::max(pj, 1e-300)) + 1.0) * lambda *
                                cfg.load_weight / static_cast<double>(batch_samples);
            gprobs.at(p, j) += gkl + gent;
            if (pj > 0.0) kl += pj * std::log(pj / q[static_cast<size_t>(j)]);
        }
        double ent = 0.0;
        for (int j = 0; j < m; ++j) {
            const double pj = out.probs.at(p, j);
            if (pj > 0.0) ent -= pj * std::log(pj);
        }
        *loss_acc += lambda *
                     (kl / static_cast<double>(np) + cfg.load_weight * ent) /
                     static_cast<double>(batch_samples);
    }
    const Tensor glogits = probs_backward(out.probs, gprobs, model.cfg.prior, eps, np);
    Tensor grow({m});
    for (int64_t p = 0; p < np; ++p) {
        for (int j = 0; j < m; ++j) grow.at(j) = glogits.at(p, j);
        router_backward(model.params, model.router, ctxs[static_cast<size_t>(p)], grow, grads);
    }
}

}  // namespace

double joint_loss_and_grad(const M2mModel& model, const Sample& raw, DispatchStrategy strategy,
                           int k, double lambda, double load_weight, Grads& grads) {
    const Sample s = normalized_sample(model.norm, raw);
    const Field input = sample_input_field(s);
    const int scale = model.cfg.scale;
    const PatchBatch patches = segment_and_upsample(input, scale, model.cfg.resample);
    const int64_t np = patches.num_patches();
    const int64_t ph = input.height() / scale, pw = input.width() / scale;
    const int m = model.num_experts();
    const double eps = model.cfg.router.epsilon_prior;

    std::vector<RouterRowCtx> ctxs;
    RoutingOutput out = route(model.params, model.router, patches, model.cfg.prior, &ctxs);
    if (strategy == DispatchStrategy::topk) select_topk(out, k);

    double loss = 0.0;
    Tensor gprobs({np, m});
    for (int64_t p = 0; p < np; ++p) {
        const std::vector<double> q = model.cfg.prior.smoothed(m, eps, p);
        const Tensor up = patch_tensor(patches, p);
        const Tensor truth = truth_tile(s.target, scale, p);
        const auto weights = row_weights(out, p, strategy);
        std::vector<FnoExpertCtx> ectxs(weights.size());
        std::vector<Tensor> downs(weights.size());
        Tensor combined;
        for (size_t wi = 0; wi < weights.size(); ++wi) {
            const Tensor pred = expert_forward(
                model.params, model.ensemble.experts[static_cast<size_t>(weights[wi].first)], up,
                &ectxs[wi]);
            downs[wi] = downsample(pred, ph, pw, model.cfg.resample);
            if (wi == 0) combined = Tensor(downs[wi].shape);
            for (int64_t i = 0; i < combined.numel(); ++i)
                combined.v[i] += weights[wi].second * downs[wi].v[i];
        }
        const double patch_weight = 1.0 / static_cast<double>(np);
        double sq = 0.0;
        Tensor gdown(combined.shape);
        const double gscale = 2.0 / static_cast<double>(combined.numel()) * patch_weight;
        for (int64_t i = 0; i < combined.numel(); ++i) {
            const double d = combined.v[i] - truth.v[i];
            sq += d * d;
            gdown.v[i] = gscale * d;
        }
        loss += sq / static_cast<double>(combined.numel()) * patch_weight;
        std::vector<double> gw(weights.size(), 0.0);
        for (size_t wi = 0; wi < weights.size(); ++wi) {
            double acc = 0.0;
            for (int64_t i = 0; i < gdown.numel(); ++i) acc += gdown.v[i] * downs[wi].v[i];
            gw[wi] = acc;
            Tensor gpred = downsample_adjoint(gdown, up.dim(2), up.dim(3), model.cfg.resample);
            for (double& x : gpred.v) x *= weights[wi].second;
            expert_backward(model.params,
                            model.ensemble.experts[static_cast<size_t>(weights[wi].first)],
                            ectxs[wi], gpred, grads);
        }
        if (strategy == DispatchStrategy::dense) {
            for (size_t wi = 0; wi < weights.size(); ++wi)
                gprobs.at(p, weights[wi].first) += gw[wi];
        } else {
            double ssum = 0.0;
            for (const auto& [j, wj] : weights) ssum += out.probs.at(p, j);
            double dot = 0.0;
            for (size_t wi = 0; wi < weights.size(); ++wi) dot += gw[wi] * weights[wi].second;
            for (size_t wi = 0; wi < weights.size(); ++wi)
                gprobs.at(p, weights[wi].first) += (gw[wi] - dot) / ssum;
        }
        double kl = 0.0, ent = 0.0;
        for (int j = 0; j < m; ++j) {
            const double pj = out.probs.at(p, j);
            gprobs.at(p, j) +=
                (std::log(std::max(pj, 1e-300) / q[static_cast<size_t>(j)]) + 1.0) * lambda /
                    static_cast<double>(np) -
                (std::log(std::max(pj, 1e-300)) + 1.0) * lambda * load_weight;
            if (pj > 0.0) {
                kl += pj * std::log(pj / q[static_cast<size_t>(j)]);
                ent -= pj * std::log(pj);
            }
        }
        loss += lambda * (kl / static_cast<double>(np) + load_weight * ent);
    }
    const Tensor glogits = probs_backward(out.probs, gprobs, model.cfg.prior, eps, np);
    Tensor grow({m});
    for (int64_t p = 0; p < np; ++p) {
        for (int j = 0; j < m; ++j) grow.at(j) = glogits.at(p, j);
        router_backward(model.params, model.router, ctxs[static_cast<size_t>(p)], grow, grads);
    }
    return loss;
}

namespace {

struct BatchWorkspace {
    std::vector<Grads> per_sample;
    Grads total;

    BatchWorkspace(const ParamTable& pt, int batch) : total(pt) {
        per_sample.reserve(static_cast<size_t>(batch));
        for (int i = 0; i < batch; ++i) per_sample.emplace_back(pt);
    }
    // Deterministic reduction in sample order, independent of thread schedule.
    const Grads& reduce(int used) {
        total.zero();
        for (int i = 0; i < used; ++i) total.add(per_sample[static_cast<size_t>(i)]);
        return total;
    }
};

}  // namespace

std::string RunLog::csv() const {
    std::ostringstream os;
    os << "epoch,train_rmse,train_rel_l2,val_rel_l2,lambda,e,P,I\n";
    for (const EpochLog& r : rows)
        os << r.epoch << ',' << fmt(r.train_rmse) << ',' << fmt(r.train_rel_l2) << ','
           << fmt(r.val_rel_l2) << ',' << fmt(r.lambda) << ',' << fmt(r.e) << ',' << fmt(r.p)
           << ',' << fmt(r.integral) << '\n';
    return os.str();
}

std::string RunLog::controller_csv() const {
    std::ostringstream os;
    os << "t,loss,e,P,I,lambda\n";
    for (const EpochLog& r : rows)
        os << r.epoch << ',' << fmt(r.feedback_loss) << ',' << fmt(r.e) << ',' << fmt(r.p) << ','
           << fmt(r.integral) << ',' << fmt(r.lambda) << '\n';
    return os.str();
}

nlohmann::json RunLog::snapshots_json() const {
    nlohmann::json epochs = nlohmann::json::array();
    for (const Tensor& snap : snapshots) {
        nlohmann::json mat = nlohmann::json::array();
        for (int64_t p = 0; p < snap.dim(0); ++p) {
            nlohmann::json row = nlohmann::json::array();
            for (int64_t j = 0; j < snap.dim(1); ++j) row.push_back(snap.at(p, j));
            mat.push_back(row);
        }
        epochs.push_back(mat);
    }
    return {{"router_probs", epochs}};
}

TrainResult train(M2mModel& model, const Dataset& data, const TrainConfig& cfg,
                  ControllerState ctrl, const std::filesystem::path* out_dir,
                  const TrainHooks* hooks) {
    cfg.validate(model.num_experts());
    ctrl.validate();
    if (data.train.empty()) throw DataError("train: empty training set");
    if (model.cfg.normalize && !model.norm.active) model.norm = fit_normalizer(data.train);
    const int n_train = static_cast<int>(data.train.size());
    const int threads = resolve_threads(cfg.threads);
    const int m = model.num_experts();

    Adam expert_opt(model.params, model.ensemble.param_indices, cfg.learning_rate);
    Adam router_opt(model.params, model.router.param_indices, cfg.learning_rate);
    BatchWorkspace ws(model.params, cfg.batch_size);

    TrainResult result;
    auto flush_logs = [&]() {
        if (!out_dir) return;
        std::error_code ec;
        std::filesystem::create_directories(*out_dir, ec);
        std::ofstream(*out_dir / "run_log.csv") << result.log.csv();
        std::ofstream(*out_dir / "controller_trace.csv") << result.log.controller_csv();
        std::ofstream(*out_dir / "router_snapshots.json")
            << result.log.snapshots_json().dump() << "\n";
    };

    std::vector<int> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);

    auto run_expert_batch = [&](const std::vector<int>& batch) {
        // Route everything once with frozen router, then count served patches
        // per expert for the per-expert normalization. The literal dense form
        // needs no routing: every expert serves every patch.
        const bool dense_supervision = cfg.supervision == Supervision::per_expert_dense;
        std::vector<RoutingOutput> routings(batch.size());
        if (!dense_supervision) {
            parallel_for(static_cast<int>(batch.size()), threads, [&](int bi) {
                const Sample s = normalized_sample(
                    model.norm, data.train[static_cast<size_t>(batch[static_cast<size_t>(bi)])]);
                const Field input = sample_input_field(s);
                const PatchBatch patches =
                    segment_and_upsample(input, model.cfg.scale, model.cfg.resample);
                RoutingOutput out = route(model.params, model.router, patches, model.cfg.prior);
                if (cfg.strategy == DispatchStrategy::topk) select_topk(out, cfg.k);
                routings[static_cast<size_t>(bi)] = std::move(out);
            });
        }
        std::vector<int64_t> served(static_cast<size_t>(m), 0);
        if (dense_supervision) {
            const int64_t rows = static_cast<int64_t>(batch.size()) *
                                 static_cast<int64_t>(model.cfg.scale) * model.cfg.scale;
            std::fill(served.begin(), served.end(), rows);
        } else {
            for (const RoutingOutput& out : routings)
                for (int64_t row = 0; row < out.rows(); ++row)
                    for (const auto& [j, wj] : row_weights(out, row, cfg.strategy)) {
                        (void)wj;
                        ++served[static_cast<size_t>(j)];
                    }
        }
        std::vector<double> losses(batch.size(), 0.0);
        parallel_for(static_cast<int>(batch.size()), threads, [&](int bi) {
            ws.per_sample[static_cast<size_t>(bi)].zero();
            expert_phase_sample(model, data.train[static_cast<size_t>(batch[static_cast<size_t>(bi)])],
                                cfg, routings[static_cast<size_t>(bi)], 0, served,
                                static_cast<int64_t>(batch.size()),
                                ws.per_sample[static_cast<size_t>(bi)],
                                &losses[static_cast<size_t>(bi)]);
        });
        double loss = std::accumulate(losses.begin(), losses.end(), 0.0);
        if (!std::isfinite(loss)) {
            flush_logs();
            throw DivergenceError("train: non-finite expert-phase loss");
        }
        expert_opt.step(model.params, ws.reduce(static_cast<int>(batch.size())));
    };

    auto run_router_batch = [&](const std::vector<int>& batch, double lambda) {
        if (m == 1) return;  // single expert: the router objective has no gradient
        std::vector<double> losses(batch.size(), 0.0);
        parallel_for(static_cast<int>(batch.size()), threads, [&](int bi) {
            ws.per_sample[static_cast<size_t>(bi)].zero();
            router_phase_sample(model, data.train[static_cast<size_t>(batch[static_cast<size_t>(bi)])],
                                cfg, lambda, static_cast<int64_t>(batch.size()),
                                ws.per_sample[static_cast<size_t>(bi)],
                                &losses[static_cast<size_t>(bi)]);
        });
        double loss = std::accumulate(losses.begin(), losses.end(), 0.0);
        if (!std::isfinite(loss)) {
            flush_logs();
            throw DivergenceError("train: non-finite router-phase loss");
        }
        router_opt.step(model.params, ws.reduce(static_cast<int>(batch.size())));
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lambda_use = cfg.controller_enabled ? ctrl.lambda : cfg.fixed_lambda;
        // Deterministic per-epoch shuffle.
        Rng shuffle_rng(derive_seed(cfg.seed, /*stream=*/5, static_cast<uint64_t>(epoch)));
        for (int i = n_train - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.below(static_cast<uint64_t>(i + 1)));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        std::vector<std::vector<int>> batches;
        for (int start = 0; start < n_train; start += cfg.batch_size)
            batches.emplace_back(order.begin() + start,
                                 order.begin() + std::min(start + cfg.batch_size, n_train));

        if (cfg.alternation == Alternation::per_epoch) {
            for (const auto& b : batches) run_expert_batch(b);
            if (hooks && hooks->after_phase) hooks->after_phase(epoch, "experts", model);
            for (const auto& b : batches) run_router_batch(b, lambda_use);
            if (hooks && hooks->after_phase) hooks->after_phase(epoch, "router", model);
        } else {
            for (const auto& b : batches) {
                run_expert_batch(b);
                run_router_batch(b, lambda_use);
            }
            if (hooks && hooks->after_phase) hooks->after_phase(epoch, "router", model);
        }

        // End-of-epoch metrics with the epoch's final weights; eval on the
        // training set is what the controller feeds on.
        const EvalMetrics train_m = evaluate_model(model, data.train, cfg.strategy, cfg.k,
                                                   cfg.load_weight, threads);
        const EvalMetrics val_m = data.test.empty()
                                      ? EvalMetrics{}
                                      : evaluate_model(model, data.test, cfg.strategy, cfg.k,
                                                       cfg.load_weight, threads);

        const double feedback = cfg.feedback == Feedback::rmse
                                    ? train_m.rmse
                                    : total_loss(train_m.router_loss_mean, train_m.mse, lambda_use);
        if (!std::isfinite(feedback)) {
            flush_logs();
            throw DivergenceError("train: non-finite epoch feedback");
        }

        EpochLog row;
        row.epoch = epoch;
        row.train_rmse = train_m.rmse;
        row.train_rel_l2 = train_m.rel_l2;
        row.val_rel_l2 = data.test.empty() ? 0.0 : val_m.rel_l2;
        row.feedback_loss = feedback;
        if (cfg.controller_enabled) {
            const ControllerTrace trace = controller_step(ctrl, feedback);
            row.lambda = trace.lambda;
            row.e = trace.e;
            row.p = trace.p;
            row.integral = trace.integral;
        } else {
            row.lambda = cfg.fixed_lambda;
            row.e = feedback - ctrl.target;
            row.p = 0.0;
            row.integral = 0.0;
        }
        result.log.rows.push_back(row);
        result.log.snapshots.push_back(train_m.mean_probs);
        flush_logs();
        if (hooks && hooks->after_phase) hooks->after_phase(epoch, "epoch_end", model);
    }
    return result;
}

}  // namespace m2m
