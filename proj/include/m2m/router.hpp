#pragma once

#include <string>
#include <vector>

#include "m2m/experts.hpp"
#include "m2m/fields.hpp"
#include "m2m/nn.hpp"

namespace m2m {

enum class Pooling { mean, cls_token };

struct RouterConfig {
    int embed_dim = 128;
    int num_heads = 4;
    int num_layers = 2;
    Pooling pooling = Pooling::mean;
    int num_experts = 0;
    double epsilon_prior = 1e-3;
    int pool_size = 16;  // patches are average-pooled to pool_size^2 tokens features

    void validate() const;
};

enum class PriorMode { none, soft, hard };

/// Per-expert prior over routing decisions. mode=none is the uniform prior
/// ("relies entirely on the router"); soft shifts logits by log-prior; hard
/// masks experts outside the prior's support before the softmax. A prior may
/// also vary per patch position (per_patch rows [S^2, M], row-major patch
/// order), e.g. to pin wake regions to high-mode experts.
struct PriorSpec {
    PriorMode mode = PriorMode::none;
    std::vector<double> weights;  // [M]; empty means uniform
    Tensor per_patch;             // optional [S^2, M]; overrides `weights`

    bool has_per_patch() const { return per_patch.numel() > 0; }
    void validate(int num_experts) const;
    /// Raw prior weights for one patch position.
    std::vector<double> weights_for(int64_t patch_index, int num_experts) const;
    /// (1 - eps*M) * P + eps, strictly positive, sums to 1.
    std::vector<double> smoothed(int num_experts, double eps, int64_t patch_index = 0) const;
};

/// Routing result for P patch rows over M experts. Row order is sample-major:
/// row = sample * S^2 + patch_index.
struct RoutingOutput {
    Tensor probs;   // [P, M], rows on the simplex
    Tensor logits;  // [P, M]
    int k = 0;      // filled by select_topk
    std::vector<int> topk_indices;  // [P, k] flattened
    Tensor topk_weights;            // [P, k] renormalized rows

    int64_t rows() const { return probs.dim(0); }
    int64_t num_experts() const { return probs.dim(1); }
};

/// Transformer classifier over pooled patch tokens: per time channel the
/// patch is average-pooled to pool_size^2 features, linearly embedded, runs
/// through num_layers encoder layers, is pooled, and a linear head scores
/// the experts.
struct RouterNet {
    RouterConfig cfg;
    Linear embed;
    int cls = -1;  // [1, embed_dim] learned token (cls pooling only)
    std::vector<EncoderLayer> encoder;
    Linear head;
    std::vector<int> param_indices;
};

struct RouterRowCtx {
    Tensor tokens_raw;  // [T, pool^2]
    std::vector<EncoderLayerCtx> enc;
    Tensor enc_out;     // encoder output rows
    Tensor pooled;      // [1, embed_dim]
};

RouterNet make_router(ParamTable& pt, const RouterConfig& cfg, uint64_t seed);

/// Logits for one patch [T, H, W].
Tensor router_logits(const ParamTable& pt, const RouterNet& r, const Tensor& patch_thw,
                     RouterRowCtx* ctx = nullptr);
/// Backward from d(loss)/d(logits) of one row; returns nothing (patch inputs
/// carry no parameters).
void router_backward(const ParamTable& pt, const RouterNet& r, const RouterRowCtx& ctx,
                     const Tensor& glogits, Grads& grads);

/// Combines logits and prior into simplex rows (see PriorSpec for semantics).
/// With a per-patch prior, row r uses prior row (r mod patch_period);
/// patch_period = 0 treats the prior as shared by all rows.
Tensor probs_from_logits(const Tensor& logits, const PriorSpec& prior, double eps,
                         int64_t patch_period = 0);
/// d(loss)/d(logits) given d(loss)/d(probs) for the same prior semantics and
/// the eps the probs were built with.
Tensor probs_backward(const Tensor& probs, const Tensor& gprobs, const PriorSpec& prior,
                      double eps, int64_t patch_period = 0);

/// Routes every patch of the batch; rows ordered sample-major.
RoutingOutput route(const ParamTable& pt, const RouterNet& r, const PatchBatch& patches,
                    const PriorSpec& prior, std::vector<RouterRowCtx>* ctxs = nullptr);

/// Keeps the k largest-probability experts per row (ties broken by lower
/// expert index) and renormalizes the kept weights to sum 1.
void select_topk(RoutingOutput& out, int k);

enum class DispatchStrategy { topk, dense };

/// Per patch row, prediction = sum of selected experts' outputs weighted by
/// the routing weights, downsampled to native patch resolution and
/// reassembled into a Field. Under topk only the selected experts run.
Field dispatch(const ParamTable& pt, const PatchBatch& patches, const Ensemble& ens,
               const RoutingOutput& out, DispatchStrategy strategy, int k,
               const ResampleSpec& resample);

/// KL(p || q) = sum p log(p/q) with 0 log 0 = 0; q entries must be positive
/// wherever p is.
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q);
double kl_divergence_row(const Tensor& probs, int64_t row, const std::vector<double>& q);

/// -sum_ij p_ij log p_ij over all rows (natural log).
double load_entropy(const Tensor& probs);

/// mean-over-rows KL(probs || smoothed prior) + load_weight * load_entropy.
double router_loss(const RoutingOutput& out, const PriorSpec& prior, double eps,
                   double load_weight = 1.0, int64_t patch_period = 0);

}  // namespace m2m
