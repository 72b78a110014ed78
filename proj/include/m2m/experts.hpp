#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "m2m/nn.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

/// Architecture descriptor of one Fourier-spectral expert.
struct ExpertSpec {
    int modes = 16;           // retained frequencies per spatial axis
    int hidden_channels = 6;
    int num_layers = 4;
    int in_channels = 1;      // T_in
    int out_channels = 1;     // T_out
    Activation activation = Activation::gelu;

    void validate() const;
};

/// One expert: pointwise lifting, num_layers spectral+pointwise blocks with
/// activation on all but the last block, pointwise projection.
struct FnoExpert {
    ExpertSpec spec;
    Pointwise lift;
    std::vector<SpectralConv> spectral;
    std::vector<Pointwise> pointwise;
    Pointwise proj;
    std::vector<int> param_indices;
};

struct FnoLayerCtx {
    SpectralCtx spectral;
    Tensor x;    // layer input, shared by both paths
    Tensor pre;  // pre-activation sum
};

struct FnoExpertCtx {
    Tensor x0;
    std::vector<FnoLayerCtx> layers;
    Tensor last;  // projection input
};

FnoExpert make_expert(ParamTable& pt, const std::string& name, const ExpertSpec& spec,
                      uint64_t seed);

/// [B, T_in, H, W] -> [B, T_out, H, W]; spatial dimensions are preserved.
Tensor expert_forward(const ParamTable& pt, const FnoExpert& e, const Tensor& x,
                      FnoExpertCtx* ctx = nullptr);
Tensor expert_backward(const ParamTable& pt, const FnoExpert& e, const FnoExpertCtx& ctx,
                       const Tensor& gy, Grads& grads);

/// Exact count of trainable scalars (complex weights count as 2).
int64_t count_params(const ParamTable& pt, const FnoExpert& e);

/// Ordered expert list; index order is the router's class order and is stable
/// across checkpoint save/load.
struct Ensemble {
    std::vector<FnoExpert> experts;
    std::vector<int> param_indices;
    int64_t in_channels = 0, out_channels = 0;

    // Per-expert forward-evaluation counters (compute-sparsity instrumentation).
    std::unique_ptr<std::atomic<uint64_t>[]> calls;

    int size() const { return static_cast<int>(experts.size()); }
    uint64_t call_count(int j) const { return calls[static_cast<size_t>(j)].load(); }
    void count_call(int j) const { calls[static_cast<size_t>(j)].fetch_add(1); }
    void reset_calls() const {
        for (int j = 0; j < size(); ++j) calls[static_cast<size_t>(j)].store(0);
    }
};

/// Experts are initialized independently from seeds derived per index, so
/// duplicate specs yield distinct parameter instances.
Ensemble build_ensemble(ParamTable& pt, const std::vector<ExpertSpec>& specs, uint64_t seed);

}  // namespace m2m
