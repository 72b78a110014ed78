#pragma once

#include <string>
#include <vector>

#include "m2m/tensor.hpp"

namespace m2m {

/// A discretized space-time solution block, shape [B, T, H, W], on the unit
/// square with node spacing 1/(H-1).
struct Field {
    Tensor values;        // [B, T, H, W]
    double grid_spacing;  // 1/(H-1)

    Field() : grid_spacing(0.0) {}
    explicit Field(Tensor t);

    /// Shape-checked but not finiteness-checked; model predictions use this
    /// so the training divergence guard sees the non-finite loss instead of a
    /// constructor error.
    struct unchecked_tag {};
    Field(Tensor t, unchecked_tag);

    int64_t batch() const { return values.dim(0); }
    int64_t tsteps() const { return values.dim(1); }
    int64_t height() const { return values.dim(2); }
    int64_t width() const { return values.dim(3); }
};

enum class UpMethod { nearest, bilinear };
enum class DownMethod { nearest, area };

/// Resampling policy for the multi-scale stage. matched=true pins the pair
/// (nearest, nearest), the only combination that is an exact mutual inverse.
struct ResampleSpec {
    UpMethod up_method = UpMethod::bilinear;
    DownMethod down_method = DownMethod::area;
    bool matched = false;

    void validate() const;
    static ResampleSpec matched_nearest() { return {UpMethod::nearest, DownMethod::nearest, true}; }
};

/// The S^2-way segmented-and-upsampled view of a Field: patches [B, S^2, T, H, W]
/// where every patch has been interpolated back to the source resolution.
/// Patch (i, j) <-> index i*S + j, row-major, fixed globally.
struct PatchBatch {
    Tensor patches;  // [B, S^2, T, H, W]
    int scale = 1;

    int64_t num_patches() const { return patches.dim(1); }
    static int patch_index(int i, int j, int scale) { return i * scale + j; }
    static int patch_row(int p, int scale) { return p / scale; }
    static int patch_col(int p, int scale) { return p % scale; }
};

/// Splits [B,T,H,W] into S^2 non-overlapping tiles of [B,T,H/S,W/S],
/// row-major patch order. H and W must be divisible by S.
std::vector<Tensor> segment(const Tensor& field, int scale);

/// Resamples [B,T,h,w] up to [B,T,H,W]; target dims must be integer multiples
/// of the source dims. Constant inputs map to constant outputs exactly.
Tensor interpolate_up(const Tensor& patch, int64_t target_h, int64_t target_w,
                      const ResampleSpec& spec);

/// Resamples [B,T,H,W] down to [B,T,h,w]; source dims must be integer
/// multiples of the target dims.
Tensor downsample(const Tensor& full_patch, int64_t target_h, int64_t target_w,
                  const ResampleSpec& spec);

/// Adjoint of downsample as a linear map (used by backpropagation).
Tensor downsample_adjoint(const Tensor& grad_out, int64_t source_h, int64_t source_w,
                          const ResampleSpec& spec);

/// Exact inverse of segment: tiles S^2 patches of [B,T,h,w] back into
/// [B,T,h*S,w*S]. Patch list must follow the row-major layout.
Tensor aggregate(const std::vector<Tensor>& patches, int scale);

/// segment + interpolate_up for every patch, bundled with the index layout.
PatchBatch segment_and_upsample(const Field& field, int scale, const ResampleSpec& spec);

}  // namespace m2m
