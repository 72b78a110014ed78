#include "m2m/fields.hpp"

#include <algorithm>
#include <cstring>

namespace m2m {

Field::Field(Tensor t, unchecked_tag) : values(std::move(t)) {
    if (values.rank() != 4)
        throw ShapeError("Field: expected rank-4 [B,T,H,W], got " + values.shape_str());
    if (values.dim(0) < 1 || values.dim(1) < 1)
        throw ShapeError("Field: B and T must be >= 1, got " + values.shape_str());
    if (values.dim(2) < 2 || values.dim(3) < 2)
        throw ShapeError("Field: H and W must be >= 2, got " + values.shape_str());
    grid_spacing = 1.0 / static_cast<double>(values.dim(2) - 1);
}

Field::Field(Tensor t) : Field(std::move(t), unchecked_tag{}) {
    if (!values.all_finite()) throw ShapeError("Field: non-finite values");
}

void ResampleSpec::validate() const {
    if (matched && (up_method != UpMethod::nearest || down_method != DownMethod::nearest))
        throw ConfigError("ResampleSpec: matched=true permits only (nearest, nearest)");
}

std::vector<Tensor> segment(const Tensor& field, int scale) {
    if (field.rank() != 4) throw ShapeError("segment: expected [B,T,H,W]");
    if (scale < 1) throw ShapeError("segment: scale must be >= 1");
    const int64_t b = field.dim(0), t = field.dim(1), h = field.dim(2), w = field.dim(3);
    if (h % scale != 0 || w % scale != 0)
        throw ShapeError("segment: field dims " + field.shape_str() + " not divisible by scale " +
                         std::to_string(scale));
    const int64_t ph = h / scale, pw = w / scale;
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(scale) * scale);
    for (int i = 0; i < scale; ++i) {
        for (int j = 0; j < scale; ++j) {
            Tensor patch({b, t, ph, pw});
            for (int64_t bb = 0; bb < b; ++bb)
                for (int64_t tt = 0; tt < t; ++tt)
                    for (int64_t r = 0; r < ph; ++r) {
                        const double* src = field.data() +
                            (((bb * t + tt) * h + (i * ph + r)) * w + j * pw);
                        double* dst = patch.data() + (((bb * t + tt) * ph + r) * pw);
                        std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(pw));
                    }
            out.push_back(std::move(patch));
        }
    }
    return out;
}

namespace {

void check_multiple(int64_t big, int64_t small, const char* what) {
    if (small < 1 || big < small || big % small != 0)
        throw ShapeError(std::string(what) + ": " + std::to_string(big) +
                         " is not an integer multiple of " + std::to_string(small));
}

// Per-plane resampling kernels; planes are the [H,W] slices of [B,T,H,W].
void upsample_nearest_plane(const double* in, int64_t h, int64_t w, double* out, int64_t oh,
                            int64_t ow) {
    const int64_t rh = oh / h, rw = ow / w;
    for (int64_t r = 0; r < oh; ++r) {
        const double* src = in + (r / rh) * w;
        double* dst = out + r * ow;
        for (int64_t c = 0; c < ow; ++c) dst[c] = src[c / rw];
    }
}

// align-corners bilinear: source coordinate of output node i is
// i*(h-1)/(oh-1), so corners map to corners and a 2-point ramp stays a ramp.
void upsample_bilinear_plane(const double* in, int64_t h, int64_t w, double* out, int64_t oh,
                             int64_t ow) {
    for (int64_t r = 0; r < oh; ++r) {
        double fy = (oh == 1 || h == 1) ? 0.0
                                        : static_cast<double>(r) * static_cast<double>(h - 1) /
                                              static_cast<double>(oh - 1);
        int64_t y0 = static_cast<int64_t>(fy);
        if (y0 > h - 2) y0 = h - 2;
        if (y0 < 0) y0 = 0;
        double wy = (h == 1) ? 0.0 : fy - static_cast<double>(y0);
        for (int64_t c = 0; c < ow; ++c) {
            double fx = (ow == 1 || w == 1) ? 0.0
                                            : static_cast<double>(c) * static_cast<double>(w - 1) /
                                                  static_cast<double>(ow - 1);
            int64_t x0 = static_cast<int64_t>(fx);
            if (x0 > w - 2) x0 = w - 2;
            if (x0 < 0) x0 = 0;
            double wx = (w == 1) ? 0.0 : fx - static_cast<double>(x0);
            const double* p0 = in + y0 * w + x0;
            double top = p0[0] * (1.0 - wx) + ((w == 1) ? p0[0] : p0[1]) * wx;
            const double* p1 = (h == 1) ? p0 : p0 + w;
            double bot = p1[0] * (1.0 - wx) + ((w == 1) ? p1[0] : p1[1]) * wx;
            out[r * ow + c] = top * (1.0 - wy) + bot * wy;
        }
    }
}

void downsample_nearest_plane(const double* in, int64_t h, int64_t w, double* out, int64_t oh,
                              int64_t ow) {
    const int64_t rh = h / oh, rw = w / ow;
    // Top-left sample of each block; exact inverse of nearest upsampling.
    for (int64_t r = 0; r < oh; ++r)
        for (int64_t c = 0; c < ow; ++c) out[r * ow + c] = in[(r * rh) * w + c * rw];
}

void downsample_area_plane(const double* in, int64_t h, int64_t w, double* out, int64_t oh,
                           int64_t ow) {
    const int64_t rh = h / oh, rw = w / ow;
    const double inv = 1.0 / static_cast<double>(rh * rw);
    for (int64_t r = 0; r < oh; ++r)
        for (int64_t c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int64_t dr = 0; dr < rh; ++dr) {
                const double* src = in + (r * rh + dr) * w + c * rw;
                for (int64_t dc = 0; dc < rw; ++dc) acc += src[dc];
            }
            out[r * ow + c] = acc * inv;
        }
}

template <class Kernel>
Tensor apply_planes(const Tensor& x, int64_t oh, int64_t ow, Kernel&& kernel) {
    const int64_t b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({b, t, oh, ow});
    const int64_t planes = b * t;
    for (int64_t p = 0; p < planes; ++p)
        kernel(x.data() + p * h * w, h, w, out.data() + p * oh * ow, oh, ow);
    return out;
}

}  // namespace

Tensor interpolate_up(const Tensor& patch, int64_t target_h, int64_t target_w,
                      const ResampleSpec& spec) {
    if (patch.rank() != 4) throw ShapeError("interpolate_up: expected [B,T,h,w]");
    spec.validate();
    const int64_t h = patch.dim(2), w = patch.dim(3);
    check_multiple(target_h, h, "interpolate_up");
    check_multiple(target_w, w, "interpolate_up");
    if (target_h == h && target_w == w) return patch;
    switch (spec.up_method) {
        case UpMethod::nearest:
            return apply_planes(patch, target_h, target_w, upsample_nearest_plane);
        case UpMethod::bilinear:
            return apply_planes(patch, target_h, target_w, upsample_bilinear_plane);
    }
    throw ConfigError("interpolate_up: unknown method");
}

Tensor downsample(const Tensor& full_patch, int64_t target_h, int64_t target_w,
                  const ResampleSpec& spec) {
    if (full_patch.rank() != 4) throw ShapeError("downsample: expected [B,T,H,W]");
    spec.validate();
    const int64_t h = full_patch.dim(2), w = full_patch.dim(3);
    check_multiple(h, target_h, "downsample");
    check_multiple(w, target_w, "downsample");
    if (target_h == h && target_w == w) return full_patch;
    switch (spec.down_method) {
        case DownMethod::nearest:
            return apply_planes(full_patch, target_h, target_w, downsample_nearest_plane);
        case DownMethod::area:
            return apply_planes(full_patch, target_h, target_w, downsample_area_plane);
    }
    throw ConfigError("downsample: unknown method");
}

Tensor downsample_adjoint(const Tensor& grad_out, int64_t source_h, int64_t source_w,
                          const ResampleSpec& spec) {
    if (grad_out.rank() != 4) throw ShapeError("downsample_adjoint: expected [B,T,h,w]");
    const int64_t b = grad_out.dim(0), t = grad_out.dim(1);
    const int64_t oh = grad_out.dim(2), ow = grad_out.dim(3);
    check_multiple(source_h, oh, "downsample_adjoint");
    check_multiple(source_w, ow, "downsample_adjoint");
    Tensor gx({b, t, source_h, source_w});
    if (source_h == oh && source_w == ow) {
        gx.v = grad_out.v;
        return gx;
    }
    const int64_t rh = source_h / oh, rw = source_w / ow;
    const int64_t planes = b * t;
    for (int64_t p = 0; p < planes; ++p) {
        const double* g = grad_out.data() + p * oh * ow;
        double* dst = gx.data() + p * source_h * source_w;
        if (spec.down_method == DownMethod::nearest) {
            for (int64_t r = 0; r < oh; ++r)
                for (int64_t c = 0; c < ow; ++c) dst[(r * rh) * source_w + c * rw] = g[r * ow + c];
        } else {
            const double inv = 1.0 / static_cast<double>(rh * rw);
            for (int64_t r = 0; r < oh; ++r)
                for (int64_t c = 0; c < ow; ++c) {
                    const double val = g[r * ow + c] * inv;
                    for (int64_t dr = 0; dr < rh; ++dr) {
                        double* row = dst + (r * rh + dr) * source_w + c * rw;
                        for (int64_t dc = 0; dc < rw; ++dc) row[dc] = val;
                    }
                }
        }
    }
    return gx;
}

Tensor aggregate(const std::vector<Tensor>& patches, int scale) {
    if (scale < 1) throw ShapeError("aggregate: scale must be >= 1");
    const auto expected = static_cast<size_t>(scale) * static_cast<size_t>(scale);
    if (patches.size() != expected)
        throw ShapeError("aggregate: expected " + std::to_string(expected) + " patches, got " +
                         std::to_string(patches.size()));
    const Tensor& first = patches.front();
    if (first.rank() != 4) throw ShapeError("aggregate: patches must be [B,T,h,w]");
    for (const Tensor& p : patches) require_same_shape(first, p, "aggregate");
    const int64_t b = first.dim(0), t = first.dim(1), ph = first.dim(2), pw = first.dim(3);
    Tensor out({b, t, ph * scale, pw * scale});
    const int64_t h = ph * scale, w = pw * scale;
    for (int i = 0; i < scale; ++i)
        for (int j = 0; j < scale; ++j) {
            const Tensor& patch = patches[static_cast<size_t>(PatchBatch::patch_index(i, j, scale))];
            for (int64_t bb = 0; bb < b; ++bb)
                for (int64_t tt = 0; tt < t; ++tt)
                    for (int64_t r = 0; r < ph; ++r) {
                        const double* src = patch.data() + (((bb * t + tt) * ph + r) * pw);
                        double* dst = out.data() +
                            (((bb * t + tt) * h + (i * ph + r)) * w + j * pw);
                        std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(pw));
                    }
        }
    return out;
}

PatchBatch segment_and_upsample(const Field& field, int scale, const ResampleSpec& spec) {
    const auto tiles = segment(field.values, scale);
    const int64_t b = field.batch(), t = field.tsteps(), h = field.height(), w = field.width();
    PatchBatch pb;
    pb.scale = scale;
    pb.patches = Tensor({b, static_cast<int64_t>(tiles.size()), t, h, w});
    const int64_t plane = t * h * w;
    for (size_t p = 0; p < tiles.size(); ++p) {
        Tensor up = interpolate_up(tiles[p], h, w, spec);
        for (int64_t bb = 0; bb < b; ++bb) {
            std::memcpy(pb.patches.data() + (bb * static_cast<int64_t>(tiles.size()) +
                                             static_cast<int64_t>(p)) * plane,
                        up.data() + bb * plane, sizeof(double) * static_cast<size_t>(plane));
        }
    }
    return pb;
}

}  // namespace m2m
