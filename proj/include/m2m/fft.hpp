#pragma once

#include <complex>
#include <vector>

namespace m2m::fft {

/// 2D real-to-complex transform (FFTW r2c conventions, unnormalized).
/// Input h*w reals, output h*(w/2+1) complex values, row-major.
void r2c(int h, int w, const double* in, std::complex<double>* out);

/// 2D complex-to-real transform (FFTW c2r conventions, unnormalized).
/// Input h*(w/2+1) complex values; the input buffer is preserved.
/// Dividing the output by h*w inverts r2c.
void c2r(int h, int w, const std::complex<double>* in, double* out);

inline int half_w(int w) { return w / 2 + 1; }

}  // namespace m2m::fft
