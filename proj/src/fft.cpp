#include "m2m/fft.hpp"

#include <fftw3.h>

#include <cstring>
#include <map>
#include <mutex>
#include <vector>

namespace m2m::fft {

namespace {

// Plans are cached per grid size and created under a lock (FFTW planning is
// not thread-safe). Execution through the new-array interface is thread-safe
// as long as each caller owns its buffers; FFTW_UNALIGNED removes the
// alignment requirement on those buffers.
struct PlanPair {
    fftw_plan fwd = nullptr;
    fftw_plan bwd = nullptr;
};

std::mutex g_plan_mutex;
std::map<std::pair<int, int>, PlanPair>& plan_cache() {
    static std::map<std::pair<int, int>, PlanPair> cache;
    return cache;
}

PlanPair& plans_for(int h, int w) {
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    auto& cache = plan_cache();
    auto it = cache.find({h, w});
    if (it != cache.end()) return it->second;

    const int hw = half_w(w);
    std::vector<double> real(static_cast<size_t>(h) * w);
    std::vector<fftw_complex> cplx(static_cast<size_t>(h) * hw);
    PlanPair p;
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    p.fwd = fftw_plan_dft_r2c_2d(h, w, real.data(), cplx.data(), flags);
    p.bwd = fftw_plan_dft_c2r_2d(h, w, cplx.data(), real.data(), flags);
    return cache.emplace(std::make_pair(h, w), p).first->second;
}

}  // namespace

void r2c(int h, int w, const double* in, std::complex<double>* out) {
    PlanPair& p = plans_for(h, w);
    fftw_execute_dft_r2c(p.fwd, const_cast<double*>(in),
                         reinterpret_cast<fftw_complex*>(out));
}

void c2r(int h, int w, const std::complex<double>* in, double* out) {
    PlanPair& p = plans_for(h, w);
    // Multi-dimensional c2r destroys its input; execute on a scratch copy.
    thread_local std::vector<std::complex<double>> scratch;
    const size_t n = static_cast<size_t>(h) * half_w(w);
    scratch.resize(n);
    std::memcpy(scratch.data(), in, n * sizeof(std::complex<double>));
    fftw_execute_dft_c2r(p.bwd, reinterpret_cast<fftw_complex*>(scratch.data()), out);
}

}  // namespace m2m::fft
