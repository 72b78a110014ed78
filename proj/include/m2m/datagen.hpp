#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/tensor.hpp"

namespace m2m {

enum class DatasetKind { poisson, ns, cylinder };

std::string dataset_kind_name(DatasetKind k);
DatasetKind dataset_kind_from(const std::string& s);

/// One training pair: input [T_in, H, W] -> target [T_out, H, W].
struct Sample {
    Tensor input;
    Tensor target;
    std::map<std::string, double> meta;  // mu or initial-condition seed
};

struct Dataset {
    DatasetKind kind = DatasetKind::poisson;
    std::vector<Sample> train;
    std::vector<Sample> test;
    nlohmann::json manifest;
};

// ---------------------------------------------------------------------------
// Custom multi-scale Poisson benchmark

struct PoissonConfig {
    int grid = 128;           // global grid, assembled from blocks
    int block_rows = 2;
    int block_cols = 2;
    double mu_mean = 1.0;
    double mu_std = 0.1;
    int n_samples = 1000;
    int train_split = 700;
    double high_freq_factor = 7.0;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

/// Source term of block (i, j): sin(pi*k*mu*x) * sin(pi*k*mu*y) with
/// k = i*block_cols + j + 1, row-major.
double poisson_source(int k_factor, double mu, double x, double y);

/// Solves laplace(u) = f on one block with homogeneous Dirichlet boundary and
/// local coordinates x_i = i/(n-1) in [0,1] per axis. f is given at all nodes;
/// interior nodes use the 5-point stencil; boundary nodes return 0. Blocks up
/// to `direct_limit` interior unknowns use a cached sparse direct
/// factorization, larger ones a matrix-free conjugate gradient (tol 1e-10).
Tensor poisson_solve(const Tensor& f, int64_t direct_limit = 1 << 16);

/// Max-norm of the interior 5-point residual laplace_h(u) - f.
double poisson_residual(const Tensor& u, const Tensor& f);

/// Block-assembled low-frequency solution (factor k*mu) paired with the
/// high-frequency solution (factor k*high_freq_factor*mu).
Sample make_multiscale_sample(double mu, const PoissonConfig& cfg);

/// n_samples draws of mu ~ N(mu_mean, mu_std^2) under per-sample derived
/// seeds; first train_split samples form the training set.
Dataset generate_poisson_dataset(const PoissonConfig& cfg);

// ---------------------------------------------------------------------------
// 2D Navier-Stokes vorticity benchmark (unit torus)

struct NsConfig {
    int grid = 64;
    double viscosity = 1e-5;
    int t_in = 10;
    int t_out = 10;
    bool generate = true;       // source: generate | load
    double dt = 1e-3;
    int record_stride = 20;     // solver steps between recorded frames
    double warmup = 0.0;        // integration time before recording
    double forcing_amplitude = 0.1;
    int n_samples = 10;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

/// Pseudo-spectral state: advances vorticity w on the torus with 2/3-rule
/// dealiasing and integrating-factor RK4; velocity comes from the
/// streamfunction, so its spectral divergence is zero by construction.
class NsSolver {
  public:
    NsSolver(int grid, double viscosity, double forcing_amplitude);

    void set_vorticity(const Tensor& w);  // [N, N]
    Tensor vorticity() const;
    /// Velocity recovered from the current vorticity.
    void velocity(Tensor& u, Tensor& v) const;
    /// One step of size dt; throws DataError on CFL violation.
    void step(double dt);
    double kinetic_energy() const;

  private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

/// Gaussian random field initial vorticity (periodic, mean zero), spectral
/// amplitude (4 pi^2 |m|^2 + 49)^(-2.5/2) * 7^(3/2).
Tensor ns_random_initial(int grid, uint64_t seed);

/// Max-abs spectral divergence of a velocity pair.
double spectral_divergence(const Tensor& u, const Tensor& v);

/// Per sample: fresh seeded initial condition, warmup, then t_in + t_out
/// recorded frames (one window pair per trajectory).
Dataset ns_generate(const NsConfig& cfg, int n_samples, uint64_t seed);

// ---------------------------------------------------------------------------
// Container directory IO (data.bin + manifest.json)

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Loads and shape-validates a dataset directory. Expected shapes: poisson
/// [N,1,G,G] square; ns [N,10,H,W]; cylinder [N,1,192,112].
Dataset load_dataset(const std::filesystem::path& dir, DatasetKind kind);

}  // namespace m2m
