#include "m2m/datagen.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>

#include "m2m/container.hpp"
#include "m2m/errors.hpp"
#include "m2m/fft.hpp"
#include "m2m/nn.hpp"
#include "m2m/rng.hpp"

namespace m2m {

std::string dataset_kind_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::poisson: return "poisson";
        case DatasetKind::ns: return "ns";
        case DatasetKind::cylinder: return "cylinder";
    }
    return "?";
}

DatasetKind dataset_kind_from(const std::string& s) {
    if (s == "poisson") return DatasetKind::poisson;
    if (s == "ns") return DatasetKind::ns;
    if (s == "cylinder") return DatasetKind::cylinder;
    throw ConfigError("unknown dataset kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Poisson

void PoissonConfig::validate() const {
    if (grid < 6) throw ConfigError("poisson: grid too small");
    if (block_rows < 1 || block_cols < 1) throw ConfigError("poisson: blocks must be >= 1");
    if (grid % block_rows != 0 || grid % block_cols != 0)
        throw ConfigError("poisson: grid must be divisible by the block layout");
    if (grid / block_rows < 3 || grid / block_cols < 3)
        throw ConfigError("poisson: blocks must be at least 3 nodes per axis");
    if (mu_std < 0.0) throw ConfigError("poisson: mu_std must be >= 0");
    if (n_samples < 1) throw ConfigError("poisson: n_samples must be >= 1");
    if (train_split < 0 || train_split > n_samples)
        throw ConfigError("poisson: train_split must lie in [0, n_samples]");
    if (!(high_freq_factor > 0.0)) throw ConfigError("poisson: high_freq_factor must be > 0");
}

nlohmann::json PoissonConfig::to_json() const {
    return {{"grid", grid},
            {"block_rows", block_rows},
            {"block_cols", block_cols},
            {"mu_mean", mu_mean},
            {"mu_std", mu_std},
            {"n_samples", n_samples},
            {"train_split", train_split},
            {"high_freq_factor", high_freq_factor},
            {"seed", seed}};
}

double poisson_source(int k_factor, double mu, double x, double y) {
    return std::sin(M_PI * k_factor * mu * x) * std::sin(M_PI * k_factor * mu * y);
}

namespace {

// Cached LDLT factorizations of the 5-point Dirichlet Laplacian, keyed by
// block node counts. The matrix depends only on the grid, not the data.
struct PoissonFactor {
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
};

std::mutex g_factor_mutex;
std::map<std::pair<int64_t, int64_t>, std::shared_ptr<PoissonFactor>> g_factors;

std::shared_ptr<PoissonFactor> factor_for(int64_t h, int64_t w) {
    std::lock_guard<std::mutex> lock(g_factor_mutex);
    auto it = g_factors.find({h, w});
    if (it != g_factors.end()) return it->second;

    const int64_t ih = h - 2, iw = w - 2, n = ih * iw;
    const double hx = 1.0 / static_cast<double>(w - 1);
    const double hy = 1.0 / static_cast<double>(h - 1);
    const double cx = 1.0 / (hx * hx), cy = 1.0 / (hy * hy);
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<size_t>(5 * n));
    auto idx = [iw](int64_t r, int64_t c) { return r * iw + c; };
    // Assemble -laplace_h (SPD) so LDLT is well-conditioned; the solver flips
    // the right-hand side sign accordingly.
    for (int64_t r = 0; r < ih; ++r)
        for (int64_t c = 0; c < iw; ++c) {
            const auto i = idx(r, c);
            trips.emplace_back(i, i, 2.0 * cx + 2.0 * cy);
            if (r > 0) trips.emplace_back(i, idx(r - 1, c), -cy);
            if (r < ih - 1) trips.emplace_back(i, idx(r + 1, c), -cy);
            if (c > 0) trips.emplace_back(i, idx(r, c - 1), -cx);
            if (c < iw - 1) trips.emplace_back(i, idx(r, c + 1), -cx);
        }
    Eigen::SparseMatrix<double> a(n, n);
    a.setFromTriplets(trips.begin(), trips.end());
    auto factor = std::make_shared<PoissonFactor>();
    factor->ldlt.compute(a);
    if (factor->ldlt.info() != Eigen::Success)
        throw DataError("poisson: factorization failed for block " + std::to_string(h) + "x" +
                        std::to_string(w));
    g_factors.emplace(std::make_pair(h, w), factor);
    return factor;
}

// Matrix-free 5-point -laplace_h application on interior unknowns.
void apply_neg_laplace(const double* x, double* y, int64_t ih, int64_t iw, double cx, double cy) {
    for (int64_t r = 0; r < ih; ++r)
        for (int64_t c = 0; c < iw; ++c) {
            const int64_t i = r * iw + c;
            double acc = (2.0 * cx + 2.0 * cy) * x[i];
            if (r > 0) acc -= cy * x[i - iw];
            if (r < ih - 1) acc -= cy * x[i + iw];
            if (c > 0) acc -= cx * x[i - 1];
            if (c < iw - 1) acc -= cx * x[i + 1];
            y[i] = acc;
        }
}

std::vector<double> solve_cg(const std::vector<double>& b, int64_t ih, int64_t iw, double cx,
                             double cy) {
    const int64_t n = ih * iw;
    std::vector<double> x(static_cast<size_t>(n), 0.0), r = b, p = b,
                        ap(static_cast<size_t>(n));
    double rs = 0.0;
    for (double v : r) rs += v * v;
    const double tol2 = 1e-20 * std::max(rs, 1.0);
    const int max_iter = static_cast<int>(20 * std::sqrt(static_cast<double>(n)) + 1000);
    for (int it = 0; it < max_iter; ++it) {
        if (rs <= tol2) return x;
        apply_neg_laplace(p.data(), ap.data(), ih, iw, cx, cy);
        double pap = 0.0;
        for (int64_t i = 0; i < n; ++i) pap += p[static_cast<size_t>(i)] * ap[static_cast<size_t>(i)];
        const double alpha = rs / pap;
        double rs_new = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            x[static_cast<size_t>(i)] += alpha * p[static_cast<size_t>(i)];
            r[static_cast<size_t>(i)] -= alpha * ap[static_cast<size_t>(i)];
            rs_new += r[static_cast<size_t>(i)] * r[static_cast<size_t>(i)];
        }
        const double beta = rs_new / rs;
        rs = rs_new;
        for (int64_t i = 0; i < n; ++i)
            p[static_cast<size_t>(i)] = r[static_cast<size_t>(i)] + beta * p[static_cast<size_t>(i)];
    }
    if (rs > tol2) throw DataError("poisson: conjugate gradient did not converge");
    return x;
}

}  // namespace

Tensor poisson_solve(const Tensor& f, int64_t direct_limit) {
    if (f.rank() != 2) throw ShapeError("poisson_solve: expected [H,W] source");
    const int64_t h = f.dim(0), w = f.dim(1);
    if (h < 3 || w < 3) throw ShapeError("poisson_solve: block dims must be >= 3");
    if (!f.all_finite()) throw ShapeError("poisson_solve: non-finite source");
    const int64_t ih = h - 2, iw = w - 2, n = ih * iw;
    const double hx = 1.0 / static_cast<double>(w - 1);
    const double hy = 1.0 / static_cast<double>(h - 1);
    const double cx = 1.0 / (hx * hx), cy = 1.0 / (hy * hy);

    // laplace(u) = f with u = 0 on the boundary; solve -laplace_h u = -f.
    Tensor u({h, w});
    if (n <= direct_limit) {
        auto factor = factor_for(h, w);
        Eigen::VectorXd b(n);
        for (int64_t r = 0; r < ih; ++r)
            for (int64_t c = 0; c < iw; ++c) b(r * iw + c) = -f.at(r + 1, c + 1);
        Eigen::VectorXd sol = factor->ldlt.solve(b);
        for (int64_t r = 0; r < ih; ++r)
            for (int64_t c = 0; c < iw; ++c) u.at(r + 1, c + 1) = sol(r * iw + c);
    } else {
        std::vector<double> b(static_cast<size_t>(n));
        for (int64_t r = 0; r < ih; ++r)
            for (int64_t c = 0; c < iw; ++c)
                b[static_cast<size_t>(r * iw + c)] = -f.at(r + 1, c + 1);
        const std::vector<double> sol = solve_cg(b, ih, iw, cx, cy);
        for (int64_t r = 0; r < ih; ++r)
            for (int64_t c = 0; c < iw; ++c) u.at(r + 1, c + 1) = sol[static_cast<size_t>(r * iw + c)];
    }
    return u;
}

double poisson_residual(const Tensor& u, const Tensor& f) {
    require_same_shape(u, f, "poisson_residual");
    const int64_t h = u.dim(0), w = u.dim(1);
    const double hx = 1.0 / static_cast<double>(w - 1);
    const double hy = 1.0 / static_cast<double>(h - 1);
    const double cx = 1.0 / (hx * hx), cy = 1.0 / (hy * hy);
    double worst = 0.0;
    for (int64_t r = 1; r < h - 1; ++r)
        for (int64_t c = 1; c < w - 1; ++c) {
            const double lap = cx * (u.at(r, c - 1) - 2.0 * u.at(r, c) + u.at(r, c + 1)) +
                               cy * (u.at(r - 1, c) - 2.0 * u.at(r, c) + u.at(r + 1, c));
            worst = std::max(worst, std::fabs(lap - f.at(r, c)));
        }
    return worst;
}

Sample make_multiscale_sample(double mu, const PoissonConfig& cfg) {
    cfg.validate();
    if (!(mu > 0.0)) throw DataError("make_multiscale_sample: mu must be > 0");
    const int64_t bh = cfg.grid / cfg.block_rows, bw = cfg.grid / cfg.block_cols;
    Sample s;
    s.input = Tensor({1, cfg.grid, cfg.grid});
    s.target = Tensor({1, cfg.grid, cfg.grid});
    Tensor f({bh, bw});
    for (int bi = 0; bi < cfg.block_rows; ++bi)
        for (int bj = 0; bj < cfg.block_cols; ++bj) {
            const int k = bi * cfg.block_cols + bj + 1;
            for (int pass = 0; pass < 2; ++pass) {
                const double freq = pass == 0 ? mu : cfg.high_freq_factor * mu;
                for (int64_t r = 0; r < bh; ++r)
                    for (int64_t c = 0; c < bw; ++c) {
                        const double x = static_cast<double>(c) / static_cast<double>(bw - 1);
                        const double y = static_cast<double>(r) / static_cast<double>(bh - 1);
                        f.at(r, c) = poisson_source(k, freq, x, y);
                    }
                const Tensor u = poisson_solve(f);
                Tensor& dst = pass == 0 ? s.input : s.target;
                for (int64_t r = 0; r < bh; ++r)
                    for (int64_t c = 0; c < bw; ++c)
                        dst.at(0, bi * bh + r, bj * bw + c) = u.at(r, c);
            }
        }
    s.meta["mu"] = mu;
    return s;
}

Dataset generate_poisson_dataset(const PoissonConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.kind = DatasetKind::poisson;
    std::vector<Sample> all(static_cast<size_t>(cfg.n_samples));
    std::vector<double> mus(static_cast<size_t>(cfg.n_samples));
    for (int i = 0; i < cfg.n_samples; ++i) {
        Rng rng(derive_seed(cfg.seed, /*stream=*/2, static_cast<uint64_t>(i)));
        mus[static_cast<size_t>(i)] = rng.normal(cfg.mu_mean, cfg.mu_std);
    }
    parallel_for(cfg.n_samples, resolve_threads(0), [&](int i) {
        all[static_cast<size_t>(i)] = make_multiscale_sample(mus[static_cast<size_t>(i)], cfg);
    });
    for (int i = 0; i < cfg.n_samples; ++i) {
        if (i < cfg.train_split)
            ds.train.push_back(std::move(all[static_cast<size_t>(i)]));
        else
            ds.test.push_back(std::move(all[static_cast<size_t>(i)]));
    }
    ds.manifest["kind"] = "poisson";
    ds.manifest["config"] = cfg.to_json();
    ds.manifest["seed"] = cfg.seed;
    return ds;
}

// ---------------------------------------------------------------------------
// Navier-Stokes

void NsConfig::validate() const {
    if (grid < 8) throw ConfigError("ns: grid too small");
    if (generate && (grid & (grid - 1)) != 0)
        throw ConfigError("ns: grid must be a power of two for spectral generation");
    if (!(viscosity >= 0.0)) throw ConfigError("ns: viscosity must be >= 0");
    if (t_in < 1 || t_out < 1) throw ConfigError("ns: window lengths must be >= 1");
    if (generate && !(dt > 0.0)) throw ConfigError("ns: dt must be > 0");
    if (generate && record_stride < 1) throw ConfigError("ns: record_stride must be >= 1");
    if (n_samples < 1) throw ConfigError("ns: n_samples must be >= 1");
}

nlohmann::json NsConfig::to_json() const {
    return {{"grid", grid},
            {"viscosity", viscosity},
            {"t_in", t_in},
            {"t_out", t_out},
            {"source", generate ? "generate" : "load"},
            {"dt", dt},
            {"record_stride", record_stride},
            {"warmup", warmup},
            {"forcing_amplitude", forcing_amplitude},
            {"n_samples", n_samples},
            {"seed", seed}};
}

struct NsSolver::Impl {
    int n = 0;
    int hw = 0;
    double nu = 0.0;
    CVec w_hat;    // [n, hw]
    CVec f_hat;    // forcing spectrum
    std::vector<double> kx, ky;    // wavenumbers (2*pi*m), for even operators
    std::vector<double> kx_d, ky_d;  // differentiation wavenumbers, Nyquist zeroed
    std::vector<uint8_t> dealias;

    Impl(int grid, double viscosity, double forcing_amplitude)
        : n(grid), hw(fft::half_w(grid)), nu(viscosity) {
        w_hat.assign(static_cast<size_t>(n) * hw, {0.0, 0.0});
        kx.resize(static_cast<size_t>(n));
        kx_d.resize(static_cast<size_t>(n));
        for (int a = 0; a < n; ++a) {
            const int m = a <= n / 2 ? a : a - n;
            kx[static_cast<size_t>(a)] = 2.0 * M_PI * m;
            kx_d[static_cast<size_t>(a)] = (2 * a == n) ? 0.0 : 2.0 * M_PI * m;
        }
        ky.resize(static_cast<size_t>(hw));
        ky_d.resize(static_cast<size_t>(hw));
        for (int b = 0; b < hw; ++b) {
            ky[static_cast<size_t>(b)] = 2.0 * M_PI * b;
            ky_d[static_cast<size_t>(b)] = (2 * b == n) ? 0.0 : 2.0 * M_PI * b;
        }
        dealias.assign(static_cast<size_t>(n) * hw, 0);
        const int cutoff = n / 3;
        for (int a = 0; a < n; ++a) {
            const int ma = a <= n / 2 ? a : a - n;
            for (int b = 0; b < hw; ++b)
                dealias[static_cast<size_t>(a) * hw + b] =
                    (std::abs(ma) <= cutoff && b <= cutoff) ? 1 : 0;
        }
        // f(x, y) = A * (sin(2 pi (x + y)) + cos(2 pi (x + y)))
        std::vector<double> f(static_cast<size_t>(n) * n);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) {
                const double x = static_cast<double>(c) / n;
                const double y = static_cast<double>(r) / n;
                f[static_cast<size_t>(r) * n + c] =
                    forcing_amplitude *
                    (std::sin(2.0 * M_PI * (x + y)) + std::cos(2.0 * M_PI * (x + y)));
            }
        f_hat.assign(static_cast<size_t>(n) * hw, {0.0, 0.0});
        fft::r2c(n, n, f.data(), f_hat.data());
    }

    void velocity_hat(const CVec& wh, CVec& u_hat, CVec& v_hat) const {
        u_hat.assign(wh.size(), {0.0, 0.0});
        v_hat.assign(wh.size(), {0.0, 0.0});
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < hw; ++b) {
                const size_t i = static_cast<size_t>(a) * hw + b;
                const double k2 = kx[static_cast<size_t>(a)] * kx[static_cast<size_t>(a)] +
                                  ky[static_cast<size_t>(b)] * ky[static_cast<size_t>(b)];
                if (k2 == 0.0) continue;
                const std::complex<double> psi = wh[i] / k2;  // -laplace(psi) = w
                u_hat[i] = std::complex<double>(0.0, ky_d[static_cast<size_t>(b)]) * psi;
                v_hat[i] = std::complex<double>(0.0, -kx_d[static_cast<size_t>(a)]) * psi;
            }
    }

    // Nonlinear term N(w) = -(u . grad w) + f, dealiased; also reports max |u|.
    void nonlinear(const CVec& wh, CVec& out, double* max_vel) const {
        CVec u_hat, v_hat;
        velocity_hat(wh, u_hat, v_hat);
        CVec wx_hat(wh.size()), wy_hat(wh.size());
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < hw; ++b) {
                const size_t i = static_cast<size_t>(a) * hw + b;
                wx_hat[i] = std::complex<double>(0.0, kx_d[static_cast<size_t>(a)]) * wh[i];
                wy_hat[i] = std::complex<double>(0.0, ky_d[static_cast<size_t>(b)]) * wh[i];
            }
        const size_t np = static_cast<size_t>(n) * n;
        std::vector<double> u(np), v(np), wx(np), wy(np);
        const double norm = 1.0 / static_cast<double>(np);
        fft::c2r(n, n, u_hat.data(), u.data());
        fft::c2r(n, n, v_hat.data(), v.data());
        fft::c2r(n, n, wx_hat.data(), wx.data());
        fft::c2r(n, n, wy_hat.data(), wy.data());
        double mv = 0.0;
        std::vector<double> adv(np);
        for (size_t i = 0; i < np; ++i) {
            u[i] *= norm;
            v[i] *= norm;
            mv = std::max(mv, std::max(std::fabs(u[i]), std::fabs(v[i])));
            adv[i] = -(u[i] * wx[i] * norm + v[i] * wy[i] * norm);
        }
        if (max_vel) *max_vel = mv;
        out.assign(wh.size(), {0.0, 0.0});
        fft::r2c(n, n, adv.data(), out.data());
        for (size_t i = 0; i < out.size(); ++i) {
            out[i] = dealias[i] ? out[i] + f_hat[i] : std::complex<double>{0.0, 0.0};
        }
    }
};

NsSolver::NsSolver(int grid, double viscosity, double forcing_amplitude)
    : impl_(std::make_shared<Impl>(grid, viscosity, forcing_amplitude)) {}

void NsSolver::set_vorticity(const Tensor& w) {
    if (w.rank() != 2 || w.dim(0) != impl_->n || w.dim(1) != impl_->n)
        throw ShapeError("ns: vorticity must be [" + std::to_string(impl_->n) + "," +
                         std::to_string(impl_->n) + "]");
    impl_->w_hat.assign(static_cast<size_t>(impl_->n) * impl_->hw, {0.0, 0.0});
    fft::r2c(impl_->n, impl_->n, w.data(), impl_->w_hat.data());
}

Tensor NsSolver::vorticity() const {
    Tensor w({impl_->n, impl_->n});
    fft::c2r(impl_->n, impl_->n, impl_->w_hat.data(), w.data());
    const double norm = 1.0 / static_cast<double>(impl_->n * impl_->n);
    for (double& x : w.v) x *= norm;
    return w;
}

void NsSolver::velocity(Tensor& u, Tensor& v) const {
    CVec u_hat, v_hat;
    impl_->velocity_hat(impl_->w_hat, u_hat, v_hat);
    u = Tensor({impl_->n, impl_->n});
    v = Tensor({impl_->n, impl_->n});
    fft::c2r(impl_->n, impl_->n, u_hat.data(), u.data());
    fft::c2r(impl_->n, impl_->n, v_hat.data(), v.data());
    const double norm = 1.0 / static_cast<double>(impl_->n * impl_->n);
    for (double& x : u.v) x *= norm;
    for (double& x : v.v) x *= norm;
}

void NsSolver::step(double dt) {
    Impl& s = *impl_;
    const size_t sz = s.w_hat.size();
    CVec e(sz), e2(sz);
    for (int a = 0; a < s.n; ++a)
        for (int b = 0; b < s.hw; ++b) {
            const size_t i = static_cast<size_t>(a) * s.hw + b;
            const double k2 = s.kx[static_cast<size_t>(a)] * s.kx[static_cast<size_t>(a)] +
                              s.ky[static_cast<size_t>(b)] * s.ky[static_cast<size_t>(b)];
            e[i] = std::exp(-s.nu * k2 * dt / 2.0);
            e2[i] = e[i] * e[i];
        }
    double max_vel = 0.0;
    CVec k1, k2v, k3, k4;
    s.nonlinear(s.w_hat, k1, &max_vel);
    const double cfl = max_vel * dt * static_cast<double>(s.n);
    if (cfl > 1.0)
        throw DataError("ns: CFL violation, max|u|*dt/dx = " + std::to_string(cfl));

    CVec tmp(sz);
    for (size_t i = 0; i < sz; ++i) tmp[i] = e[i] * (s.w_hat[i] + 0.5 * dt * k1[i]);
    s.nonlinear(tmp, k2v, nullptr);
    for (size_t i = 0; i < sz; ++i) tmp[i] = e[i] * s.w_hat[i] + 0.5 * dt * k2v[i];
    s.nonlinear(tmp, k3, nullptr);
    for (size_t i = 0; i < sz; ++i) tmp[i] = e2[i] * s.w_hat[i] + dt * e[i] * k3[i];
    s.nonlinear(tmp, k4, nullptr);
    for (size_t i = 0; i < sz; ++i)
        s.w_hat[i] = e2[i] * s.w_hat[i] +
                     dt / 6.0 * (e2[i] * k1[i] + 2.0 * e[i] * (k2v[i] + k3[i]) + k4[i]);
}

double NsSolver::kinetic_energy() const {
    Tensor u, v;
    velocity(u, v);
    double acc = 0.0;
    for (int64_t i = 0; i < u.numel(); ++i) acc += u.v[i] * u.v[i] + v.v[i] * v.v[i];
    return 0.5 * acc / static_cast<double>(u.numel());
}

Tensor ns_random_initial(int grid, uint64_t seed) {
    const int hw = fft::half_w(grid);
    Rng rng(seed);
    CVec w0(static_cast<size_t>(grid) * hw, {0.0, 0.0});
    const double tau = 7.0;
    for (int a = 0; a < grid; ++a) {
        const int ma = a <= grid / 2 ? a : a - grid;
        for (int b = 0; b < hw; ++b) {
            const double k2 = 4.0 * M_PI * M_PI * (ma * ma + b * b);
            const double amp = std::pow(tau, 1.5) * std::pow(k2 + tau * tau, -1.25);
            const double re = rng.normal() * amp;
            const double im = rng.normal() * amp;
            if (a == 0 && b == 0) continue;  // mean zero
            w0[static_cast<size_t>(a) * hw + b] = {re, im};
        }
    }
    // Make the spectrum Hermitian-consistent on the self-mapped columns.
    for (int b : {0, grid / 2}) {
        if (b >= hw) continue;
        for (int a = 1; a < grid / 2; ++a)
            w0[static_cast<size_t>(grid - a) * hw + b] =
                std::conj(w0[static_cast<size_t>(a) * hw + b]);
        for (int a : {0, grid / 2})
            w0[static_cast<size_t>(a) * hw + b] = {w0[static_cast<size_t>(a) * hw + b].real(), 0.0};
    }
    Tensor w({grid, grid});
    fft::c2r(grid, grid, w0.data(), w.data());
    // The synthesis amplitude is grid-independent: coefficients are treated as
    // Fourier-series coefficients rather than DFT bins, so no 1/N^2 here.
    return w;
}

double spectral_divergence(const Tensor& u, const Tensor& v) {
    require_same_shape(u, v, "spectral_divergence");
    const int n = static_cast<int>(u.dim(0));
    const int hw = fft::half_w(n);
    CVec uh(static_cast<size_t>(n) * hw), vh(static_cast<size_t>(n) * hw);
    fft::r2c(n, n, u.data(), uh.data());
    fft::r2c(n, n, v.data(), vh.data());
    double worst = 0.0;
    const double norm = 1.0 / static_cast<double>(n) / n;
    for (int a = 0; a < n; ++a) {
        const int ma = a <= n / 2 ? a : a - n;
        const double kx = (2 * a == n) ? 0.0 : 2.0 * M_PI * ma;
        for (int b = 0; b < hw; ++b) {
            const double ky = (2 * b == n) ? 0.0 : 2.0 * M_PI * b;
            const size_t i = static_cast<size_t>(a) * hw + b;
            const std::complex<double> div =
                std::complex<double>(0.0, kx) * uh[i] + std::complex<double>(0.0, ky) * vh[i];
            worst = std::max(worst, std::abs(div) * norm);
        }
    }
    return worst;
}

Dataset ns_generate(const NsConfig& cfg, int n_samples, uint64_t seed) {
    NsConfig c = cfg;
    c.n_samples = n_samples;
    c.seed = seed;
    c.validate();
    Dataset ds;
    ds.kind = DatasetKind::ns;
    std::vector<Sample> all(static_cast<size_t>(n_samples));
    parallel_for(n_samples, resolve_threads(0), [&](int i) {
        const uint64_t ic_seed = derive_seed(seed, /*stream=*/3, static_cast<uint64_t>(i));
        NsSolver solver(c.grid, c.viscosity, c.forcing_amplitude);
        solver.set_vorticity(ns_random_initial(c.grid, ic_seed));
        const int warmup_steps = static_cast<int>(std::llround(c.warmup / c.dt));
        for (int st = 0; st < warmup_steps; ++st) solver.step(c.dt);
        Sample s;
        s.input = Tensor({c.t_in, c.grid, c.grid});
        s.target = Tensor({c.t_out, c.grid, c.grid});
        const int frames = c.t_in + c.t_out;
        for (int fidx = 0; fidx < frames; ++fidx) {
            if (fidx > 0)
                for (int st = 0; st < c.record_stride; ++st) solver.step(c.dt);
            const Tensor w = solver.vorticity();
            Tensor& dst = fidx < c.t_in ? s.input : s.target;
            const int tt = fidx < c.t_in ? fidx : fidx - c.t_in;
            std::memcpy(dst.data() + static_cast<int64_t>(tt) * c.grid * c.grid, w.data(),
                        sizeof(double) * static_cast<size_t>(c.grid) * c.grid);
        }
        s.meta["ic_seed"] = static_cast<double>(ic_seed);
        all[static_cast<size_t>(i)] = std::move(s);
    });
    // Single window pair per trajectory: everything is the training pool; the
    // caller decides the split via config (mirrors the poisson layout).
    ds.train = std::move(all);
    ds.manifest["kind"] = "ns";
    ds.manifest["config"] = c.to_json();
    ds.manifest["seed"] = seed;
    return ds;
}

// ---------------------------------------------------------------------------
// Container IO

namespace {

void stack_samples(const std::vector<Sample>& samples, NamedArray& inputs, NamedArray& targets) {
    if (samples.empty()) return;
    const Tensor& i0 = samples.front().input;
    const Tensor& t0 = samples.front().target;
    inputs.shape = {static_cast<int64_t>(samples.size()), i0.dim(0), i0.dim(1), i0.dim(2)};
    targets.shape = {static_cast<int64_t>(samples.size()), t0.dim(0), t0.dim(1), t0.dim(2)};
    inputs.data.reserve(static_cast<size_t>(Tensor::numel_of(inputs.shape)));
    targets.data.reserve(static_cast<size_t>(Tensor::numel_of(targets.shape)));
    for (const Sample& s : samples) {
        require_same_shape(s.input, i0, "save_dataset inputs");
        require_same_shape(s.target, t0, "save_dataset targets");
        inputs.data.insert(inputs.data.end(), s.input.v.begin(), s.input.v.end());
        targets.data.insert(targets.data.end(), s.target.v.begin(), s.target.v.end());
    }
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("save_dataset: cannot create " + dir.string());
    std::vector<Sample> all;
    all.reserve(ds.train.size() + ds.test.size());
    for (const Sample& s : ds.train) all.push_back(s);
    for (const Sample& s : ds.test) all.push_back(s);
    if (all.empty()) throw DataError("save_dataset: empty dataset");

    NamedArray inputs{"inputs", {}, false, {}};
    NamedArray targets{"targets", {}, false, {}};
    stack_samples(all, inputs, targets);
    write_container(dir / "data.bin", {inputs, targets});

    nlohmann::json manifest = ds.manifest;
    manifest["kind"] = dataset_kind_name(ds.kind);
    manifest["n_train"] = ds.train.size();
    manifest["n_test"] = ds.test.size();
    manifest["input_shape"] = inputs.shape;
    manifest["target_shape"] = targets.shape;
    nlohmann::json meta = nlohmann::json::array();
    for (const Sample& s : all) meta.push_back(s.meta);
    manifest["per_sample_meta"] = meta;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw DataError("save_dataset: cannot write manifest");
    os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir, DatasetKind kind) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream is(manifest_path);
    if (!is) throw DataError("load_dataset: missing " + manifest_path.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_dataset: bad manifest: " + std::string(e.what()));
    }
    if (manifest.value("kind", "") != dataset_kind_name(kind))
        throw DataError("load_dataset: manifest kind '" + manifest.value("kind", "") +
                        "' does not match requested '" + dataset_kind_name(kind) + "'");

    const auto arrays = read_container(dir / "data.bin");
    const NamedArray& inputs = find_array(arrays, "inputs");
    const NamedArray& targets = find_array(arrays, "targets");
    if (inputs.shape.size() != 4 || targets.shape.size() != 4)
        throw DataError("load_dataset: arrays must be [N,T,H,W]");
    if (inputs.shape[0] != targets.shape[0])
        throw DataError("load_dataset: inputs/targets sample counts differ");

    auto check_axis = [](const char* array, const char* axis, int64_t got, int64_t want) {
        if (got != want)
            throw DataError(std::string("load_dataset: shape mismatch on ") + array + " axis " +
                            axis + ": got " + std::to_string(got) + ", expected " +
                            std::to_string(want));
    };
    switch (kind) {
        case DatasetKind::poisson:
            check_axis("inputs", "T", inputs.shape[1], 1);
            check_axis("targets", "T", targets.shape[1], 1);
            check_axis("inputs", "W", inputs.shape[3], inputs.shape[2]);
            break;
        case DatasetKind::ns:
            check_axis("inputs", "T", inputs.shape[1], 10);
            check_axis("targets", "T", targets.shape[1], 10);
            break;
        case DatasetKind::cylinder:
            check_axis("inputs", "H", inputs.shape[2], 192);
            check_axis("inputs", "W", inputs.shape[3], 112);
            check_axis("targets", "H", targets.shape[2], 192);
            check_axis("targets", "W", targets.shape[3], 112);
            break;
    }
    check_axis("targets", "H", targets.shape[2], inputs.shape[2]);
    check_axis("targets", "W", targets.shape[3], inputs.shape[3]);

    const int64_t n = inputs.shape[0];
    int64_t n_train = manifest.value("n_train", n);
    if (n_train < 0 || n_train > n) throw DataError("load_dataset: bad n_train in manifest");

    Dataset ds;
    ds.kind = kind;
    ds.manifest = manifest;
    const auto meta = manifest.value("per_sample_meta", nlohmann::json::array());
    const int64_t in_plane = inputs.shape[1] * inputs.shape[2] * inputs.shape[3];
    const int64_t tg_plane = targets.shape[1] * targets.shape[2] * targets.shape[3];
    for (int64_t i = 0; i < n; ++i) {
        Sample s;
        s.input = Tensor({inputs.shape[1], inputs.shape[2], inputs.shape[3]});
        s.target = Tensor({targets.shape[1], targets.shape[2], targets.shape[3]});
        std::copy(inputs.data.begin() + static_cast<size_t>(i * in_plane),
                  inputs.data.begin() + static_cast<size_t>((i + 1) * in_plane),
                  s.input.v.begin());
        std::copy(targets.data.begin() + static_cast<size_t>(i * tg_plane),
                  targets.data.begin() + static_cast<size_t>((i + 1) * tg_plane),
                  s.target.v.begin());
        if (!s.input.all_finite() || !s.target.all_finite())
            throw DataError("load_dataset: non-finite sample " + std::to_string(i));
        if (i < static_cast<int64_t>(meta.size()) && meta[static_cast<size_t>(i)].is_object())
            for (auto& [k, val] : meta[static_cast<size_t>(i)].items())
                if (val.is_number()) s.meta[k] = val.get<double>();
        if (i < n_train)
            ds.train.push_back(std::move(s));
        else
            ds.test.push_back(std::move(s));
    }
    return ds;
}

}  // namespace m2m
