#include "m2m/datagen.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "m2m/container.hpp"
#include "test_util.hpp"

using namespace m2m;
using m2m::testing::random_tensor;

namespace {

Tensor manufactured_source(int64_t n) {
    // laplace(u*) = f with u* = sin(pi x) sin(pi y) -> f = -2 pi^2 u*.
    Tensor f({n, n});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < n; ++c) {
            const double x = static_cast<double>(c) / static_cast<double>(n - 1);
            const double y = static_cast<double>(r) / static_cast<double>(n - 1);
            f.at(r, c) = -2.0 * M_PI * M_PI * std::sin(M_PI * x) * std::sin(M_PI * y);
        }
    return f;
}

double manufactured_max_err(const Tensor& u) {
    const int64_t n = u.dim(0);
    double err = 0.0, scale = 0.0;
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < n; ++c) {
            const double x = static_cast<double>(c) / static_cast<double>(n - 1);
            const double y = static_cast<double>(r) / static_cast<double>(n - 1);
            const double exact = std::sin(M_PI * x) * std::sin(M_PI * y);
            err = std::max(err, std::fabs(u.at(r, c) - exact));
            scale = std::max(scale, std::fabs(exact));
        }
    return err / scale;
}

PoissonConfig tiny_poisson(int grid, int n_samples, int split, uint64_t seed) {
    PoissonConfig cfg;
    cfg.grid = grid;
    cfg.n_samples = n_samples;
    cfg.train_split = split;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("poisson_solve of a zero source is zero") {
    const Tensor u = poisson_solve(Tensor({16, 16}));
    for (double v : u.v) CHECK(v == 0.0);
}

TEST_CASE("poisson_solve matches the manufactured solution at 64x64") {
    const Tensor u = poisson_solve(manufactured_source(64));
    CHECK(manufactured_max_err(u) < 1e-3);
    CHECK(poisson_residual(u, manufactured_source(64)) < 1e-8);
}

TEST_CASE("poisson_solve converges at second order under h-halving") {
    const double e1 = manufactured_max_err(poisson_solve(manufactured_source(33)));
    const double e2 = manufactured_max_err(poisson_solve(manufactured_source(65)));
    const double ratio = e1 / e2;
    CHECK(ratio >= 3.5);
    CHECK(ratio <= 4.5);
}

TEST_CASE("conjugate-gradient fallback agrees with the direct factorization") {
    const Tensor f = manufactured_source(32);
    const Tensor direct = poisson_solve(f);
    const Tensor iterative = poisson_solve(f, /*direct_limit=*/0);
    double diff = 0.0;
    for (int64_t i = 0; i < direct.numel(); ++i)
        diff = std::max(diff, std::fabs(direct.v[i] - iterative.v[i]));
    CHECK(diff < 1e-8);
}

TEST_CASE("poisson_solve validates inputs") {
    CHECK_THROWS_AS(poisson_solve(Tensor({2, 5})), ShapeError);
    Tensor bad({8, 8});
    bad.v[3] = std::nan("");
    CHECK_THROWS_AS(poisson_solve(bad), ShapeError);
}

TEST_CASE("source formula evaluates to 1 at the block center for k=1, mu=1") {
    CHECK(poisson_source(1, 1.0, 0.5, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(poisson_source(2, 1.0, 0.25, 0.25) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("multiscale sample: zero block boundaries and k*7mu target quadrant") {
    PoissonConfig cfg = tiny_poisson(64, 1, 1, 0);
    const double mu = 1.05;
    const Sample s = make_multiscale_sample(mu, cfg);
    CHECK(s.input.shape == std::vector<int64_t>{1, 64, 64});
    CHECK(s.target.shape == std::vector<int64_t>{1, 64, 64});
    CHECK(s.meta.at("mu") == mu);
    // Dirichlet boundaries of every 32x32 block are exactly zero in both fields.
    for (const Tensor* t : {&s.input, &s.target})
        for (int64_t i = 0; i < 64; ++i)
            for (int64_t edge : {0L, 31L, 32L, 63L}) {
                CHECK(t->at(0, i, edge) == 0.0);
                CHECK(t->at(0, edge, i) == 0.0);
            }
    // Quadrant (2,2) of the target solves the k=4 source at frequency 7*mu.
    Tensor f({32, 32});
    for (int64_t r = 0; r < 32; ++r)
        for (int64_t c = 0; c < 32; ++c)
            f.at(r, c) = poisson_source(4, 7.0 * mu, static_cast<double>(c) / 31.0,
                                        static_cast<double>(r) / 31.0);
    const Tensor u = poisson_solve(f);
    for (int64_t r = 0; r < 32; ++r)
        for (int64_t c = 0; c < 32; ++c) CHECK(s.target.at(0, 32 + r, 32 + c) == u.at(r, c));
}

TEST_CASE("generate_poisson_dataset splits and is deterministic under seed") {
    PoissonConfig cfg = tiny_poisson(16, 10, 7, 42);
    const Dataset a = generate_poisson_dataset(cfg);
    CHECK(a.train.size() == 7);
    CHECK(a.test.size() == 3);
    const Dataset b = generate_poisson_dataset(cfg);
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].input.v == b.train[i].input.v);
        CHECK(a.train[i].target.v == b.train[i].target.v);
    }
    PoissonConfig other = cfg;
    other.seed = 43;
    const Dataset c = generate_poisson_dataset(other);
    CHECK(a.train[0].input.v != c.train[0].input.v);
}

TEST_CASE("mu_std = 0 degenerates to identical samples") {
    PoissonConfig cfg = tiny_poisson(16, 3, 2, 1);
    cfg.mu_std = 0.0;
    const Dataset ds = generate_poisson_dataset(cfg);
    CHECK(ds.train[0].input.v == ds.train[1].input.v);
}

TEST_CASE("mu draws have the configured mean at n=1000") {
    PoissonConfig cfg = tiny_poisson(16, 1000, 700, 2024);
    const Dataset ds = generate_poisson_dataset(cfg);
    double mean = 0.0;
    int n = 0;
    for (const auto* split : {&ds.train, &ds.test})
        for (const Sample& s : *split) {
            mean += s.meta.at("mu");
            ++n;
        }
    mean /= n;
    CHECK(n == 1000);
    CHECK(std::fabs(mean - 1.0) < 3.0 * 0.1 / std::sqrt(1000.0));
}

TEST_CASE("ns solver: high viscosity with zero forcing decays monotonically") {
    NsSolver solver(32, 1.0, 0.0);
    solver.set_vorticity(ns_random_initial(32, 11));
    double prev = solver.kinetic_energy();
    for (int i = 0; i < 50; ++i) {
        solver.step(1e-3);
        const double ke = solver.kinetic_energy();
        CHECK(ke <= prev + 1e-12);
        prev = ke;
    }
}

TEST_CASE("recovered velocity is spectrally divergence-free") {
    NsSolver solver(64, 1e-3, 0.1);
    solver.set_vorticity(ns_random_initial(64, 12));
    for (int i = 0; i < 5; ++i) solver.step(1e-3);
    Tensor u, v;
    solver.velocity(u, v);
    CHECK(spectral_divergence(u, v) < 1e-6);
}

TEST_CASE("inviscid unforced energy drift stays below 0.1% over 100 steps") {
    NsSolver solver(32, 0.0, 0.0);
    solver.set_vorticity(ns_random_initial(32, 13));
    const double e0 = solver.kinetic_energy();
    for (int i = 0; i < 100; ++i) solver.step(5e-4);
    const double e1 = solver.kinetic_energy();
    CHECK(std::fabs(e1 - e0) / e0 < 1e-3);
}

TEST_CASE("CFL violation aborts") {
    NsSolver solver(32, 0.0, 0.0);
    Tensor w0 = ns_random_initial(32, 14);
    for (double& v : w0.v) v *= 50.0;
    solver.set_vorticity(w0);
    CHECK_THROWS_AS(solver.step(1.0), DataError);
}

TEST_CASE("ns_generate emits [10,64,64] -> [10,64,64] windows") {
    NsConfig cfg;
    cfg.grid = 64;
    cfg.viscosity = 1e-3;
    cfg.dt = 1e-3;
    cfg.record_stride = 2;
    const Dataset ds = ns_generate(cfg, 2, 77);
    REQUIRE(ds.train.size() == 2);
    CHECK(ds.train[0].input.shape == std::vector<int64_t>{10, 64, 64});
    CHECK(ds.train[0].target.shape == std::vector<int64_t>{10, 64, 64});
    // Determinism under the same seed.
    const Dataset ds2 = ns_generate(cfg, 2, 77);
    CHECK(ds.train[1].input.v == ds2.train[1].input.v);
}

TEST_CASE("ns config validation") {
    NsConfig cfg;
    cfg.grid = 48;  // not a power of two
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.grid = 64;
    cfg.dt = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("dataset container round-trips through save and load") {
    const auto dir = std::filesystem::temp_directory_path() / "m2m_test_poisson_ds";
    std::filesystem::remove_all(dir);
    PoissonConfig cfg = tiny_poisson(16, 5, 3, 7);
    const Dataset ds = generate_poisson_dataset(cfg);
    save_dataset(ds, dir);
    const Dataset loaded = load_dataset(dir, DatasetKind::poisson);
    CHECK(loaded.train.size() == 3);
    CHECK(loaded.test.size() == 2);
    CHECK(loaded.train[0].meta.at("mu") == doctest::Approx(ds.train[0].meta.at("mu")));
    // Serialization oracle: a second save of the loaded set is byte-identical.
    const auto dir2 = std::filesystem::temp_directory_path() / "m2m_test_poisson_ds2";
    std::filesystem::remove_all(dir2);
    save_dataset(loaded, dir2);
    std::ifstream f1(dir / "data.bin", std::ios::binary);
    std::ifstream f2(dir2 / "data.bin", std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    // And loading the loaded set again reproduces the arrays bit-for-bit.
    const Dataset again = load_dataset(dir2, DatasetKind::poisson);
    CHECK(again.train[0].input.v == loaded.train[0].input.v);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("load_dataset validates kinds and shapes with axis names") {
    const auto dir = std::filesystem::temp_directory_path() / "m2m_test_bad_ds";
    std::filesystem::remove_all(dir);
    Dataset ds;
    ds.kind = DatasetKind::ns;
    Sample s;
    s.input = Tensor({7, 8, 8});  // T=7, not the required 10
    s.target = Tensor({7, 8, 8});
    ds.train.push_back(s);
    save_dataset(ds, dir);
    try {
        (void)load_dataset(dir, DatasetKind::ns);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("axis T") != std::string::npos);
    }
    // Kind mismatch between manifest and request.
    CHECK_THROWS_AS(load_dataset(dir, DatasetKind::poisson), DataError);
    // Cylinder loader rejects wrong spatial dims.
    CHECK_THROWS_AS(load_dataset(dir, DatasetKind::cylinder), DataError);
    CHECK_THROWS_AS(load_dataset(dir / "missing", DatasetKind::ns), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("cylinder loader accepts [N,1,192,112] pairs") {
    const auto dir = std::filesystem::temp_directory_path() / "m2m_test_cyl_ds";
    std::filesystem::remove_all(dir);
    Dataset ds;
    ds.kind = DatasetKind::cylinder;
    Rng rng(15);
    Sample s;
    s.input = random_tensor({1, 192, 112}, rng);
    s.target = random_tensor({1, 192, 112}, rng);
    ds.train.push_back(s);
    save_dataset(ds, dir);
    const Dataset loaded = load_dataset(dir, DatasetKind::cylinder);
    CHECK(loaded.train.size() == 1);
    CHECK(loaded.train[0].input.shape == std::vector<int64_t>{1, 192, 112});
    std::filesystem::remove_all(dir);
}

TEST_CASE("named-array container rejects corrupt files") {
    const auto file = std::filesystem::temp_directory_path() / "m2m_bad_container.bin";
    std::ofstream(file, std::ios::binary) << "NOPE";
    CHECK_THROWS_AS(read_container(file), DataError);
    std::filesystem::remove(file);
    CHECK_THROWS_AS(read_container(file), DataError);
}
