#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "m2m/controller.hpp"
#include "m2m/datagen.hpp"
#include "m2m/evalbench.hpp"
#include "m2m/fields.hpp"
#include "m2m/model.hpp"
#include "m2m/router.hpp"
#include "m2m/runconfig.hpp"
#include "m2m/training.hpp"

namespace py = pybind11;
using namespace m2m;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Tensor t;
    t.shape.assign(a.ndim(), 0);
    for (py::ssize_t i = 0; i < a.ndim(); ++i) t.shape[static_cast<size_t>(i)] = a.shape(i);
    t.v.assign(a.data(), a.data() + a.size());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> a(shape);
    std::copy(t.v.begin(), t.v.end(), a.mutable_data());
    return a;
}

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

RunConfig config_from_json_str(const std::string& text) {
    return parse_run_config(nlohmann::json::parse(text));
}

Sample sample_from_arrays(const NpArray& input, const NpArray& target) {
    Sample s;
    s.input = tensor_from_array(input);
    s.target = tensor_from_array(target);
    return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "multi-scale multi-expert neural PDE surrogate toolkit";
    m.attr("__version__") = kVersion;

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DataError>(m, "DataError");
    py::register_exception<DivergenceError>(m, "DivergenceError");

    // ---- fields -----------------------------------------------------------
    m.def(
        "segment",
        [](const NpArray& field, int scale) {
            py::list out;
            for (const Tensor& t : segment(tensor_from_array(field), scale))
                out.append(array_from_tensor(t));
            return out;
        },
        py::arg("field"), py::arg("scale"),
        "Split [B,T,H,W] into scale^2 row-major tiles of [B,T,H/S,W/S].");
    m.def(
        "aggregate",
        [](const std::vector<NpArray>& patches, int scale) {
            std::vector<Tensor> ts;
            ts.reserve(patches.size());
            for (const auto& p : patches) ts.push_back(tensor_from_array(p));
            return array_from_tensor(aggregate(ts, scale));
        },
        py::arg("patches"), py::arg("scale"), "Exact inverse of segment.");
    m.def(
        "interpolate_up",
        [](const NpArray& patch, int64_t h, int64_t w, const std::string& method) {
            ResampleSpec spec;
            spec.up_method = method == "nearest" ? UpMethod::nearest : UpMethod::bilinear;
            return array_from_tensor(interpolate_up(tensor_from_array(patch), h, w, spec));
        },
        py::arg("patch"), py::arg("target_h"), py::arg("target_w"),
        py::arg("method") = "bilinear");
    m.def(
        "downsample",
        [](const NpArray& patch, int64_t h, int64_t w, const std::string& method) {
            ResampleSpec spec;
            spec.down_method = method == "nearest" ? DownMethod::nearest : DownMethod::area;
            return array_from_tensor(downsample(tensor_from_array(patch), h, w, spec));
        },
        py::arg("full_patch"), py::arg("target_h"), py::arg("target_w"),
        py::arg("method") = "area");

    // ---- metrics ----------------------------------------------------------
    m.def(
        "relative_l2",
        [](const NpArray& pred, const NpArray& truth) {
            return relative_l2(tensor_from_array(pred), tensor_from_array(truth));
        },
        py::arg("pred"), py::arg("truth"));
    m.def("rmse", [](const NpArray& a, const NpArray& b) {
        return rmse(tensor_from_array(a), tensor_from_array(b));
    });
    m.def("mae", [](const NpArray& a, const NpArray& b) {
        return mae(tensor_from_array(a), tensor_from_array(b));
    });
    m.def(
        "kl_divergence",
        [](const std::vector<double>& p, const std::vector<double>& q) {
            return kl_divergence(p, q);
        },
        py::arg("p"), py::arg("q"));
    m.def("load_entropy",
          [](const NpArray& probs) { return load_entropy(tensor_from_array(probs)); });

    // ---- controller -------------------------------------------------------
    py::class_<ControllerState>(m, "PiController")
        .def(py::init([](double lambda0, double kp, double ki, double lambda_min,
                         double lambda_max, double target) {
                 return ControllerState::with_lambda0(lambda0, kp, ki, lambda_min, lambda_max,
                                                      target);
             }),
             py::arg("lambda0") = 0.0, py::arg("kp") = 0.001, py::arg("ki") = 0.001,
             py::arg("lambda_min") = 0.0, py::arg("lambda_max") = 1.0, py::arg("target") = 0.0)
        .def_readonly("lambda_", &ControllerState::lambda)
        .def_readonly("integral", &ControllerState::integral)
        .def(
            "step",
            [](ControllerState& s, double loss) {
                const ControllerTrace t = controller_step(s, loss);
                return py::make_tuple(t.lambda, t.e, t.p, t.integral);
            },
            py::arg("loss"), "Returns (lambda, e, P, I).");

    // ---- datasets ---------------------------------------------------------
    py::class_<Dataset>(m, "Dataset")
        .def_property_readonly("n_train",
                               [](const Dataset& d) { return d.train.size(); })
        .def_property_readonly("n_test", [](const Dataset& d) { return d.test.size(); })
        .def(
            "sample",
            [](const Dataset& d, const std::string& split, size_t i) {
                const auto& v = split == "train" ? d.train : d.test;
                if (i >= v.size()) throw py::index_error();
                return py::make_tuple(array_from_tensor(v[i].input),
                                      array_from_tensor(v[i].target), py::cast(v[i].meta));
            },
            py::arg("split"), py::arg("i"))
        .def_property_readonly("manifest",
                               [](const Dataset& d) { return d.manifest.dump(); });

    m.def(
        "generate_poisson_dataset",
        [](int grid, int n_samples, int train_split, double mu_mean, double mu_std,
           double high_freq_factor, uint64_t seed) {
            PoissonConfig cfg;
            cfg.grid = grid;
            cfg.n_samples = n_samples;
            cfg.train_split = train_split;
            cfg.mu_mean = mu_mean;
            cfg.mu_std = mu_std;
            cfg.high_freq_factor = high_freq_factor;
            cfg.seed = seed;
            return generate_poisson_dataset(cfg);
        },
        py::arg("grid") = 128, py::arg("n_samples") = 1000, py::arg("train_split") = 700,
        py::arg("mu_mean") = 1.0, py::arg("mu_std") = 0.1, py::arg("high_freq_factor") = 7.0,
        py::arg("seed") = 0);
    m.def(
        "poisson_solve",
        [](const NpArray& f) { return array_from_tensor(poisson_solve(tensor_from_array(f))); },
        py::arg("source"), "5-point Dirichlet solve of laplace(u) = f on [0,1]^2.");
    m.def(
        "ns_generate",
        [](int grid, double viscosity, int n_samples, double dt, int record_stride,
           uint64_t seed) {
            NsConfig cfg;
            cfg.grid = grid;
            cfg.viscosity = viscosity;
            cfg.dt = dt;
            cfg.record_stride = record_stride;
            return ns_generate(cfg, n_samples, seed);
        },
        py::arg("grid") = 64, py::arg("viscosity") = 1e-5, py::arg("n_samples") = 4,
        py::arg("dt") = 1e-3, py::arg("record_stride") = 20, py::arg("seed") = 0);
    m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("directory"));
    m.def(
        "load_dataset",
        [](const std::filesystem::path& dir, const std::string& kind) {
            return load_dataset(dir, dataset_kind_from(kind));
        },
        py::arg("directory"), py::arg("kind"));

    // ---- model ------------------------------------------------------------
    py::class_<M2mModel>(m, "Model")
        .def_property_readonly("num_experts", &M2mModel::num_experts)
        .def_property_readonly("parameter_count", &M2mModel::parameter_count)
        .def_property_readonly("scale", [](const M2mModel& m2) { return m2.cfg.scale; })
        .def(
            "predict",
            [](const M2mModel& model, const NpArray& field) {
                return array_from_tensor(predict(model, Field(tensor_from_array(field))).values);
            },
            py::arg("field"), "One forward pass on [B,T,H,W].")
        .def(
            "route",
            [](const M2mModel& model, const NpArray& field) {
                const RoutingOutput out = route_field(model, Field(tensor_from_array(field)));
                return array_from_tensor(out.probs);
            },
            py::arg("field"), "Routing probabilities [B*S^2, M] for a field's patches.")
        .def(
            "save",
            [](const M2mModel& model, const std::filesystem::path& dir) {
                save_checkpoint(model, dir);
            },
            py::arg("directory"));

    m.def(
        "build_model",
        [](const std::string& config_json) {
            return build_model(config_from_json_str(config_json).model);
        },
        py::arg("config_json"), "Build a model from a run-config JSON string.");
    m.def("load_checkpoint", &load_checkpoint, py::arg("directory"));
    m.def(
        "train",
        [](M2mModel& model, const Dataset& ds, const std::string& config_json,
           const std::string& out_dir) {
            const RunConfig cfg = config_from_json_str(config_json);
            TrainResult res;
            if (out_dir.empty()) {
                res = train(model, ds, cfg.training, cfg.controller_state());
            } else {
                const std::filesystem::path out(out_dir);
                res = train(model, ds, cfg.training, cfg.controller_state(), &out);
            }
            return res.log.csv();
        },
        py::arg("model"), py::arg("dataset"), py::arg("config_json"), py::arg("out_dir") = "",
        "Alternating expert/router training; returns the run log CSV.");

    m.def(
        "train_from_config",
        [](const std::string& config_json, const Dataset& ds, const std::string& out_dir) {
            const RunConfig cfg = config_from_json_str(config_json);
            M2mModel model = build_model(cfg.model);
            TrainResult res;
            if (out_dir.empty()) {
                res = train(model, ds, cfg.training, cfg.controller_state());
            } else {
                const std::filesystem::path out(out_dir);
                res = train(model, ds, cfg.training, cfg.controller_state(), &out);
            }
            return py::make_tuple(std::move(model), res.log.csv());
        },
        py::arg("config_json"), py::arg("dataset"), py::arg("out_dir") = "");

    m.def("make_sample", &sample_from_arrays, py::arg("input"), py::arg("target"));
    m.def(
        "dataset_from_samples",
        [](const std::vector<py::tuple>& train, const std::vector<py::tuple>& test,
           const std::string& kind) {
            Dataset ds;
            ds.kind = dataset_kind_from(kind);
            for (const auto& t : train)
                ds.train.push_back(
                    sample_from_arrays(t[0].cast<NpArray>(), t[1].cast<NpArray>()));
            for (const auto& t : test)
                ds.test.push_back(sample_from_arrays(t[0].cast<NpArray>(), t[1].cast<NpArray>()));
            ds.manifest["kind"] = kind;
            return ds;
        },
        py::arg("train"), py::arg("test"), py::arg("kind") = "poisson",
        "Build an in-memory dataset from (input, target) array pairs.");
}
