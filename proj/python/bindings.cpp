#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>
#include <sstream>

#include "ulcerforge/cli.hpp"
#include "ulcerforge/dataset.hpp"
#include "ulcerforge/error.hpp"
#include "ulcerforge/gradcheck.hpp"
#include "ulcerforge/metrics.hpp"
#include "ulcerforge/schedule.hpp"
#include "ulcerforge/stats.hpp"
#include "ulcerforge/study.hpp"
#include "ulcerforge/train.hpp"
#include "ulcerforge/unet.hpp"

namespace py = pybind11;
using namespace ulcerforge;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Matrix to_matrix(const DoubleArray& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array of feature rows");
  Matrix m(a.shape(0), a.shape(1));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = a.at(i, j);
  return m;
}

template <class T>
T parse_config(const std::string& text) {
  return nlohmann::json::parse(text).get<T>();
}

py::dict t_result(const TTestResult& r) {
  py::dict d;
  d["t"] = r.t;
  d["df"] = r.df;
  d["p"] = r.p;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.attr("__version__") = ULCERFORGE_VERSION;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<IndexError>(m, "IndexError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<NotFoundError>(m, "NotFoundError", base.ptr());
  py::register_exception<ConflictError>(m, "ConflictError", base.ptr());

  py::class_<NoiseSchedule>(m, "Schedule")
      .def_property_readonly("steps", &NoiseSchedule::steps)
      .def("beta", &NoiseSchedule::beta)
      .def("alpha", &NoiseSchedule::alpha)
      .def("alpha_bar", &NoiseSchedule::alpha_bar)
      .def("posterior_sigma", &NoiseSchedule::posterior_sigma)
      .def_property_readonly("betas", &NoiseSchedule::betas)
      .def_property_readonly("alpha_bars", &NoiseSchedule::alpha_bars);

  m.def("build_linear_schedule", py::overload_cast<int, double, double>(&build_linear_schedule),
        py::arg("timesteps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);

  m.def(
      "forward_diffuse",
      [](const FloatArray& x0, int t, const FloatArray& eps, const NoiseSchedule& s) {
        return to_numpy(forward_diffuse(to_tensor(x0), t, to_tensor(eps), s));
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

  m.def(
      "make_blob_dataset",
      [](std::size_t n, int size, std::uint64_t seed) { return to_numpy(make_blob_dataset(n, size, seed)); },
      py::arg("n"), py::arg("size") = 8, py::arg("seed") = 0);

  py::class_<DenoiserParams>(m, "Denoiser")
      .def_property_readonly("parameter_count", &DenoiserParams::parameter_count)
      .def_property_readonly("config", [](const DenoiserParams& p) { return nlohmann::json(p.config).dump(); })
      .def("names",
           [](const DenoiserParams& p) {
             std::vector<std::string> out;
             for (const auto& [name, t] : p.tensors) out.push_back(name);
             return out;
           })
      .def("parameter", [](const DenoiserParams& p, const std::string& name) { return to_numpy(p.at(name)); })
      .def(
          "predict_noise",
          [](const DenoiserParams& p, const FloatArray& x, int t) { return to_numpy(predict_noise(p, to_tensor(x), t)); },
          py::arg("x_t"), py::arg("t"));

  m.def(
      "init_denoiser",
      [](const std::string& config, std::uint64_t seed) { return init_denoiser(parse_config<UNetConfig>(config), seed); },
      py::arg("config"), py::arg("seed"));

  m.def("fit", [](const FloatArray& data, const std::string& model, const std::string& train, const NoiseSchedule& s) {
    FitResult r;
    {
      py::gil_scoped_release release;
      r = fit(to_tensor(data), parse_config<UNetConfig>(model), parse_config<TrainConfig>(train), s);
    }
    std::vector<double> losses;
    for (const auto& rec : r.log) losses.push_back(rec.loss);
    return py::make_tuple(std::move(r.params), losses);
  });

  m.def("sample", [](const DenoiserParams& p, const NoiseSchedule& s, std::size_t n, std::uint64_t seed) {
    Rng rng(seed, "sample");
    Tensor out;
    {
      py::gil_scoped_release release;
      out = sample_batch(p, s, n, rng);
    }
    return to_numpy(out);
  });

  m.def(
      "fid", [](const DoubleArray& a, const DoubleArray& b) { return fid(fit_gaussian(to_matrix(a)), fit_gaussian(to_matrix(b))); },
      py::arg("a"), py::arg("b"));
  m.def(
      "mmd2_unbiased", [](const DoubleArray& a, const DoubleArray& b) { return mmd2_unbiased(to_matrix(a), to_matrix(b)); },
      py::arg("a"), py::arg("b"));
  m.def(
      "kid",
      [](const DoubleArray& a, const DoubleArray& b, int subset_size, int subsets, std::uint64_t seed) {
        Rng rng(seed, "kid-subsets");
        const auto r = kid(to_matrix(a), to_matrix(b), subset_size, subsets, rng);
        return py::make_tuple(r.mean, r.stddev);
      },
      py::arg("a"), py::arg("b"), py::arg("subset_size") = 1000, py::arg("subsets") = 100, py::arg("seed") = 0);

  m.def(
      "t_test_summary",
      [](double ma, double sa, std::size_t na, double mb, double sb, std::size_t nb, const std::string& variant) {
        return t_result(t_test_summary(ma, sa, na, mb, sb, nb, parse_t_variant(variant)));
      },
      py::arg("mean_a"), py::arg("sd_a"), py::arg("n_a"), py::arg("mean_b"), py::arg("sd_b"), py::arg("n_b"),
      py::arg("variant") = "student");
  m.def(
      "t_test_samples",
      [](const std::vector<double>& a, const std::vector<double>& b, const std::string& variant) {
        return t_result(t_test_samples(a, b, parse_t_variant(variant)));
      },
      py::arg("a"), py::arg("b"), py::arg("variant") = "student");
  m.def("pearson_r", [](const std::vector<double>& x, const std::vector<double>& y) { return pearson_r(x, y); });

  m.def(
      "gradcheck_ops",
      [](std::uint64_t seed) {
        std::vector<std::pair<std::string, double>> out;
        for (const auto& e : gradcheck_ops(seed)) out.emplace_back(e.name, e.rel_error);
        return out;
      },
      py::arg("seed") = 0);
  m.def(
      "gradcheck_denoiser",
      [](const std::string& config, std::uint64_t seed) {
        return gradcheck_denoiser(parse_config<UNetConfig>(config), seed).rel_error;
      },
      py::arg("config"), py::arg("seed") = 0);

  m.def("fixture_report", [] {
    const auto fx = make_paper_aggregate_fixture();
    return study_report(fx.truth, fx.raters, fx.verdicts).to_json().dump();
  });

  m.def("run_command", [](std::vector<std::string> args) {
    args.insert(args.begin(), "ulcerforge");
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = run_command(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  });
}
