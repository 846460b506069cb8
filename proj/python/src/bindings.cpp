#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cap/config.hpp"
#include "cap/dataset.hpp"
#include "cap/image_io.hpp"
#include "cap/pipeline.hpp"

namespace py = pybind11;
using namespace cap;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

ImageList to_images(const std::vector<Array>& arrays) {
  ImageList out;
  for (const auto& a : arrays) {
    if (a.ndim() != 3 || a.shape(0) != 3) throw std::invalid_argument("images must be shaped (3, H, W)");
    out.push_back(to_tensor(a));
  }
  return out;
}

Config config_with(const std::vector<std::string>& overrides) {
  Config c;
  c.apply(overrides);
  return c;
}

std::filesystem::path cache_or_default(const std::optional<std::filesystem::path>& cache) {
  return cache ? *cache : default_run_root() / "cache";
}

py::object parse_json(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "CAP toolkit core";
  m.attr("__version__") = CAP_VERSION;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);

  py::class_<Config>(m, "Config")
      .def(py::init<>())
      .def_static("parse", &Config::parse, py::arg("text"))
      .def_static("load", &Config::load, py::arg("path"))
      .def("set", &Config::set, py::arg("key"), py::arg("value"))
      .def("apply", &Config::apply, py::arg("overrides"))
      .def("get", &Config::get, py::arg("key"))
      .def("to_text", &Config::to_text)
      .def("to_dict", [](const Config& c) { return c.values(); })
      .def("__eq__", &Config::operator==)
      .def("__repr__", [](const Config& c) { return "<capkit.Config seed=" + c.get("seed") + ">"; });

  m.def("config_schema", [] {
    py::list out;
    for (const auto& k : config_schema()) {
      out.append(py::dict(py::arg("name") = k.name, py::arg("default") = k.default_value, py::arg("help") = k.help,
                          py::arg("choices") = k.choices));
    }
    return out;
  });

  m.def("read_image", [](const std::filesystem::path& p) { return to_array(read_image(p)); }, py::arg("path"));
  m.def(
      "write_png", [](const std::filesystem::path& p, const Array& a, int bits) { write_png(p, to_tensor(a), bits); },
      py::arg("path"), py::arg("image"), py::arg("bit_depth") = 8);
  m.def(
      "synth_dataset",
      [](const std::filesystem::path& root, int identities, int images, std::uint64_t seed, int size) {
        return synth_dataset(root, identities, images, seed, size);
      },
      py::arg("root"), py::arg("identities") = 2, py::arg("images_per_identity") = 4, py::arg("seed") = 0,
      py::arg("size") = 64);

  m.def(
      "gram_matrix", [](const Array& f) { return to_array(gram_matrix(to_tensor(f))); }, py::arg("features"),
      "Gram matrix f f^T / (C * P) of a (C, P) feature array.");
  m.def(
      "consistency_loss",
      [](const std::vector<Array>& images, const std::vector<std::string>& overrides) {
        const FeatureExtractor ex(extractor_config(config_with(overrides)));
        std::vector<Var> v;
        for (const auto& t : to_images(images)) v.push_back(Var::constant(t));
        return consistency_loss(v, ex).value().item();
      },
      py::arg("images"), py::arg("overrides") = std::vector<std::string>{},
      "Mean squared distance of each image's Gram matrices from the set mean, summed over taps.");
  m.def(
      "identity_similarity",
      [](const std::vector<Array>& clean, const std::vector<Array>& generated,
         const std::vector<std::string>& overrides) {
        const FeatureExtractor ex(extractor_config(config_with(overrides)));
        return identity_similarity(to_images(clean), to_images(generated), ex).mean;
      },
      py::arg("clean"), py::arg("generated"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "forward_noise",
      [](const Array& x0, int t, const Array& eps, const std::vector<std::string>& overrides) {
        return to_array(forward_noise(to_tensor(x0), t, to_tensor(eps), schedule_from(config_with(overrides))));
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "protect_images",
      [](const std::vector<Array>& images, const std::vector<std::string>& overrides,
         const std::optional<std::filesystem::path>& cache) {
        const Config c = config_with(overrides);
        const IdentityData id{"python", to_images(images)};
        ProtectResult r;
        {
          py::gil_scoped_release release;
          const Experiment e = experiment_from(c, load_or_pretrain_base(c, cache_or_default(cache)));
          const ControlRun control = e.surrogate == SurrogateSource::CleanFinetune ? run_control(e, id) : ControlRun{};
          r = protect_identity(e, id, control);
        }
        py::list perturbed, trace;
        for (const auto& t : r.images.perturbed) perturbed.append(to_array(t));
        for (const auto& rec : r.trace.records) trace.append(parse_json(rec.to_json()));
        return py::dict(py::arg("perturbed") = perturbed, py::arg("trace") = trace,
                        py::arg("max_perturbation") = r.images.max_perturbation());
      },
      py::arg("images"), py::arg("overrides") = std::vector<std::string>{}, py::arg("cache_dir") = py::none(),
      "Protect one identity's images; returns perturbed arrays, the iteration trace and the largest change.");

  py::class_<RunRecord>(m, "RunRecord")
      .def_property_readonly("dir", [](const RunRecord& r) { return r.dir; })
      .def_readonly("exit_code", &RunRecord::exit_code)
      .def_readonly("failed_stage", &RunRecord::failed_stage)
      .def_readonly("error", &RunRecord::error)
      .def_property_readonly("manifest", [](const RunRecord& r) { return parse_json(r.manifest.to_json()); })
      .def_property_readonly("metrics",
                             [](const RunRecord& r) -> py::object {
                               return r.report ? parse_json(r.report->to_json()) : py::none();
                             })
      .def("__repr__", [](const RunRecord& r) {
        return "<capkit.RunRecord " + r.dir.string() + " exit=" + std::to_string(r.exit_code) + ">";
      });

  m.def(
      "run",
      [](const std::string& command, const std::filesystem::path& data_root, const std::vector<std::string>& overrides,
         const std::optional<std::filesystem::path>& config_file, const std::string& variant,
         const std::optional<std::filesystem::path>& protected_root, const std::optional<std::filesystem::path>& run_root,
         const std::optional<std::filesystem::path>& cache_dir, bool dry_run) {
        RunOptions o;
        o.command = command;
        o.config = config_file ? Config::load(*config_file) : Config();
        o.config.apply(overrides);
        o.variant = variant;
        o.data_root = data_root;
        if (protected_root) o.protected_root = *protected_root;
        if (run_root) o.run_root = *run_root;
        if (cache_dir) o.cache_dir = *cache_dir;
        o.dry_run = dry_run;
        py::gil_scoped_release release;
        return run_pipeline(o);
      },
      py::arg("command"), py::arg("data_root"), py::arg("overrides") = std::vector<std::string>{},
      py::arg("config_file") = py::none(), py::arg("variant") = "", py::arg("protected_root") = py::none(),
      py::arg("run_root") = py::none(), py::arg("cache_dir") = py::none(), py::arg("dry_run") = false,
      "Run a pipeline command (run, protect, personalize, evaluate, ablate, sweep, probe).");
  m.def(
      "replay",
      [](const std::filesystem::path& manifest, const std::optional<std::filesystem::path>& run_root,
         const std::optional<std::filesystem::path>& cache_dir) {
        py::gil_scoped_release release;
        return replay_manifest(manifest, run_root.value_or(""), cache_dir.value_or(""));
      },
      py::arg("manifest"), py::arg("run_root") = py::none(), py::arg("cache_dir") = py::none());
}
