#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cmfd/checkpoint.hpp"
#include "cmfd/config.hpp"
#include "cmfd/metrics.hpp"
#include "cmfd/oracles/selfcheck.hpp"
#include "cmfd/synth.hpp"
#include "cmfd/train.hpp"

namespace py = pybind11;
using namespace cmfd;

namespace {

template <class T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(std::move(shape), std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
Array<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor<double> mask2d(const Array<double>& a, const char* what) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(what) + " must be a 2-D array");
  return to_tensor(a);
}

ScanVariant variant_from(const std::string& name) {
  for (auto v : kScanVariants)
    if (variant_name(v) == name) return v;
  throw std::invalid_argument("unknown scan variant " + name);
}

py::dict metrics_dict(const ImageMetrics& m) {
  py::dict d;
  d["dice"] = m.dice;
  d["iou"] = m.iou;
  d["fbw"] = m.fbw;
  d["s_alpha"] = m.s_alpha;
  d["e_xi"] = m.e_xi;
  d["mae"] = m.mae;
  return d;
}

class PyModel {
 public:
  explicit PyModel(std::unique_ptr<Model<float>> m) : model_(std::move(m)) {}

  static PyModel from_config(const std::string& config_json, std::uint64_t seed) {
    const auto cfg = model_config_from_json(nlohmann::json::parse(config_json));
    return PyModel(std::make_unique<Model<float>>(cfg, seed));
  }
  static PyModel load(const std::string& path) { return PyModel(load_model(path)); }

  std::string config() const { return to_json(model_->config()).dump(); }
  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto* p : model_->params().all()) n += p->value.size();
    return n;
  }
  // N x 3 x S x S (or 3 x S x S) in [0,1] -> probabilities N x 1 x S x S
  Array<float> predict(const Array<float>& image) const {
    Tensor<float> t = to_tensor(image);
    if (t.rank() == 3) t = t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
    return to_array(model_->predict(t));
  }
  void save(const std::string& path) const { save_checkpoint(path, *model_); }

 private:
  std::unique_ptr<Model<float>> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Polyp segmentation core: scan kernels, metrics, model inference and training";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("scan_order", [](int h, int w, const std::string& variant) {
    return build_scan_order(h, w, variant_from(variant)).forward;
  }, py::arg("height"), py::arg("width"), py::arg("variant"));
  m.def("scan_variants", [] {
    std::vector<std::string> out;
    for (auto v : kScanVariants) out.emplace_back(variant_name(v));
    return out;
  });
  m.def("selective_scan", [](const Array<double>& u, const Array<double>& delta, const Array<double>& a_log,
                             const Array<double>& b, const Array<double>& c, const Array<double>& d) {
    Graph<double> g(false);
    return to_array(selective_scan(g.constant(to_tensor(u)), g.constant(to_tensor(delta)), g.constant(to_tensor(a_log)),
                                   g.constant(to_tensor(b)), g.constant(to_tensor(c)), g.constant(to_tensor(d)))
                        .value());
  }, py::arg("u"), py::arg("delta"), py::arg("a_log"), py::arg("b"), py::arg("c"), py::arg("d"));

  m.def("dice_iou", [](const Array<double>& pred, const Array<double>& gt, double threshold) {
    const auto r = dice_iou(mask2d(pred, "pred"), mask2d(gt, "gt"), threshold);
    return py::make_tuple(r.dice, r.iou);
  }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = 0.5);
  m.def("mae", [](const Array<double>& p, const Array<double>& g) { return mae(mask2d(p, "pred"), mask2d(g, "gt")); });
  m.def("weighted_fbeta", [](const Array<double>& p, const Array<double>& g) {
    return weighted_fbeta(mask2d(p, "pred"), mask2d(g, "gt"));
  });
  m.def("s_measure", [](const Array<double>& p, const Array<double>& g) {
    return s_measure(mask2d(p, "pred"), mask2d(g, "gt"));
  });
  m.def("e_measure", [](const Array<double>& p, const Array<double>& g) {
    return e_measure(mask2d(p, "pred"), mask2d(g, "gt"));
  });
  m.def("evaluate_pair", [](const Array<double>& p, const Array<double>& g) {
    return metrics_dict(evaluate_pair(mask2d(p, "pred"), mask2d(g, "gt")));
  });

  m.def("lr_at", py::overload_cast<double, int, int>(&lr_at), py::arg("lr0"), py::arg("period"), py::arg("epoch"));
  m.def("default_config", [] { return to_json(desk_defaults()).dump(); });

  m.def("synth_sample", [](int index, int image_size, std::uint64_t seed) {
    DatasetSpec spec;
    spec.image_size = image_size;
    spec.seed = seed;
    spec.validate();
    const auto s = synth_sample(spec, index);
    return py::make_tuple(s.id, to_array(s.image), to_array(s.mask));
  }, py::arg("index"), py::arg("image_size") = 64, py::arg("seed") = 0);
  m.def("synth_generate", [](const std::string& out, int count, int image_size, std::uint64_t seed) {
    DatasetSpec spec;
    spec.count = count;
    spec.image_size = image_size;
    spec.seed = seed;
    spec.validate();
    return synth_generate(spec, out).string();
  }, py::arg("out"), py::arg("count") = 200, py::arg("image_size") = 64, py::arg("seed") = 0);

  m.def("train", [](const std::string& config_json, const std::string& data_dir, const std::string& out_dir) {
    CliConfig cfg = cli_config_from_json(nlohmann::json::parse(config_json));
    cfg.validate();
    const Manifest manifest = read_manifest(data_dir);
    const auto train = load_split(data_dir, manifest.train);
    const auto val = load_split(data_dir, manifest.test);
    std::filesystem::create_directories(out_dir);
    Model<float> model(cfg.model, cfg.train.seed);
    TrainOutputs outs;
    outs.best_checkpoint = std::filesystem::path(out_dir) / "best.ckpt";
    outs.last_checkpoint = std::filesystem::path(out_dir) / "last.ckpt";
    outs.log = std::filesystem::path(out_dir) / "train_log.jsonl";
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train_loop(model, train, val, cfg.train, cfg.augment, outs);
    }
    py::list log;
    for (const auto& e : r.log) {
      py::dict d;
      d["epoch"] = e.epoch;
      d["lr"] = e.lr;
      d["mean_loss"] = e.mean_loss;
      d["train_mdice"] = e.train_mdice;
      d["val_mdice"] = e.val_mdice;
      log.append(d);
    }
    return log;
  }, py::arg("config_json"), py::arg("data_dir"), py::arg("out_dir"));

  py::class_<PyModel>(m, "Model")
      .def_static("from_config", &PyModel::from_config, py::arg("config_json"), py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def_property_readonly("config", &PyModel::config)
      .def_property_readonly("num_parameters", &PyModel::num_parameters)
      .def("predict", &PyModel::predict, py::arg("image"))
      .def("save", &PyModel::save, py::arg("path"));

  m.def("selfcheck", [](bool corrupt_scan_table) {
    py::list out;
    for (const auto& r : oracle::run_selfcheck(corrupt_scan_table)) out.append(py::make_tuple(r.name, r.passed, r.detail));
    return out;
  }, py::arg("corrupt_scan_table") = false);
}
