// Python bindings over the core: tensor ops, synthetic data, model
// construction/compression, checkpoints, parameter accounting, and the
// similarity/loss diagnostics. Configs cross the boundary as JSON strings.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "muxvit/checkpoint.hpp"
#include "muxvit/dataset.hpp"
#include "muxvit/diagnostics.hpp"
#include "muxvit/distill.hpp"
#include "muxvit/run_config.hpp"
#include "muxvit/trainer.hpp"
#include "muxvit/vit_ops.hpp"

namespace py = pybind11;
using namespace muxvit;

namespace {

template <class T>
Tensor<T> tensor_from(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  auto info = a.request();
  if (info.ndim < 1 || info.ndim > 4) throw ShapeError("arrays of rank 1..4 supported");
  Shape shape;
  shape.rank = static_cast<int>(info.ndim);
  std::size_t n = 1;
  for (int i = 0; i < shape.rank; ++i) {
    shape.dim[static_cast<std::size_t>(i)] = static_cast<int>(info.shape[static_cast<std::size_t>(i)]);
    n *= static_cast<std::size_t>(info.shape[static_cast<std::size_t>(i)]);
  }
  Tensor<T> t(shape);
  std::memcpy(t.ptr(), info.ptr, n * sizeof(T));
  return t;
}

template <class T>
py::array_t<T> array_from(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape;
  for (int i = 0; i < t.shape.rank; ++i) shape.push_back(t.shape[i]);
  py::array_t<T> a(shape);
  std::memcpy(a.request().ptr, t.ptr(), t.numel() * sizeof(T));
  return a;
}

using Arr64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Arr32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

struct ModelHandle {
  Model<float> model;
  RunConfig rc;

  static ModelHandle build(const std::string& config_json, std::uint64_t seed) {
    RunConfig rc = run_config_from_json(Json::parse(config_json));
    rc.validate();
    ModelHandle h;
    h.model = build_model<float>(rc.model, rc.plan(), rc.transforms, seed);
    h.rc = rc;
    return h;
  }

  static ModelHandle load(const std::string& path) {
    LoadedCheckpoint lc = load_checkpoint(path);
    return ModelHandle{std::move(lc.model), std::move(lc.run_config)};
  }

  void save(const std::string& path) const { save_checkpoint(model, rc, path); }

  ModelHandle compress(const std::string& sharing_mode, int k, bool msa, bool mlp,
                       int kernel) const {
    if (!model.plan.is_identity())
      throw UsageError("compress expects an unshared teacher model");
    RunConfig out = rc;
    out.sharing.mode = share_mode_from(sharing_mode);
    out.sharing.k = k;
    out.transforms.msa = msa;
    out.transforms.mlp = mlp;
    out.transforms.kernel = kernel;
    ModelHandle h;
    h.model = build_compact_model(model, make_sharing_plan(out.model, out.sharing.mode, k),
                                  out.transforms);
    h.rc = out;
    return h;
  }

  py::array_t<float> logits(const Arr32& images) const {
    Tensor<float> t = tensor_from<float>(images);
    const int batch = t.shape.rank == 4 ? t.shape[0] : 1;
    return array_from(forward_logits(model, t, batch));
  }

  std::size_t param_count() const { return model.params.total_params(); }

  std::string report_json() const {
    const ParamReport r = param_report(model);
    return Json{{"shared_core", r.shared_core},
                {"per_layer_norm", r.per_layer_norm},
                {"transforms", r.transforms},
                {"blocks", r.blocks},
                {"embed_head", r.embed_head},
                {"total", r.total},
                {"baseline_blocks", r.baseline_blocks},
                {"baseline_total", r.baseline_total},
                {"ratio_blocks", r.ratio_blocks},
                {"ratio_total", r.ratio_total}}
        .dump();
  }

  std::string config_json() const { return run_config_to_json(rc).dump(); }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "weight-multiplexed vision transformer compression core";

  py::register_exception<ShapeError>(m, "ShapeError");
  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DistributionError>(m, "DistributionError");

  m.def("softmax_rows",
        [](const Arr64& x) { return array_from(softmax_rows(tensor_from<double>(x))); });
  m.def("gelu", [](const Arr64& x) { return array_from(gelu(tensor_from<double>(x))); });
  m.def("matmul", [](const Arr64& a, const Arr64& b) {
    return array_from(matmul(tensor_from<double>(a), tensor_from<double>(b)));
  });
  m.def(
      "layer_norm",
      [](const Arr64& x, const Arr64& gain, const Arr64& bias, double eps) {
        return array_from(layer_norm(tensor_from<double>(x), tensor_from<double>(gain),
                                     tensor_from<double>(bias), eps));
      },
      py::arg("x"), py::arg("gain"), py::arg("bias"), py::arg("eps") = 1e-5);
  m.def("depthwise_conv2d", [](const Arr64& x, const Arr64& kernels) {
    return array_from(depthwise_conv2d(tensor_from<double>(x), tensor_from<double>(kernels)));
  });
  m.def("cross_entropy_rows", [](const Arr64& p, const Arr64& q) {
    return cross_entropy_rows(tensor_from<double>(p), tensor_from<double>(q));
  });
  m.def("cka_linear", [](const Arr64& x, const Arr64& y) {
    return cka_linear(tensor_from<double>(x), tensor_from<double>(y));
  });

  m.def(
      "synth_batch",
      [](std::uint64_t seed, std::uint64_t start, int count, int size, int classes, double sigma) {
        SynthSpec spec{seed, size, classes, sigma};
        DatasetCache cache = build_dataset(spec, start, count);
        py::array_t<float> images({count, size, size, 1});
        std::memcpy(images.request().ptr, cache.images.data(),
                    cache.images.size() * sizeof(float));
        py::array_t<std::int64_t> labels(count);
        auto* lp = static_cast<std::int64_t*>(labels.request().ptr);
        for (int i = 0; i < count; ++i) lp[i] = cache.labels[static_cast<std::size_t>(i)];
        return py::make_tuple(images, labels);
      },
      py::arg("seed"), py::arg("start"), py::arg("count"), py::arg("size") = 32,
      py::arg("classes") = 10, py::arg("sigma") = 0.1);

  m.def("default_config", [] { return run_config_to_json(default_run_config()).dump(); });
  m.def("param_report", [](const std::string& config_json) {
    RunConfig rc = run_config_from_json(Json::parse(config_json));
    const ParamReport r = param_report(rc.model, rc.plan(), rc.transforms);
    return Json{{"blocks", r.blocks},
                {"total", r.total},
                {"baseline_blocks", r.baseline_blocks},
                {"baseline_total", r.baseline_total},
                {"ratio_blocks", r.ratio_blocks},
                {"ratio_total", r.ratio_total}}
        .dump();
  });

  m.def("layer_similarity", [](const ModelHandle& a, const ModelHandle& b, const Arr32& probe) {
    Tensor<float> t = tensor_from<float>(probe);
    const int batch = t.shape.rank == 4 ? t.shape[0] : 1;
    SimilarityCurve curve = layer_similarity(a.model, b.model, t, batch);
    py::array_t<double> out(static_cast<py::ssize_t>(curve.cka.size()));
    std::memcpy(out.request().ptr, curve.cka.data(), curve.cka.size() * sizeof(double));
    return out;
  });

  m.def("distill_losses", [](const ModelHandle& student, const ModelHandle& teacher,
                             const Arr32& images, const std::vector<int>& labels,
                             const std::string& distill_json) {
    Json dj = Json::parse(distill_json);
    DistillConfig dc;
    if (dj.contains("temperature")) dc.temperature = dj["temperature"].get<double>();
    if (dj.contains("beta")) dc.beta = dj["beta"].get<double>();
    if (dj.contains("gamma")) dc.gamma = dj["gamma"].get<double>();
    if (dj.contains("gt_weight")) dc.gt_weight = dj["gt_weight"].get<double>();
    if (dj.contains("hetero_teacher")) dc.hetero_teacher = dj["hetero_teacher"].get<bool>();
    Tensor<float> t = tensor_from<float>(images);
    const int batch = t.shape.rank == 4 ? t.shape[0] : 1;
    DistillComponents c = loss_total(student.model, teacher.model, t, labels, batch, dc);
    return py::dict(py::arg("total") = c.total, py::arg("pred") = c.pred, py::arg("attn") = c.attn,
                    py::arg("hddn") = c.hddn, py::arg("gt") = c.gt);
  });

  py::class_<ModelHandle>(m, "Model")
      .def_static("build", &ModelHandle::build, py::arg("config_json"), py::arg("seed") = 0)
      .def_static("load", &ModelHandle::load)
      .def("save", &ModelHandle::save)
      .def("compress", &ModelHandle::compress, py::arg("sharing_mode"), py::arg("k") = 2,
           py::arg("msa") = true, py::arg("mlp") = true, py::arg("kernel") = 3)
      .def("logits", &ModelHandle::logits)
      .def("param_count", &ModelHandle::param_count)
      .def("param_report", &ModelHandle::report_json)
      .def("config", &ModelHandle::config_json);

#ifdef VERSION_INFO
  m.attr("__version__") = VERSION_INFO;
#else
  m.attr("__version__") = "dev";
#endif
}
