#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "griddet/autodiff.hpp"
#include "griddet/budget.hpp"
#include "griddet/decode.hpp"
#include "griddet/error.hpp"
#include "griddet/geometry.hpp"
#include "griddet/lidar_io.hpp"
#include "griddet/metrics.hpp"
#include "griddet/network.hpp"
#include "griddet/scene.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace griddet {
namespace {

using Points = py::array_t<float, py::array::c_style | py::array::forcecast>;

PointCloud cloud_from(const Points& a, const std::string& frame_id) {
  if (a.ndim() != 2 || (a.shape(1) != 4 && a.shape(1) != 5)) {
    throw ValidationError("points must be an (N, 4) or (N, 5) array of x, y, z, intensity[, dt]");
  }
  PointCloud c;
  c.frame_id = frame_id;
  const auto r = a.unchecked<2>();
  c.points.reserve(static_cast<size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    c.points.push_back({r(i, 0), r(i, 1), r(i, 2), r(i, 3), a.shape(1) == 5 ? r(i, 4) : 0.f});
  }
  c.validate();
  return c;
}

Points array_from(const PointCloud& c) {
  Points a({static_cast<py::ssize_t>(c.size()), py::ssize_t{5}});
  auto w = a.mutable_unchecked<2>();
  for (size_t i = 0; i < c.size(); ++i) {
    const Point& p = c.points[i];
    const auto k = static_cast<py::ssize_t>(i);
    w(k, 0) = p.x;
    w(k, 1) = p.y;
    w(k, 2) = p.z;
    w(k, 3) = p.intensity;
    w(k, 4) = p.dt;
  }
  return a;
}

Box3D box_from(const std::vector<double>& v) {
  if (v.size() != 7) throw ValidationError("a box is [x, y, z, l, w, h, yaw]");
  Box3D b;
  b.center = {v[0], v[1], v[2]};
  b.l = v[3];
  b.w = v[4];
  b.h = v[5];
  b.yaw = v[6];
  return b;
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  if (py::isinstance<py::str>(o)) return json::parse(o.cast<std::string>());
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

template <typename T>
T parse_config(const py::object& o, const char* what) {
  try {
    return from_py(o).get<T>();
  } catch (const Error&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

std::vector<std::string> detection_lines(const std::vector<Detection>& dets) {
  std::vector<std::string> out;
  out.reserve(dets.size());
  for (const auto& d : dets) out.push_back(format_detection_line(d));
  return out;
}

}  // namespace
}  // namespace griddet

PYBIND11_MODULE(_core, m) {
  using namespace griddet;
  m.doc() = "Native core of the griddet toolkit";

  // Later registrations are tried first, so subclasses win over the base.
  const auto& base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<ValidationError>(m, "ValidationError", base);
  py::register_exception<InvariantError>(m, "InvariantError", base);

  m.def(
      "load_points", [](const std::string& path) { return array_from(load_point_file(path)); }, py::arg("path"));
  m.def(
      "save_points",
      [](const std::string& path, const Points& points) { save_point_file(path, cloud_from(points, "")); },
      py::arg("path"), py::arg("points"));
  m.def("canonical_points", [] { return array_from(canonical_scene().cloud); });
  m.def("toy_points", [] { return array_from(toy_scene().cloud); });

  m.def(
      "iou_bev",
      [](const std::vector<double>& a, const std::vector<double>& b) { return iou_bev(box_from(a), box_from(b)); },
      py::arg("a"), py::arg("b"));
  m.def(
      "iou_3d",
      [](const std::vector<double>& a, const std::vector<double>& b) { return iou_3d(box_from(a), box_from(b)); },
      py::arg("a"), py::arg("b"));

  m.def(
      "preset_config", [](const std::string& name) { return to_py(json(preset_config(name))); }, py::arg("name"));
  m.def("scaling_series", [](const std::string& kind) {
    py::list out;
    for (const auto& p : scaling_series(parse_encoder(kind))) {
      out.append(py::make_tuple(tier_name(p.tier), std::vector<int>(p.channels.begin(), p.channels.end())));
    }
    return out;
  });

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::object& config) { return build_model(parse_config<ModelConfig>(config, "model")); }),
           py::arg("config"))
      .def_static(
          "preset", [](const std::string& name) { return build_model(preset_config(name)); }, py::arg("name"))
      .def_static(
          "load", [](const std::string& dir) { return load_model(dir); }, py::arg("dir"))
      .def(
          "save", [](const Model& self, const std::string& dir) { save_model(self, dir); }, py::arg("dir"))
      .def_property_readonly("config", [](const Model& self) { return to_py(json(self.config)); })
      .def_property_readonly("name", [](const Model& self) { return self.config.name; })
      .def("num_params", [](const Model& self) { return count_params(self).total; })
      .def("neck_receptive_field", [](const Model& self) { return neck_receptive_field(self); })
      .def(
          "detect",
          [](const Model& self, const Points& points, const py::object& decode, const std::string& frame_id) {
            const PointCloud cloud = cloud_from(points, frame_id);
            const DecodeConfig dc = decode.is_none() ? DecodeConfig{} : parse_config<DecodeConfig>(decode, "decode");
            std::vector<Detection> dets;
            {
              py::gil_scoped_release release;
              dets = decode_frame(forward(self, cloud), OutputGeometry::of(self.config), dc, frame_id);
            }
            py::list out;
            for (const auto& line : detection_lines(dets)) out.append(to_py(json::parse(line)));
            return out;
          },
          py::arg("points"), py::arg("decode") = py::none(), py::arg("frame_id") = "frame")
      .def(
          "profile",
          [](const Model& self, const Points& points) {
            const PointCloud cloud = cloud_from(points, "");
            ProfileReport r;
            {
              py::gil_scoped_release release;
              r = profile_model(self, cloud);
            }
            return to_py(profile_json(r));
          },
          py::arg("points"));

  m.def(
      "evaluate",
      [](const std::string& detections, const std::string& labels, const py::object& config) {
        const EvalConfig ec = config.is_none() ? EvalConfig{} : parse_config<EvalConfig>(config, "eval");
        return to_py(eval_report_json(evaluate(load_detections(detections), load_labels(labels), ec)));
      },
      py::arg("detections"), py::arg("labels"), py::arg("config") = py::none());

  m.def(
      "gradcheck",
      [](int seeds) {
        py::list out;
        for (const auto& r : ad::gradcheck_all(seeds)) {
          py::dict d;
          d["op"] = r.op;
          d["max_rel_error"] = r.max_rel_error;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("seeds") = 10);
  m.def(
      "toy_fit",
      [](int steps, double lr, uint64_t seed) {
        const Scene s = toy_scene();
        std::vector<Box3D> boxes;
        for (const auto& l : s.labels) boxes.push_back(l.box);
        ad::ChainConfig cc;
        cc.seed = seed;
        return ad::toy_fit(cc, s.cloud, boxes, steps, lr).trace;
      },
      py::arg("steps") = 500, py::arg("lr") = ad::kDefaultToyLr, py::arg("seed") = 0);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
