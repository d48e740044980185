#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "medslip/cli.hpp"
#include "medslip/errors.hpp"
#include "medslip/train_eval.hpp"

namespace py = pybind11;
using namespace medslip;

namespace {

py::tuple triplet_tuple(const report::TripletRecord& t) {
  return py::make_tuple(t.study_id, t.anatomy, t.pathology, t.existence);
}

report::TripletRecord triplet_from(const py::tuple& t) {
  if (t.size() != 4) throw InputError("triplet must be (study_id, anatomy, pathology, existence)");
  return {t[0].cast<std::string>(), t[1].cast<std::string>(), t[2].cast<std::string>(), t[3].cast<bool>()};
}

std::vector<Eigen::VectorXd> rows_of(const Eigen::MatrixXd& m) {
  std::vector<Eigen::VectorXd> v;
  for (Eigen::Index r = 0; r < m.rows(); ++r) v.emplace_back(m.row(r).transpose());
  return v;
}

py::dict study_dict(const synth::SynthStudy& s) {
  py::dict d;
  d["study_id"] = s.study_id;
  d["image"] = Eigen::MatrixXd(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      s.image.pixels.data(), s.image.height, s.image.width));
  d["report"] = s.report;
  py::list trips, regions;
  for (const auto& t : s.triplets) trips.append(triplet_tuple(t));
  for (const auto& r : s.regions) {
    py::dict rd;
    rd["pathology"] = r.pathology;
    rd["anatomy"] = r.anatomy;
    rd["bbox"] = py::make_tuple(r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1);
    rd["area"] = r.mask.count();
    regions.append(rd);
  }
  d["triplets"] = trips;
  d["regions"] = regions;
  return d;
}

}  // namespace

PYBIND11_MODULE(_medslip, m) {
  m.doc() = "Dual-stream language-image pre-training on synthetic radiographs.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<CompatibilityError>(m, "CompatibilityError", base.ptr());
  auto numeric = py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", numeric.ptr());

  m.def(
      "protocl_loss",
      [](const Eigen::VectorXd& R, const Eigen::MatrixXd& positives, const Eigen::MatrixXd& negatives, double tau,
         const std::string& variant) {
        objectives::ProtoCLConfig cfg;
        cfg.tau = tau;
        cfg.variant = objectives::parse_variant(variant);
        return objectives::protocl_loss(R, rows_of(positives), rows_of(negatives), cfg);
      },
      py::arg("R"), py::arg("positives"), py::arg("negatives"), py::arg("tau") = objectives::ProtoCLConfig{}.tau,
      py::arg("variant") = "standard", "Rows of `positives` and `negatives` are embeddings.");
  m.def("icl_loss", py::overload_cast<const ag::Mat&, const ag::Mat&, const ag::Mat&, double>(&objectives::icl_loss),
        py::arg("R_p"), py::arg("R_a"), py::arg("L"), py::arg("scale"));
  m.def("exist_loss", py::overload_cast<const Eigen::VectorXd&, const Eigen::VectorXd&>(&objectives::exist_loss),
        py::arg("logits"), py::arg("labels"));
  m.def("auc", &train::auc, py::arg("scores"), py::arg("labels"), "None when only one class is present.");

  m.def(
      "parse_report",
      [](const std::string& text, const std::string& study_id) {
        const auto res = report::parse_report(text, synth::SynthConfig::defaults().grammar(), study_id);
        py::list out;
        for (const auto& t : res.triplets) out.append(triplet_tuple(t));
        return py::make_tuple(out, res.skipped_sentences);
      },
      py::arg("text"), py::arg("study_id") = "s", "Parses with the default synthetic grammar.");
  m.def(
      "render_report",
      [](const std::vector<py::tuple>& triplets) {
        std::vector<report::TripletRecord> ts;
        for (const auto& t : triplets) ts.push_back(triplet_from(t));
        return report::render_report(ts);
      },
      py::arg("triplets"));

  m.def(
      "generate_study",
      [](std::size_t index, std::uint64_t seed) {
        auto cfg = synth::SynthConfig::defaults();
        cfg.seed = seed;
        return study_dict(synth::generate_study(cfg, index));
      },
      py::arg("index"), py::arg("seed") = 0);

  m.def(
      "grad_check",
      [](const std::string& selector, std::uint64_t instance) {
        const auto r = train::grad_check(selector, instance);
        py::dict groups;
        for (const auto& g : r.groups) groups[py::str(g.group)] = g.rel_error;
        py::dict d;
        d["name"] = r.name;
        d["max_rel_error"] = r.max_rel_error;
        d["groups"] = groups;
        return d;
      },
      py::arg("selector"), py::arg("instance") = 0);
  m.def("grad_check_selectors", &train::grad_check_selectors);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "medslip");
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a medslip subcommand; returns (exit_code, stdout, stderr).");
}
