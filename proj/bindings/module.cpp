#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ens/ens.hpp"
#include "ens/tasks.hpp"

namespace py = pybind11;
using namespace ens;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4) throw py::value_error("expected a rank-4 (n, c, h, w) array");
  Tensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
           static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3)));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  py::array_t<double> a({t.shape[0], t.shape[1], t.shape[2], t.shape[3]});
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

std::vector<FrontPoint> front_from_array(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& pts) {
  if (pts.ndim() != 2 || pts.shape(1) != 2) throw py::value_error("expected an (n, 2) array");
  std::vector<Observation> hist;
  for (py::ssize_t i = 0; i < pts.shape(0); ++i)
    hist.push_back({{}, {}, pts.at(i, 0), pts.at(i, 1), false});
  return pareto_front(hist);
}

}  // namespace

PYBIND11_MODULE(_ens_native, m) {
  m.doc() = "Hybrid restoration architecture search: native core";

  // --- metrics and synthetic data -----------------------------------------
  m.def(
      "psnr",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a,
         py::array_t<double, py::array::c_style | py::array::forcecast> b, double peak) {
        return psnr(tensor_from_array(a), tensor_from_array(b), peak);
      },
      py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);
  m.def(
      "ssim",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a,
         py::array_t<double, py::array::c_style | py::array::forcecast> b, int window) {
        return ssim(tensor_from_array(a), tensor_from_array(b), window);
      },
      py::arg("a"), py::arg("b"), py::arg("window") = 8);

  m.def(
      "generate_pairs",
      [](const std::string& kind, int image_size, int count, const std::string& split,
         std::uint64_t seed, double noise_sigma) {
        RestorationTask task;
        task.kind = task_kind_from_string(kind);
        task.image_size = image_size;
        task.seed = seed;
        task.noise_sigma = noise_sigma;
        py::list out;
        for (const auto& p : generate_dataset(task, split, count))
          out.append(py::make_tuple(array_from_tensor(p.degraded), array_from_tensor(p.clean)));
        return out;
      },
      py::arg("kind"), py::arg("image_size"), py::arg("count"), py::arg("split") = "train",
      py::arg("seed") = 1, py::arg("noise_sigma") = 0.1,
      "Seeded (degraded, clean) image pairs as (1, 3, h, w) arrays");

  // --- selective scan ------------------------------------------------------
  m.def(
      "selective_scan",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> x,
         py::array_t<double, py::array::c_style | py::array::forcecast> delta,
         py::array_t<double, py::array::c_style | py::array::forcecast> a_diag,
         py::array_t<double, py::array::c_style | py::array::forcecast> b_seq,
         py::array_t<double, py::array::c_style | py::array::forcecast> c_seq) {
        Graph g;
        Value y = g.selective_scan(g.input(tensor_from_array(x)),
                                   g.input(tensor_from_array(delta)),
                                   g.input(tensor_from_array(a_diag)),
                                   g.input(tensor_from_array(b_seq)),
                                   g.input(tensor_from_array(c_seq)));
        return array_from_tensor(g.value(y));
      },
      py::arg("x"), py::arg("delta"), py::arg("a_diag"), py::arg("b_seq"), py::arg("c_seq"),
      "Zero-order-hold selective scan: x, delta (n, d, 1, L); a_diag (d, s, 1, 1); "
      "b_seq, c_seq (n, s, 1, L)");

  // --- search space --------------------------------------------------------
  m.def("stage_specs", [] {
    py::list out;
    for (const auto& s : default_stage_specs()) {
      py::dict d;
      d["id"] = s.id;
      d["teacher_blocks"] = s.teacher_blocks;
      d["surrogate_blocks"] = s.surrogate_blocks;
      out.append(d);
    }
    return out;
  });
  m.def("search_space_size", [] { return search_space_size(default_stage_specs()); });
  m.def("enumerate_search_space", [] {
    std::vector<ArchCode> codes;
    enumerate_search_space(default_stage_specs(), [&](const ArchCode& z) { codes.push_back(z); });
    return codes;
  });
  m.def(
      "decode", [](const std::vector<double>& x) { return decode(x, default_stage_specs()); },
      py::arg("x"), "Continuous [0,1]^8 point to an architecture code");
  m.def(
      "penalty",
      [](const ArchCode& code, double w_teacher, double w_surrogate) {
        return penalty(code, default_stage_specs(), w_teacher, w_surrogate);
      },
      py::arg("code"), py::arg("w_teacher") = 3.0, py::arg("w_surrogate") = 1.0);

  // --- multi-objective machinery -------------------------------------------
  m.def(
      "pareto_front",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> pts) {
        std::vector<int> idx;
        for (const auto& p : front_from_array(pts)) idx.push_back(p.index);
        return idx;
      },
      py::arg("points"), "Indices of the non-dominated rows, ascending first objective");
  m.def(
      "hypervolume",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> pts, double r1,
         double r2) { return hypervolume(front_from_array(pts), r1, r2); },
      py::arg("points"), py::arg("r1"), py::arg("r2"));
  m.def(
      "ehvi",
      [](double mu1, double s1, double mu2, double s2,
         py::array_t<double, py::array::c_style | py::array::forcecast> front, double r1,
         double r2) { return ehvi(mu1, s1, mu2, s2, front_from_array(front), r1, r2); },
      py::arg("mu1"), py::arg("s1"), py::arg("mu2"), py::arg("s2"), py::arg("front"),
      py::arg("r1"), py::arg("r2"),
      "Closed-form bi-objective expected hypervolume improvement");
  m.def(
      "knee_point",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> pts) {
        auto front = front_from_array(pts);
        return front[knee_point(front)].index;
      },
      py::arg("points"), "Row index of the knee of the non-dominated subset");
  m.def("scrambled_halton", &scrambled_halton, py::arg("n"), py::arg("dim"), py::arg("seed"));

  // --- the search loop ------------------------------------------------------
  m.def(
      "run_search",
      [](const std::function<std::pair<double, double>(const ArchCode&)>& objective, int initial,
         int budget, int knee_candidates, int candidates, int perturbations, int refit_interval,
         int gp_restarts, int nm_iters, std::uint64_t seed) {
        EnsConfig cfg;
        cfg.initial = initial;
        cfg.budget = budget;
        cfg.knee_candidates = knee_candidates;
        cfg.candidates = candidates;
        cfg.perturbations = perturbations;
        cfg.refit_interval = refit_interval;
        cfg.gp_restarts = gp_restarts;
        cfg.nm_iters = nm_iters;
        cfg.seed = seed;
        EnsResult res = run_ens(default_stage_specs(), objective, cfg);
        py::list history;
        for (const auto& o : res.history) {
          py::dict row;
          row["x"] = o.x;
          row["code"] = o.code;
          row["f1"] = o.f1;
          row["f2"] = o.f2;
          row["cached"] = o.cached;
          history.append(row);
        }
        py::dict out;
        out["history"] = history;
        out["front_indices"] = res.front_indices;
        out["knee_index"] = res.knee_index;
        out["knee_indices"] = res.knee_indices;
        out["knee_code"] = res.history[res.knee_index].code;
        return out;
      },
      py::arg("objective"), py::arg("initial") = 17, py::arg("budget") = 500,
      py::arg("knee_candidates") = 5, py::arg("candidates") = 4096, py::arg("perturbations") = 32,
      py::arg("refit_interval") = 25, py::arg("gp_restarts") = 4, py::arg("nm_iters") = 150,
      py::arg("seed") = 1,
      "Guided bi-objective search over the 34,560-code space; the objective maps a "
      "code to (accuracy loss, penalty)");
}
