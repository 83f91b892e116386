#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dike/edit.hpp"
#include "dike/krd.hpp"
#include "dike/linalg.hpp"
#include "dike/metrics.hpp"
#include "dike/pipeline.hpp"

namespace py = pybind11;

namespace {

dike::Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return dike::Tensor::from(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const dike::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

using InArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Disentangled rank-one knowledge editing on a toy transformer";

  py::register_exception<dike::Error>(m, "DikeError");

  m.def("gelu", [](const InArray& x) {
    dike::ad::Tape tape;
    return array_from_tensor(tape.val(tape.gelu(tape.input(tensor_from_array(x)))));
  }, py::arg("x"), "Elementwise x * Phi(x) with the exact Gaussian CDF");

  m.def("solve_spd", [](const InArray& a, const InArray& b) {
    return array_from_tensor(dike::solve_spd(tensor_from_array(a), tensor_from_array(b)));
  }, py::arg("a"), py::arg("b"), "Solve A X = B for symmetric positive definite A");

  m.def("softmax_cross_entropy", [](const InArray& logits, std::size_t target) {
    return dike::cross_entropy_val(tensor_from_array(logits), target);
  }, py::arg("logits"), py::arg("target"));

  m.def("info_nce", [](const InArray& anchor, const InArray& positive,
                       const std::vector<InArray>& negatives, double tau) {
    std::vector<dike::Tensor> negs;
    negs.reserve(negatives.size());
    for (const auto& n : negatives) negs.push_back(tensor_from_array(n));
    return dike::info_nce(tensor_from_array(anchor), tensor_from_array(positive), negs, tau);
  }, py::arg("anchor"), py::arg("positive"), py::arg("negatives"), py::arg("tau"));

  m.def("harmonic_mean", &dike::harmonic_mean, py::arg("a"), py::arg("b"), py::arg("c"));

  m.def("memit_update", [](const InArray& w, const InArray& k, const InArray& v,
                           const InArray& c0) {
    return array_from_tensor(dike::memit_update(tensor_from_array(w), tensor_from_array(k),
                                                tensor_from_array(v), tensor_from_array(c0)));
  }, py::arg("w"), py::arg("k"), py::arg("v"), py::arg("c0"),
     "Rank-one update W + (v - W k) k^T (C0 + k k^T)^{-1}");

  m.def("dike_update", [](const InArray& w, const InArray& k, const InArray& v, const InArray& c0,
                          const InArray& w3) {
    return array_from_tensor(dike::dike_update(tensor_from_array(w), tensor_from_array(k),
                                               tensor_from_array(v), tensor_from_array(c0),
                                               tensor_from_array(w3)));
  }, py::arg("w"), py::arg("k"), py::arg("v"), py::arg("c0"), py::arg("w3"),
     "Constrained rank-one update W + (W3^T W3 + I)^{-1} Delta");

  m.def("evaluate_objective", [](const InArray& w_hat, const InArray& k, const InArray& v_star,
                                 const InArray& v0, const InArray& k0, const InArray& v0_set,
                                 const InArray& w3) {
    return dike::evaluate_objective(tensor_from_array(w_hat), tensor_from_array(k),
                                    tensor_from_array(v_star), tensor_from_array(v0),
                                    tensor_from_array(k0), tensor_from_array(v0_set),
                                    tensor_from_array(w3));
  }, py::arg("w_hat"), py::arg("k"), py::arg("v_star"), py::arg("v0"), py::arg("k0"),
     py::arg("v0_set"), py::arg("w3"), "The four-term quadratic the closed form minimizes");

  m.def("world_summary", [](std::uint64_t seed, std::uint32_t subjects, std::uint32_t relations,
                            std::uint32_t objects_per_relation) {
    dike::WorldConfig cfg;
    cfg.seed = seed;
    cfg.n_subjects = subjects;
    cfg.n_relations = relations;
    cfg.n_objects_per_relation = objects_per_relation;
    const dike::World world = dike::gen_world(cfg);
    py::dict d;
    d["vocab_size"] = world.vocab.size();
    d["n_triples"] = world.triples.size();
    d["n_relations"] = world.relations.size();
    d["hash"] = world.hash();
    return d;
  }, py::arg("seed") = 1, py::arg("subjects") = 64, py::arg("relations") = 12,
     py::arg("objects_per_relation") = 16,
     "Generate a synthetic knowledge world and report its shape");

  m.attr("__version__") = "0.1.0";
}
