#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "dike/gradcheck.hpp"
#include "dike/pipeline.hpp"
#include "dike/rng.hpp"

namespace dike::testing {

inline RunConfig tiny_config() {
  RunConfig cfg;
  cfg.world.seed = 11;
  cfg.world.n_subjects = 6;
  cfg.world.n_train_subjects = 6;
  cfg.world.n_relations = 10;
  cfg.world.n_categories = 4;
  cfg.world.n_objects_per_relation = 4;
  cfg.world.min_triples_per_subject = 10;
  cfg.lm.layers = 3;
  cfg.lm.dim = 16;
  cfg.lm.ffn_dim = 32;
  cfg.lm.heads = 2;
  cfg.lm.max_seq = 16;
  cfg.lm.subject_layer = 1;
  cfg.lm.relation_layer = 2;
  cfg.lm_train.epochs = 60;
  cfg.lm_train.lr = 6e-3;
  cfg.lm_train.batch = 8;
  cfg.lm_train.recall_target = 0.92;
  cfg.krd.samples = 96;
  cfg.krd.batch = 4;
  cfg.krd.epochs = 3;
  cfg.eval.sweep_subjects = 4;
  return cfg;
}

struct TinySetup {
  RunConfig cfg;
  World world;
  TransformerLM model;  // trained to recall most triples
  double recall = 0.0;
};

/// Built once per test binary; training takes a few seconds.
inline const TinySetup& tiny_setup() {
  static const TinySetup setup = [] {
    TinySetup s;
    s.cfg = tiny_config();
    s.world = build_world(s.cfg);
    TrainLmReport report;
    s.model = train_base_model(s.cfg, s.world, &report);
    s.recall = report.final_recall;
    return s;
  }();
  return setup;
}

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi; test-only oracle.
inline std::vector<double> symmetric_eigenvalues(Tensor a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a.at(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

/// Singular values via eigenvalues of A^T A; test-only oracle.
inline std::vector<double> singular_values(const Tensor& a) {
  const Tensor ata = matmul(transpose(a), a);
  std::vector<double> eig = symmetric_eigenvalues(ata);
  std::vector<double> sv;
  for (double e : eig) sv.push_back(std::sqrt(std::max(0.0, e)));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace dike::testing
