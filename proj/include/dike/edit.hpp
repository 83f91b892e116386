#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dike/krd.hpp"
#include "dike/lm.hpp"
#include "dike/worldgen.hpp"

namespace dike {

struct EditConfig {
  std::uint32_t n_prefixes = 5;  // bare prompt + neutral prefixed variants
  double cov_lambda = 4.0;
  double cov_ridge = 1e-3;
  double delta_lr = 3.0;
  std::uint32_t delta_max_steps = 50;
  double delta_stop_loss = 5e-2;
  std::uint32_t n_constraints = 3;  // constrained-variant triples per edit
  std::uint64_t seed = 5;
};

/// Second-moment stand-in for the preserved-key system: C0 = lambda *
/// mean(k k^T) over corpus subject-token keys, plus a small ridge.
struct PreservationSet {
  Tensor c0;  // (d_ff, d_ff), symmetric PSD
  double lambda = 0.0;
  double ridge = 0.0;
  std::size_t n_keys = 0;
  std::uint64_t model_hash = 0;
};

PreservationSet estimate_covariance(const TransformerLM& model, const World& world, double lambda,
                                    double ridge);

/// Eq-style averaged key: mean inner activation at the last subject token
/// over the bare prompt plus neutral prefixed variants.
Tensor compute_key(const TransformerLM& model, const World& world, const Triple& edit,
                   std::uint32_t n_prefixes, std::uint64_t seed);

struct DeltaResult {
  Tensor delta;   // shift applied to the related component
  Tensor h_star;  // recomposed target subject representation
  double final_loss = 0.0;
  std::uint32_t steps = 0;
  bool converged = false;
  bool warn = false;  // max steps with loss above 10x the stop threshold
};

/// Optimizes the related-component shift so the substituted recomposition
/// predicts o*; the unrelated component and every model weight stay fixed.
DeltaResult optimize_delta(const TransformerLM& model, const DisentanglerState& krd,
                           const World& world, const EditRequest& edit, const EditConfig& cfg);

struct ValueResult {
  Tensor v_star;
  double final_loss = 0.0;
  std::uint32_t steps = 0;
  bool converged = false;
  bool warn = false;
};

/// Direct value-space optimization (no disentanglement): the baseline path.
ValueResult optimize_value(const TransformerLM& model, const World& world,
                           const EditRequest& edit, const EditConfig& cfg);

/// Value optimization with same-subject prediction constraints applied through
/// the same substituted state on each constraint prompt.
ValueResult constrained_value_variant(const TransformerLM& model, const World& world,
                                      const EditRequest& edit,
                                      std::span<const Triple> constraints,
                                      const EditConfig& cfg);

/// v* = h* - h_s^p with h_s^p read off the traced forward (stream minus the
/// edited layer's FFN output at the subject token).
Tensor compute_value(const ForwardTrace& trace, const Tensor& h_star, std::uint32_t subject_pos,
                     std::uint32_t layer);

/// Rank-one closed form: W + (v - W k) k^T (C0 + k k^T)^{-1}.
Tensor memit_update(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& c0);
/// The same rank-one increment without W added.
Tensor memit_delta(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& c0);
/// W + (W3^T W3 + I)^{-1} * memit_delta.
Tensor dike_update(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& c0,
                   const Tensor& w3);

/// The four-term quadratic the closed form minimizes, exactly as displayed.
double evaluate_objective(const Tensor& w_hat, const Tensor& k, const Tensor& v_star,
                          const Tensor& v0, const Tensor& k0, const Tensor& v0_set,
                          const Tensor& w3);
/// Its analytic gradient in W_hat.
Tensor objective_gradient(const Tensor& w_hat, const Tensor& k, const Tensor& v_star,
                          const Tensor& v0, const Tensor& k0, const Tensor& v0_set,
                          const Tensor& w3);

/// Returns a copy with the edited layer's W_out replaced; nothing else moves.
TransformerLM apply_edit(const TransformerLM& model, const Tensor& w_hat);

enum class Editor { Dike, Memit, MemitConstrained };
Editor editor_from_name(const std::string& name);
const char* editor_name(Editor editor);

struct EditReport {
  std::string editor;
  std::uint32_t record_id = 0;
  std::string subject, relation, object, new_object;
  double delta_norm = 0.0;
  double final_loss = 0.0;
  std::uint32_t steps = 0;
  bool converged = false;
  bool warn = false;
  double update_fnorm = 0.0;  // ||W_hat - W||_F
  double lambda = 0.0;
  std::uint64_t seed = 0;
};

struct EditOutcome {
  Tensor w_hat;
  EditReport report;
};

/// One full edit computation on `model` (not applied). `krd` is required for
/// the dike editor and ignored otherwise. `zero_w3` forces the reduction
/// debug path: baseline value optimization plus a zeroed unrelated projection.
EditOutcome compute_edit(const TransformerLM& model, const DisentanglerState* krd,
                         const World& world, const PreservationSet& pres, const EditRequest& edit,
                         Editor editor, const EditConfig& cfg, bool zero_w3 = false);

struct BatchEditResult {
  TransformerLM model;
  std::vector<EditReport> reports;
};

/// Applies the edits sequentially in the given order; each edit sees the
/// model produced by the previous one. The preservation set stays fixed.
BatchEditResult apply_edit_sequence(const TransformerLM& base, const DisentanglerState* krd,
                                    const World& world, const PreservationSet& pres,
                                    std::span<const EditRequest> edits, Editor editor,
                                    const EditConfig& cfg);

}  // namespace dike
