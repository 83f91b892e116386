#include "dike/edit.hpp"

#include <cmath>

#include "dike/linalg.hpp"
#include "dike/optim.hpp"
#include "dike/rng.hpp"

namespace dike {

namespace {

Tensor key_from_trace(const ForwardTrace& trace, std::uint32_t layer, std::uint32_t subject_pos) {
  const Tensor& inner = trace.layers[layer].inner;
  Tensor k = Tensor::zeros({inner.cols()});
  for (std::size_t j = 0; j < inner.cols(); ++j) k[j] = inner.at(subject_pos, j);
  return k;
}

}  // namespace

PreservationSet estimate_covariance(const TransformerLM& model, const World& world, double lambda,
                                    double ridge) {
  const std::uint32_t ls = model.cfg.subject_layer;
  const std::uint32_t d_ff = model.cfg.ffn_dim;
  PreservationSet pres;
  pres.lambda = lambda;
  pres.ridge = ridge;
  pres.model_hash = model.fingerprint();
  pres.c0 = Tensor::zeros({d_ff, d_ff});

  std::size_t count = 0;
  LmScorer scorer(model);
  auto absorb = [&](const World::Prompt& p) {
    const ForwardTrace trace = scorer.traced(p.tokens, ls);
    const Tensor k = key_from_trace(trace, ls, p.subject_last);
    for (std::size_t i = 0; i < d_ff; ++i) {
      const double ki = k[i];
      double* row = pres.c0.data() + i * d_ff;
      for (std::size_t j = 0; j < d_ff; ++j) row[j] += ki * k[j];
    }
    ++count;
  };
  std::size_t idx = 0;
  for (const Triple& t : world.triples) {
    absorb(world.prompt(t));
    absorb(world.prompt_with_prefix(t, 0, static_cast<std::uint32_t>(idx % world.prefix_pool.size())));
    ++idx;
  }
  if (count == 0) fail(ErrorKind::Config, "estimate_covariance: no sampled keys");
  if (count < d_ff && ridge <= 0.0)
    fail(ErrorKind::Config, "estimate_covariance: fewer keys than d_ff requires a ridge");
  const double scale = lambda / static_cast<double>(count);
  for (std::size_t i = 0; i < pres.c0.size(); ++i) pres.c0[i] *= scale;
  for (std::size_t i = 0; i < d_ff; ++i) pres.c0.at(i, i) += ridge;
  pres.n_keys = count;
  return pres;
}

Tensor compute_key(const TransformerLM& model, const World& world, const Triple& edit,
                   std::uint32_t n_prefixes, std::uint64_t seed) {
  if (n_prefixes == 0) fail(ErrorKind::Config, "compute_key: need at least one prompt variant");
  const std::uint32_t ls = model.cfg.subject_layer;
  Tensor k = Tensor::zeros({model.cfg.ffn_dim});
  LmScorer scorer(model);
  Rng rng(Rng::derive(seed, (static_cast<std::uint64_t>(edit.subject) << 24) ^ edit.relation));
  for (std::uint32_t j = 0; j < n_prefixes; ++j) {
    World::Prompt p;
    if (j == 0) {
      p = world.prompt(edit);
    } else if (j <= world.prefix_pool.size()) {
      p = world.prompt_with_prefix(edit, 0, j - 1);
    } else {
      p = world.prompt_with_prefix(edit, 0,
                                   static_cast<std::uint32_t>(rng.below(world.prefix_pool.size())));
    }
    const ForwardTrace trace = scorer.traced(p.tokens, ls);
    const Tensor sample = key_from_trace(trace, ls, p.subject_last);
    for (std::size_t i = 0; i < k.size(); ++i) k[i] += sample[i];
  }
  for (std::size_t i = 0; i < k.size(); ++i) k[i] /= static_cast<double>(n_prefixes);
  return k;
}

namespace {

struct PromptState {
  World::Prompt prompt;
  Tensor h_at_ls;  // full stream matrix at the edited layer
};

PromptState prompt_state(LmScorer& scorer, const World& world, const Triple& t) {
  PromptState st;
  st.prompt = world.prompt(t);
  const ForwardTrace trace = scorer.traced(st.prompt.tokens, scorer.model().cfg.subject_layer);
  st.h_at_ls = trace.layers[scorer.model().cfg.subject_layer].h;
  return st;
}

// Shared optimization loop over one persistent tape: constants (upper-layer
// parameters, cached prefixes) sit below `mark`; each step rebuilds only the
// loss subgraph and truncates it away. Early stop happens before the first
// step when the loss is already below the threshold.
struct LeafLoss {
  ad::NodeId objective;  // minimized
  ad::NodeId stop;       // early-stop metric (the target cross entropy)
};

template <typename BuildLoss>
std::tuple<Tensor, double, std::uint32_t, bool> optimize_leaf(ad::Tape& tape, Tensor init,
                                                              const EditConfig& cfg,
                                                              BuildLoss&& build) {
  Tensor leaf = std::move(init);
  AdamW opt(cfg.delta_lr);
  std::vector<Tensor*> params = {&leaf};
  const std::size_t mark = tape.node_count();
  double stop_val = 0.0;
  std::uint32_t steps = 0;
  bool converged = false;
  for (;;) {
    const ad::NodeId leaf_node = tape.param(leaf);
    const LeafLoss loss = build(tape, leaf_node);
    const double objective_val = tape.val(loss.objective).item();
    stop_val = tape.val(loss.stop).item();
    if (!std::isfinite(objective_val))
      fail(ErrorKind::Divergence, "edit optimization: non-finite loss at step " +
                                      std::to_string(steps));
    if (stop_val < cfg.delta_stop_loss) {
      tape.truncate(mark);
      converged = true;
      break;
    }
    if (steps >= cfg.delta_max_steps) {
      tape.truncate(mark);
      break;
    }
    tape.backward(loss.objective);
    const Tensor grad = tape.grad(leaf_node);
    tape.truncate(mark);
    opt.step(params, {grad});
    ++steps;
  }
  return {std::move(leaf), stop_val, steps, converged};
}

}  // namespace

DeltaResult optimize_delta(const TransformerLM& model, const DisentanglerState& krd,
                           const World& world, const EditRequest& edit, const EditConfig& cfg) {
  krd.validate_shape(model);
  const std::uint32_t ls = model.cfg.subject_layer;
  const std::uint32_t lr = model.cfg.relation_layer;
  const World::Prompt p = world.prompt(edit.base);
  const ForwardTrace trace = run_traced(model, p.tokens);
  Tensor h_s = Tensor::zeros({model.cfg.dim});
  Tensor h_r = Tensor::zeros({model.cfg.dim});
  for (std::size_t j = 0; j < model.cfg.dim; ++j) {
    h_s[j] = trace.layers[ls].h.at(p.subject_last, j);
    h_r[j] = trace.layers[lr].h.at(p.tokens.size() - 1, j);
  }
  const DisentangledPair pair = disentangle(krd, h_s, h_r);
  const std::uint32_t last = static_cast<std::uint32_t>(p.tokens.size() - 1);

  ad::Tape tape;
  const LmNodeParams lm_nodes = lm_params_on_tape(tape, model, false, ls + 1);
  const ad::NodeId w5 = tape.input(krd.w5);
  const ad::NodeId w6 = tape.input(krd.w6);
  const ad::NodeId z_r = tape.input(pair.related);
  const ad::NodeId unrelated_part = tape.matvec(w6, tape.input(pair.unrelated));
  const ad::NodeId h_mat = tape.input(trace.layers[ls].h);

  auto [delta, loss, steps, converged] = optimize_leaf(
      tape, Tensor::zeros({model.cfg.dim}), cfg, [&](ad::Tape& t, ad::NodeId leaf) {
        const ad::NodeId h_star =
            t.add(t.matvec(w5, t.add(z_r, leaf)), unrelated_part);
        const ad::NodeId sub = t.replace_row(h_mat, h_star, p.subject_last);
        const ad::NodeId logits = lm_forward_from_at(t, lm_nodes, model.cfg, sub, ls, last);
        const ad::NodeId ce = t.cross_entropy(logits, edit.new_object);
        return LeafLoss{ce, ce};
      });

  DeltaResult out;
  out.delta = std::move(delta);
  Tensor shifted = add(pair.related, out.delta);
  out.h_star = recompose(krd, shifted, pair.unrelated);
  out.final_loss = loss;
  out.steps = steps;
  out.converged = converged;
  out.warn = !converged && loss >= 10.0 * cfg.delta_stop_loss;
  return out;
}

namespace {

ValueResult optimize_value_impl(const TransformerLM& model, const World& world,
                                const EditRequest& edit, std::span<const Triple> constraints,
                                const EditConfig& cfg) {
  const std::uint32_t ls = model.cfg.subject_layer;
  const World::Prompt p = world.prompt(edit.base);
  const ForwardTrace trace = run_traced(model, p.tokens);
  const Tensor h_at_ls = trace.layers[ls].h;
  Tensor v_orig = Tensor::zeros({model.cfg.dim});
  Tensor h_sp = Tensor::zeros({model.cfg.dim});
  for (std::size_t j = 0; j < model.cfg.dim; ++j) {
    v_orig[j] = trace.layers[ls].v.at(p.subject_last, j);
    h_sp[j] = trace.layers[ls].h.at(p.subject_last, j) - v_orig[j];
  }
  const std::uint32_t last = static_cast<std::uint32_t>(p.tokens.size() - 1);

  std::vector<PromptState> constraint_states;
  if (!constraints.empty()) {
    LmScorer scorer(model);
    for (const Triple& t : constraints) {
      if (t.subject != edit.base.subject)
        fail(ErrorKind::Config, "constrained edit: constraint subject differs from the edit");
      constraint_states.push_back(prompt_state(scorer, world, t));
    }
  }

  ad::Tape tape;
  const LmNodeParams lm_nodes = lm_params_on_tape(tape, model, false, ls + 1);
  const ad::NodeId h_sp_node = tape.input(h_sp);
  const ad::NodeId h_mat = tape.input(h_at_ls);
  std::vector<ad::NodeId> constraint_mats;
  for (const PromptState& st : constraint_states)
    constraint_mats.push_back(tape.input(st.h_at_ls));

  auto [v_star, loss, steps, converged] = optimize_leaf(
      tape, v_orig, cfg, [&](ad::Tape& t, ad::NodeId leaf) {
        const ad::NodeId h_sub = t.add(h_sp_node, leaf);
        const ad::NodeId sub = t.replace_row(h_mat, h_sub, p.subject_last);
        const ad::NodeId logits = lm_forward_from_at(t, lm_nodes, model.cfg, sub, ls, last);
        const ad::NodeId target_ce = t.cross_entropy(logits, edit.new_object);
        ad::NodeId total = target_ce;
        for (std::size_t c = 0; c < constraint_states.size(); ++c) {
          const PromptState& st = constraint_states[c];
          const ad::NodeId csub =
              t.replace_row(constraint_mats[c], h_sub, st.prompt.subject_last);
          const ad::NodeId clogits = lm_forward_from_at(
              t, lm_nodes, model.cfg, csub, ls,
              static_cast<std::uint32_t>(st.prompt.tokens.size() - 1));
          total = t.add(total, t.cross_entropy(clogits, constraints[c].object));
        }
        // The preservation terms keep a floor under the combined loss, so the
        // early stop watches the injection term alone.
        return LeafLoss{total, target_ce};
      });

  ValueResult out;
  out.v_star = std::move(v_star);
  out.final_loss = loss;
  out.steps = steps;
  out.converged = converged;
  out.warn = !converged && loss >= 10.0 * cfg.delta_stop_loss;
  return out;
}

}  // namespace

ValueResult optimize_value(const TransformerLM& model, const World& world,
                           const EditRequest& edit, const EditConfig& cfg) {
  return optimize_value_impl(model, world, edit, {}, cfg);
}

ValueResult constrained_value_variant(const TransformerLM& model, const World& world,
                                      const EditRequest& edit,
                                      std::span<const Triple> constraints,
                                      const EditConfig& cfg) {
  if (constraints.empty())
    fail(ErrorKind::Config,
         "constrained_value_variant: no constraint triples (use the baseline path instead)");
  // One cross entropy per constraint joins the objective; the step budget
  // scales with the term count so the joint optimum is actually reachable.
  EditConfig scaled = cfg;
  scaled.delta_max_steps = cfg.delta_max_steps * (1 + static_cast<std::uint32_t>(constraints.size()));
  return optimize_value_impl(model, world, edit, constraints, scaled);
}

Tensor compute_value(const ForwardTrace& trace, const Tensor& h_star, std::uint32_t subject_pos,
                     std::uint32_t layer) {
  const Tensor& h = trace.layers.at(layer).h;
  const Tensor& v = trace.layers.at(layer).v;
  if (h_star.size() != h.cols()) fail(ErrorKind::Dimension, "compute_value: width mismatch");
  Tensor v_star = h_star;
  for (std::size_t j = 0; j < v_star.size(); ++j) {
    const double h_sp = h.at(subject_pos, j) - v.at(subject_pos, j);
    v_star[j] -= h_sp;
  }
  return v_star;
}

Tensor memit_delta(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& c0) {
  if (w.rank() != 2 || k.rank() != 1 || v.rank() != 1 || w.cols() != k.size() ||
      w.rows() != v.size())
    fail(ErrorKind::Dimension, "memit_delta: extents, W " + w.shape_str() + " k " + k.shape_str() +
                                   " v " + v.shape_str());
  Tensor residual = v;
  const Tensor wk = matvec(w, k);
  for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= wk[i];
  Tensor system = c0;
  for (std::size_t i = 0; i < k.size(); ++i)
    for (std::size_t j = 0; j < k.size(); ++j) system.at(i, j) += k[i] * k[j];
  // k^T (C0 + k k^T)^{-1} is the transposed solve against the symmetric system.
  const Tensor y = solve_spd(system, k);
  return outer(residual, y);
}

Tensor memit_update(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& c0) {
  return add(w, memit_delta(w, k, v, c0));
}

Tensor dike_update(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& c0,
                   const Tensor& w3) {
  if (w3.rank() != 2 || w3.rows() != w.rows() || w3.cols() != w.rows())
    fail(ErrorKind::Dimension, "dike_update: W3 must be square over the value width");
  const Tensor delta = memit_delta(w, k, v, c0);
  Tensor system = matmul(transpose(w3), w3);
  for (std::size_t i = 0; i < system.rows(); ++i) system.at(i, i) += 1.0;
  return add(w, solve_spd(system, delta));
}

double evaluate_objective(const Tensor& w_hat, const Tensor& k, const Tensor& v_star,
                          const Tensor& v0, const Tensor& k0, const Tensor& v0_set,
                          const Tensor& w3) {
  const Tensor wk = matvec(w_hat, k);
  const Tensor wk0 = matmul(w_hat, k0);
  if (!wk0.same_shape(v0_set))
    fail(ErrorKind::Dimension, "evaluate_objective: V0 shape " + v0_set.shape_str());
  const Tensor edit_res = sub(wk, v_star);
  const Tensor keep_res = sub(wk0, v0_set);
  const Tensor fine_edit = matvec(w3, sub(wk, v0));
  const Tensor fine_keep = matmul(w3, keep_res);
  return sum_squares_val(edit_res) + sum_squares_val(keep_res) + sum_squares_val(fine_edit) +
         sum_squares_val(fine_keep);
}

Tensor objective_gradient(const Tensor& w_hat, const Tensor& k, const Tensor& v_star,
                          const Tensor& v0, const Tensor& k0, const Tensor& v0_set,
                          const Tensor& w3) {
  const Tensor w3tw3 = matmul(transpose(w3), w3);
  const Tensor wk = matvec(w_hat, k);
  const Tensor wk0 = matmul(w_hat, k0);
  const Tensor keep_res = sub(wk0, v0_set);

  Tensor grad = outer(sub(wk, v_star), k);
  const Tensor keep_term = matmul(keep_res, transpose(k0));
  const Tensor fine_edit = outer(matvec(w3tw3, sub(wk, v0)), k);
  const Tensor fine_keep = matmul(w3tw3, keep_term);
  for (std::size_t i = 0; i < grad.size(); ++i)
    grad[i] = 2.0 * (grad[i] + keep_term[i] + fine_edit[i] + fine_keep[i]);
  return grad;
}

TransformerLM apply_edit(const TransformerLM& model, const Tensor& w_hat) {
  const Tensor& w = model.layers[model.cfg.subject_layer].w_out;
  if (!w_hat.same_shape(w))
    fail(ErrorKind::Dimension, "apply_edit: expected " + w.shape_str() + ", got " +
                                   w_hat.shape_str());
  TransformerLM edited = model;
  edited.layers[model.cfg.subject_layer].w_out = w_hat;
  return edited;
}

Editor editor_from_name(const std::string& name) {
  if (name == "dike") return Editor::Dike;
  if (name == "memit") return Editor::Memit;
  if (name == "memit-constrained") return Editor::MemitConstrained;
  fail(ErrorKind::Config,
       "unknown editor '" + name + "'; valid editors: dike, memit, memit-constrained");
}

const char* editor_name(Editor editor) {
  switch (editor) {
    case Editor::Dike: return "dike";
    case Editor::Memit: return "memit";
    case Editor::MemitConstrained: return "memit-constrained";
  }
  return "?";
}

namespace {

std::vector<Triple> draw_constraints(const World& world, const EditRequest& edit,
                                     std::uint32_t count, std::uint64_t seed) {
  std::vector<const Triple*> others;
  for (const Triple* t : world.triples_of(edit.base.subject))
    if (t->relation != edit.base.relation) others.push_back(t);
  Rng rng(Rng::derive(seed, 0xC0257 ^ (static_cast<std::uint64_t>(edit.base.subject) << 16) ^
                                edit.base.relation));
  std::vector<Triple> out;
  while (!others.empty() && out.size() < count) {
    const std::size_t pick = rng.below(others.size());
    out.push_back(*others[pick]);
    others.erase(others.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

}  // namespace

EditOutcome compute_edit(const TransformerLM& model, const DisentanglerState* krd,
                         const World& world, const PreservationSet& pres, const EditRequest& edit,
                         Editor editor, const EditConfig& cfg, bool zero_w3) {
  const std::uint32_t ls = model.cfg.subject_layer;
  const Tensor& w = model.layers[ls].w_out;

  EditOutcome out;
  out.report.editor = editor_name(editor);
  out.report.subject = world.subject_name(edit.base.subject);
  out.report.relation = world.relations[edit.base.relation].name;
  out.report.object = world.vocab.str(edit.base.object);
  out.report.new_object = world.vocab.str(edit.new_object);
  out.report.lambda = pres.lambda;
  out.report.seed = cfg.seed;

  const Tensor k = compute_key(model, world, edit.base, cfg.n_prefixes, cfg.seed);

  Tensor v_star;
  if (editor == Editor::Dike && !zero_w3) {
    if (!krd) fail(ErrorKind::Config, "dike editor requires a trained disentangler");
    const DeltaResult delta = optimize_delta(model, *krd, world, edit, cfg);
    const World::Prompt p = world.prompt(edit.base);
    const ForwardTrace trace = run_traced(model, p.tokens);
    v_star = compute_value(trace, delta.h_star, p.subject_last, ls);
    out.report.delta_norm = norm2(delta.delta);
    out.report.final_loss = delta.final_loss;
    out.report.steps = delta.steps;
    out.report.converged = delta.converged;
    out.report.warn = delta.warn;
  } else {
    ValueResult value;
    if (editor == Editor::MemitConstrained) {
      const std::vector<Triple> constraints =
          draw_constraints(world, edit, cfg.n_constraints, cfg.seed);
      value = constrained_value_variant(model, world, edit, constraints, cfg);
    } else {
      value = optimize_value(model, world, edit, cfg);
    }
    v_star = value.v_star;
    out.report.final_loss = value.final_loss;
    out.report.steps = value.steps;
    out.report.converged = value.converged;
    out.report.warn = value.warn;
  }

  if (editor == Editor::Dike) {
    if (zero_w3) {
      out.w_hat = dike_update(w, k, v_star, pres.c0, Tensor::zeros({w.rows(), w.rows()}));
    } else {
      out.w_hat = dike_update(w, k, v_star, pres.c0, krd->w3);
    }
  } else {
    out.w_hat = memit_update(w, k, v_star, pres.c0);
  }
  out.report.update_fnorm = norm2(sub(out.w_hat, w));
  return out;
}

BatchEditResult apply_edit_sequence(const TransformerLM& base, const DisentanglerState* krd,
                                    const World& world, const PreservationSet& pres,
                                    std::span<const EditRequest> edits, Editor editor,
                                    const EditConfig& cfg) {
  BatchEditResult result;
  result.model = base;
  for (const EditRequest& edit : edits) {
    EditOutcome outcome = compute_edit(result.model, krd, world, pres, edit, editor, cfg);
    result.model = apply_edit(result.model, outcome.w_hat);
    result.reports.push_back(std::move(outcome.report));
  }
  return result;
}

}  // namespace dike
