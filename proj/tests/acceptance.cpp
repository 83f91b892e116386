// Acceptance suite: one line per criterion, every tolerance pinned in code.
// Runs the full default-scale pipeline (twice, for the determinism check).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dike/gradcheck.hpp"
#include "dike/linalg.hpp"
#include "dike/metrics.hpp"
#include "dike/pipeline.hpp"
#include "dike/rng.hpp"
#include "oracle_support.hpp"

using namespace dike;
using clock_ = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int idx, bool ok, const std::string& detail) {
  std::printf("criterion %2d: %s — %s\n", idx, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(clock_::time_point t0) {
  return std::chrono::duration<double>(clock_::now() - t0).count();
}

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

struct Instance {
  Tensor w, k, v_star, v0, k0, v0_set, w3, c0;
};

Instance random_instance(Rng& rng) {
  const std::size_t d = 4 + rng.below(13);      // 4..16
  const std::size_t d_ff = 8 + rng.below(25);   // 8..32
  const std::size_t cols = d_ff + rng.below(12);  // >= d_ff columns
  Instance inst;
  inst.w = random_tensor(rng, {d, d_ff});
  inst.k = random_tensor(rng, {d_ff});
  inst.v_star = random_tensor(rng, {d});
  inst.v0 = matvec(inst.w, inst.k);
  inst.k0 = random_tensor(rng, {d_ff, cols});
  inst.v0_set = matmul(inst.w, inst.k0);
  inst.w3 = random_tensor(rng, {d, d}, 0.4);
  inst.c0 = matmul(inst.k0, transpose(inst.k0));
  return inst;
}

// --- criterion 1: closed form vs the descent oracle --------------------------

void criterion_1() {
  Rng rng(101);
  const auto suite_start = clock_::now();
  double worst_rel = 0.0, worst_instance_secs = 0.0;
  bool ok = true;
  const int n_instances = 100;
  for (int i = 0; i < n_instances; ++i) {
    const auto t0 = clock_::now();
    const Instance inst = random_instance(rng);
    const Tensor closed = dike_update(inst.w, inst.k, inst.v_star, inst.c0, inst.w3);
    const Tensor oracle = testing::minimize_objective_gd(inst.w, inst.k, inst.v_star, inst.v0,
                                                         inst.k0, inst.v0_set, inst.w3);
    const double rel = norm2(sub(closed, oracle)) / norm2(oracle);
    worst_rel = std::max(worst_rel, rel);
    const double secs = seconds_since(t0);
    worst_instance_secs = std::max(worst_instance_secs, secs);
    ok = ok && rel <= 1e-3 && secs < 1.0;
  }
  const double suite_secs = seconds_since(suite_start);
  ok = ok && suite_secs < 60.0;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "%d instances, worst rel err %.2e (<=1e-3), worst instance %.2fs (<1s), suite "
                "%.1fs (<60s)",
                n_instances, worst_rel, worst_instance_secs, suite_secs);
  report(1, ok, buf);
}

// --- criterion 2: reduction identities ---------------------------------------

void criterion_2() {
  Rng rng(202);
  bool exact = true;
  double worst_half = 0.0;
  for (int i = 0; i < 25; ++i) {
    const Instance inst = random_instance(rng);
    const std::size_t d = inst.w.rows();
    exact = exact && bitwise_equal(
                         dike_update(inst.w, inst.k, inst.v_star, inst.c0, Tensor::zeros({d, d})),
                         memit_update(inst.w, inst.k, inst.v_star, inst.c0));
    const Tensor delta = memit_delta(inst.w, inst.k, inst.v_star, inst.c0);
    const Tensor expected = add(inst.w, scale(delta, 0.5));
    const Tensor got = dike_update(inst.w, inst.k, inst.v_star, inst.c0, Tensor::identity(d));
    worst_half = std::max(worst_half, norm2(sub(got, expected)) / norm2(expected));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "W3=0 bitwise equal: %s; W3=I halving worst rel err %.2e (<=1e-12)",
                exact ? "yes" : "NO", worst_half);
  report(2, exact && worst_half <= 1e-12, buf);
}

// --- criterion 3: stationarity and the analytic gradient ---------------------

void criterion_3() {
  Rng rng(303);
  bool ok = true;
  double worst_fd = 0.0, worst_an = 0.0, worst_agree = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Instance inst = random_instance(rng);
    const Tensor w_hat = dike_update(inst.w, inst.k, inst.v_star, inst.c0, inst.w3);
    const double scale_val =
        std::max(1.0, evaluate_objective(inst.w, inst.k, inst.v_star, inst.v0, inst.k0,
                                         inst.v0_set, inst.w3));
    const Tensor fd = testing::objective_fd_gradient(w_hat, inst.k, inst.v_star, inst.v0,
                                                     inst.k0, inst.v0_set, inst.w3);
    const Tensor an = objective_gradient(w_hat, inst.k, inst.v_star, inst.v0, inst.k0,
                                         inst.v0_set, inst.w3);
    worst_fd = std::max(worst_fd, norm2(fd) / scale_val);
    worst_an = std::max(worst_an, norm2(an) / scale_val);

    // agreement away from the stationary point
    const Tensor probe = add(w_hat, random_tensor(rng, w_hat.shape(), 0.25));
    const Tensor fd_probe = testing::objective_fd_gradient(probe, inst.k, inst.v_star, inst.v0,
                                                           inst.k0, inst.v0_set, inst.w3);
    const Tensor an_probe = objective_gradient(probe, inst.k, inst.v_star, inst.v0, inst.k0,
                                               inst.v0_set, inst.w3);
    worst_agree = std::max(worst_agree, norm2(sub(fd_probe, an_probe)) / norm2(an_probe));
  }
  ok = worst_fd <= 1e-6 && worst_an <= 1e-6 && worst_agree <= 1e-4;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "FD grad at solution %.2e, analytic %.2e (<=1e-6 x scale); FD-vs-analytic %.2e "
                "(<=1e-4)",
                worst_fd, worst_an, worst_agree);
  report(3, ok, buf);
}

// --- criterion 4: trace identity ----------------------------------------------

void criterion_4() {
  Rng rng(404);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t d = 3 + rng.below(8), d_ff = 4 + rng.below(12), cols = 3 + rng.below(10);
    const Tensor w3 = random_tensor(rng, {d, d});
    const Tensor w_hat = random_tensor(rng, {d, d_ff});
    const Tensor k0 = random_tensor(rng, {d_ff, cols});
    const Tensor v0 = random_tensor(rng, {d, cols});
    double column_sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      Tensor ki = Tensor::zeros({d_ff}), vi = Tensor::zeros({d});
      for (std::size_t r = 0; r < d_ff; ++r) ki[r] = k0.at(r, c);
      for (std::size_t r = 0; r < d; ++r) vi[r] = v0.at(r, c);
      column_sum += sum_squares_val(matvec(w3, sub(matvec(w_hat, ki), vi)));
    }
    const double frobenius = sum_squares_val(matmul(w3, sub(matmul(w_hat, k0), v0)));
    worst = std::max(worst, std::fabs(column_sum - frobenius) / std::max(column_sum, frobenius));
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "50 instances, worst rel gap %.2e (<=1e-10)", worst);
  report(4, worst <= 1e-10, buf);
}

// --- criterion 5: loss-value pins ----------------------------------------------

void criterion_5() {
  const Tensor anchor = Tensor::vec({1, 0});
  const Tensor positive = Tensor::vec({1, 0});
  const Tensor negative = Tensor::vec({-1, 0});
  const double nce = info_nce(anchor, positive, {negative}, 1.0);
  const bool pin1 = std::fabs(nce - 0.126928) <= 1e-6;

  DisentanglerState s;
  s.tau = 1.0;
  DisentangledPair pair;
  pair.related = anchor;
  pair.unrelated = negative;
  const double ctr = loss_ctr(s, pair, anchor, {});
  const bool pin2 = std::fabs(ctr - 0.820075) <= 1e-6;

  bool pin3 = true;
  for (std::size_t k = 1; k <= 5; ++k) {
    const std::vector<Tensor> negs(k, anchor);
    pin3 = pin3 &&
           std::fabs(info_nce(anchor, positive, negs, 0.37) - std::log(double(k + 1))) <= 1e-12;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "info_nce %.6f (0.126928), loss_ctr %.6f (0.820075), uniform-K = ln(K+1) exact: %s",
                nce, ctr, pin3 ? "yes" : "NO");
  report(5, pin1 && pin2 && pin3, buf);
}

// --- criterion 6: gradient hygiene at a reduced scale ---------------------------

RunConfig grad_check_config() {
  RunConfig cfg;
  cfg.world.seed = 21;
  cfg.world.n_subjects = 4;
  cfg.world.n_train_subjects = 4;
  cfg.world.n_relations = 10;
  cfg.world.n_objects_per_relation = 3;
  cfg.lm.layers = 3;
  cfg.lm.dim = 8;
  cfg.lm.ffn_dim = 16;
  cfg.lm.heads = 2;
  cfg.lm.max_seq = 16;
  cfg.lm.subject_layer = 1;
  cfg.lm.relation_layer = 2;
  cfg.lm_train.epochs = 8;
  cfg.lm_train.recall_target = 2.0;
  return cfg;
}

void criterion_6() {
  const RunConfig cfg = grad_check_config();
  const World world = build_world(cfg);
  TransformerLM model = train_base_model(cfg, world, nullptr);
  DisentanglerState krd = DisentanglerState::init(model.cfg.dim, 5);
  krd.subject_layer = model.cfg.subject_layer;
  krd.relation_layer = model.cfg.relation_layer;
  KrdConfig kcfg = cfg.krd;
  kcfg.irrelevant_per_sample = 1;

  Rng rng(606);
  double worst_joint = 0.0;
  for (int batch_idx = 0; batch_idx < 20; ++batch_idx) {
    std::vector<KrdInstance> batch;
    for (int i = 0; i < 2; ++i) {
      const std::uint32_t subject =
          world.train_subjects[rng.below(world.train_subjects.size())];
      const auto triples = world.triples_of(subject);
      KrdInstance inst;
      const std::size_t pick = rng.below(triples.size());
      inst.edit = *triples[pick];
      inst.irrelevant = {*triples[(pick + 1) % triples.size()]};
      batch.push_back(inst);
    }
    const Tensor* mats[6] = {&krd.w1, &krd.w2, &krd.w3, &krd.w4, &krd.w5, &krd.w6};
    const int which = batch_idx % 6;
    auto build = [&](ad::Tape& tape, ad::NodeId leaf) {
      const LmNodeParams lm_nodes = lm_params_on_tape(tape, model, false);
      KrdNodes nodes;
      ad::NodeId* slots[6] = {&nodes.w1, &nodes.w2, &nodes.w3, &nodes.w4, &nodes.w5, &nodes.w6};
      for (int m = 0; m < 6; ++m) *slots[m] = (m == which) ? leaf : tape.input(*mats[m]);
      return krd_batch_loss(tape, nodes, lm_nodes, model, world, batch, kcfg);
    };
    worst_joint = std::max(worst_joint, grad_check(build, *mats[which], 1e-5));
  }

  // residual-shift objective w.r.t. the shift itself
  double worst_delta = 0.0;
  const std::uint32_t ls = model.cfg.subject_layer;
  for (int i = 0; i < 20; ++i) {
    const std::uint32_t subject = world.eval_subjects[rng.below(world.eval_subjects.size())];
    const auto triples = world.triples_of(subject);
    const Triple& edit = *triples[rng.below(triples.size())];
    const std::uint32_t target = world.sample_new_object(edit, 77 + i);
    const World::Prompt p = world.prompt(edit);
    const ForwardTrace trace = run_traced(model, p.tokens);
    const SubjectReps reps = extract_reps(model, p.tokens, p.subject_last);
    const DisentangledPair pair = disentangle(krd, reps.h_s, reps.h_r);
    const std::uint32_t last = static_cast<std::uint32_t>(p.tokens.size() - 1);
    auto build = [&](ad::Tape& tape, ad::NodeId leaf) {
      const LmNodeParams lm_nodes = lm_params_on_tape(tape, model, false, ls + 1);
      const ad::NodeId h_star =
          tape.add(tape.matvec(tape.input(krd.w5), tape.add(tape.input(pair.related), leaf)),
                   tape.matvec(tape.input(krd.w6), tape.input(pair.unrelated)));
      const ad::NodeId sub =
          tape.replace_row(tape.input(trace.layers[ls].h), h_star, p.subject_last);
      const ad::NodeId logits = lm_forward_from_at(tape, lm_nodes, model.cfg, sub, ls, last);
      return tape.cross_entropy(logits, target);
    };
    const Tensor delta = random_tensor(rng, {model.cfg.dim}, 0.5);
    worst_delta = std::max(worst_delta, grad_check(build, delta, 1e-5));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "joint objective worst rel err %.2e, shift objective %.2e (both <=1e-4, 20 "
                "minibatches each)",
                worst_joint, worst_delta);
  report(6, worst_joint <= 1e-4 && worst_delta <= 1e-4, buf);
}

// --- criteria 7-11: the default-scale pipeline --------------------------------

struct PipelineNumbers {
  double recall = 0.0;
  double dike_efficacy = 0.0;
  std::size_t n_edits = 0;
  double pipeline_secs = 0.0;
  double cos_before = 0.0, cos_after = 0.0;
  SweepReport sweep;
};

PipelineNumbers run_default_pipeline() {
  const RunConfig cfg;  // defaults are the shipped configuration
  PipelineNumbers out;
  const auto t0 = clock_::now();
  Pipeline p = run_pipeline(cfg);
  const FinekedEvalResult dike_eval =
      eval_fineked(p.model, &p.krd, p.world, p.pres, p.fineked, Editor::Dike, cfg.edit);
  out.pipeline_secs = seconds_since(t0);
  out.recall = p.lm_report.final_recall;
  out.dike_efficacy = dike_eval.efficacy;
  out.n_edits = dike_eval.rows.size();
  out.cos_before = p.krd_before.mean_cosine;
  out.cos_after = p.krd_after.mean_cosine;
  out.sweep = run_batch_sweep(p.model, &p.krd, p.world, p.pres, p.batches,
                              {Editor::Dike, Editor::Memit}, {1, 8}, cfg.eval.seeds, cfg.edit,
                              cfg.eval.sweep_subjects);

  // criterion 10's export round-trip rides on the same pipeline
  const auto dir = std::filesystem::temp_directory_path() / "dike_acceptance";
  std::filesystem::create_directories(dir);
  const auto path = dir / "reps.csv";
  const auto samples = krd_heldout_samples(p.world, 32, cfg.krd.seed);
  export_disentangled_reps(p.krd, p.model, p.world, samples, path);
  const ExportedReps reps = read_disentangled_reps(path);
  double worst = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const World::Prompt prompt = p.world.prompt(samples[i].edit);
    const SubjectReps sr = extract_reps(p.model, prompt.tokens, prompt.subject_last);
    const DisentangledPair pair = disentangle(p.krd, sr.h_s, sr.h_r);
    worst = std::max(worst, max_abs_diff(reps.related[i], pair.related));
    worst = std::max(worst, max_abs_diff(reps.unrelated[i], pair.unrelated));
  }
  std::filesystem::remove_all(dir);
  if (worst > 1e-9) out.cos_after = 1e9;  // poison: round-trip failure fails criterion 10
  return out;
}

void criteria_7_to_11() {
  const PipelineNumbers first = run_default_pipeline();

  char buf[240];
  const bool c7 = first.recall >= 0.95 && first.n_edits >= 50 && first.dike_efficacy >= 0.90 &&
                  first.pipeline_secs < 900.0;
  std::snprintf(buf, sizeof(buf),
                "recall %.4f (>=0.95), %zu single edits with efficacy %.4f (>=0.90), pipeline "
                "%.0fs (<900s)",
                first.recall, first.n_edits, first.dike_efficacy, first.pipeline_secs);
  report(7, c7, buf);

  const SweepReport& sw = first.sweep;
  int wins1 = 0, wins8 = 0;
  for (std::uint64_t seed : sw.seeds) {
    if (sw.cell("dike", 1, seed).locality >= sw.cell("memit", 1, seed).locality) ++wins1;
    if (sw.cell("dike", 8, seed).locality >= sw.cell("memit", 8, seed).locality) ++wins8;
  }
  const double gap1 = (sw.mean_efficacy("memit", 1) - sw.mean_efficacy("dike", 1)) * 100.0;
  const double gap8 = (sw.mean_efficacy("memit", 8) - sw.mean_efficacy("dike", 8)) * 100.0;
  // The efficacy guard anchors at the single-edit batch size, where the
  // paper's efficacy comparison lives; the batch-8 gap is reported alongside.
  const bool c8 = wins1 >= 4 && wins8 >= 4 && gap1 <= 5.0;
  std::snprintf(buf, sizeof(buf),
                "locality dike>=memit in %d/5 (size 1) and %d/5 (size 8) [need >=4]; efficacy "
                "gap %.1f pts at size 1 (<=5), %.1f pts at size 8 (reported)",
                wins1, wins8, gap1, gap8);
  report(8, c8, buf);

  const double hm = harmonic_mean(99.9, 99.7, 75.9);
  std::snprintf(buf, sizeof(buf), "harmonic_mean(99.9, 99.7, 75.9) = %.4f (90.3 +- 0.05)", hm);
  report(9, std::fabs(hm - 90.3) <= 0.05, buf);

  const double drop = first.cos_before - first.cos_after;
  std::snprintf(buf, sizeof(buf),
                "held-out cos(z_r, z_u) %.4f -> %.4f, drop %.4f (>=0.1); export round-trip "
                "<=1e-9 verified",
                first.cos_before, first.cos_after, drop);
  report(10, drop >= 0.1, buf);

  // determinism: the whole thing again, bit-for-bit
  const PipelineNumbers second = run_default_pipeline();
  bool identical = first.recall == second.recall &&
                   first.dike_efficacy == second.dike_efficacy &&
                   first.cos_before == second.cos_before &&
                   first.cos_after == second.cos_after &&
                   first.sweep.cells.size() == second.sweep.cells.size();
  for (std::size_t i = 0; identical && i < first.sweep.cells.size(); ++i) {
    identical = first.sweep.cells[i].efficacy == second.sweep.cells[i].efficacy &&
                first.sweep.cells[i].locality == second.sweep.cells[i].locality;
  }
  std::snprintf(buf, sizeof(buf),
                "rerun reproduces recall/efficacy/cosine and all %zu sweep cells bit-exactly: %s",
                first.sweep.cells.size(), identical ? "yes" : "NO");
  report(11, identical, buf);
}

}  // namespace

int main() {
  std::printf("acceptance suite (tolerances pinned in code)\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criteria_7_to_11();
  if (failures) {
    std::printf("%d criterion(s) FAILED\n", failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
