#include "dike/pipeline.hpp"

namespace dike {

World build_world(const RunConfig& cfg) { return gen_world(cfg.world); }

TransformerLM train_base_model(const RunConfig& cfg, const World& world, TrainLmReport* report) {
  LmConfig lm_cfg = cfg.lm;
  lm_cfg.vocab = world.vocab.size();
  TransformerLM model = TransformerLM::init(lm_cfg, cfg.lm_init_seed);
  const auto corpus = lm_corpus(world, cfg.lm_prefix_fraction, cfg.lm_train.seed);
  const auto probes = recall_probes(world);
  TrainLmReport r = train_lm(model, corpus, probes, cfg.lm_train);
  if (report) *report = std::move(r);
  return model;
}

DisentanglerState train_disentangler(const RunConfig& cfg, const World& world,
                                     const TransformerLM& model, TrainKrdReport* report) {
  DisentanglerState state = DisentanglerState::init(model.cfg.dim, cfg.krd_init_seed);
  const auto heldout = krd_heldout_samples(world, cfg.krd_heldout, cfg.krd.seed);
  TrainKrdReport r = train_krd(state, model, world, cfg.krd, heldout);
  if (report) *report = std::move(r);
  return state;
}

Pipeline run_pipeline(const RunConfig& cfg) {
  Pipeline p;
  p.cfg = cfg;
  p.world = build_world(cfg);
  p.model = train_base_model(cfg, p.world, &p.lm_report);
  p.krd = train_disentangler(cfg, p.world, p.model, &p.krd_report);
  p.krd_before = p.krd_report.before;
  p.krd_after = p.krd_report.after;
  p.fineked = build_fineked(p.world, p.model, cfg.eval.data_seed, &p.skipped);
  p.counterfact = build_counterfact_style(p.world, cfg.eval.data_seed, &p.skipped);
  p.batches = build_subject_batches(p.world, p.model, cfg.eval.data_seed, 8, &p.skipped);
  p.pres = estimate_covariance(p.model, p.world, cfg.edit.cov_lambda, cfg.edit.cov_ridge);
  return p;
}

}  // namespace dike
