#pragma once

#include "dike/config.hpp"
#include "dike/edit.hpp"
#include "dike/krd.hpp"
#include "dike/metrics.hpp"

namespace dike {

/// Everything the end-to-end run produces, in memory. The CLI persists the
/// pieces; the acceptance suite consumes them directly.
struct Pipeline {
  RunConfig cfg;
  World world;
  TransformerLM model;
  TrainLmReport lm_report;
  DisentanglerState krd;
  TrainKrdReport krd_report;
  KrdHeldoutStats krd_before, krd_after;
  PreservationSet pres;
  std::vector<FineKedRecord> fineked;
  std::vector<CounterfactRecord> counterfact;
  std::vector<SubjectBatchRecord> batches;
  std::vector<std::string> skipped;
};

World build_world(const RunConfig& cfg);
TransformerLM train_base_model(const RunConfig& cfg, const World& world, TrainLmReport* report);
DisentanglerState train_disentangler(const RunConfig& cfg, const World& world,
                                     const TransformerLM& model, TrainKrdReport* report);

/// World -> base model -> disentangler -> datasets -> key covariance.
Pipeline run_pipeline(const RunConfig& cfg);

}  // namespace dike
