#pragma once

#include <cstdint>
#include <span>
#include <filesystem>
#include <vector>

#include "dike/lm.hpp"
#include "dike/worldgen.hpp"

namespace dike {

/// The six projection matrices splitting a subject representation into a
/// target-knowledge-related part and an unrelated part, plus the loss
/// hyperparameters. Trained once against a frozen model, reused by every edit.
struct DisentanglerState {
  Tensor w1, w2, w3, w4, w5, w6;  // (d, d)
  double tau = 0.1;
  double alpha = 0.2;
  double beta = 1.0;
  std::uint32_t subject_layer = 0, relation_layer = 0;
  std::uint64_t lm_hash = 0;     // fingerprint of the frozen base model
  std::uint64_t world_hash = 0;  // fingerprint of the training world

  static DisentanglerState init(std::uint32_t dim, std::uint64_t seed);
  std::vector<Tensor*> parameters();
  std::uint64_t fingerprint() const;
  /// Width and layer-assignment agreement (safe on edited descendants).
  void validate_shape(const TransformerLM& model) const;
  /// Shape plus the trained-against fingerprint; for session entry points.
  void validate_compatible(const TransformerLM& model) const;
};

struct DisentangledPair {
  Tensor related;    // z_r = gelu(W1 h_s + W2 h_r)
  Tensor unrelated;  // z_u = gelu(W3 h_s + W4 h_r)
};

DisentangledPair disentangle(const DisentanglerState& state, const Tensor& h_s, const Tensor& h_r);
/// W5 z_r + W6 z_u.
Tensor recompose(const DisentanglerState& state, const Tensor& z_r, const Tensor& z_u);

/// Contrastive loss over cosine similarities with temperature tau;
/// -log( exp(sim(a,p)/tau) / (exp(sim(a,p)/tau) + sum_n exp(sim(a,n)/tau)) ).
double info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau);

/// InfoNCE(z_r, h_s, [z_u; H_s]) + InfoNCE(z_u, h_s, [z_r; H_s]).
double loss_ctr(const DisentanglerState& state, const DisentangledPair& pair, const Tensor& h_s,
                const std::vector<Tensor>& batch_negatives);

/// Substituted-forward cross entropies: the related component must predict o
/// on p(s,r); the unrelated component must predict each o' on p(s,r').
/// Gradients flow into the six projections only (the model enters as data).
double loss_con(const DisentanglerState& state, const TransformerLM& model, const World& world,
                const Triple& edit, const std::vector<Triple>& irrelevant);

/// Norm of the reconstruction residual, exactly as the objective displays it;
/// `squared` switches to the mean-squared form for ablations.
double loss_recon(const Tensor& h_s, const Tensor& h_hat, bool squared = false);

// Tape forms used by the trainer and the residual-shift optimizer.
struct KrdNodes {
  ad::NodeId w1, w2, w3, w4, w5, w6;
};
KrdNodes krd_params_on_tape(ad::Tape& tape, const DisentanglerState& state, bool trainable);
std::pair<ad::NodeId, ad::NodeId> disentangle_nodes(ad::Tape& tape, const KrdNodes& nodes,
                                                    ad::NodeId h_s, ad::NodeId h_r);
ad::NodeId recompose_nodes(ad::Tape& tape, const KrdNodes& nodes, ad::NodeId z_r, ad::NodeId z_u);
ad::NodeId info_nce_node(ad::Tape& tape, ad::NodeId anchor, ad::NodeId positive,
                         const std::vector<ad::NodeId>& negatives, double tau);

struct KrdSample {
  Triple edit;
};

/// One training instance: the target triple plus its sampled irrelevant set.
struct KrdInstance {
  Triple edit;
  std::vector<Triple> irrelevant;
};

struct KrdEpochStats;
struct KrdConfig;

/// The joint objective over a minibatch: mean of ctr + alpha*con + beta*recon.
/// Shared by the trainer and the gradient-check harness.
ad::NodeId krd_batch_loss(ad::Tape& tape, const KrdNodes& krd_nodes,
                          const LmNodeParams& lm_nodes, const TransformerLM& model,
                          const World& world, std::span<const KrdInstance> batch,
                          const KrdConfig& cfg, KrdEpochStats* stats = nullptr);

struct KrdConfig {
  double tau = 0.1;
  double alpha = 0.2;
  double beta = 1.0;
  double lr = 2e-3;
  double weight_decay = 3e-2;
  std::uint32_t epochs = 5;
  std::uint32_t batch = 4;
  std::uint32_t irrelevant_per_sample = 2;  // |N|, resampled per instance per epoch
  std::uint32_t samples = 1536;
  std::uint64_t seed = 4;
  bool squared_recon = false;
};

struct KrdEpochStats {
  double ctr = 0.0, con = 0.0, recon = 0.0, total = 0.0;
};

struct KrdHeldoutStats {
  double mean_cosine = 0.0;  // mean cos(z_r, z_u)
  double mean_recon = 0.0;   // mean reconstruction residual norm
};

struct TrainKrdReport {
  std::vector<KrdEpochStats> epochs;
  KrdHeldoutStats before, after;
  std::uint64_t steps = 0;
};

/// Draws training instances from the disjoint training-subject pool.
std::vector<KrdSample> krd_training_samples(const World& world, std::uint32_t count,
                                            std::uint64_t seed);
/// Held-out instances from the evaluation pool (used only for statistics).
std::vector<KrdSample> krd_heldout_samples(const World& world, std::uint32_t count,
                                           std::uint64_t seed);

TrainKrdReport train_krd(DisentanglerState& state, const TransformerLM& model, const World& world,
                         const KrdConfig& cfg, const std::vector<KrdSample>& heldout = {});

KrdHeldoutStats krd_heldout_stats(const DisentanglerState& state, const TransformerLM& model,
                                  const World& world, const std::vector<KrdSample>& samples);

void save_krd_checkpoint(const std::filesystem::path& path, const DisentanglerState& state,
                         const std::string& config_hash);
DisentanglerState load_krd_checkpoint(const std::filesystem::path& path);

}  // namespace dike
