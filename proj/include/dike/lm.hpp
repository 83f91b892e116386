#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dike/autodiff.hpp"
#include "dike/tensor.hpp"

namespace dike {

struct LmConfig {
  std::uint32_t layers = 4;
  std::uint32_t dim = 64;
  std::uint32_t ffn_dim = 256;
  std::uint32_t heads = 4;
  std::uint32_t max_seq = 24;
  std::uint32_t vocab = 0;
  // 0-indexed blocks whose output stream carries the subject / relation reads.
  // The subject layer is also the edited layer.
  std::uint32_t subject_layer = 1;
  std::uint32_t relation_layer = 2;

  void validate() const;
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;  // (d, d), applied to column vectors
  Tensor ln2_g, ln2_b;
  Tensor w_in;            // (d_ff, d)
  Tensor w_out;           // (d, d_ff) — the matrix the editors rewrite
};

/// Minimal pre-norm decoder-only transformer. Per-layer stream update is
/// h = (h_prev + attn) + ffn, with both module outputs recorded, so the
/// residual decomposition is exact by construction.
struct TransformerLM {
  LmConfig cfg;
  std::uint64_t init_seed = 0;
  Tensor tok_emb, pos_emb;  // (V, d), (max_seq, d)
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor head;              // (V, d)

  static TransformerLM init(const LmConfig& cfg, std::uint64_t seed);
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::uint64_t fingerprint() const;
};

/// Parameter handles on a tape; transposed copies are materialized once per
/// tape so repeated forwards share them.
struct LmNodeParams {
  ad::NodeId tok_emb = 0, pos_emb = 0;
  struct Layer {
    ad::NodeId ln1_g, ln1_b, wq_t, wk_t, wv_t, wo_t, ln2_g, ln2_b, w_in_t, w_out_t;
  };
  std::vector<Layer> layers;
  ad::NodeId lnf_g = 0, lnf_b = 0, head_t = 0;
  ad::NodeId head = 0;  // untransposed leaf, for single-position scoring
  std::uint32_t first_layer = 0;
  /// Leaf ids in TransformerLM::parameters() order (trainable full-model tapes).
  std::vector<ad::NodeId> leaf_ids;
};

LmNodeParams lm_params_on_tape(ad::Tape& tape, const TransformerLM& model, bool trainable,
                               std::uint32_t from_layer = 0);

/// Replaces the residual-stream value at (layer, pos) before the next block
/// consumes it. Exactly one substitution per forward pass.
struct Hook {
  std::uint32_t layer = 0;
  std::uint32_t pos = 0;
  ad::NodeId replacement = 0;
};

struct LayerIds {
  ad::NodeId h = 0, a = 0, v = 0, inner = 0;
};

struct ForwardIds {
  ad::NodeId embeddings = 0;
  std::vector<LayerIds> layers;
  ad::NodeId logits = 0;
  bool has_logits = false;
};

/// Full forward; `stop_after_layer` truncates after that block (no logits),
/// which is enough when only the stream at an early layer is needed.
ForwardIds lm_forward(ad::Tape& tape, const LmNodeParams& params, const LmConfig& cfg,
                      std::span<const std::uint32_t> tokens, const Hook* hook = nullptr,
                      std::uint32_t stop_after_layer = UINT32_MAX);

/// Continues from a stream value after block `from_layer`: runs the remaining
/// blocks plus the output head. `params` must cover layers > from_layer.
ad::NodeId lm_forward_from(ad::Tape& tape, const LmNodeParams& params, const LmConfig& cfg,
                           ad::NodeId h, std::uint32_t from_layer);
/// Same continuation but scores a single position through the head.
ad::NodeId lm_forward_from_at(ad::Tape& tape, const LmNodeParams& params, const LmConfig& cfg,
                              ad::NodeId h, std::uint32_t from_layer, std::uint32_t position);
/// Logits vector at one position, given the final block's stream.
ad::NodeId lm_logits_at(ad::Tape& tape, const LmNodeParams& params, ad::NodeId h_final,
                        std::uint32_t position);

/// Value snapshot of one traced forward: every h^l, a^l, v^l plus the cached
/// FFN inner activations.
struct ForwardTrace {
  std::vector<std::uint32_t> tokens;
  Tensor embeddings;
  struct Layer {
    Tensor h, a, v, inner;
  };
  std::vector<Layer> layers;
  Tensor logits;

  /// Max over layers/positions of |h - ((h_prev + a) + v)| recomputed in the
  /// same association order; 0 for unhooked runs. `skip_layer/skip_pos`
  /// exclude the substituted cell of a hooked run.
  double max_residual_gap(std::int64_t skip_layer = -1, std::int64_t skip_pos = -1) const;
  /// Max |v - inner * W_out^T| recomputed from the cached inner activations.
  double max_ffn_gap(const TransformerLM& model) const;
};

ForwardTrace snapshot_trace(const ad::Tape& tape, const ForwardIds& ids,
                            std::span<const std::uint32_t> tokens);

/// One traced, gradient-free forward pass.
ForwardTrace run_traced(const TransformerLM& model, std::span<const std::uint32_t> tokens);

/// Reusable frozen-forward engine: parameters go on the tape once, per-prompt
/// nodes are truncated away after every call. Read-only over the model.
class LmScorer {
 public:
  explicit LmScorer(const TransformerLM& model);
  Tensor next_logits(std::span<const std::uint32_t> prompt);
  std::uint32_t argmax(std::span<const std::uint32_t> prompt);
  double prob(std::span<const std::uint32_t> prompt, std::uint32_t token);
  ForwardTrace traced(std::span<const std::uint32_t> prompt,
                      std::uint32_t stop_after_layer = UINT32_MAX);
  const TransformerLM& model() const { return model_; }

 private:
  const TransformerLM& model_;
  ad::Tape tape_;
  LmNodeParams params_;
  std::size_t base_ = 0;
};

/// Subject/relation reads: h_s at the last subject-span token from the
/// subject layer, h_r at the last prompt token from the relation layer.
struct SubjectReps {
  Tensor h_s, h_r;
};
SubjectReps extract_reps(const TransformerLM& model, std::span<const std::uint32_t> prompt,
                         std::uint32_t subject_last);

Tensor next_token_logits(const TransformerLM& model, std::span<const std::uint32_t> prompt);
double recall_prob(const TransformerLM& model, std::span<const std::uint32_t> prompt,
                   std::uint32_t token);
/// Argmax over next-token logits; ties resolve to the lowest token id.
std::uint32_t argmax_next(const TransformerLM& model, std::span<const std::uint32_t> prompt);

struct RecallProbe {
  std::vector<std::uint32_t> prompt;
  std::uint32_t object = 0;
};

struct TrainLmConfig {
  std::uint32_t epochs = 30;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::uint32_t batch = 16;
  std::uint64_t seed = 3;
  double recall_target = 0.97;  // early stop once memorized
};

struct TrainLmReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_recall;
  double final_recall = 0.0;
  std::uint32_t epochs_run = 0;
  std::uint64_t steps = 0;
};

/// Next-token training over tokenized sequences; recall is measured on the
/// probes (argmax after the prompt equals the object).
TrainLmReport train_lm(TransformerLM& model, const std::vector<std::vector<std::uint32_t>>& corpus,
                       const std::vector<RecallProbe>& probes, const TrainLmConfig& cfg);

double triple_recall(const TransformerLM& model, const std::vector<RecallProbe>& probes);

void save_lm_checkpoint(const std::filesystem::path& path, const TransformerLM& model,
                        const std::vector<std::string>& vocab_table, std::uint64_t world_hash,
                        const std::string& config_hash, std::uint64_t train_steps = 0,
                        std::uint32_t train_epochs = 0);
struct LmCheckpoint {
  TransformerLM model;
  std::vector<std::string> vocab_table;
  std::uint64_t world_hash = 0;
  std::string config_hash;
  std::uint64_t train_steps = 0;
  std::uint32_t train_epochs = 0;
};
LmCheckpoint load_lm_checkpoint(const std::filesystem::path& path);

}  // namespace dike
