#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dike/edit.hpp"
#include "dike/krd.hpp"
#include "dike/worldgen.hpp"

namespace dike {

/// Mean of 1[argmax after p(s,r) == o*]; ties break to the lowest token id.
double efficacy_argmax(const TransformerLM& model, const World& world,
                       std::span<const EditRequest> edits,
                       std::vector<bool>* per_record = nullptr);

struct LocalityReport {
  std::vector<bool> per_record;
  std::array<double, 3> by_level = {0, 0, 0};        // Easy, Middle, Hard
  std::array<std::size_t, 3> level_counts = {0, 0, 0};
  double overall = 0.0;
};

/// Mean of 1[argmax after p(s,r') == o'], grouped by difficulty level.
LocalityReport relational_locality(const TransformerLM& model, const World& world,
                                   std::span<const FineKedRecord> records);

struct CfScores {
  double efficacy = 0.0;      // P(o*|p) > P(o|p) on edit prompts
  double paraphrase = 0.0;    // same, over paraphrase prompts
  double neighborhood = 0.0;  // P(o*|p) < P(o|p) on neighborhood prompts
};

CfScores prob_comparison_scores(const TransformerLM& model, const World& world,
                                std::span<const CounterfactRecord> records);

/// 3 / sum(1/score); scores must be positive.
double harmonic_mean(double a, double b, double c);

// Single-edit protocol: each record is edited on the base model and scored on
// the resulting snapshot.

struct FinekedRow {
  std::uint32_t id = 0;
  bool efficacy = false;
  bool locality = false;
  Level level = Level::Easy;
  EditReport report;
};

struct FinekedEvalResult {
  std::string editor;
  std::vector<FinekedRow> rows;
  double efficacy = 0.0;
  std::array<double, 3> locality_by_level = {0, 0, 0};
  std::array<std::size_t, 3> level_counts = {0, 0, 0};
  double locality_overall = 0.0;
};

FinekedEvalResult eval_fineked(const TransformerLM& base, const DisentanglerState* krd,
                               const World& world, const PreservationSet& pres,
                               std::span<const FineKedRecord> records, Editor editor,
                               const EditConfig& cfg);

/// Same protocol but the edited weights come from saved snapshots keyed by
/// record id (one rank-one matrix per edit).
FinekedEvalResult eval_fineked_snapshots(const TransformerLM& base, const World& world,
                                         std::span<const FineKedRecord> records,
                                         const std::filesystem::path& snapshot_dir,
                                         const std::string& editor_label);

struct CounterfactRow {
  std::uint32_t id = 0;
  bool efficacy = false;
  std::size_t paraphrase_hits = 0, paraphrase_total = 0;
  std::size_t neighborhood_hits = 0, neighborhood_total = 0;
};

struct CounterfactEvalResult {
  std::string editor;
  std::vector<CounterfactRow> rows;
  CfScores scores;
  double harmonic = 0.0;
};

CounterfactEvalResult eval_counterfact(const TransformerLM& base, const DisentanglerState* krd,
                                       const World& world, const PreservationSet& pres,
                                       std::span<const CounterfactRecord> records, Editor editor,
                                       const EditConfig& cfg);

struct SweepCell {
  std::string editor;
  std::uint32_t batch_size = 0;
  std::uint64_t seed = 0;
  double efficacy = 0.0;
  double locality = 0.0;
  std::size_t n_subjects = 0;
  std::size_t n_edits = 0;
};

struct SweepReport {
  std::vector<SweepCell> cells;
  std::vector<std::string> editors;
  std::vector<std::uint32_t> sizes;
  std::vector<std::uint64_t> seeds;

  double mean_locality(const std::string& editor, std::uint32_t size) const;
  double mean_efficacy(const std::string& editor, std::uint32_t size) const;
  const SweepCell& cell(const std::string& editor, std::uint32_t size, std::uint64_t seed) const;
};

/// Subject-consistent batch sweep. Per seed the edit targets o* are redrawn
/// deterministically, so seeds reproduce the build targets when they match
/// the dataset seed. Edits inside a batch are applied sequentially.
SweepReport run_batch_sweep(const TransformerLM& base, const DisentanglerState* krd,
                            const World& world, const PreservationSet& pres,
                            std::span<const SubjectBatchRecord> batches,
                            const std::vector<Editor>& editors,
                            const std::vector<std::uint32_t>& sizes,
                            const std::vector<std::uint64_t>& seeds, const EditConfig& cfg,
                            std::uint32_t max_subjects = UINT32_MAX);

/// CSV of disentangled components: two rows per record (related/unrelated),
/// printed with round-trip precision.
void export_disentangled_reps(const DisentanglerState& krd, const TransformerLM& model,
                              const World& world, std::span<const KrdSample> records,
                              const std::filesystem::path& path);

struct ExportedReps {
  std::vector<std::uint32_t> ids;
  std::vector<Tensor> related, unrelated;
  double mean_cosine = 0.0;
};
ExportedReps read_disentangled_reps(const std::filesystem::path& path);

// Report files. Markdown tables carry the same aggregates the CSVs imply.
void write_fineked_csv(const std::filesystem::path&, const FinekedEvalResult&);
void write_fineked_markdown(const std::filesystem::path&,
                            std::span<const FinekedEvalResult> results,
                            const std::string& config_hash);
void write_counterfact_csv(const std::filesystem::path&, const CounterfactEvalResult&);
void write_counterfact_markdown(const std::filesystem::path&,
                                std::span<const CounterfactEvalResult> results,
                                const std::string& config_hash);
void write_sweep_csv(const std::filesystem::path&, const SweepReport&);
void write_sweep_markdown(const std::filesystem::path&, const SweepReport&,
                          const std::string& config_hash);

}  // namespace dike
