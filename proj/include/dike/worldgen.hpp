#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dike/lm.hpp"

namespace dike {

/// Closed vocabulary: one token per entity, relation word, and template
/// filler. Encode/decode is an exact bijection.
class Vocab {
 public:
  std::uint32_t add(const std::string& token);
  std::uint32_t id(const std::string& token) const;
  const std::string& str(std::uint32_t id) const;
  bool contains(const std::string& token) const;
  std::uint32_t size() const { return static_cast<std::uint32_t>(tokens_.size()); }
  const std::vector<std::string>& table() const { return tokens_; }

  std::vector<std::uint32_t> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<std::uint32_t>& ids) const;

  static Vocab from_table(std::vector<std::string> table);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::uint32_t> ids_;
};

enum class Level : std::uint8_t { Easy, Middle, Hard };
const char* level_name(Level level);
Level level_from_name(const std::string& name);
/// The fixed similarity bands: 0-3 easy, 4-6 middle, 7-10 hard.
Level level_from_score(double score);

/// Relation-category similarity table standing in for a judged 0-10 scale.
struct Taxonomy {
  std::vector<std::string> categories;
  std::vector<std::vector<double>> pair_score;  // symmetric, self >= cross

  double score(std::uint32_t cat_a, std::uint32_t cat_b) const;
  void validate() const;
};

struct PromptTemplate {
  std::vector<std::string> pre;   // tokens before the subject slot
  std::vector<std::string> post;  // tokens after it (may be empty)
};

struct Relation {
  std::string name;
  std::uint32_t category = 0;
  std::vector<PromptTemplate> templates;  // [0] canonical, rest paraphrases
  std::vector<std::uint32_t> objects;     // token-id pool O_r
};

/// Entities are token sequences; with two components drawn from shared pools
/// no single embedding resolves the identity, so the model has to consolidate
/// it at the subject's last token — the position every editor operates on.
struct Subject {
  std::string name;                   // components joined with spaces
  std::vector<std::uint32_t> tokens;  // component token ids
};

struct Triple {
  std::uint32_t subject = 0;   // index into World::subjects
  std::uint32_t relation = 0;  // index into World::relations
  std::uint32_t object = 0;    // token id

  bool operator==(const Triple&) const = default;
};

struct WorldConfig {
  std::uint64_t seed = 1;
  std::uint32_t n_subjects = 64;        // evaluation pool
  std::uint32_t n_train_subjects = 64;  // disjoint disentangler-training pool
  std::uint32_t n_relations = 12;
  std::uint32_t n_categories = 4;
  std::uint32_t n_objects_per_relation = 16;
  std::uint32_t min_triples_per_subject = 10;
  std::uint32_t subject_token_count = 1;

  void validate() const;
};

struct World {
  WorldConfig cfg;
  Vocab vocab;
  std::vector<Subject> subjects;  // evaluation pool first, then training pool
  std::vector<std::uint32_t> eval_subjects;
  std::vector<std::uint32_t> train_subjects;
  std::vector<Relation> relations;
  std::vector<Triple> triples;  // both pools, (s, r) unique
  Taxonomy taxonomy;
  std::vector<std::vector<std::string>> prefix_pool;  // neutral key-averaging prefixes

  struct Prompt {
    std::vector<std::uint32_t> tokens;
    std::uint32_t subject_last = 0;  // position of the last subject token
  };
  Prompt prompt(const Triple& t, std::uint32_t template_idx = 0) const;
  Prompt prompt_with_prefix(const Triple& t, std::uint32_t template_idx,
                            std::uint32_t prefix_idx) const;

  const std::string& subject_name(std::uint32_t subject) const;
  std::uint32_t subject_by_name(const std::string& name) const;
  std::vector<const Triple*> triples_of(std::uint32_t subject) const;
  const Triple* find_triple(std::uint32_t subject, std::uint32_t relation) const;
  std::uint64_t hash() const;
  /// Deterministic o* != o draw from the relation pool.
  std::uint32_t sample_new_object(const Triple& t, std::uint64_t seed) const;
};

World gen_world(const WorldConfig& cfg);

struct EditRequest {
  Triple base;
  std::uint32_t new_object = 0;  // o* != o, drawn from O_r
};

struct FineKedRecord {
  std::uint32_t id = 0;
  EditRequest edit;
  Triple neighbor;  // same subject, different relation, base-model recalled
  Level level = Level::Easy;
  double similarity = 0.0;
};

struct CounterfactRecord {
  std::uint32_t id = 0;
  EditRequest edit;
  std::vector<std::uint32_t> paraphrase_templates;  // alternate templates for (s, r)
  std::vector<Triple> neighbors;                    // same (r, o), different subject
};

struct SubjectBatchRecord {
  std::uint32_t id = 0;
  std::uint32_t subject = 0;
  std::vector<EditRequest> edits;  // nested prefixes give sizes 1/2/4/8
  Triple heldout;                  // neighborhood triple, not in any batch
};

/// Per-subject edit + recalled neighborhood pairs with difficulty levels.
/// Subjects with no recallable neighborhood are skipped and logged.
std::vector<FineKedRecord> build_fineked(const World& world, const TransformerLM& base,
                                         std::uint64_t seed,
                                         std::vector<std::string>* skipped = nullptr);

std::vector<CounterfactRecord> build_counterfact_style(const World& world, std::uint64_t seed,
                                                       std::vector<std::string>* skipped = nullptr);

std::vector<SubjectBatchRecord> build_subject_batches(const World& world,
                                                      const TransformerLM& base,
                                                      std::uint64_t seed,
                                                      std::uint32_t max_batch = 8,
                                                      std::vector<std::string>* skipped = nullptr);

/// Rendered training corpus: every triple through every template (prompt
/// plus object token), with a prefixed variant for a fraction of sequences.
std::vector<std::vector<std::uint32_t>> lm_corpus(const World& world, double prefix_fraction,
                                                  std::uint64_t seed);
std::vector<RecallProbe> recall_probes(const World& world);

// JSON-lines dataset files (schema_version on every record) and the
// human-readable taxonomy file.
void write_fineked_jsonl(const std::filesystem::path&, const World&,
                         const std::vector<FineKedRecord>&);
std::vector<FineKedRecord> read_fineked_jsonl(const std::filesystem::path&, const World&);
void write_counterfact_jsonl(const std::filesystem::path&, const World&,
                             const std::vector<CounterfactRecord>&);
std::vector<CounterfactRecord> read_counterfact_jsonl(const std::filesystem::path&, const World&);
void write_batches_jsonl(const std::filesystem::path&, const World&,
                         const std::vector<SubjectBatchRecord>&);
std::vector<SubjectBatchRecord> read_batches_jsonl(const std::filesystem::path&, const World&);
void write_taxonomy_file(const std::filesystem::path&, const World&);
void write_world_json(const std::filesystem::path&, const World&);

}  // namespace dike
