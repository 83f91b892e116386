#include "dike/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dike/rng.hpp"
#include "dike/serialize.hpp"

namespace dike {

using json = nlohmann::ordered_json;

std::uint32_t Vocab::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const std::uint32_t id = size();
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

std::uint32_t Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) fail(ErrorKind::Data, "unknown token: " + token);
  return it->second;
}

const std::string& Vocab::str(std::uint32_t id) const {
  if (id >= size()) fail(ErrorKind::Data, "token id out of range: " + std::to_string(id));
  return tokens_[id];
}

bool Vocab::contains(const std::string& token) const { return ids_.count(token) != 0; }

std::vector<std::uint32_t> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::uint32_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(const std::vector<std::uint32_t>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::uint32_t i : ids) out.push_back(str(i));
  return out;
}

Vocab Vocab::from_table(std::vector<std::string> table) {
  Vocab v;
  for (auto& t : table) v.add(t);
  if (v.size() != table.size()) fail(ErrorKind::Data, "vocab table has duplicates");
  return v;
}

const char* level_name(Level level) {
  switch (level) {
    case Level::Easy: return "Easy";
    case Level::Middle: return "Middle";
    case Level::Hard: return "Hard";
  }
  return "?";
}

Level level_from_name(const std::string& name) {
  if (name == "Easy") return Level::Easy;
  if (name == "Middle") return Level::Middle;
  if (name == "Hard") return Level::Hard;
  fail(ErrorKind::Data, "unknown level name: " + name);
}

Level level_from_score(double score) {
  if (score < 0.0 || score > 10.0) fail(ErrorKind::Data, "similarity score outside [0,10]");
  if (score <= 3.0) return Level::Easy;
  if (score <= 6.0) return Level::Middle;
  return Level::Hard;
}

double Taxonomy::score(std::uint32_t cat_a, std::uint32_t cat_b) const {
  if (cat_a >= pair_score.size() || cat_b >= pair_score.size())
    fail(ErrorKind::Data, "taxonomy: category out of range");
  return pair_score[cat_a][cat_b];
}

void Taxonomy::validate() const {
  const std::size_t n = categories.size();
  if (pair_score.size() != n) fail(ErrorKind::Config, "taxonomy: score table size mismatch");
  for (std::size_t a = 0; a < n; ++a) {
    if (pair_score[a].size() != n) fail(ErrorKind::Config, "taxonomy: score table not square");
    for (std::size_t b = 0; b < n; ++b) {
      if (pair_score[a][b] != pair_score[b][a])
        fail(ErrorKind::Config, "taxonomy: asymmetric score for pair (" + categories[a] + ", " +
                                    categories[b] + ")");
      if (pair_score[a][b] < 0.0 || pair_score[a][b] > 10.0)
        fail(ErrorKind::Config, "taxonomy: score outside [0,10]");
      if (a != b && pair_score[a][b] > pair_score[a][a])
        fail(ErrorKind::Config, "taxonomy: cross-category score exceeds self score for (" +
                                    categories[a] + ", " + categories[b] + ")");
    }
  }
}

void WorldConfig::validate() const {
  if (n_subjects == 0 || n_relations == 0 || n_objects_per_relation == 0)
    fail(ErrorKind::Config, "worldgen: counts must be >= 1");
  if (n_categories < 3) fail(ErrorKind::Config, "worldgen: need at least 3 taxonomy categories");
  if (n_relations < n_categories)
    fail(ErrorKind::Config, "worldgen: fewer relations than categories");
  if (n_relations < min_triples_per_subject)
    fail(ErrorKind::Config,
         "worldgen: n_relations " + std::to_string(n_relations) +
             " cannot satisfy the per-subject minimum of " +
             std::to_string(min_triples_per_subject) + " distinct relations");
  if (n_objects_per_relation < 2)
    fail(ErrorKind::Config, "worldgen: object pools need >= 2 entries to draw o* != o");
}

namespace {

const std::vector<std::string> kRelationNames = {
    "capital", "largest_city", "currency",      // geography
    "leader",  "founder",      "spokesperson",  // people
    "anthem",  "festival",     "language",      // culture
    "team",    "stadium",      "mascot",        // sports
};

const std::vector<std::string> kCategoryNames = {"geography", "people", "culture", "sports"};

// Hand-fixed category-pair similarities on the 0-10 scale; diagonal pairs are
// "very similar" (same category), crosses span the easy and middle bands.
const std::vector<std::vector<double>> kCategoryScores = {
    {9, 5, 2, 1},
    {5, 9, 5, 4},
    {2, 5, 9, 2},
    {1, 4, 2, 9},
};

}  // namespace

World::Prompt World::prompt(const Triple& t, std::uint32_t template_idx) const {
  const Relation& rel = relations.at(t.relation);
  if (template_idx >= rel.templates.size())
    fail(ErrorKind::Config, "relation " + rel.name + " has no template " +
                                std::to_string(template_idx));
  const PromptTemplate& tpl = rel.templates[template_idx];
  const Subject& subj = subjects.at(t.subject);
  Prompt p;
  for (const auto& tok : tpl.pre) p.tokens.push_back(vocab.id(tok));
  p.tokens.insert(p.tokens.end(), subj.tokens.begin(), subj.tokens.end());
  p.subject_last = static_cast<std::uint32_t>(p.tokens.size() - 1);
  for (const auto& tok : tpl.post) p.tokens.push_back(vocab.id(tok));
  return p;
}

World::Prompt World::prompt_with_prefix(const Triple& t, std::uint32_t template_idx,
                                        std::uint32_t prefix_idx) const {
  Prompt base = prompt(t, template_idx);
  if (prefix_idx >= prefix_pool.size())
    fail(ErrorKind::Config, "prefix index out of range");
  Prompt p;
  for (const auto& tok : prefix_pool[prefix_idx]) p.tokens.push_back(vocab.id(tok));
  p.subject_last = base.subject_last + static_cast<std::uint32_t>(p.tokens.size());
  p.tokens.insert(p.tokens.end(), base.tokens.begin(), base.tokens.end());
  return p;
}

const std::string& World::subject_name(std::uint32_t subject) const {
  return subjects.at(subject).name;
}

std::uint32_t World::subject_by_name(const std::string& name) const {
  for (std::size_t i = 0; i < subjects.size(); ++i)
    if (subjects[i].name == name) return static_cast<std::uint32_t>(i);
  fail(ErrorKind::Data, "unknown subject name: " + name);
}

std::vector<const Triple*> World::triples_of(std::uint32_t subject) const {
  std::vector<const Triple*> out;
  for (const Triple& t : triples)
    if (t.subject == subject) out.push_back(&t);
  return out;
}

const Triple* World::find_triple(std::uint32_t subject, std::uint32_t relation) const {
  for (const Triple& t : triples)
    if (t.subject == subject && t.relation == relation) return &t;
  return nullptr;
}

std::uint64_t World::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& tok : vocab.table()) h = fnv1a(tok.data(), tok.size(), h);
  for (const Subject& s : subjects)
    for (std::uint32_t tok : s.tokens) h = fnv1a(&tok, sizeof(tok), h);
  for (const Triple& t : triples) {
    h = fnv1a(&t.subject, sizeof(t.subject), h);
    h = fnv1a(&t.relation, sizeof(t.relation), h);
    h = fnv1a(&t.object, sizeof(t.object), h);
  }
  h = fnv1a(&cfg.seed, sizeof(cfg.seed), h);
  return h;
}

std::uint32_t World::sample_new_object(const Triple& t, std::uint64_t seed) const {
  const Relation& rel = relations.at(t.relation);
  Rng rng(Rng::derive(seed, (static_cast<std::uint64_t>(t.subject) << 20) ^ t.relation));
  std::size_t current = rel.objects.size();
  for (std::size_t i = 0; i < rel.objects.size(); ++i)
    if (rel.objects[i] == t.object) current = i;
  if (current == rel.objects.size()) fail(ErrorKind::Data, "triple object not in relation pool");
  std::size_t pick = rng.below(rel.objects.size() - 1);
  if (pick >= current) ++pick;
  return rel.objects[pick];
}

World gen_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.cfg = cfg;

  for (const char* tok : {"the", "of", "is", "equals", "was", "people", "say"}) w.vocab.add(tok);
  w.prefix_pool = {{"meanwhile"}, {"reportedly"}, {"according", "to", "records"}, {"naturally"}};
  for (const auto& prefix : w.prefix_pool)
    for (const auto& tok : prefix) w.vocab.add(tok);

  w.taxonomy.categories.assign(kCategoryNames.begin(),
                               kCategoryNames.begin() + std::min<std::size_t>(4, cfg.n_categories));
  for (std::uint32_t c = 4; c < cfg.n_categories; ++c)
    w.taxonomy.categories.push_back("category" + std::to_string(c));
  w.taxonomy.pair_score.assign(cfg.n_categories, std::vector<double>(cfg.n_categories, 0.0));
  for (std::uint32_t a = 0; a < cfg.n_categories; ++a)
    for (std::uint32_t b = 0; b < cfg.n_categories; ++b) {
      if (a < 4 && b < 4 && cfg.n_categories >= 4) {
        w.taxonomy.pair_score[a][b] = kCategoryScores[a][b];
      } else {
        w.taxonomy.pair_score[a][b] = a == b ? 9.0 : 1.0 + double((a + b) % 5);
      }
    }
  w.taxonomy.validate();

  for (std::uint32_t r = 0; r < cfg.n_relations; ++r) {
    Relation rel;
    rel.name = kRelationNames[r % kRelationNames.size()];
    if (r >= kRelationNames.size()) rel.name += "_" + std::to_string(r / kRelationNames.size());
    rel.category = r % cfg.n_categories;
    w.vocab.add(rel.name);
    // Every surface ends on the subject, so the object is produced at the
    // subject's last token. With a trailing filler the toy model answers from
    // the filler position by re-reading raw embeddings, and the subject
    // stream (the thing the editors rewrite) stops mattering causally.
    rel.templates = {
        {{"the", rel.name, "of"}, {}},
        {{rel.name, "of"}, {}},
        {{"people", "say", "the", rel.name, "of"}, {}},
    };
    w.relations.push_back(std::move(rel));
  }

  {
    // Component pools shared by both subject pools; identities are distinct
    // component tuples.
    const std::uint32_t total = cfg.n_subjects + cfg.n_train_subjects;
    std::uint32_t pool = 4;
    while (std::pow(double(pool), double(cfg.subject_token_count)) < 2.0 * total) ++pool;
    std::vector<std::vector<std::uint32_t>> components(cfg.subject_token_count);
    for (std::uint32_t pos = 0; pos < cfg.subject_token_count; ++pos)
      for (std::uint32_t i = 0; i < pool; ++i) {
        char buf[24];
        if (cfg.subject_token_count == 1)
          std::snprintf(buf, sizeof(buf), "S%03u", i);
        else
          std::snprintf(buf, sizeof(buf), "%c%02u", 'A' + static_cast<char>(pos), i);
        components[pos].push_back(w.vocab.add(buf));
      }
    Rng srng(Rng::derive(cfg.seed, 0x5B1EC7));
    std::set<std::vector<std::uint32_t>> used;
    auto draw_subject = [&]() {
      for (;;) {
        std::vector<std::uint32_t> toks(cfg.subject_token_count);
        for (std::uint32_t pos = 0; pos < cfg.subject_token_count; ++pos)
          toks[pos] = components[pos][srng.below(pool)];
        if (!used.insert(toks).second) continue;
        Subject subj;
        subj.tokens = toks;
        for (std::size_t i = 0; i < toks.size(); ++i) {
          if (i) subj.name += ' ';
          subj.name += w.vocab.str(toks[i]);
        }
        w.subjects.push_back(std::move(subj));
        return static_cast<std::uint32_t>(w.subjects.size() - 1);
      }
    };
    for (std::uint32_t i = 0; i < cfg.n_subjects; ++i) w.eval_subjects.push_back(draw_subject());
    for (std::uint32_t i = 0; i < cfg.n_train_subjects; ++i)
      w.train_subjects.push_back(draw_subject());
  }

  for (std::uint32_t r = 0; r < cfg.n_relations; ++r) {
    for (std::uint32_t o = 0; o < cfg.n_objects_per_relation; ++o) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "%s_o%02u", w.relations[r].name.c_str(), o);
      w.relations[r].objects.push_back(w.vocab.add(buf));
    }
  }

  Rng rng(cfg.seed);
  auto emit_subject = [&](std::uint32_t subject) {
    const std::uint32_t spread = cfg.n_relations - cfg.min_triples_per_subject + 1;
    const std::uint32_t count =
        cfg.min_triples_per_subject + static_cast<std::uint32_t>(rng.below(spread));
    std::vector<std::uint32_t> rel_ids(cfg.n_relations);
    for (std::uint32_t r = 0; r < cfg.n_relations; ++r) rel_ids[r] = r;
    rng.shuffle(rel_ids);
    rel_ids.resize(count);
    std::sort(rel_ids.begin(), rel_ids.end());
    for (std::uint32_t r : rel_ids) {
      Triple t;
      t.subject = subject;
      t.relation = r;
      t.object = w.relations[r].objects[rng.below(cfg.n_objects_per_relation)];
      w.triples.push_back(t);
    }
  };
  for (std::uint32_t s : w.eval_subjects) emit_subject(s);
  for (std::uint32_t s : w.train_subjects) emit_subject(s);
  return w;
}

namespace {

bool base_recalls(LmScorer& scorer, const World& world, const Triple& t) {
  const World::Prompt p = world.prompt(t);
  return scorer.argmax(p.tokens) == t.object;
}

}  // namespace

std::vector<FineKedRecord> build_fineked(const World& world, const TransformerLM& base,
                                         std::uint64_t seed, std::vector<std::string>* skipped) {
  std::vector<FineKedRecord> records;
  LmScorer scorer(base);
  std::uint32_t next_id = 0;
  for (std::uint32_t subject : world.eval_subjects) {
    Rng rng(Rng::derive(seed, subject));
    const auto triples = world.triples_of(subject);
    const Triple edit = *triples[rng.below(triples.size())];

    std::vector<const Triple*> candidates;
    for (const Triple* t : triples)
      if (t->relation != edit.relation && base_recalls(scorer, world, *t)) candidates.push_back(t);
    if (candidates.empty()) {
      if (skipped)
        skipped->push_back("subject " + world.subject_name(subject) +
                           ": no recallable neighborhood triple");
      continue;
    }
    FineKedRecord rec;
    rec.id = next_id++;
    rec.edit.base = edit;
    rec.edit.new_object = world.sample_new_object(edit, seed);
    rec.neighbor = *candidates[rng.below(candidates.size())];
    rec.similarity = world.taxonomy.score(world.relations[edit.relation].category,
                                          world.relations[rec.neighbor.relation].category);
    rec.level = level_from_score(rec.similarity);
    records.push_back(rec);
  }
  return records;
}

std::vector<CounterfactRecord> build_counterfact_style(const World& world, std::uint64_t seed,
                                                       std::vector<std::string>* skipped) {
  for (const Relation& rel : world.relations)
    if (rel.templates.size() < 3)
      fail(ErrorKind::Config, "relation " + rel.name + " lacks a paraphrase template pool");

  std::vector<CounterfactRecord> records;
  std::uint32_t next_id = 0;
  for (std::uint32_t subject : world.eval_subjects) {
    Rng rng(Rng::derive(seed, subject) ^ 0x5bd1e995u);
    auto triples = world.triples_of(subject);
    std::vector<std::size_t> order(triples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    bool emitted = false;
    for (std::size_t idx : order) {
      const Triple edit = *triples[idx];
      std::vector<Triple> neighbors;
      for (const Triple& t : world.triples)
        if (t.relation == edit.relation && t.object == edit.object && t.subject != edit.subject)
          neighbors.push_back(t);
      if (neighbors.size() < 2) continue;
      rng.shuffle(neighbors);
      if (neighbors.size() > 3) neighbors.resize(3);

      CounterfactRecord rec;
      rec.id = next_id++;
      rec.edit.base = edit;
      rec.edit.new_object = world.sample_new_object(edit, seed);
      rec.paraphrase_templates = {1, 2};
      rec.neighbors = std::move(neighbors);
      records.push_back(std::move(rec));
      emitted = true;
      break;
    }
    if (!emitted && skipped)
      skipped->push_back("subject " + world.subject_name(subject) +
                         ": no relation shares (r, o) with 2+ other subjects");
  }
  return records;
}

std::vector<SubjectBatchRecord> build_subject_batches(const World& world,
                                                      const TransformerLM& base,
                                                      std::uint64_t seed, std::uint32_t max_batch,
                                                      std::vector<std::string>* skipped) {
  std::vector<SubjectBatchRecord> records;
  LmScorer scorer(base);
  std::uint32_t next_id = 0;
  for (std::uint32_t subject : world.eval_subjects) {
    Rng rng(Rng::derive(seed, subject) ^ 0x9e3779b9u);
    const auto triples = world.triples_of(subject);
    std::vector<const Triple*> recallable;
    for (const Triple* t : triples)
      if (base_recalls(scorer, world, *t)) recallable.push_back(t);
    if (recallable.empty()) {
      if (skipped)
        skipped->push_back("subject " + world.subject_name(subject) +
                           ": no recallable held-out triple");
      continue;
    }
    const Triple heldout = *recallable[rng.below(recallable.size())];

    std::vector<const Triple*> pool;
    for (const Triple* t : triples)
      if (t->relation != heldout.relation) pool.push_back(t);
    if (pool.size() < max_batch) {
      if (skipped)
        skipped->push_back("subject " + world.subject_name(subject) + ": only " +
                           std::to_string(pool.size()) + " candidate edits");
      continue;
    }
    rng.shuffle(pool);
    SubjectBatchRecord rec;
    rec.id = next_id++;
    rec.subject = subject;
    rec.heldout = heldout;
    for (std::uint32_t i = 0; i < max_batch; ++i) {
      EditRequest e;
      e.base = *pool[i];
      e.new_object = world.sample_new_object(e.base, seed);
      rec.edits.push_back(e);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<std::vector<std::uint32_t>> lm_corpus(const World& world, double prefix_fraction,
                                                  std::uint64_t seed) {
  std::vector<std::vector<std::uint32_t>> corpus;
  Rng rng(seed);
  std::set<std::uint32_t> eval_pool(world.eval_subjects.begin(), world.eval_subjects.end());
  for (const Triple& t : world.triples) {
    // The long paraphrase template is trained for the evaluation pool only;
    // every subject sees the canonical and subject-final surfaces.
    const std::uint32_t n_templates =
        eval_pool.count(t.subject)
            ? static_cast<std::uint32_t>(world.relations[t.relation].templates.size())
            : 2u;
    for (std::uint32_t tpl = 0; tpl < n_templates; ++tpl) {
      World::Prompt p = world.prompt(t, tpl);
      p.tokens.push_back(t.object);
      corpus.push_back(std::move(p.tokens));
    }
    if (rng.uniform() < prefix_fraction) {
      const std::uint32_t prefix = static_cast<std::uint32_t>(rng.below(world.prefix_pool.size()));
      World::Prompt p = world.prompt_with_prefix(t, 0, prefix);
      p.tokens.push_back(t.object);
      corpus.push_back(std::move(p.tokens));
    }
  }
  return corpus;
}

std::vector<RecallProbe> recall_probes(const World& world) {
  std::vector<RecallProbe> probes;
  probes.reserve(world.triples.size());
  for (const Triple& t : world.triples) {
    RecallProbe probe;
    probe.prompt = world.prompt(t).tokens;
    probe.object = t.object;
    probes.push_back(std::move(probe));
  }
  return probes;
}

namespace {

std::string prompt_text(const World& world, const Triple& t, std::uint32_t tpl = 0) {
  const World::Prompt p = world.prompt(t, tpl);
  std::string text;
  for (std::size_t i = 0; i < p.tokens.size(); ++i) {
    if (i) text += ' ';
    text += world.vocab.str(p.tokens[i]);
  }
  return text;
}

std::uint32_t relation_index(const World& world, const std::string& name) {
  for (std::size_t r = 0; r < world.relations.size(); ++r)
    if (world.relations[r].name == name) return static_cast<std::uint32_t>(r);
  fail(ErrorKind::Data, "unknown relation name: " + name);
}

json triple_json(const World& world, const Triple& t) {
  return json{{"subject", world.subject_name(t.subject)},
              {"relation", world.relations[t.relation].name},
              {"object", world.vocab.str(t.object)}};
}

Triple triple_from_json(const World& world, const json& j) {
  Triple t;
  t.subject = world.subject_by_name(j.at("subject").get<std::string>());
  t.relation = relation_index(world, j.at("relation").get<std::string>());
  t.object = world.vocab.id(j.at("object").get<std::string>());
  return t;
}

void check_schema(const json& j, const std::filesystem::path& path) {
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
    fail(ErrorKind::Data, "unsupported schema_version in " + path.string());
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open dataset: " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      fail(ErrorKind::Data, "bad JSON line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<json>& lines) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  for (const json& j : lines) os << j.dump() << '\n';
  if (!os) fail(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace

void write_fineked_jsonl(const std::filesystem::path& path, const World& world,
                         const std::vector<FineKedRecord>& records) {
  std::vector<json> lines;
  for (const auto& rec : records) {
    json j;
    j["schema_version"] = 1;
    j["id"] = rec.id;
    j["edit"] = triple_json(world, rec.edit.base);
    j["edit"]["new_object"] = world.vocab.str(rec.edit.new_object);
    j["edit"]["prompt"] = prompt_text(world, rec.edit.base);
    j["neighbor"] = triple_json(world, rec.neighbor);
    j["neighbor"]["prompt"] = prompt_text(world, rec.neighbor);
    j["level"] = level_name(rec.level);
    j["similarity"] = rec.similarity;
    lines.push_back(std::move(j));
  }
  write_lines(path, lines);
}

std::vector<FineKedRecord> read_fineked_jsonl(const std::filesystem::path& path,
                                              const World& world) {
  std::vector<FineKedRecord> records;
  for (const json& j : read_jsonl(path)) {
    check_schema(j, path);
    FineKedRecord rec;
    rec.id = j.at("id").get<std::uint32_t>();
    rec.edit.base = triple_from_json(world, j.at("edit"));
    rec.edit.new_object = world.vocab.id(j.at("edit").at("new_object").get<std::string>());
    rec.neighbor = triple_from_json(world, j.at("neighbor"));
    rec.level = level_from_name(j.at("level").get<std::string>());
    rec.similarity = j.at("similarity").get<double>();
    records.push_back(rec);
  }
  return records;
}

void write_counterfact_jsonl(const std::filesystem::path& path, const World& world,
                             const std::vector<CounterfactRecord>& records) {
  std::vector<json> lines;
  for (const auto& rec : records) {
    json j;
    j["schema_version"] = 1;
    j["id"] = rec.id;
    j["edit"] = triple_json(world, rec.edit.base);
    j["edit"]["new_object"] = world.vocab.str(rec.edit.new_object);
    j["edit"]["prompt"] = prompt_text(world, rec.edit.base);
    j["paraphrase_templates"] = rec.paraphrase_templates;
    json paras = json::array();
    for (std::uint32_t tpl : rec.paraphrase_templates)
      paras.push_back(prompt_text(world, rec.edit.base, tpl));
    j["paraphrase_prompts"] = paras;
    json neighbors = json::array();
    for (const Triple& t : rec.neighbors) {
      json n = triple_json(world, t);
      n["prompt"] = prompt_text(world, t);
      neighbors.push_back(n);
    }
    j["neighbors"] = neighbors;
    lines.push_back(std::move(j));
  }
  write_lines(path, lines);
}

std::vector<CounterfactRecord> read_counterfact_jsonl(const std::filesystem::path& path,
                                                      const World& world) {
  std::vector<CounterfactRecord> records;
  for (const json& j : read_jsonl(path)) {
    check_schema(j, path);
    CounterfactRecord rec;
    rec.id = j.at("id").get<std::uint32_t>();
    rec.edit.base = triple_from_json(world, j.at("edit"));
    rec.edit.new_object = world.vocab.id(j.at("edit").at("new_object").get<std::string>());
    rec.paraphrase_templates = j.at("paraphrase_templates").get<std::vector<std::uint32_t>>();
    for (const json& n : j.at("neighbors")) rec.neighbors.push_back(triple_from_json(world, n));
    records.push_back(std::move(rec));
  }
  return records;
}

void write_batches_jsonl(const std::filesystem::path& path, const World& world,
                         const std::vector<SubjectBatchRecord>& records) {
  std::vector<json> lines;
  for (const auto& rec : records) {
    json j;
    j["schema_version"] = 1;
    j["id"] = rec.id;
    j["subject"] = world.subject_name(rec.subject);
    json edits = json::array();
    for (const EditRequest& e : rec.edits) {
      json ej = triple_json(world, e.base);
      ej["new_object"] = world.vocab.str(e.new_object);
      edits.push_back(ej);
    }
    j["edits"] = edits;
    j["heldout"] = triple_json(world, rec.heldout);
    lines.push_back(std::move(j));
  }
  write_lines(path, lines);
}

std::vector<SubjectBatchRecord> read_batches_jsonl(const std::filesystem::path& path,
                                                   const World& world) {
  std::vector<SubjectBatchRecord> records;
  for (const json& j : read_jsonl(path)) {
    check_schema(j, path);
    SubjectBatchRecord rec;
    rec.id = j.at("id").get<std::uint32_t>();
    rec.subject = world.subject_by_name(j.at("subject").get<std::string>());
    for (const json& ej : j.at("edits")) {
      EditRequest e;
      e.base = triple_from_json(world, ej);
      e.new_object = world.vocab.id(ej.at("new_object").get<std::string>());
      rec.edits.push_back(e);
    }
    rec.heldout = triple_from_json(world, j.at("heldout"));
    records.push_back(std::move(rec));
  }
  return records;
}

void write_taxonomy_file(const std::filesystem::path& path, const World& world) {
  json j;
  j["schema_version"] = 1;
  json rels;
  for (const Relation& rel : world.relations)
    rels[rel.name] = world.taxonomy.categories[rel.category];
  j["relation_categories"] = rels;
  j["categories"] = world.taxonomy.categories;
  j["category_pair_scores"] = world.taxonomy.pair_score;
  j["level_bands"] = {{"Easy", {0, 3}}, {"Middle", {4, 6}}, {"Hard", {7, 10}}};
  write_text_file(path, j.dump(2) + "\n");
}

void write_world_json(const std::filesystem::path& path, const World& world) {
  json j;
  j["schema_version"] = 1;
  j["seed"] = world.cfg.seed;
  j["config"] = {{"n_subjects", world.cfg.n_subjects},
                 {"n_train_subjects", world.cfg.n_train_subjects},
                 {"n_relations", world.cfg.n_relations},
                 {"n_categories", world.cfg.n_categories},
                 {"n_objects_per_relation", world.cfg.n_objects_per_relation},
                 {"min_triples_per_subject", world.cfg.min_triples_per_subject}};
  j["hash"] = world.hash();
  j["vocab"] = world.vocab.table();
  json rels = json::array();
  for (const Relation& rel : world.relations) {
    json rj;
    rj["name"] = rel.name;
    rj["category"] = world.taxonomy.categories[rel.category];
    json templates = json::array();
    for (const PromptTemplate& tpl : rel.templates)
      templates.push_back(json{{"pre", tpl.pre}, {"post", tpl.post}});
    rj["templates"] = templates;
    json objs = json::array();
    for (std::uint32_t o : rel.objects) objs.push_back(world.vocab.str(o));
    rj["objects"] = objs;
    rels.push_back(rj);
  }
  j["relations"] = rels;
  json triples = json::array();
  for (const Triple& t : world.triples) triples.push_back(triple_json(world, t));
  j["triples"] = triples;
  json prefixes = json::array();
  for (const auto& p : world.prefix_pool) prefixes.push_back(p);
  j["prefix_pool"] = prefixes;
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace dike
