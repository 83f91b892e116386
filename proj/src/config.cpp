#include "dike/config.hpp"

#include <cstdlib>

#include <json.hpp>

#include "dike/serialize.hpp"

namespace dike {

using json = nlohmann::ordered_json;

namespace {

json config_to_json(const RunConfig& c) {
  json j;
  j["out_dir"] = c.out_dir.string();
  j["world"] = {{"seed", c.world.seed},
                {"subjects", c.world.n_subjects},
                {"train_subjects", c.world.n_train_subjects},
                {"relations", c.world.n_relations},
                {"categories", c.world.n_categories},
                {"objects_per_relation", c.world.n_objects_per_relation},
                {"min_triples_per_subject", c.world.min_triples_per_subject}};
  j["lm"] = {{"layers", c.lm.layers},
             {"dim", c.lm.dim},
             {"ffn_dim", c.lm.ffn_dim},
             {"heads", c.lm.heads},
             {"max_seq", c.lm.max_seq},
             {"subject_layer", c.lm.subject_layer},
             {"relation_layer", c.lm.relation_layer},
             {"init_seed", c.lm_init_seed},
             {"train",
              {{"epochs", c.lm_train.epochs},
               {"lr", c.lm_train.lr},
               {"weight_decay", c.lm_train.weight_decay},
               {"batch", c.lm_train.batch},
               {"seed", c.lm_train.seed},
               {"recall_target", c.lm_train.recall_target},
               {"prefix_fraction", c.lm_prefix_fraction}}}};
  j["krd"] = {{"tau", c.krd.tau},
              {"alpha", c.krd.alpha},
              {"beta", c.krd.beta},
              {"lr", c.krd.lr},
              {"weight_decay", c.krd.weight_decay},
              {"epochs", c.krd.epochs},
              {"batch", c.krd.batch},
              {"irrelevant_per_sample", c.krd.irrelevant_per_sample},
              {"samples", c.krd.samples},
              {"seed", c.krd.seed},
              {"squared_recon", c.krd.squared_recon},
              {"init_seed", c.krd_init_seed},
              {"heldout", c.krd_heldout}};
  j["edit"] = {{"n_prefixes", c.edit.n_prefixes},
               {"cov_lambda", c.edit.cov_lambda},
               {"cov_ridge", c.edit.cov_ridge},
               {"delta_lr", c.edit.delta_lr},
               {"delta_max_steps", c.edit.delta_max_steps},
               {"delta_stop_loss", c.edit.delta_stop_loss},
               {"n_constraints", c.edit.n_constraints},
               {"seed", c.edit.seed},
               {"batch_order", c.batch_order}};
  j["eval"] = {{"seeds", c.eval.seeds},
               {"batch_sizes", c.eval.batch_sizes},
               {"sweep_subjects", c.eval.sweep_subjects},
               {"data_seed", c.eval.data_seed}};
  return j;
}

void reject_unknown_keys(const json& provided, const json& schema, const std::string& where) {
  for (const auto& [key, value] : provided.items()) {
    if (!schema.contains(key))
      fail(ErrorKind::Config, "unknown config key: " + where + key);
    if (value.is_object() && schema[key].is_object())
      reject_unknown_keys(value, schema[key], where + key + ".");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Config, "config key " + where + key + " has the wrong type");
  }
}

}  // namespace

std::string RunConfig::to_json_text() const { return config_to_json(*this).dump(2) + "\n"; }

std::string RunConfig::hash() const {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a_str(config_to_json(*this).dump())));
  return buf;
}

std::filesystem::path RunConfig::resolved_out_dir() const {
  if (out_dir.is_absolute()) return out_dir;
  if (const char* root = std::getenv(kOutRootEnv); root && *root)
    return std::filesystem::path(root) / out_dir;
  return out_dir;
}

RunConfig default_config() { return RunConfig{}; }

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  reject_unknown_keys(j, config_to_json(c), "");

  std::string out_dir = c.out_dir.string();
  read_field(j, "out_dir", out_dir, "");
  c.out_dir = out_dir;

  if (j.contains("world")) {
    const json& w = j["world"];
    read_field(w, "seed", c.world.seed, "world.");
    read_field(w, "subjects", c.world.n_subjects, "world.");
    read_field(w, "train_subjects", c.world.n_train_subjects, "world.");
    read_field(w, "relations", c.world.n_relations, "world.");
    read_field(w, "categories", c.world.n_categories, "world.");
    read_field(w, "objects_per_relation", c.world.n_objects_per_relation, "world.");
    read_field(w, "min_triples_per_subject", c.world.min_triples_per_subject, "world.");
  }
  if (j.contains("lm")) {
    const json& l = j["lm"];
    read_field(l, "layers", c.lm.layers, "lm.");
    read_field(l, "dim", c.lm.dim, "lm.");
    read_field(l, "ffn_dim", c.lm.ffn_dim, "lm.");
    read_field(l, "heads", c.lm.heads, "lm.");
    read_field(l, "max_seq", c.lm.max_seq, "lm.");
    read_field(l, "subject_layer", c.lm.subject_layer, "lm.");
    read_field(l, "relation_layer", c.lm.relation_layer, "lm.");
    read_field(l, "init_seed", c.lm_init_seed, "lm.");
    if (l.contains("train")) {
      const json& t = l["train"];
      read_field(t, "epochs", c.lm_train.epochs, "lm.train.");
      read_field(t, "lr", c.lm_train.lr, "lm.train.");
      read_field(t, "weight_decay", c.lm_train.weight_decay, "lm.train.");
      read_field(t, "batch", c.lm_train.batch, "lm.train.");
      read_field(t, "seed", c.lm_train.seed, "lm.train.");
      read_field(t, "recall_target", c.lm_train.recall_target, "lm.train.");
      read_field(t, "prefix_fraction", c.lm_prefix_fraction, "lm.train.");
    }
  }
  if (j.contains("krd")) {
    const json& k = j["krd"];
    read_field(k, "tau", c.krd.tau, "krd.");
    read_field(k, "alpha", c.krd.alpha, "krd.");
    read_field(k, "beta", c.krd.beta, "krd.");
    read_field(k, "lr", c.krd.lr, "krd.");
    read_field(k, "weight_decay", c.krd.weight_decay, "krd.");
    read_field(k, "epochs", c.krd.epochs, "krd.");
    read_field(k, "batch", c.krd.batch, "krd.");
    read_field(k, "irrelevant_per_sample", c.krd.irrelevant_per_sample, "krd.");
    read_field(k, "samples", c.krd.samples, "krd.");
    read_field(k, "seed", c.krd.seed, "krd.");
    read_field(k, "squared_recon", c.krd.squared_recon, "krd.");
    read_field(k, "init_seed", c.krd_init_seed, "krd.");
    read_field(k, "heldout", c.krd_heldout, "krd.");
  }
  if (j.contains("edit")) {
    const json& e = j["edit"];
    read_field(e, "n_prefixes", c.edit.n_prefixes, "edit.");
    read_field(e, "cov_lambda", c.edit.cov_lambda, "edit.");
    read_field(e, "cov_ridge", c.edit.cov_ridge, "edit.");
    read_field(e, "delta_lr", c.edit.delta_lr, "edit.");
    read_field(e, "delta_max_steps", c.edit.delta_max_steps, "edit.");
    read_field(e, "delta_stop_loss", c.edit.delta_stop_loss, "edit.");
    read_field(e, "n_constraints", c.edit.n_constraints, "edit.");
    read_field(e, "seed", c.edit.seed, "edit.");
    read_field(e, "batch_order", c.batch_order, "edit.");
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    read_field(e, "seeds", c.eval.seeds, "eval.");
    read_field(e, "batch_sizes", c.eval.batch_sizes, "eval.");
    read_field(e, "sweep_subjects", c.eval.sweep_subjects, "eval.");
    read_field(e, "data_seed", c.eval.data_seed, "eval.");
  }

  c.world.validate();
  if (c.krd.tau <= 0.0) fail(ErrorKind::Config, "krd.tau must be positive");
  if (c.krd.alpha < 0.0 || c.krd.beta < 0.0)
    fail(ErrorKind::Config, "krd loss weights must be non-negative");
  if (c.batch_order != "dataset" && c.batch_order != "reversed")
    fail(ErrorKind::Config, "edit.batch_order must be 'dataset' or 'reversed'");
  if (c.eval.seeds.empty()) fail(ErrorKind::Config, "eval.seeds must not be empty");
  if (c.edit.delta_stop_loss <= 0.0)
    fail(ErrorKind::Config, "edit.delta_stop_loss must be positive");
  return c;
}

namespace {

void apply_override(json& j, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos)
    fail(ErrorKind::Config, "override must look like key.path=value: " + spec);
  const std::string path = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) fail(ErrorKind::Config, "bad override path: " + path);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::parse_error&) {
        parsed = value;  // plain string
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  for (const std::string& o : overrides) apply_override(j, o);
  return config_from_json_text(j.dump());
}

}  // namespace dike
