#include "dike/lm.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "dike/optim.hpp"
#include "dike/rng.hpp"
#include "dike/serialize.hpp"

namespace dike {

using json = nlohmann::ordered_json;

void LmConfig::validate() const {
  if (dim == 0 || layers == 0 || heads == 0 || ffn_dim == 0)
    fail(ErrorKind::Config, "lm: extents must be positive");
  if (dim % heads != 0) fail(ErrorKind::Config, "lm: dim must be divisible by heads");
  if (subject_layer >= layers || relation_layer >= layers)
    fail(ErrorKind::Config, "lm: subject/relation layer out of range");
  if (vocab == 0) fail(ErrorKind::Config, "lm: vocabulary is empty");
}

namespace {

Tensor random_normal(Rng& rng, std::vector<std::size_t> shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

Tensor xavier(Rng& rng, std::size_t fan_out, std::size_t fan_in) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return random_normal(rng, {fan_out, fan_in}, stddev);
}

}  // namespace

TransformerLM TransformerLM::init(const LmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TransformerLM m;
  m.cfg = cfg;
  m.init_seed = seed;
  Rng rng(seed);
  m.tok_emb = random_normal(rng, {cfg.vocab, cfg.dim}, 0.05);
  m.pos_emb = random_normal(rng, {cfg.max_seq, cfg.dim}, 0.05);
  m.layers.resize(cfg.layers);
  for (auto& layer : m.layers) {
    layer.ln1_g = Tensor::full({cfg.dim}, 1.0);
    layer.ln1_b = Tensor::zeros({cfg.dim});
    layer.wq = xavier(rng, cfg.dim, cfg.dim);
    layer.wk = xavier(rng, cfg.dim, cfg.dim);
    layer.wv = xavier(rng, cfg.dim, cfg.dim);
    layer.wo = xavier(rng, cfg.dim, cfg.dim);
    layer.ln2_g = Tensor::full({cfg.dim}, 1.0);
    layer.ln2_b = Tensor::zeros({cfg.dim});
    layer.w_in = xavier(rng, cfg.ffn_dim, cfg.dim);
    layer.w_out = xavier(rng, cfg.dim, cfg.ffn_dim);
  }
  m.lnf_g = Tensor::full({cfg.dim}, 1.0);
  m.lnf_b = Tensor::zeros({cfg.dim});
  m.head = xavier(rng, cfg.vocab, cfg.dim);
  return m;
}

std::vector<Tensor*> TransformerLM::parameters() {
  std::vector<Tensor*> out = {&tok_emb, &pos_emb};
  for (auto& l : layers)
    for (Tensor* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w_in,
                      &l.w_out})
      out.push_back(t);
  out.push_back(&lnf_g);
  out.push_back(&lnf_b);
  out.push_back(&head);
  return out;
}

std::vector<const Tensor*> TransformerLM::parameters() const {
  auto mutable_list = const_cast<TransformerLM*>(this)->parameters();
  return {mutable_list.begin(), mutable_list.end()};
}

std::uint64_t TransformerLM::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : parameters()) h = tensor_fingerprint(*t, h);
  return h;
}

LmNodeParams lm_params_on_tape(ad::Tape& tape, const TransformerLM& model, bool trainable,
                               std::uint32_t from_layer) {
  LmNodeParams p;
  auto put = [&](const Tensor& t) {
    const ad::NodeId id = trainable ? tape.param(t) : tape.input(t);
    p.leaf_ids.push_back(id);
    return id;
  };
  p.first_layer = from_layer;
  if (from_layer == 0) {
    p.tok_emb = put(model.tok_emb);
    p.pos_emb = put(model.pos_emb);
  }
  p.layers.resize(model.layers.size());
  for (std::uint32_t l = from_layer; l < model.layers.size(); ++l) {
    const LayerParams& src = model.layers[l];
    auto& dst = p.layers[l];
    dst.ln1_g = put(src.ln1_g);
    dst.ln1_b = put(src.ln1_b);
    dst.wq_t = tape.transpose(put(src.wq));
    dst.wk_t = tape.transpose(put(src.wk));
    dst.wv_t = tape.transpose(put(src.wv));
    dst.wo_t = tape.transpose(put(src.wo));
    dst.ln2_g = put(src.ln2_g);
    dst.ln2_b = put(src.ln2_b);
    dst.w_in_t = tape.transpose(put(src.w_in));
    dst.w_out_t = tape.transpose(put(src.w_out));
  }
  p.lnf_g = put(model.lnf_g);
  p.lnf_b = put(model.lnf_b);
  p.head = put(model.head);
  p.head_t = tape.transpose(p.head);
  return p;
}

namespace {

// One pre-norm decoder block; returns (h, a, v, inner).
LayerIds run_block(ad::Tape& tape, const LmNodeParams::Layer& w, const LmConfig& cfg,
                   ad::NodeId h_prev) {
  const ad::NodeId n1 = tape.layer_norm(h_prev, w.ln1_g, w.ln1_b);
  const ad::NodeId q = tape.matmul(n1, w.wq_t);
  const ad::NodeId k = tape.matmul(n1, w.wk_t);
  const ad::NodeId v_proj = tape.matmul(n1, w.wv_t);
  const ad::NodeId ctx = tape.causal_attention(q, k, v_proj, cfg.heads);
  const ad::NodeId a = tape.matmul(ctx, w.wo_t);
  const ad::NodeId h_mid = tape.add(h_prev, a);
  const ad::NodeId n2 = tape.layer_norm(h_mid, w.ln2_g, w.ln2_b);
  const ad::NodeId inner = tape.gelu(tape.matmul(n2, w.w_in_t));
  const ad::NodeId v = tape.matmul(inner, w.w_out_t);
  const ad::NodeId h = tape.add(h_mid, v);
  return {h, a, v, inner};
}

ad::NodeId head_logits(ad::Tape& tape, const LmNodeParams& params, ad::NodeId h) {
  return tape.matmul(tape.layer_norm(h, params.lnf_g, params.lnf_b), params.head_t);
}

}  // namespace

ForwardIds lm_forward(ad::Tape& tape, const LmNodeParams& params, const LmConfig& cfg,
                      std::span<const std::uint32_t> tokens, const Hook* hook,
                      std::uint32_t stop_after_layer) {
  if (tokens.empty()) fail(ErrorKind::Data, "lm_forward: empty token sequence");
  if (tokens.size() > cfg.max_seq)
    fail(ErrorKind::Data, "lm_forward: sequence exceeds max_seq");
  for (std::uint32_t t : tokens)
    if (t >= cfg.vocab) fail(ErrorKind::Data, "lm_forward: token out of vocabulary");
  if (hook) {
    if (hook->layer >= cfg.layers || hook->pos >= tokens.size())
      fail(ErrorKind::Config, "substitution hook layer/position out of range");
  }
  if (params.first_layer != 0) fail(ErrorKind::Config, "lm_forward: params missing lower layers");
  const std::uint32_t last_block = std::min(cfg.layers - 1, stop_after_layer);

  ForwardIds ids;
  std::vector<std::uint32_t> tok_ids(tokens.begin(), tokens.end());
  std::vector<std::uint32_t> pos_ids(tokens.size());
  for (std::size_t i = 0; i < pos_ids.size(); ++i) pos_ids[i] = static_cast<std::uint32_t>(i);
  ids.embeddings = tape.add(tape.gather_rows(params.tok_emb, tok_ids),
                            tape.gather_rows(params.pos_emb, pos_ids));
  ad::NodeId h = ids.embeddings;
  ids.layers.resize(last_block + 1);
  for (std::uint32_t l = 0; l <= last_block; ++l) {
    LayerIds li = run_block(tape, params.layers[l], cfg, h);
    if (hook && hook->layer == l) li.h = tape.replace_row(li.h, hook->replacement, hook->pos);
    ids.layers[l] = li;
    h = li.h;
  }
  if (stop_after_layer >= cfg.layers) {
    ids.logits = head_logits(tape, params, h);
    ids.has_logits = true;
  }
  return ids;
}

ad::NodeId lm_forward_from(ad::Tape& tape, const LmNodeParams& params, const LmConfig& cfg,
                           ad::NodeId h, std::uint32_t from_layer) {
  if (params.first_layer > from_layer + 1)
    fail(ErrorKind::Config, "lm_forward_from: params missing required layers");
  for (std::uint32_t l = from_layer + 1; l < cfg.layers; ++l)
    h = run_block(tape, params.layers[l], cfg, h).h;
  return head_logits(tape, params, h);
}

ad::NodeId lm_logits_at(ad::Tape& tape, const LmNodeParams& params, ad::NodeId h_final,
                        std::uint32_t position) {
  const ad::NodeId row = tape.pick_row(h_final, position);
  return tape.matvec(params.head, tape.layer_norm(row, params.lnf_g, params.lnf_b));
}

ad::NodeId lm_forward_from_at(ad::Tape& tape, const LmNodeParams& params, const LmConfig& cfg,
                              ad::NodeId h, std::uint32_t from_layer, std::uint32_t position) {
  if (params.first_layer > from_layer + 1)
    fail(ErrorKind::Config, "lm_forward_from_at: params missing required layers");
  for (std::uint32_t l = from_layer + 1; l < cfg.layers; ++l)
    h = run_block(tape, params.layers[l], cfg, h).h;
  return lm_logits_at(tape, params, h, position);
}

ForwardTrace snapshot_trace(const ad::Tape& tape, const ForwardIds& ids,
                            std::span<const std::uint32_t> tokens) {
  ForwardTrace t;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.embeddings = tape.val(ids.embeddings);
  t.layers.reserve(ids.layers.size());
  for (const LayerIds& li : ids.layers)
    t.layers.push_back({tape.val(li.h), tape.val(li.a), tape.val(li.v), tape.val(li.inner)});
  if (ids.has_logits) t.logits = tape.val(ids.logits);
  return t;
}

double ForwardTrace::max_residual_gap(std::int64_t skip_layer, std::int64_t skip_pos) const {
  double worst = 0.0;
  const Tensor* prev = &embeddings;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    for (std::size_t r = 0; r < prev->rows(); ++r) {
      if (static_cast<std::int64_t>(l) == skip_layer && static_cast<std::int64_t>(r) == skip_pos)
        continue;
      for (std::size_t c = 0; c < prev->cols(); ++c) {
        const double expected = (prev->at(r, c) + layer.a.at(r, c)) + layer.v.at(r, c);
        worst = std::max(worst, std::fabs(layer.h.at(r, c) - expected));
      }
    }
    prev = &layer.h;
  }
  return worst;
}

double ForwardTrace::max_ffn_gap(const TransformerLM& model) const {
  double worst = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Tensor recomputed = matmul(layers[l].inner, transpose(model.layers[l].w_out));
    worst = std::max(worst, max_abs_diff(layers[l].v, recomputed));
  }
  return worst;
}

ForwardTrace run_traced(const TransformerLM& model, std::span<const std::uint32_t> tokens) {
  ad::Tape tape;
  const LmNodeParams params = lm_params_on_tape(tape, model, false);
  const ForwardIds ids = lm_forward(tape, params, model.cfg, tokens);
  return snapshot_trace(tape, ids, tokens);
}

LmScorer::LmScorer(const TransformerLM& model) : model_(model) {
  params_ = lm_params_on_tape(tape_, model, false);
  base_ = tape_.node_count();
}

Tensor LmScorer::next_logits(std::span<const std::uint32_t> prompt) {
  const ForwardIds ids = lm_forward(tape_, params_, model_.cfg, prompt);
  const Tensor& logits = tape_.val(ids.logits);
  Tensor last = Tensor::zeros({model_.cfg.vocab});
  for (std::size_t j = 0; j < model_.cfg.vocab; ++j) last[j] = logits.at(prompt.size() - 1, j);
  tape_.truncate(base_);
  return last;
}

std::uint32_t LmScorer::argmax(std::span<const std::uint32_t> prompt) {
  const Tensor logits = next_logits(prompt);
  std::uint32_t best = 0;
  for (std::uint32_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = j;
  return best;
}

double LmScorer::prob(std::span<const std::uint32_t> prompt, std::uint32_t token) {
  const Tensor p = softmax_vec(next_logits(prompt));
  if (token >= p.size()) fail(ErrorKind::Data, "prob: token out of vocabulary");
  return p[token];
}

ForwardTrace LmScorer::traced(std::span<const std::uint32_t> prompt,
                              std::uint32_t stop_after_layer) {
  const ForwardIds ids = lm_forward(tape_, params_, model_.cfg, prompt, nullptr, stop_after_layer);
  ForwardTrace trace = snapshot_trace(tape_, ids, prompt);
  tape_.truncate(base_);
  return trace;
}

SubjectReps extract_reps(const TransformerLM& model, std::span<const std::uint32_t> prompt,
                         std::uint32_t subject_last) {
  if (subject_last >= prompt.size())
    fail(ErrorKind::Data, "extract_reps: subject annotation outside prompt");
  const ForwardTrace trace = run_traced(model, prompt);
  const Tensor& hs_mat = trace.layers[model.cfg.subject_layer].h;
  const Tensor& hr_mat = trace.layers[model.cfg.relation_layer].h;
  SubjectReps reps;
  reps.h_s = Tensor::zeros({model.cfg.dim});
  reps.h_r = Tensor::zeros({model.cfg.dim});
  for (std::size_t j = 0; j < model.cfg.dim; ++j) {
    reps.h_s[j] = hs_mat.at(subject_last, j);
    reps.h_r[j] = hr_mat.at(prompt.size() - 1, j);
  }
  return reps;
}

Tensor next_token_logits(const TransformerLM& model, std::span<const std::uint32_t> prompt) {
  ad::Tape tape;
  const LmNodeParams params = lm_params_on_tape(tape, model, false);
  const ForwardIds ids = lm_forward(tape, params, model.cfg, prompt);
  const Tensor& logits = tape.val(ids.logits);
  Tensor last = Tensor::zeros({model.cfg.vocab});
  for (std::size_t j = 0; j < model.cfg.vocab; ++j) last[j] = logits.at(prompt.size() - 1, j);
  return last;
}

double recall_prob(const TransformerLM& model, std::span<const std::uint32_t> prompt,
                   std::uint32_t token) {
  const Tensor p = softmax_vec(next_token_logits(model, prompt));
  if (token >= p.size()) fail(ErrorKind::Data, "recall_prob: token out of vocabulary");
  return p[token];
}

std::uint32_t argmax_next(const TransformerLM& model, std::span<const std::uint32_t> prompt) {
  const Tensor logits = next_token_logits(model, prompt);
  std::uint32_t best = 0;
  for (std::uint32_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = j;
  return best;
}

double triple_recall(const TransformerLM& model, const std::vector<RecallProbe>& probes) {
  if (probes.empty()) return 0.0;
  LmScorer scorer(model);
  std::size_t hits = 0;
  for (const RecallProbe& probe : probes)
    if (scorer.argmax(probe.prompt) == probe.object) ++hits;
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

TrainLmReport train_lm(TransformerLM& model, const std::vector<std::vector<std::uint32_t>>& corpus,
                       const std::vector<RecallProbe>& probes, const TrainLmConfig& cfg) {
  if (corpus.empty()) fail(ErrorKind::Config, "train_lm: empty corpus");
  TrainLmReport report;
  if (cfg.epochs == 0) {
    report.final_recall = triple_recall(model, probes);
    return report;
  }
  AdamW opt(cfg.lr, cfg.weight_decay);
  std::vector<Tensor*> params = model.parameters();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      ad::Tape tape;
      const LmNodeParams node_params = lm_params_on_tape(tape, model, true);
      ad::NodeId total = 0;
      bool first = true;
      std::size_t n_targets = 0;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& seq = corpus[order[i]];
        if (seq.size() < 2) continue;
        // Sequences are prompt + object; the objective is predicting the
        // object from its prompt.
        std::span<const std::uint32_t> prompt(seq.data(), seq.size() - 1);
        const ForwardIds ids =
            lm_forward(tape, node_params, model.cfg, prompt, nullptr, model.cfg.layers - 1);
        n_targets += 1;
        const ad::NodeId logits = lm_logits_at(
            tape, node_params, ids.layers.back().h, static_cast<std::uint32_t>(prompt.size() - 1));
        const ad::NodeId loss = tape.cross_entropy(logits, seq.back());
        total = first ? loss : tape.add(total, loss);
        first = false;
      }
      if (first) continue;
      const ad::NodeId mean_loss = tape.scale(total, 1.0 / static_cast<double>(n_targets));
      const double loss_val = tape.val(mean_loss).item();
      if (!std::isfinite(loss_val))
        fail(ErrorKind::Divergence,
             "train_lm: non-finite loss at step " + std::to_string(report.steps));
      tape.backward(mean_loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (ad::NodeId leaf : node_params.leaf_ids) grads.push_back(tape.grad(leaf));
      opt.step(params, grads);
      ++report.steps;
      epoch_loss += loss_val * static_cast<double>(n_targets);
      epoch_targets += n_targets;
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(epoch_targets));
    const double recall = triple_recall(model, probes);
    report.epoch_recall.push_back(recall);
    report.epochs_run = epoch + 1;
    if (recall >= cfg.recall_target) break;
  }
  report.final_recall = triple_recall(model, probes);
  return report;
}

void save_lm_checkpoint(const std::filesystem::path& path, const TransformerLM& model,
                        const std::vector<std::string>& vocab_table, std::uint64_t world_hash,
                        const std::string& config_hash, std::uint64_t train_steps,
                        std::uint32_t train_epochs) {
  NamedTensors entries;
  entries.emplace_back("tok_emb", model.tok_emb);
  entries.emplace_back("pos_emb", model.pos_emb);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const LayerParams& lp = model.layers[l];
    entries.emplace_back(p + "ln1_g", lp.ln1_g);
    entries.emplace_back(p + "ln1_b", lp.ln1_b);
    entries.emplace_back(p + "wq", lp.wq);
    entries.emplace_back(p + "wk", lp.wk);
    entries.emplace_back(p + "wv", lp.wv);
    entries.emplace_back(p + "wo", lp.wo);
    entries.emplace_back(p + "ln2_g", lp.ln2_g);
    entries.emplace_back(p + "ln2_b", lp.ln2_b);
    entries.emplace_back(p + "w_in", lp.w_in);
    entries.emplace_back(p + "w_out", lp.w_out);
  }
  entries.emplace_back("lnf_g", model.lnf_g);
  entries.emplace_back("lnf_b", model.lnf_b);
  entries.emplace_back("head", model.head);
  save_bundle(path, entries);

  json sidecar;
  sidecar["schema_version"] = 1;
  sidecar["arch"] = {{"layers", model.cfg.layers},   {"dim", model.cfg.dim},
                     {"ffn_dim", model.cfg.ffn_dim}, {"heads", model.cfg.heads},
                     {"max_seq", model.cfg.max_seq}, {"vocab", model.cfg.vocab}};
  sidecar["subject_layer"] = model.cfg.subject_layer;
  sidecar["relation_layer"] = model.cfg.relation_layer;
  sidecar["init_seed"] = model.init_seed;
  sidecar["world_hash"] = world_hash;
  sidecar["config_hash"] = config_hash;
  sidecar["param_hash"] = model.fingerprint();
  sidecar["train_steps"] = train_steps;
  sidecar["train_epochs"] = train_epochs;
  sidecar["vocab_table"] = vocab_table;
  write_text_file(path.string() + ".json", sidecar.dump(2) + "\n");
}

LmCheckpoint load_lm_checkpoint(const std::filesystem::path& path) {
  const NamedTensors entries = load_bundle(path);
  json sidecar;
  try {
    sidecar = json::parse(read_text_file(path.string() + ".json"));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Io, "lm checkpoint sidecar unreadable: " + std::string(e.what()));
  }

  LmCheckpoint ckpt;
  LmConfig cfg;
  cfg.layers = sidecar["arch"]["layers"].get<std::uint32_t>();
  cfg.dim = sidecar["arch"]["dim"].get<std::uint32_t>();
  cfg.ffn_dim = sidecar["arch"]["ffn_dim"].get<std::uint32_t>();
  cfg.heads = sidecar["arch"]["heads"].get<std::uint32_t>();
  cfg.max_seq = sidecar["arch"]["max_seq"].get<std::uint32_t>();
  cfg.vocab = sidecar["arch"]["vocab"].get<std::uint32_t>();
  cfg.subject_layer = sidecar["subject_layer"].get<std::uint32_t>();
  cfg.relation_layer = sidecar["relation_layer"].get<std::uint32_t>();

  TransformerLM model;
  model.cfg = cfg;
  model.init_seed = sidecar["init_seed"].get<std::uint64_t>();
  model.layers.resize(cfg.layers);
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : entries)
      if (n == name) return t;
    fail(ErrorKind::Io, "lm checkpoint missing tensor: " + name);
  };
  model.tok_emb = find("tok_emb");
  model.pos_emb = find("pos_emb");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams& lp = model.layers[l];
    lp.ln1_g = find(p + "ln1_g");
    lp.ln1_b = find(p + "ln1_b");
    lp.wq = find(p + "wq");
    lp.wk = find(p + "wk");
    lp.wv = find(p + "wv");
    lp.wo = find(p + "wo");
    lp.ln2_g = find(p + "ln2_g");
    lp.ln2_b = find(p + "ln2_b");
    lp.w_in = find(p + "w_in");
    lp.w_out = find(p + "w_out");
  }
  model.lnf_g = find("lnf_g");
  model.lnf_b = find("lnf_b");
  model.head = find("head");
  if (model.fingerprint() != sidecar["param_hash"].get<std::uint64_t>())
    fail(ErrorKind::Io, "lm checkpoint parameter hash mismatch");

  ckpt.model = std::move(model);
  ckpt.vocab_table = sidecar["vocab_table"].get<std::vector<std::string>>();
  ckpt.world_hash = sidecar["world_hash"].get<std::uint64_t>();
  ckpt.config_hash = sidecar["config_hash"].get<std::string>();
  ckpt.train_steps = sidecar.value("train_steps", 0ULL);
  ckpt.train_epochs = sidecar.value("train_epochs", 0U);
  return ckpt;
}

}  // namespace dike
