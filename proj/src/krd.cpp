#include "dike/krd.hpp"

#include <cmath>

#include <json.hpp>

#include "dike/optim.hpp"
#include "dike/rng.hpp"
#include "dike/serialize.hpp"

namespace dike {

using json = nlohmann::ordered_json;

DisentanglerState DisentanglerState::init(std::uint32_t dim, std::uint64_t seed) {
  DisentanglerState s;
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Tensor* w : {&s.w1, &s.w2, &s.w3, &s.w4, &s.w5, &s.w6}) {
    *w = Tensor::zeros({dim, dim});
    for (std::size_t i = 0; i < w->size(); ++i) (*w)[i] = rng.normal(0.0, stddev);
  }
  return s;
}

std::vector<Tensor*> DisentanglerState::parameters() { return {&w1, &w2, &w3, &w4, &w5, &w6}; }

std::uint64_t DisentanglerState::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* w : {&w1, &w2, &w3, &w4, &w5, &w6}) h = tensor_fingerprint(*w, h);
  return h;
}

void DisentanglerState::validate_shape(const TransformerLM& model) const {
  if (w1.rows() != model.cfg.dim)
    fail(ErrorKind::Config, "disentangler width does not match the model");
  if (subject_layer != model.cfg.subject_layer || relation_layer != model.cfg.relation_layer)
    fail(ErrorKind::Config, "disentangler layer assignment does not match the model");
}

void DisentanglerState::validate_compatible(const TransformerLM& model) const {
  validate_shape(model);
  if (lm_hash != 0 && lm_hash != model.fingerprint())
    fail(ErrorKind::Config, "disentangler was trained against a different model (hash mismatch)");
}

DisentangledPair disentangle(const DisentanglerState& state, const Tensor& h_s,
                             const Tensor& h_r) {
  ad::Tape tape;
  const KrdNodes nodes = krd_params_on_tape(tape, state, false);
  const auto [zr, zu] =
      disentangle_nodes(tape, nodes, tape.input(h_s), tape.input(h_r));
  return {tape.val(zr), tape.val(zu)};
}

Tensor recompose(const DisentanglerState& state, const Tensor& z_r, const Tensor& z_u) {
  return add(matvec(state.w5, z_r), matvec(state.w6, z_u));
}

KrdNodes krd_params_on_tape(ad::Tape& tape, const DisentanglerState& state, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.param(t) : tape.input(t); };
  return {put(state.w1), put(state.w2), put(state.w3), put(state.w4), put(state.w5), put(state.w6)};
}

std::pair<ad::NodeId, ad::NodeId> disentangle_nodes(ad::Tape& tape, const KrdNodes& nodes,
                                                    ad::NodeId h_s, ad::NodeId h_r) {
  const ad::NodeId z_r =
      tape.gelu(tape.add(tape.matvec(nodes.w1, h_s), tape.matvec(nodes.w2, h_r)));
  const ad::NodeId z_u =
      tape.gelu(tape.add(tape.matvec(nodes.w3, h_s), tape.matvec(nodes.w4, h_r)));
  return {z_r, z_u};
}

ad::NodeId recompose_nodes(ad::Tape& tape, const KrdNodes& nodes, ad::NodeId z_r, ad::NodeId z_u) {
  return tape.add(tape.matvec(nodes.w5, z_r), tape.matvec(nodes.w6, z_u));
}

ad::NodeId info_nce_node(ad::Tape& tape, ad::NodeId anchor, ad::NodeId positive,
                         const std::vector<ad::NodeId>& negatives, double tau) {
  if (negatives.empty()) fail(ErrorKind::Config, "info_nce: needs at least one negative");
  if (tau <= 0.0) fail(ErrorKind::Config, "info_nce: temperature must be positive");
  const ad::NodeId pos = tape.scale(tape.cosine(anchor, positive), 1.0 / tau);
  std::vector<ad::NodeId> pool = {pos};
  for (ad::NodeId n : negatives)
    pool.push_back(tape.scale(tape.cosine(anchor, n), 1.0 / tau));
  return tape.sub(tape.logsumexp(pool), pos);
}

double info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau) {
  ad::Tape tape;
  std::vector<ad::NodeId> negs;
  negs.reserve(negatives.size());
  for (const Tensor& n : negatives) negs.push_back(tape.input(n));
  return tape.val(info_nce_node(tape, tape.input(anchor), tape.input(positive), negs, tau)).item();
}

double loss_ctr(const DisentanglerState& state, const DisentangledPair& pair, const Tensor& h_s,
                const std::vector<Tensor>& batch_negatives) {
  std::vector<Tensor> neg_r = {pair.unrelated};
  std::vector<Tensor> neg_u = {pair.related};
  for (const Tensor& n : batch_negatives) {
    neg_r.push_back(n);
    neg_u.push_back(n);
  }
  return info_nce(pair.related, h_s, neg_r, state.tau) +
         info_nce(pair.unrelated, h_s, neg_u, state.tau);
}

namespace {

// Substituted continuation: replace the stream at the subject token of the
// already-run prefix, finish the remaining blocks, and score the next token.
ad::NodeId hooked_ce(ad::Tape& tape, const LmNodeParams& lm_nodes, const TransformerLM& model,
                     const ForwardIds& prefix, ad::NodeId replacement, std::uint32_t subject_pos,
                     std::uint32_t last_pos, std::uint32_t target) {
  const std::uint32_t ls = model.cfg.subject_layer;
  const ad::NodeId substituted =
      tape.replace_row(prefix.layers[ls].h, replacement, subject_pos);
  const ad::NodeId logits =
      lm_forward_from_at(tape, lm_nodes, model.cfg, substituted, ls, last_pos);
  return tape.cross_entropy(logits, target);
}

}  // namespace

double loss_con(const DisentanglerState& state, const TransformerLM& model, const World& world,
                const Triple& edit, const std::vector<Triple>& irrelevant) {
  if (irrelevant.empty()) fail(ErrorKind::Config, "loss_con: irrelevant set is empty");
  state.validate_shape(model);
  ad::Tape tape;
  const LmNodeParams lm_nodes = lm_params_on_tape(tape, model, false);
  const KrdNodes krd_nodes = krd_params_on_tape(tape, state, false);

  const World::Prompt p = world.prompt(edit);
  const ForwardIds fwd =
      lm_forward(tape, lm_nodes, model.cfg, p.tokens, nullptr, model.cfg.relation_layer);
  const ad::NodeId h_s =
      tape.pick_row(fwd.layers[model.cfg.subject_layer].h, p.subject_last);
  const ad::NodeId h_r = tape.pick_row(fwd.layers[model.cfg.relation_layer].h,
                                       static_cast<std::uint32_t>(p.tokens.size() - 1));
  const auto [z_r, z_u] = disentangle_nodes(tape, krd_nodes, h_s, h_r);

  ad::NodeId total = hooked_ce(tape, lm_nodes, model, fwd, z_r, p.subject_last,
                               static_cast<std::uint32_t>(p.tokens.size() - 1), edit.object);
  for (const Triple& t : irrelevant) {
    if (t.subject != edit.subject)
      fail(ErrorKind::Config, "loss_con: irrelevant triple has a different subject");
    const World::Prompt q = world.prompt(t);
    const ForwardIds fq =
        lm_forward(tape, lm_nodes, model.cfg, q.tokens, nullptr, model.cfg.subject_layer);
    total = tape.add(total, hooked_ce(tape, lm_nodes, model, fq, z_u, q.subject_last,
                                      static_cast<std::uint32_t>(q.tokens.size() - 1), t.object));
  }
  return tape.val(total).item();
}

double loss_recon(const Tensor& h_s, const Tensor& h_hat, bool squared) {
  if (!h_s.same_shape(h_hat)) fail(ErrorKind::Dimension, "loss_recon: width mismatch");
  const double ss = sum_squares_val(sub(h_s, h_hat));
  return squared ? ss / static_cast<double>(h_s.size()) : std::sqrt(ss);
}

std::vector<KrdSample> krd_training_samples(const World& world, std::uint32_t count,
                                            std::uint64_t seed) {
  if (world.train_subjects.empty()) fail(ErrorKind::Config, "world has no training subjects");
  std::vector<KrdSample> samples;
  samples.reserve(count);
  Rng rng(Rng::derive(seed, 0xA11CE));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t subject =
        world.train_subjects[i % world.train_subjects.size()];
    const auto triples = world.triples_of(subject);
    samples.push_back({*triples[rng.below(triples.size())]});
  }
  return samples;
}

std::vector<KrdSample> krd_heldout_samples(const World& world, std::uint32_t count,
                                           std::uint64_t seed) {
  if (world.eval_subjects.empty()) fail(ErrorKind::Config, "world has no evaluation subjects");
  std::vector<KrdSample> samples;
  samples.reserve(count);
  Rng rng(Rng::derive(seed, 0x4E1D));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t subject = world.eval_subjects[i % world.eval_subjects.size()];
    const auto triples = world.triples_of(subject);
    samples.push_back({*triples[rng.below(triples.size())]});
  }
  return samples;
}

KrdHeldoutStats krd_heldout_stats(const DisentanglerState& state, const TransformerLM& model,
                                  const World& world, const std::vector<KrdSample>& samples) {
  KrdHeldoutStats stats;
  if (samples.empty()) return stats;
  for (const KrdSample& sample : samples) {
    const World::Prompt p = world.prompt(sample.edit);
    const SubjectReps reps = extract_reps(model, p.tokens, p.subject_last);
    const DisentangledPair pair = disentangle(state, reps.h_s, reps.h_r);
    stats.mean_cosine += cosine_val(pair.related, pair.unrelated);
    stats.mean_recon += loss_recon(reps.h_s, recompose(state, pair.related, pair.unrelated));
  }
  stats.mean_cosine /= static_cast<double>(samples.size());
  stats.mean_recon /= static_cast<double>(samples.size());
  return stats;
}

ad::NodeId krd_batch_loss(ad::Tape& tape, const KrdNodes& krd_nodes,
                          const LmNodeParams& lm_nodes, const TransformerLM& model,
                          const World& world, std::span<const KrdInstance> batch,
                          const KrdConfig& cfg, KrdEpochStats* stats) {
  if (batch.empty()) fail(ErrorKind::Config, "krd_batch_loss: empty batch");
  struct Built {
    World::Prompt prompt;
    ForwardIds fwd;
    ad::NodeId h_s, h_r, z_r, z_u;
  };
  std::vector<Built> built;
  built.reserve(batch.size());
  for (const KrdInstance& inst : batch) {
    Built b;
    b.prompt = world.prompt(inst.edit);
    b.fwd = lm_forward(tape, lm_nodes, model.cfg, b.prompt.tokens, nullptr,
                       model.cfg.relation_layer);
    b.h_s = tape.pick_row(b.fwd.layers[model.cfg.subject_layer].h, b.prompt.subject_last);
    b.h_r = tape.pick_row(b.fwd.layers[model.cfg.relation_layer].h,
                          static_cast<std::uint32_t>(b.prompt.tokens.size() - 1));
    std::tie(b.z_r, b.z_u) = disentangle_nodes(tape, krd_nodes, b.h_s, b.h_r);
    built.push_back(b);
  }

  ad::NodeId total = 0;
  bool first = true;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const KrdInstance& inst = batch[i];
    Built& b = built[i];
    // In-batch negatives: the other instances' subject representations.
    std::vector<ad::NodeId> neg_r = {b.z_u};
    std::vector<ad::NodeId> neg_u = {b.z_r};
    for (std::size_t j = 0; j < built.size(); ++j) {
      if (j == i) continue;
      neg_r.push_back(built[j].h_s);
      neg_u.push_back(built[j].h_s);
    }
    const ad::NodeId ctr = tape.add(info_nce_node(tape, b.z_r, b.h_s, neg_r, cfg.tau),
                                    info_nce_node(tape, b.z_u, b.h_s, neg_u, cfg.tau));

    const std::uint32_t last = static_cast<std::uint32_t>(b.prompt.tokens.size() - 1);
    ad::NodeId con = hooked_ce(tape, lm_nodes, model, b.fwd, b.z_r, b.prompt.subject_last, last,
                               inst.edit.object);
    for (const Triple& t : inst.irrelevant) {
      if (t.subject != inst.edit.subject)
        fail(ErrorKind::Config, "krd_batch_loss: irrelevant triple has a different subject");
      const World::Prompt q = world.prompt(t);
      const ForwardIds fq =
          lm_forward(tape, lm_nodes, model.cfg, q.tokens, nullptr, model.cfg.subject_layer);
      con = tape.add(con, hooked_ce(tape, lm_nodes, model, fq, b.z_u, q.subject_last,
                                    static_cast<std::uint32_t>(q.tokens.size() - 1), t.object));
    }

    const ad::NodeId residual =
        tape.sub(b.h_s, recompose_nodes(tape, krd_nodes, b.z_r, b.z_u));
    const ad::NodeId recon =
        cfg.squared_recon
            ? tape.scale(tape.sum_squares(residual), 1.0 / static_cast<double>(model.cfg.dim))
            : tape.sqrt_scalar(tape.sum_squares(residual));

    const ad::NodeId instance_loss =
        tape.add(ctr, tape.add(tape.scale(con, cfg.alpha), tape.scale(recon, cfg.beta)));
    if (stats) {
      stats->ctr += tape.val(ctr).item();
      stats->con += tape.val(con).item();
      stats->recon += tape.val(recon).item();
    }
    total = first ? instance_loss : tape.add(total, instance_loss);
    first = false;
  }
  return tape.scale(total, 1.0 / static_cast<double>(batch.size()));
}

TrainKrdReport train_krd(DisentanglerState& state, const TransformerLM& model, const World& world,
                         const KrdConfig& cfg, const std::vector<KrdSample>& heldout) {
  state.tau = cfg.tau;
  state.alpha = cfg.alpha;
  state.beta = cfg.beta;
  state.subject_layer = model.cfg.subject_layer;
  state.relation_layer = model.cfg.relation_layer;
  state.lm_hash = model.fingerprint();
  state.world_hash = world.hash();

  TrainKrdReport report;
  report.before = krd_heldout_stats(state, model, world, heldout);

  const std::vector<KrdSample> samples = krd_training_samples(world, cfg.samples, cfg.seed);
  AdamW opt(cfg.lr, cfg.weight_decay);
  std::vector<Tensor*> params = state.parameters();
  Rng epoch_rng(Rng::derive(cfg.seed, 0xE90C));

  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    epoch_rng.shuffle(order);
    KrdEpochStats stats;
    std::size_t n_instances = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      std::vector<KrdInstance> batch;
      for (std::size_t i = start; i < stop; ++i) {
        KrdInstance inst;
        inst.edit = samples[order[i]].edit;
        // Resample the irrelevant set every time this instance is visited.
        Rng nrng(Rng::derive(cfg.seed, 0xF00D ^ (order[i] * 2654435761ULL) ^ epoch));
        std::vector<const Triple*> others;
        for (const Triple* t : world.triples_of(inst.edit.subject))
          if (t->relation != inst.edit.relation) others.push_back(t);
        if (others.size() < cfg.irrelevant_per_sample)
          fail(ErrorKind::Config, "krd: subject lacks irrelevant triples");
        for (std::uint32_t k = 0; k < cfg.irrelevant_per_sample; ++k) {
          const std::size_t pick = nrng.below(others.size());
          inst.irrelevant.push_back(*others[pick]);
          others.erase(others.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        batch.push_back(std::move(inst));
      }

      ad::Tape tape;
      const LmNodeParams lm_nodes = lm_params_on_tape(tape, model, false);
      const KrdNodes krd_nodes = krd_params_on_tape(tape, state, true);
      const ad::NodeId loss =
          krd_batch_loss(tape, krd_nodes, lm_nodes, model, world, batch, cfg, &stats);
      const double loss_val = tape.val(loss).item();
      if (!std::isfinite(loss_val))
        fail(ErrorKind::Divergence,
             "train_krd: non-finite loss at step " + std::to_string(report.steps));
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (ad::NodeId id : {krd_nodes.w1, krd_nodes.w2, krd_nodes.w3, krd_nodes.w4, krd_nodes.w5,
                            krd_nodes.w6})
        grads.push_back(tape.grad(id));
      opt.step(params, grads);
      ++report.steps;
      n_instances += batch.size();
    }
    stats.ctr /= static_cast<double>(n_instances);
    stats.con /= static_cast<double>(n_instances);
    stats.recon /= static_cast<double>(n_instances);
    stats.total = stats.ctr + cfg.alpha * stats.con + cfg.beta * stats.recon;
    report.epochs.push_back(stats);
  }

  report.after = krd_heldout_stats(state, model, world, heldout);
  return report;
}

void save_krd_checkpoint(const std::filesystem::path& path, const DisentanglerState& state,
                         const std::string& config_hash) {
  save_bundle(path, {{"w1", state.w1},
                     {"w2", state.w2},
                     {"w3", state.w3},
                     {"w4", state.w4},
                     {"w5", state.w5},
                     {"w6", state.w6}});
  json sidecar;
  sidecar["schema_version"] = 1;
  sidecar["tau"] = state.tau;
  sidecar["alpha"] = state.alpha;
  sidecar["beta"] = state.beta;
  sidecar["subject_layer"] = state.subject_layer;
  sidecar["relation_layer"] = state.relation_layer;
  sidecar["lm_hash"] = state.lm_hash;
  sidecar["world_hash"] = state.world_hash;
  sidecar["param_hash"] = state.fingerprint();
  sidecar["config_hash"] = config_hash;
  write_text_file(path.string() + ".json", sidecar.dump(2) + "\n");
}

DisentanglerState load_krd_checkpoint(const std::filesystem::path& path) {
  const NamedTensors entries = load_bundle(path);
  json sidecar;
  try {
    sidecar = json::parse(read_text_file(path.string() + ".json"));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Io, "disentangler sidecar unreadable: " + std::string(e.what()));
  }
  DisentanglerState state;
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : entries)
      if (n == name) return t;
    fail(ErrorKind::Io, "disentangler checkpoint missing tensor: " + name);
  };
  state.w1 = find("w1");
  state.w2 = find("w2");
  state.w3 = find("w3");
  state.w4 = find("w4");
  state.w5 = find("w5");
  state.w6 = find("w6");
  state.tau = sidecar["tau"].get<double>();
  state.alpha = sidecar["alpha"].get<double>();
  state.beta = sidecar["beta"].get<double>();
  state.subject_layer = sidecar["subject_layer"].get<std::uint32_t>();
  state.relation_layer = sidecar["relation_layer"].get<std::uint32_t>();
  state.lm_hash = sidecar["lm_hash"].get<std::uint64_t>();
  state.world_hash = sidecar["world_hash"].get<std::uint64_t>();
  if (state.fingerprint() != sidecar["param_hash"].get<std::uint64_t>())
    fail(ErrorKind::Io, "disentangler checkpoint parameter hash mismatch");
  return state;
}

}  // namespace dike
