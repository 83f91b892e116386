#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "dike/serialize.hpp"
#include "test_support.hpp"

using namespace dike;
using dike::testing::tiny_config;
using dike::testing::tiny_setup;

namespace {

TransformerLM small_random_model(std::uint32_t vocab = 50, std::uint64_t seed = 9) {
  LmConfig cfg;
  cfg.layers = 3;
  cfg.dim = 16;
  cfg.ffn_dim = 32;
  cfg.heads = 2;
  cfg.max_seq = 12;
  cfg.vocab = vocab;
  cfg.subject_layer = 1;
  cfg.relation_layer = 2;
  return TransformerLM::init(cfg, seed);
}

}  // namespace

TEST_CASE("forward shape contract and trace records") {
  const TransformerLM model = small_random_model();
  const std::vector<std::uint32_t> tokens = {3, 17, 42};
  const ForwardTrace trace = run_traced(model, tokens);
  CHECK(trace.logits.rows() == 3);
  CHECK(trace.logits.cols() == 50);
  REQUIRE(trace.layers.size() == 3);
  for (const auto& layer : trace.layers) {
    CHECK(layer.h.rows() == 3);
    CHECK(layer.v.cols() == 16);
    CHECK(layer.inner.cols() == 32);
  }
}

TEST_CASE("residual decomposition holds exactly at every layer and position") {
  const TransformerLM model = small_random_model();
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::uint32_t> tokens(2 + rng.below(8));
    for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(50));
    const ForwardTrace trace = run_traced(model, tokens);
    CHECK(trace.max_residual_gap() == 0.0);
    CHECK(trace.max_ffn_gap(model) == 0.0);
  }
}

TEST_CASE("identity substitution is a bitwise no-op") {
  const TransformerLM model = small_random_model();
  const std::vector<std::uint32_t> tokens = {5, 9, 2, 31};
  const ForwardTrace clean = run_traced(model, tokens);

  Tensor h_orig = Tensor::zeros({model.cfg.dim});
  for (std::size_t j = 0; j < model.cfg.dim; ++j) h_orig[j] = clean.layers[1].h.at(2, j);

  ad::Tape tape;
  const LmNodeParams params = lm_params_on_tape(tape, model, false);
  Hook hook{1, 2, tape.input(h_orig)};
  const ForwardIds ids = lm_forward(tape, params, model.cfg, tokens, &hook);
  CHECK(bitwise_equal(tape.val(ids.logits), clean.logits));
}

TEST_CASE("substitution actually propagates and hooks validate their range") {
  const TransformerLM model = small_random_model();
  const std::vector<std::uint32_t> tokens = {5, 9, 2, 31};
  const ForwardTrace clean = run_traced(model, tokens);
  ad::Tape tape;
  const LmNodeParams params = lm_params_on_tape(tape, model, false);
  Hook hook{1, 1, tape.input(Tensor::full({model.cfg.dim}, 0.5))};
  const ForwardIds ids = lm_forward(tape, params, model.cfg, tokens, &hook);
  CHECK(!bitwise_equal(tape.val(ids.logits), clean.logits));
  // downstream records reflect the substitution
  const ForwardTrace hooked = snapshot_trace(tape, ids, tokens);
  CHECK(hooked.layers[1].h.at(1, 0) == 0.5);
  CHECK(hooked.max_residual_gap(1, 1) == 0.0);

  Hook bad_layer{7, 0, tape.input(Tensor::zeros({model.cfg.dim}))};
  CHECK_THROWS_AS(lm_forward(tape, params, model.cfg, tokens, &bad_layer), Error);
  Hook bad_pos{1, 9, tape.input(Tensor::zeros({model.cfg.dim}))};
  CHECK_THROWS_AS(lm_forward(tape, params, model.cfg, tokens, &bad_pos), Error);
}

TEST_CASE("causality: changing a later token never changes earlier logits") {
  const TransformerLM model = small_random_model();
  std::vector<std::uint32_t> tokens = {5, 9, 2, 31, 7};
  const ForwardTrace base = run_traced(model, tokens);
  tokens[3] = 44;  // perturb position 3
  const ForwardTrace perturbed = run_traced(model, tokens);
  for (std::size_t pos = 0; pos < 3; ++pos)
    for (std::size_t j = 0; j < model.cfg.vocab; ++j)
      CHECK(base.logits.at(pos, j) == perturbed.logits.at(pos, j));
  bool later_changed = false;
  for (std::size_t j = 0; j < model.cfg.vocab; ++j)
    later_changed = later_changed || base.logits.at(4, j) != perturbed.logits.at(4, j);
  CHECK(later_changed);
}

TEST_CASE("extract_reps reads the annotated span deterministically") {
  const auto& setup = tiny_setup();
  const Triple& t = setup.world.triples[3];
  const World::Prompt p = setup.world.prompt(t);
  const SubjectReps a = extract_reps(setup.model, p.tokens, p.subject_last);
  const SubjectReps b = extract_reps(setup.model, p.tokens, p.subject_last);
  CHECK(bitwise_equal(a.h_s, b.h_s));
  CHECK(bitwise_equal(a.h_r, b.h_r));

  // subject-final prompt: same position, different layers
  const ForwardTrace trace = run_traced(setup.model, p.tokens);
  CHECK(p.subject_last == p.tokens.size() - 1);
  for (std::size_t j = 0; j < setup.model.cfg.dim; ++j) {
    CHECK(a.h_s[j] == trace.layers[setup.model.cfg.subject_layer].h.at(p.subject_last, j));
    CHECK(a.h_r[j] == trace.layers[setup.model.cfg.relation_layer].h.at(p.subject_last, j));
  }
  CHECK_THROWS_AS(extract_reps(setup.model, p.tokens, 99), Error);

  // subject span of length 1 at position 0
  const std::vector<std::uint32_t> lone = {p.tokens[p.subject_last], 1, 2};
  const SubjectReps reps = extract_reps(setup.model, lone, 0);
  const ForwardTrace lone_trace = run_traced(setup.model, lone);
  for (std::size_t j = 0; j < setup.model.cfg.dim; ++j)
    CHECK(reps.h_s[j] == lone_trace.layers[setup.model.cfg.subject_layer].h.at(0, j));
}

TEST_CASE("recall_prob is the softmax of the forward logits") {
  const auto& setup = tiny_setup();
  const World::Prompt p = setup.world.prompt(setup.world.triples[0]);
  const Tensor logits = next_token_logits(setup.model, p.tokens);
  const Tensor probs = softmax_vec(logits);
  double sum = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) sum += probs[j];
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  for (std::uint32_t tok : {0u, 5u, 20u})
    CHECK(recall_prob(setup.model, p.tokens, tok) == probs[tok]);
}

TEST_CASE("training: zero epochs is a no-op, same seed reproduces parameters") {
  const RunConfig cfg = tiny_config();
  const World world = build_world(cfg);
  LmConfig lm_cfg = cfg.lm;
  lm_cfg.vocab = world.vocab.size();
  const auto corpus = lm_corpus(world, cfg.lm_prefix_fraction, cfg.lm_train.seed);
  const auto probes = recall_probes(world);

  TransformerLM model = TransformerLM::init(lm_cfg, 1);
  const std::uint64_t before = model.fingerprint();
  TrainLmConfig train_cfg = cfg.lm_train;
  train_cfg.epochs = 0;
  const TrainLmReport report = train_lm(model, corpus, probes, train_cfg);
  CHECK(model.fingerprint() == before);
  CHECK(report.final_recall == triple_recall(model, probes));

  train_cfg.epochs = 2;
  TransformerLM m1 = TransformerLM::init(lm_cfg, 1);
  TransformerLM m2 = TransformerLM::init(lm_cfg, 1);
  train_lm(m1, corpus, probes, train_cfg);
  train_lm(m2, corpus, probes, train_cfg);
  CHECK(m1.fingerprint() == m2.fingerprint());
}

TEST_CASE("the tiny base model memorizes its world") {
  const auto& setup = tiny_setup();
  CHECK(setup.recall >= 0.85);
}

TEST_CASE("checkpoints round-trip bit-exactly with their sidecar") {
  const auto& setup = tiny_setup();
  const auto dir = std::filesystem::temp_directory_path() / "dike_lm_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "lm.ckpt";
  save_lm_checkpoint(path, setup.model, setup.world.vocab.table(), setup.world.hash(), "cfg", 7, 3);
  const LmCheckpoint loaded = load_lm_checkpoint(path);
  CHECK(loaded.model.fingerprint() == setup.model.fingerprint());
  CHECK(loaded.world_hash == setup.world.hash());
  CHECK(loaded.vocab_table == setup.world.vocab.table());
  CHECK(loaded.train_steps == 7);
  CHECK(loaded.train_epochs == 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("scorer matches the one-shot forward paths bitwise") {
  const auto& setup = tiny_setup();
  LmScorer scorer(setup.model);
  for (int i = 0; i < 5; ++i) {
    const World::Prompt p = setup.world.prompt(setup.world.triples[i * 7]);
    CHECK(bitwise_equal(scorer.next_logits(p.tokens), next_token_logits(setup.model, p.tokens)));
    CHECK(scorer.argmax(p.tokens) == argmax_next(setup.model, p.tokens));
  }
}
