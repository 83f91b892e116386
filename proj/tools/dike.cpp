#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "dike/pipeline.hpp"
#include "dike/serialize.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dike;

namespace {

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Divergence: return 3;
    case ErrorKind::Io: return 4;
    default: return 2;  // config/data/dimension/factorization: validation failures
  }
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_override;
};

RunConfig load_effective_config(const CommonArgs& args) {
  RunConfig cfg = load_config(args.config_path, args.overrides);
  if (!args.out_override.empty()) cfg.out_dir = args.out_override;
  return cfg;
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  const fs::path out = cfg.resolved_out_dir();
  fs::create_directories(out);
  write_text_file(out / "config.echo.json", cfg.to_json_text());
  write_text_file(out / "config.hash", cfg.hash() + "\n");
  return out;
}

World load_world_for(const RunConfig& cfg) { return gen_world(cfg.world); }

LmCheckpoint load_model_or_fail(const fs::path& path, const World& world) {
  if (!fs::exists(path)) fail(ErrorKind::Io, "model checkpoint not found: " + path.string());
  if (!fs::exists(path.string() + ".json"))
    fail(ErrorKind::Io, "model checkpoint sidecar (hash) missing: " + path.string() + ".json");
  LmCheckpoint ckpt = load_lm_checkpoint(path);
  if (ckpt.world_hash != world.hash())
    fail(ErrorKind::Config, "model checkpoint was trained on a different world (hash mismatch)");
  return ckpt;
}

int cmd_gen_data(const CommonArgs& common, const std::string& lm_path) {
  const RunConfig cfg = load_effective_config(common);
  const fs::path out = prepare_out_dir(cfg);
  const World world = load_world_for(cfg);
  write_world_json(out / "world.json", world);
  write_taxonomy_file(out / "taxonomy.json", world);

  std::vector<std::string> skipped;
  const auto counterfact = build_counterfact_style(world, cfg.eval.data_seed, &skipped);
  write_counterfact_jsonl(out / "counterfact.jsonl", world, counterfact);
  std::printf("world: %zu triples, vocab %u, hash %016llx\n", world.triples.size(),
              world.vocab.size(), static_cast<unsigned long long>(world.hash()));
  std::printf("counterfact.jsonl: %zu records\n", counterfact.size());

  if (lm_path.empty()) {
    std::printf("fineked.jsonl and batches.jsonl need a trained model: rerun with --lm\n");
  } else {
    const LmCheckpoint ckpt = load_model_or_fail(lm_path, world);
    const auto fineked = build_fineked(world, ckpt.model, cfg.eval.data_seed, &skipped);
    write_fineked_jsonl(out / "fineked.jsonl", world, fineked);
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& rec : fineked) ++counts[static_cast<std::size_t>(rec.level)];
    std::printf("fineked.jsonl: %zu records (Easy %zu, Middle %zu, Hard %zu)\n", fineked.size(),
                counts[0], counts[1], counts[2]);
    const auto batches = build_subject_batches(world, ckpt.model, cfg.eval.data_seed, 8, &skipped);
    write_batches_jsonl(out / "batches.jsonl", world, batches);
    std::printf("batches.jsonl: %zu subject batches of 8\n", batches.size());
  }
  for (const std::string& s : skipped) std::printf("skipped: %s\n", s.c_str());
  return 0;
}

int cmd_train_lm(const CommonArgs& common, bool force, bool resume) {
  const RunConfig cfg = load_effective_config(common);
  const fs::path out = prepare_out_dir(cfg);
  const fs::path ckpt_path = out / "lm.ckpt";
  if (fs::exists(ckpt_path) && !force && !resume)
    fail(ErrorKind::Config,
         "checkpoint exists: " + ckpt_path.string() + " (pass --force to overwrite)");

  const World world = load_world_for(cfg);
  LmConfig lm_cfg = cfg.lm;
  lm_cfg.vocab = world.vocab.size();
  std::uint64_t prior_steps = 0;
  std::uint32_t prior_epochs = 0;
  TransformerLM model;
  if (resume && fs::exists(ckpt_path)) {
    LmCheckpoint ckpt = load_model_or_fail(ckpt_path, world);
    model = std::move(ckpt.model);
    prior_steps = ckpt.train_steps;
    prior_epochs = ckpt.train_epochs;
    std::printf("resuming from %s (epochs so far: %u)\n", ckpt_path.string().c_str(),
                prior_epochs);
  } else {
    model = TransformerLM::init(lm_cfg, cfg.lm_init_seed);
  }

  const auto corpus = lm_corpus(world, cfg.lm_prefix_fraction, cfg.lm_train.seed);
  const auto probes = recall_probes(world);
  const TrainLmReport report = train_lm(model, corpus, probes, cfg.lm_train);

  save_lm_checkpoint(ckpt_path, model, world.vocab.table(), world.hash(), cfg.hash(),
                     prior_steps + report.steps, prior_epochs + report.epochs_run);
  const fs::path curve = out / "lm_train.csv";
  std::ofstream os(curve, resume ? std::ios::app : std::ios::out);
  if (!resume || !os.tellp()) os << "epoch,loss,recall,steps_total\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%u,%.8f,%.6f\n", prior_epochs + (unsigned)e + 1,
                  report.epoch_loss[e], report.epoch_recall[e]);
    os << prior_epochs + e + 1 << "," << report.epoch_loss[e] << "," << report.epoch_recall[e]
       << "," << prior_steps + report.steps << "\n";
  }
  std::printf("trained %u epochs (%llu steps), final triple recall %.4f\n", report.epochs_run,
              static_cast<unsigned long long>(report.steps), report.final_recall);
  return 0;
}

int cmd_train_krd(const CommonArgs& common, const std::string& lm_path, bool force) {
  const RunConfig cfg = load_effective_config(common);
  const fs::path out = prepare_out_dir(cfg);
  const fs::path ckpt_path = out / "krd.ckpt";
  if (fs::exists(ckpt_path) && !force)
    fail(ErrorKind::Config,
         "checkpoint exists: " + ckpt_path.string() + " (pass --force to overwrite)");
  const World world = load_world_for(cfg);
  const LmCheckpoint lm = load_model_or_fail(lm_path, world);

  DisentanglerState state = DisentanglerState::init(lm.model.cfg.dim, cfg.krd_init_seed);
  const auto heldout = krd_heldout_samples(world, cfg.krd_heldout, cfg.krd.seed);
  const TrainKrdReport report = train_krd(state, lm.model, world, cfg.krd, heldout);
  save_krd_checkpoint(ckpt_path, state, cfg.hash());

  std::ofstream os(out / "krd_train.csv");
  os << "epoch,ctr,con,recon,total\n";
  for (std::size_t e = 0; e < report.epochs.size(); ++e)
    os << e + 1 << "," << report.epochs[e].ctr << "," << report.epochs[e].con << ","
       << report.epochs[e].recon << "," << report.epochs[e].total << "\n";
  std::printf("trained %zu epochs; held-out cos(z_r,z_u) %.4f -> %.4f, recon %.4f -> %.4f\n",
              report.epochs.size(), report.before.mean_cosine, report.after.mean_cosine,
              report.before.mean_recon, report.after.mean_recon);
  return 0;
}

enum class DatasetKind { Fineked, Counterfact, Batches };

DatasetKind sniff_dataset(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open dataset: " + path.string());
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) break;
  const json j = json::parse(line, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::Data, "dataset is not JSON lines: " + path.string());
  if (j.contains("neighbor")) return DatasetKind::Fineked;
  if (j.contains("paraphrase_templates")) return DatasetKind::Counterfact;
  if (j.contains("edits")) return DatasetKind::Batches;
  fail(ErrorKind::Data, "unrecognized dataset schema: " + path.string());
}

int cmd_edit(const CommonArgs& common, const std::string& editor_name_arg,
             const std::string& lm_path, const std::string& krd_path,
             const std::string& dataset_path, bool zero_w3, std::uint32_t max_records) {
  const RunConfig cfg = load_effective_config(common);
  const fs::path out = prepare_out_dir(cfg);
  const Editor editor = editor_from_name(editor_name_arg);
  if (zero_w3 && editor != Editor::Dike)
    fail(ErrorKind::Config, "--debug-zero-w3 applies to the dike editor only");

  const World world = load_world_for(cfg);
  const LmCheckpoint lm = load_model_or_fail(lm_path, world);
  DisentanglerState krd;
  const DisentanglerState* krd_ptr = nullptr;
  if (editor == Editor::Dike && !zero_w3) {
    if (krd_path.empty()) fail(ErrorKind::Config, "editor=dike requires --krd");
    krd = load_krd_checkpoint(krd_path);
    krd.validate_compatible(lm.model);
    krd_ptr = &krd;
  }

  const DatasetKind kind = sniff_dataset(dataset_path);
  if (kind == DatasetKind::Batches)
    fail(ErrorKind::Config, "batch datasets are evaluated via 'eval --sweep'");
  std::vector<EditRequest> edits;
  std::vector<std::uint32_t> ids;
  if (kind == DatasetKind::Fineked) {
    for (const auto& rec : read_fineked_jsonl(dataset_path, world)) {
      edits.push_back(rec.edit);
      ids.push_back(rec.id);
    }
  } else {
    for (const auto& rec : read_counterfact_jsonl(dataset_path, world)) {
      edits.push_back(rec.edit);
      ids.push_back(rec.id);
    }
  }
  if (edits.size() > max_records) {
    edits.resize(max_records);
    ids.resize(max_records);
  }

  const PreservationSet pres =
      estimate_covariance(lm.model, world, cfg.edit.cov_lambda, cfg.edit.cov_ridge);
  const std::string label = zero_w3 ? "dike-zero-w3" : editor_name_arg;
  const fs::path edit_dir = out / "edits" / label;
  fs::create_directories(edit_dir);

  for (std::size_t i = 0; i < edits.size(); ++i) {
    EditOutcome outcome =
        compute_edit(lm.model, krd_ptr, world, pres, edits[i], editor, cfg.edit, zero_w3);
    outcome.report.record_id = ids[i];
    save_tensor(edit_dir / ("snapshot_" + std::to_string(ids[i]) + ".dktn"), outcome.w_hat);
    json j;
    j["schema_version"] = 1;
    j["record_id"] = ids[i];
    j["editor"] = label;
    j["base_param_hash"] = lm.model.fingerprint();
    j["edited_layer"] = lm.model.cfg.subject_layer;
    j["config_hash"] = cfg.hash();
    j["subject"] = outcome.report.subject;
    j["relation"] = outcome.report.relation;
    j["object"] = outcome.report.object;
    j["new_object"] = outcome.report.new_object;
    j["delta_norm"] = outcome.report.delta_norm;
    j["final_loss"] = outcome.report.final_loss;
    j["steps"] = outcome.report.steps;
    j["converged"] = outcome.report.converged;
    j["warn"] = outcome.report.warn;
    j["update_fnorm"] = outcome.report.update_fnorm;
    j["lambda"] = outcome.report.lambda;
    j["seed"] = outcome.report.seed;
    write_text_file(edit_dir / ("record_" + std::to_string(ids[i]) + ".json"), j.dump(2) + "\n");
  }
  std::printf("%zu edits -> %s\n", edits.size(), edit_dir.string().c_str());
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& lm_path, const std::string& krd_path,
             const std::string& fineked_path, const std::string& counterfact_path,
             const std::string& batches_path, const std::string& snapshots_dir,
             const std::vector<std::string>& editor_names, bool sweep, bool export_reps) {
  const RunConfig cfg = load_effective_config(common);
  const fs::path out = prepare_out_dir(cfg);
  const World world = load_world_for(cfg);
  const LmCheckpoint lm = load_model_or_fail(lm_path, world);

  for (const std::string& p : {fineked_path, counterfact_path, batches_path})
    if (!p.empty() && !fs::exists(p)) fail(ErrorKind::Io, "dataset not found: " + p);
  if (!snapshots_dir.empty() && !fs::exists(snapshots_dir))
    fail(ErrorKind::Io, "snapshot directory not found: " + snapshots_dir);

  DisentanglerState krd;
  const DisentanglerState* krd_ptr = nullptr;
  if (!krd_path.empty()) {
    krd = load_krd_checkpoint(krd_path);
    krd.validate_compatible(lm.model);
    krd_ptr = &krd;
  }
  std::vector<Editor> editors;
  for (const std::string& name : editor_names) editors.push_back(editor_from_name(name));
  const bool needs_krd =
      std::count(editors.begin(), editors.end(), Editor::Dike) > 0 && snapshots_dir.empty();
  if (needs_krd && !krd_ptr)
    fail(ErrorKind::Config, "evaluating editor=dike requires --krd");

  const fs::path reports = out / "reports";
  fs::create_directories(reports);
  PreservationSet pres;
  bool have_pres = false;
  auto ensure_pres = [&]() {
    if (!have_pres) {
      pres = estimate_covariance(lm.model, world, cfg.edit.cov_lambda, cfg.edit.cov_ridge);
      have_pres = true;
    }
  };

  if (!fineked_path.empty()) {
    const auto records = read_fineked_jsonl(fineked_path, world);
    std::vector<FinekedEvalResult> results;
    if (!snapshots_dir.empty()) {
      results.push_back(
          eval_fineked_snapshots(lm.model, world, records, snapshots_dir, "snapshots"));
    } else {
      ensure_pres();
      for (Editor e : editors)
        results.push_back(eval_fineked(lm.model, krd_ptr, world, pres, records, e, cfg.edit));
    }
    for (const auto& r : results)
      write_fineked_csv(reports / ("fineked_" + r.editor + ".csv"), r);
    write_fineked_markdown(reports / "fineked_summary.md", results, cfg.hash());
    for (const auto& r : results)
      std::printf("fineked %s: efficacy %.4f, locality %.4f\n", r.editor.c_str(), r.efficacy,
                  r.locality_overall);
  }

  if (!counterfact_path.empty()) {
    const auto records = read_counterfact_jsonl(counterfact_path, world);
    ensure_pres();
    std::vector<CounterfactEvalResult> results;
    for (Editor e : editors)
      results.push_back(eval_counterfact(lm.model, krd_ptr, world, pres, records, e, cfg.edit));
    for (const auto& r : results)
      write_counterfact_csv(reports / ("counterfact_" + r.editor + ".csv"), r);
    write_counterfact_markdown(reports / "counterfact_summary.md", results, cfg.hash());
    for (const auto& r : results)
      std::printf("counterfact %s: avg %.4f (eff %.4f, para %.4f, neigh %.4f)\n",
                  r.editor.c_str(), r.harmonic, r.scores.efficacy, r.scores.paraphrase,
                  r.scores.neighborhood);
  }

  if (sweep) {
    if (batches_path.empty()) fail(ErrorKind::Config, "--sweep requires --batches");
    auto batches = read_batches_jsonl(batches_path, world);
    if (cfg.batch_order == "reversed")
      for (auto& b : batches) std::reverse(b.edits.begin(), b.edits.end());
    ensure_pres();
    const SweepReport report =
        run_batch_sweep(lm.model, krd_ptr, world, pres, batches, editors, cfg.eval.batch_sizes,
                        cfg.eval.seeds, cfg.edit, cfg.eval.sweep_subjects);
    write_sweep_csv(reports / "sweep.csv", report);
    write_sweep_markdown(reports / "sweep.md", report, cfg.hash());
    for (const std::string& e : report.editors)
      for (std::uint32_t s : report.sizes)
        std::printf("sweep %s size %u: efficacy %.4f, locality %.4f\n", e.c_str(), s,
                    report.mean_efficacy(e, s), report.mean_locality(e, s));
  }

  if (export_reps) {
    if (!krd_ptr) fail(ErrorKind::Config, "--export-reps requires --krd");
    const auto samples = krd_heldout_samples(world, cfg.krd_heldout, cfg.krd.seed);
    export_disentangled_reps(krd, lm.model, world, samples, reports / "krd_reps.csv");
    const ExportedReps reps = read_disentangled_reps(reports / "krd_reps.csv");
    std::printf("exported %zu records, mean cos(z_r, z_u) = %.4f\n", reps.related.size(),
                reps.mean_cosine);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disentangled rank-one knowledge editing on a toy transformer"};
  app.require_subcommand(1);

  CommonArgs common;
  app.add_option("--config", common.config_path, "Run configuration (JSON)")->required();
  app.add_option("--set", common.overrides, "Override a config key: a.b.c=value");
  app.add_option("--out", common.out_override, "Override out_dir");

  auto* gen = app.add_subcommand("gen-data", "Generate the world and dataset files");
  std::string gen_lm;
  gen->add_option("--lm", gen_lm, "Trained model checkpoint (enables fineked/batches)");

  auto* tlm = app.add_subcommand("train-lm", "Train the base model");
  bool lm_force = false, lm_resume = false;
  tlm->add_flag("--force", lm_force, "Overwrite an existing checkpoint");
  tlm->add_flag("--resume", lm_resume, "Continue training an existing checkpoint");

  auto* tkrd = app.add_subcommand("train-krd", "Train the representation disentangler");
  std::string krd_lm;
  bool krd_force = false;
  tkrd->add_option("--lm", krd_lm, "Trained model checkpoint")->required();
  tkrd->add_flag("--force", krd_force, "Overwrite an existing checkpoint");

  auto* edit = app.add_subcommand("edit", "Compute rank-one edits over a dataset");
  std::string edit_editor, edit_lm, edit_krd, edit_dataset;
  bool edit_zero_w3 = false;
  std::uint32_t edit_max_records = UINT32_MAX;
  edit->add_option("--editor", edit_editor, "dike | memit | memit-constrained")->required();
  edit->add_option("--lm", edit_lm, "Trained model checkpoint")->required();
  edit->add_option("--krd", edit_krd, "Disentangler checkpoint (dike editor)");
  edit->add_option("--dataset", edit_dataset, "fineked.jsonl or counterfact.jsonl")->required();
  edit->add_flag("--debug-zero-w3", edit_zero_w3,
                 "Reduction check: baseline value path with the unrelated projection zeroed");
  edit->add_option("--max-records", edit_max_records, "Edit only the first N records");

  auto* ev = app.add_subcommand("eval", "Score editors on the dataset files");
  std::string ev_lm, ev_krd, ev_fineked, ev_counterfact, ev_batches, ev_snapshots;
  std::vector<std::string> ev_editors = {"dike", "memit"};
  bool ev_sweep = false, ev_export = false;
  ev->add_option("--lm", ev_lm, "Trained model checkpoint")->required();
  ev->add_option("--krd", ev_krd, "Disentangler checkpoint");
  ev->add_option("--fineked", ev_fineked, "fineked.jsonl path");
  ev->add_option("--counterfact", ev_counterfact, "counterfact.jsonl path");
  ev->add_option("--batches", ev_batches, "batches.jsonl path");
  ev->add_option("--snapshots", ev_snapshots, "Evaluate saved snapshots instead of editing");
  ev->add_option("--editors", ev_editors, "Editors to run")->delimiter(',');
  ev->add_flag("--sweep", ev_sweep, "Run the subject-consistent batch sweep");
  ev->add_flag("--export-reps", ev_export, "Export disentangled components to CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(common, gen_lm);
    if (tlm->parsed()) return cmd_train_lm(common, lm_force, lm_resume);
    if (tkrd->parsed()) return cmd_train_krd(common, krd_lm, krd_force);
    if (edit->parsed())
      return cmd_edit(common, edit_editor, edit_lm, edit_krd, edit_dataset, edit_zero_w3,
                      edit_max_records);
    if (ev->parsed())
      return cmd_eval(common, ev_lm, ev_krd, ev_fineked, ev_counterfact, ev_batches, ev_snapshots,
                      ev_editors, ev_sweep, ev_export);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
