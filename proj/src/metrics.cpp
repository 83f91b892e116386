#include "dike/metrics.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dike/serialize.hpp"

namespace dike {

double efficacy_argmax(const TransformerLM& model, const World& world,
                       std::span<const EditRequest> edits, std::vector<bool>* per_record) {
  if (edits.empty()) fail(ErrorKind::Config, "efficacy_argmax: no records");
  LmScorer scorer(model);
  std::size_t hits = 0;
  for (const EditRequest& e : edits) {
    const World::Prompt p = world.prompt(e.base);
    const bool ok = scorer.argmax(p.tokens) == e.new_object;
    if (per_record) per_record->push_back(ok);
    if (ok) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(edits.size());
}

LocalityReport relational_locality(const TransformerLM& model, const World& world,
                                   std::span<const FineKedRecord> records) {
  if (records.empty()) fail(ErrorKind::Config, "relational_locality: no records");
  LocalityReport report;
  LmScorer scorer(model);
  std::array<std::size_t, 3> hits = {0, 0, 0};
  for (const FineKedRecord& rec : records) {
    const World::Prompt p = world.prompt(rec.neighbor);
    const bool ok = scorer.argmax(p.tokens) == rec.neighbor.object;
    report.per_record.push_back(ok);
    const auto lvl = static_cast<std::size_t>(rec.level);
    ++report.level_counts[lvl];
    if (ok) ++hits[lvl];
  }
  std::size_t total_hits = 0, total = 0;
  for (std::size_t l = 0; l < 3; ++l) {
    report.by_level[l] = report.level_counts[l]
                             ? static_cast<double>(hits[l]) / static_cast<double>(report.level_counts[l])
                             : 0.0;
    total_hits += hits[l];
    total += report.level_counts[l];
  }
  report.overall = static_cast<double>(total_hits) / static_cast<double>(total);
  return report;
}

CfScores prob_comparison_scores(const TransformerLM& model, const World& world,
                                std::span<const CounterfactRecord> records) {
  if (records.empty()) fail(ErrorKind::Config, "prob_comparison_scores: no records");
  LmScorer scorer(model);
  std::size_t eff_hits = 0;
  std::size_t para_hits = 0, para_total = 0;
  std::size_t neigh_hits = 0, neigh_total = 0;
  for (const CounterfactRecord& rec : records) {
    const World::Prompt edit_prompt = world.prompt(rec.edit.base);
    const Tensor probs = softmax_vec(scorer.next_logits(edit_prompt.tokens));
    if (probs[rec.edit.new_object] > probs[rec.edit.base.object]) ++eff_hits;
    for (std::uint32_t tpl : rec.paraphrase_templates) {
      const World::Prompt p = world.prompt(rec.edit.base, tpl);
      const Tensor pp = softmax_vec(scorer.next_logits(p.tokens));
      if (pp[rec.edit.new_object] > pp[rec.edit.base.object]) ++para_hits;
      ++para_total;
    }
    for (const Triple& n : rec.neighbors) {
      const World::Prompt p = world.prompt(n);
      const Tensor np = softmax_vec(scorer.next_logits(p.tokens));
      // Reversed inequality: the neighbor should still prefer its own object.
      if (np[rec.edit.new_object] < np[n.object]) ++neigh_hits;
      ++neigh_total;
    }
  }
  CfScores scores;
  scores.efficacy = static_cast<double>(eff_hits) / static_cast<double>(records.size());
  scores.paraphrase = para_total ? static_cast<double>(para_hits) / para_total : 0.0;
  scores.neighborhood = neigh_total ? static_cast<double>(neigh_hits) / neigh_total : 0.0;
  return scores;
}

double harmonic_mean(double a, double b, double c) {
  for (double v : {a, b, c})
    if (!(v > 0.0)) fail(ErrorKind::Config, "harmonic_mean: scores must be positive");
  return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

namespace {

void finalize_fineked(FinekedEvalResult& result) {
  std::array<std::size_t, 3> hits = {0, 0, 0};
  std::size_t eff_hits = 0, loc_hits = 0;
  for (const FinekedRow& row : result.rows) {
    const auto lvl = static_cast<std::size_t>(row.level);
    ++result.level_counts[lvl];
    if (row.locality) {
      ++hits[lvl];
      ++loc_hits;
    }
    if (row.efficacy) ++eff_hits;
  }
  const double n = static_cast<double>(result.rows.size());
  result.efficacy = eff_hits / n;
  result.locality_overall = loc_hits / n;
  for (std::size_t l = 0; l < 3; ++l)
    result.locality_by_level[l] =
        result.level_counts[l] ? static_cast<double>(hits[l]) / result.level_counts[l] : 0.0;
}

}  // namespace

FinekedEvalResult eval_fineked(const TransformerLM& base, const DisentanglerState* krd,
                               const World& world, const PreservationSet& pres,
                               std::span<const FineKedRecord> records, Editor editor,
                               const EditConfig& cfg) {
  FinekedEvalResult result;
  result.editor = editor_name(editor);
  if (krd) krd->validate_compatible(base);
  for (const FineKedRecord& rec : records) {
    EditOutcome outcome = compute_edit(base, krd, world, pres, rec.edit, editor, cfg);
    outcome.report.record_id = rec.id;
    const TransformerLM edited = apply_edit(base, outcome.w_hat);
    FinekedRow row;
    row.id = rec.id;
    row.level = rec.level;
    row.report = std::move(outcome.report);
    const World::Prompt edit_prompt = world.prompt(rec.edit.base);
    row.efficacy = argmax_next(edited, edit_prompt.tokens) == rec.edit.new_object;
    const World::Prompt neigh_prompt = world.prompt(rec.neighbor);
    row.locality = argmax_next(edited, neigh_prompt.tokens) == rec.neighbor.object;
    result.rows.push_back(std::move(row));
  }
  finalize_fineked(result);
  return result;
}

FinekedEvalResult eval_fineked_snapshots(const TransformerLM& base, const World& world,
                                         std::span<const FineKedRecord> records,
                                         const std::filesystem::path& snapshot_dir,
                                         const std::string& editor_label) {
  FinekedEvalResult result;
  result.editor = editor_label;
  for (const FineKedRecord& rec : records) {
    const auto path = snapshot_dir / ("snapshot_" + std::to_string(rec.id) + ".dktn");
    if (!std::filesystem::exists(path))
      fail(ErrorKind::Io, "missing edit snapshot: " + path.string());
    const TransformerLM edited = apply_edit(base, load_tensor(path));
    FinekedRow row;
    row.id = rec.id;
    row.level = rec.level;
    const World::Prompt edit_prompt = world.prompt(rec.edit.base);
    row.efficacy = argmax_next(edited, edit_prompt.tokens) == rec.edit.new_object;
    const World::Prompt neigh_prompt = world.prompt(rec.neighbor);
    row.locality = argmax_next(edited, neigh_prompt.tokens) == rec.neighbor.object;
    result.rows.push_back(std::move(row));
  }
  finalize_fineked(result);
  return result;
}

CounterfactEvalResult eval_counterfact(const TransformerLM& base, const DisentanglerState* krd,
                                       const World& world, const PreservationSet& pres,
                                       std::span<const CounterfactRecord> records, Editor editor,
                                       const EditConfig& cfg) {
  CounterfactEvalResult result;
  result.editor = editor_name(editor);
  if (krd) krd->validate_compatible(base);
  std::size_t eff_hits = 0, para_hits = 0, para_total = 0, neigh_hits = 0, neigh_total = 0;
  for (const CounterfactRecord& rec : records) {
    const EditOutcome outcome = compute_edit(base, krd, world, pres, rec.edit, editor, cfg);
    const TransformerLM edited = apply_edit(base, outcome.w_hat);
    const CfScores one = prob_comparison_scores(edited, world, std::span(&rec, 1));
    CounterfactRow row;
    row.id = rec.id;
    row.efficacy = one.efficacy > 0.5;
    row.paraphrase_total = rec.paraphrase_templates.size();
    row.paraphrase_hits = static_cast<std::size_t>(
        std::lround(one.paraphrase * static_cast<double>(row.paraphrase_total)));
    row.neighborhood_total = rec.neighbors.size();
    row.neighborhood_hits = static_cast<std::size_t>(
        std::lround(one.neighborhood * static_cast<double>(row.neighborhood_total)));
    eff_hits += row.efficacy ? 1 : 0;
    para_hits += row.paraphrase_hits;
    para_total += row.paraphrase_total;
    neigh_hits += row.neighborhood_hits;
    neigh_total += row.neighborhood_total;
    result.rows.push_back(row);
  }
  result.scores.efficacy = static_cast<double>(eff_hits) / static_cast<double>(records.size());
  result.scores.paraphrase = para_total ? static_cast<double>(para_hits) / para_total : 0.0;
  result.scores.neighborhood = neigh_total ? static_cast<double>(neigh_hits) / neigh_total : 0.0;
  if (result.scores.efficacy > 0 && result.scores.paraphrase > 0 && result.scores.neighborhood > 0)
    result.harmonic = harmonic_mean(result.scores.efficacy, result.scores.paraphrase,
                                    result.scores.neighborhood);
  return result;
}

double SweepReport::mean_locality(const std::string& editor, std::uint32_t size) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const SweepCell& c : cells)
    if (c.editor == editor && c.batch_size == size) {
      sum += c.locality;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double SweepReport::mean_efficacy(const std::string& editor, std::uint32_t size) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const SweepCell& c : cells)
    if (c.editor == editor && c.batch_size == size) {
      sum += c.efficacy;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

const SweepCell& SweepReport::cell(const std::string& editor, std::uint32_t size,
                                   std::uint64_t seed) const {
  for (const SweepCell& c : cells)
    if (c.editor == editor && c.batch_size == size && c.seed == seed) return c;
  fail(ErrorKind::Data, "sweep cell not found");
}

SweepReport run_batch_sweep(const TransformerLM& base, const DisentanglerState* krd,
                            const World& world, const PreservationSet& pres,
                            std::span<const SubjectBatchRecord> batches,
                            const std::vector<Editor>& editors,
                            const std::vector<std::uint32_t>& sizes,
                            const std::vector<std::uint64_t>& seeds, const EditConfig& cfg,
                            std::uint32_t max_subjects) {
  SweepReport report;
  for (Editor e : editors) report.editors.push_back(editor_name(e));
  report.sizes = sizes;
  report.seeds = {seeds.begin(), seeds.end()};
  const std::size_t n_subjects = std::min<std::size_t>(batches.size(), max_subjects);
  if (n_subjects == 0) fail(ErrorKind::Config, "run_batch_sweep: no subject batches");
  if (krd) krd->validate_compatible(base);

  for (Editor editor : editors) {
    for (std::uint32_t size : sizes) {
      for (std::uint64_t seed : seeds) {
        SweepCell cell;
        cell.editor = editor_name(editor);
        cell.batch_size = size;
        cell.seed = seed;
        cell.n_subjects = n_subjects;
        std::size_t eff_hits = 0, loc_hits = 0, edit_count = 0;
        for (std::size_t b = 0; b < n_subjects; ++b) {
          const SubjectBatchRecord& batch = batches[b];
          if (batch.edits.size() < size)
            fail(ErrorKind::Config, "run_batch_sweep: batch smaller than requested size");
          std::vector<EditRequest> edits(batch.edits.begin(), batch.edits.begin() + size);
          for (EditRequest& e : edits) e.new_object = world.sample_new_object(e.base, seed);
          EditConfig run_cfg = cfg;
          run_cfg.seed = seed;
          const BatchEditResult edited =
              apply_edit_sequence(base, krd, world, pres, edits, editor, run_cfg);
          LmScorer scorer(edited.model);
          for (const EditRequest& e : edits) {
            const World::Prompt p = world.prompt(e.base);
            if (scorer.argmax(p.tokens) == e.new_object) ++eff_hits;
            ++edit_count;
          }
          const World::Prompt hp = world.prompt(batch.heldout);
          if (scorer.argmax(hp.tokens) == batch.heldout.object) ++loc_hits;
        }
        cell.n_edits = edit_count;
        cell.efficacy = static_cast<double>(eff_hits) / static_cast<double>(edit_count);
        cell.locality = static_cast<double>(loc_hits) / static_cast<double>(n_subjects);
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

void export_disentangled_reps(const DisentanglerState& krd, const TransformerLM& model,
                              const World& world, std::span<const KrdSample> records,
                              const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "record_id,component";
  for (std::uint32_t j = 0; j < model.cfg.dim; ++j) os << ",x" << j;
  os << "\n";
  char buf[32];
  std::uint32_t id = 0;
  for (const KrdSample& sample : records) {
    const World::Prompt p = world.prompt(sample.edit);
    const SubjectReps reps = extract_reps(model, p.tokens, p.subject_last);
    const DisentangledPair pair = disentangle(krd, reps.h_s, reps.h_r);
    for (const char* tag : {"related", "unrelated"}) {
      const Tensor& z = tag[0] == 'r' ? pair.related : pair.unrelated;
      os << id << "," << tag;
      for (std::size_t j = 0; j < z.size(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", z[j]);
        os << "," << buf;
      }
      os << "\n";
    }
    ++id;
  }
  if (!os) fail(ErrorKind::Io, "write failed: " + path.string());
}

ExportedReps read_disentangled_reps(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open: " + path.string());
  std::string line;
  if (!std::getline(is, line)) fail(ErrorKind::Data, "empty export: " + path.string());
  ExportedReps out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    const std::uint32_t id = static_cast<std::uint32_t>(std::stoul(field));
    std::getline(ss, field, ',');
    const bool related = field == "related";
    std::vector<double> values;
    while (std::getline(ss, field, ',')) values.push_back(std::stod(field));
    if (related) {
      out.ids.push_back(id);
      out.related.push_back(Tensor::vec(std::move(values)));
    } else {
      out.unrelated.push_back(Tensor::vec(std::move(values)));
    }
  }
  if (out.related.size() != out.unrelated.size())
    fail(ErrorKind::Data, "export rows unpaired: " + path.string());
  double mean = 0.0;
  for (std::size_t i = 0; i < out.related.size(); ++i)
    mean += cosine_val(out.related[i], out.unrelated[i]);
  out.mean_cosine = out.related.empty() ? 0.0 : mean / static_cast<double>(out.related.size());
  return out;
}

namespace {

std::string pct(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", rate * 100.0);
  return buf;
}

}  // namespace

void write_fineked_csv(const std::filesystem::path& path, const FinekedEvalResult& result) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "record_id,editor,level,efficacy,locality,delta_norm,final_loss,steps,converged,warn,"
        "update_fnorm,lambda,seed\n";
  for (const FinekedRow& row : result.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%u,%d,%d,%.6g,%.6g,%" PRIu64,
                  row.report.delta_norm, row.report.final_loss, row.report.steps,
                  row.report.converged ? 1 : 0, row.report.warn ? 1 : 0, row.report.update_fnorm,
                  row.report.lambda, row.report.seed);
    os << row.id << "," << result.editor << "," << level_name(row.level) << ","
       << (row.efficacy ? 1 : 0) << "," << (row.locality ? 1 : 0) << "," << buf << "\n";
  }
}

void write_fineked_markdown(const std::filesystem::path& path,
                            std::span<const FinekedEvalResult> results,
                            const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "# Fine-grained locality summary\n\n";
  os << "config_hash: " << config_hash << "\n\n";
  os << "| Method | Eff. | R-Loc. Easy | R-Loc. Middle | R-Loc. Hard | R-Loc. Avg |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const FinekedEvalResult& r : results) {
    os << "| " << r.editor << " | " << pct(r.efficacy) << " | " << pct(r.locality_by_level[0])
       << " | " << pct(r.locality_by_level[1]) << " | " << pct(r.locality_by_level[2]) << " | "
       << pct(r.locality_overall) << " |\n";
  }
  os << "\nlevels: Easy n=" << (results.empty() ? 0 : results[0].level_counts[0])
     << ", Middle n=" << (results.empty() ? 0 : results[0].level_counts[1])
     << ", Hard n=" << (results.empty() ? 0 : results[0].level_counts[2]) << "\n";
}

void write_counterfact_csv(const std::filesystem::path& path,
                           const CounterfactEvalResult& result) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "record_id,editor,efficacy,paraphrase_hits,paraphrase_total,neighborhood_hits,"
        "neighborhood_total\n";
  for (const CounterfactRow& row : result.rows)
    os << row.id << "," << result.editor << "," << (row.efficacy ? 1 : 0) << ","
       << row.paraphrase_hits << "," << row.paraphrase_total << "," << row.neighborhood_hits
       << "," << row.neighborhood_total << "\n";
}

void write_counterfact_markdown(const std::filesystem::path& path,
                                std::span<const CounterfactEvalResult> results,
                                const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "# Probability-comparison summary\n\n";
  os << "config_hash: " << config_hash << "\n\n";
  os << "| Method | Avg. | Effi. | Para. | Neigh. |\n";
  os << "|---|---|---|---|---|\n";
  for (const CounterfactEvalResult& r : results)
    os << "| " << r.editor << " | " << pct(r.harmonic) << " | " << pct(r.scores.efficacy)
       << " | " << pct(r.scores.paraphrase) << " | " << pct(r.scores.neighborhood) << " |\n";
}

void write_sweep_csv(const std::filesystem::path& path, const SweepReport& report) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "editor,batch_size,seed,efficacy,locality,n_subjects,n_edits\n";
  for (const SweepCell& c : report.cells) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g,%.10g", c.efficacy, c.locality);
    os << c.editor << "," << c.batch_size << "," << c.seed << "," << buf << "," << c.n_subjects
       << "," << c.n_edits << "\n";
  }
}

void write_sweep_markdown(const std::filesystem::path& path, const SweepReport& report,
                          const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << "# Subject-consistent batch editing sweep\n\n";
  os << "config_hash: " << config_hash << "\n\n";
  os << "mean over " << report.seeds.size() << " seeds; min/max across seeds in brackets\n\n";
  os << "| Editor | Batch | Efficacy | Relational locality |\n";
  os << "|---|---|---|---|\n";
  for (const std::string& editor : report.editors) {
    for (std::uint32_t size : report.sizes) {
      double eff_min = 1e9, eff_max = -1e9, loc_min = 1e9, loc_max = -1e9;
      for (const SweepCell& c : report.cells) {
        if (c.editor != editor || c.batch_size != size) continue;
        eff_min = std::min(eff_min, c.efficacy);
        eff_max = std::max(eff_max, c.efficacy);
        loc_min = std::min(loc_min, c.locality);
        loc_max = std::max(loc_max, c.locality);
      }
      os << "| " << editor << " | " << size << " | " << pct(report.mean_efficacy(editor, size))
         << " [" << pct(eff_min) << ", " << pct(eff_max) << "] | "
         << pct(report.mean_locality(editor, size)) << " [" << pct(loc_min) << ", "
         << pct(loc_max) << "] |\n";
    }
  }
}

}  // namespace dike
