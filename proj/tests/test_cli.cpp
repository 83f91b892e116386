#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dike/config.hpp"
#include "dike/serialize.hpp"
#include "test_support.hpp"

using namespace dike;
namespace fs = std::filesystem;

TEST_CASE("config: defaults serialize, reload, and hash stably") {
  const RunConfig cfg = default_config();
  const RunConfig back = config_from_json_text(cfg.to_json_text());
  CHECK(back.hash() == cfg.hash());
  CHECK(back.edit.cov_lambda == cfg.edit.cov_lambda);
  CHECK(back.krd.tau == cfg.krd.tau);
  CHECK(back.eval.seeds == cfg.eval.seeds);
}

TEST_CASE("config: unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(config_from_json_text("{\"wrold\": {}}"), Error);
  CHECK_THROWS_AS(config_from_json_text("{\"world\": {\"subects\": 3}}"), Error);
  CHECK_THROWS_AS(config_from_json_text("{\"krd\": {\"tau\": 0.0}}"), Error);
  CHECK_THROWS_AS(config_from_json_text("{\"edit\": {\"batch_order\": \"random\"}}"), Error);
  CHECK_THROWS_AS(config_from_json_text("not json"), Error);
  CHECK_NOTHROW(config_from_json_text("{\"krd\": {\"tau\": 0.2}}"));
}

TEST_CASE("config: file loading with dotted overrides") {
  const auto dir = fs::temp_directory_path() / "dike_cli_config";
  fs::create_directories(dir);
  write_text_file(dir / "c.json", "{\"world\": {\"subjects\": 8}}\n");
  const RunConfig cfg =
      load_config(dir / "c.json", {"world.relations=11", "krd.tau=0.25", "out_dir=elsewhere"});
  CHECK(cfg.world.n_subjects == 8);
  CHECK(cfg.world.n_relations == 11);
  CHECK(cfg.krd.tau == 0.25);
  CHECK(cfg.out_dir == "elsewhere");
  CHECK_THROWS_AS(load_config(dir / "c.json", {"no_equals_sign"}), Error);
  fs::remove_all(dir);
}

TEST_CASE("config: environment root prefixes relative output directories") {
  RunConfig cfg;
  cfg.out_dir = "runs/a";
  setenv(kOutRootEnv, "/tmp/dike_root_test", 1);
  CHECK(cfg.resolved_out_dir() == fs::path("/tmp/dike_root_test/runs/a"));
  unsetenv(kOutRootEnv);
  CHECK(cfg.resolved_out_dir() == fs::path("runs/a"));
}

namespace {

struct CliRunner {
  fs::path exe;
  fs::path dir;

  int run(const std::string& args) const {
    const std::string cmd = exe.string() + " " + args + " >" + (dir / "stdout.txt").string() +
                            " 2>" + (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  }
  std::string out() const { return read_text_file(dir / "stdout.txt"); }
  std::string err() const { return read_text_file(dir / "stderr.txt"); }
};

}  // namespace

TEST_CASE("command line: tiny end-to-end run") {
  const char* cli = std::getenv("DIKE_CLI");
  REQUIRE_MESSAGE(cli != nullptr, "DIKE_CLI must point at the dike binary");
  const auto dir = fs::temp_directory_path() / "dike_cli_e2e";
  fs::remove_all(dir);
  fs::create_directories(dir);
  CliRunner runner{cli, dir};

  // tiny config mirroring the unit-test world
  const RunConfig tiny = dike::testing::tiny_config();
  write_text_file(dir / "config.json", tiny.to_json_text());
  const std::string base = "--config " + (dir / "config.json").string() + " --out " +
                           (dir / "out").string() + " ";

  SUBCASE("validation failures exit with code 2") {
    write_text_file(dir / "bad.json", "{\"world\": {\"subects\": 2}}");
    CHECK(runner.run("--config " + (dir / "bad.json").string() + " gen-data") == 2);
    CHECK(runner.err().find("unknown config key") != std::string::npos);

    CHECK(runner.run(base + "edit --editor rome --lm x --dataset y") == 2);
    CHECK(runner.err().find("valid editors") != std::string::npos);
  }

  SUBCASE("full pipeline") {
    // gen-data without a model: world, taxonomy, counterfact only
    REQUIRE(runner.run(base + "gen-data") == 0);
    CHECK(fs::exists(dir / "out/world.json"));
    CHECK(fs::exists(dir / "out/taxonomy.json"));
    CHECK(fs::exists(dir / "out/counterfact.jsonl"));
    CHECK(!fs::exists(dir / "out/fineked.jsonl"));
    CHECK(fs::exists(dir / "out/config.echo.json"));

    // deterministic regeneration: byte-identical dataset files
    const std::string cf_first = read_text_file(dir / "out/counterfact.jsonl");
    REQUIRE(runner.run(base + "gen-data") == 0);
    CHECK(read_text_file(dir / "out/counterfact.jsonl") == cf_first);

    // train the model, then refuse to clobber it
    REQUIRE(runner.run(base + "train-lm") == 0);
    CHECK(fs::exists(dir / "out/lm.ckpt"));
    CHECK(fs::exists(dir / "out/lm_train.csv"));
    CHECK(runner.run(base + "train-lm") == 2);
    CHECK(runner.err().find("--force") != std::string::npos);

    // resume continues the curve monotonically
    std::size_t rows_before = 0;
    {
      std::ifstream is(dir / "out/lm_train.csv");
      std::string line;
      while (std::getline(is, line))
        if (!line.empty()) ++rows_before;
    }
    REQUIRE(runner.run(base + "--set lm.train.epochs=1 --set lm.train.recall_target=2.0 "
                              "train-lm --resume") == 0);
    std::vector<std::string> rows;
    {
      std::ifstream is(dir / "out/lm_train.csv");
      std::string line;
      while (std::getline(is, line))
        if (!line.empty()) rows.push_back(line);
    }
    CHECK(rows.size() == rows_before + 1);

    // complete the datasets against the trained model
    REQUIRE(runner.run(base + "gen-data --lm " + (dir / "out/lm.ckpt").string()) == 0);
    CHECK(fs::exists(dir / "out/fineked.jsonl"));
    CHECK(fs::exists(dir / "out/batches.jsonl"));
    CHECK(runner.out().find("Easy") != std::string::npos);

    // the disentangler requires the model checkpoint
    CHECK(runner.run(base + "train-krd --lm " + (dir / "out/missing.ckpt").string()) == 4);
    REQUIRE(runner.run(base + "train-krd --lm " + (dir / "out/lm.ckpt").string()) == 0);
    CHECK(fs::exists(dir / "out/krd.ckpt"));
    CHECK(fs::exists(dir / "out/krd_train.csv"));

    const std::string lm = " --lm " + (dir / "out/lm.ckpt").string();
    const std::string krd = " --krd " + (dir / "out/krd.ckpt").string();
    const std::string fineked = (dir / "out/fineked.jsonl").string();

    // per-record edits with snapshots and reports
    REQUIRE(runner.run(base + "edit --editor dike" + lm + krd + " --dataset " + fineked +
                       " --max-records 2") == 0);
    CHECK(fs::exists(dir / "out/edits/dike/snapshot_0.dktn"));
    CHECK(fs::exists(dir / "out/edits/dike/record_0.json"));

    // the zeroed-unrelated debug path reproduces the baseline bitwise
    REQUIRE(runner.run(base + "edit --editor dike --debug-zero-w3" + lm + " --dataset " +
                       fineked + " --max-records 2") == 0);
    REQUIRE(runner.run(base + "edit --editor memit" + lm + " --dataset " + fineked +
                       " --max-records 2") == 0);
    const Tensor zero_w3 = load_tensor(dir / "out/edits/dike-zero-w3/snapshot_0.dktn");
    const Tensor memit = load_tensor(dir / "out/edits/memit/snapshot_0.dktn");
    CHECK(bitwise_equal(zero_w3, memit));

    // evaluation: snapshots path must exist before any computation
    CHECK(runner.run(base + "eval" + lm + " --fineked " + fineked + " --snapshots " +
                     (dir / "out/nowhere").string()) == 4);
    REQUIRE(runner.run(base + "eval" + lm + krd + " --fineked " + fineked +
                       " --editors dike,memit --export-reps") == 0);
    CHECK(fs::exists(dir / "out/reports/fineked_dike.csv"));
    CHECK(fs::exists(dir / "out/reports/fineked_memit.csv"));
    CHECK(fs::exists(dir / "out/reports/fineked_summary.md"));
    CHECK(fs::exists(dir / "out/reports/krd_reps.csv"));

    // snapshot-based evaluation consumes the saved edits; the dataset has
    // more records than saved snapshots, and the gap is reported as an I/O
    // failure before any metric is emitted
    CHECK(runner.run(base + "eval" + lm + " --fineked " + fineked + " --snapshots " +
                     (dir / "out/edits/memit").string() + " --editors memit") == 4);
    CHECK(runner.err().find("missing edit snapshot") != std::string::npos);
  }
  fs::remove_all(dir);
}
