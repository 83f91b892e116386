#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dike/edit.hpp"
#include "dike/krd.hpp"
#include "dike/lm.hpp"
#include "dike/worldgen.hpp"

namespace dike {

struct EvalSettings {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::uint32_t> batch_sizes = {1, 2, 4, 8};
  std::uint32_t sweep_subjects = 16;
  std::uint64_t data_seed = 7;
};

/// Whole-run configuration. Every default is either a scaled training
/// hyperparameter or a recorded design choice; validation rejects unknown
/// keys so typos cannot silently fall back to defaults.
struct RunConfig {
  std::filesystem::path out_dir = "out";
  WorldConfig world;
  LmConfig lm;  // vocab is filled from the generated world
  std::uint64_t lm_init_seed = 2;
  TrainLmConfig lm_train;
  double lm_prefix_fraction = 0.25;
  KrdConfig krd;
  std::uint64_t krd_init_seed = 6;
  std::uint32_t krd_heldout = 64;
  EditConfig edit;
  std::string batch_order = "dataset";  // or "reversed"
  EvalSettings eval;

  std::string to_json_text() const;
  std::string hash() const;
  /// Output directory after applying the environment root override.
  std::filesystem::path resolved_out_dir() const;
};

RunConfig default_config();
RunConfig config_from_json_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {});

/// Environment variable naming the output root for relative out_dir values.
inline constexpr const char* kOutRootEnv = "DIKE_OUT_ROOT";

}  // namespace dike
