#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedseg/federation.hpp"
#include "fedseg/objectives.hpp"
#include "fedseg/synth.hpp"

namespace fedseg {

/// Experiment description, loaded from a JSON config file (schema documented
/// in the README). iters_per_round is the desk-scaled stand-in for the
/// reference 800-iteration rounds.
struct ExperimentConfig {
  std::string scenario = "demo";
  std::vector<ClientConfig> clients;
  std::vector<std::string> strategies;  // row names: presets plus Single/Central
  int rounds = 10;                      // P
  int iters_per_round = 100;            // Q
  int batch_size = 8;
  int patch_size = 32;
  int kfold = 2;
  std::uint64_t seed = 0;
  bool parallel_clients = false;
  double lesion_center_prob = 0.0;
  double proximal_mu = 0.01;
  ModelConfig model;
  OptimizerConfig optimizer;
  std::filesystem::path output_dir = "out";

  void validate() const;  // throws std::invalid_argument
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct FoldSplit {
  std::vector<std::size_t> train;  // indices into the client's case list
  std::vector<std::size_t> test;
};

/// Deterministic shuffled partition per client; folds are disjoint and
/// exhaustive, sized with the larger folds first when the count is uneven.
/// Result is indexed [client][fold]; the same fold index selects aligned
/// train/test across clients. Throws when a client has fewer than k cases.
std::vector<std::vector<FoldSplit>> kfold_split(const std::vector<std::string>& client_ids,
                                                const std::vector<std::size_t>& case_counts,
                                                int k, std::uint64_t seed);

/// Eval-mode forward over whole images; per-case confusion at threshold 0.5.
MetricsReport evaluate_model(const ModelConfig& model, const ParamSet& params,
                             const std::vector<Sample>& cases);

/// Deterministic per-client data for the experiment; clients sorted by id.
std::vector<std::vector<Sample>> generate_experiment_data(const ExperimentConfig& config);

struct ClientFold {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Materialized splits for one fold, per client (id order).
std::vector<ClientFold> materialize_fold(const std::vector<std::vector<Sample>>& data,
                                         const std::vector<std::vector<FoldSplit>>& splits,
                                         int fold);

/// One comparison row on one fold. `row` is a strategy preset name, "Single"
/// (per-client local training) or "Central" (pooled training). Returns
/// per-client metrics in id order. When `persist_dir` is non-null, round logs
/// and checkpoints are written beneath it.
std::vector<MetricsReport> run_strategy_fold(const std::string& row,
                                             const ExperimentConfig& config,
                                             const std::vector<ClientFold>& fold_data,
                                             int fold_index,
                                             const std::filesystem::path* persist_dir);

/// "Single" row over all folds: trains each client only on its own data;
/// returns fold-averaged metrics, one entry per client.
std::vector<MetricsReport> run_single(const ExperimentConfig& config);

/// "Central" row over all folds: one model on the pooled training data,
/// evaluated per client; budget equals one federated client (P*Q iterations).
std::vector<MetricsReport> run_central(const ExperimentConfig& config);

struct ComparisonTable {
  std::vector<std::string> strategies;                       // row names
  std::vector<std::string> client_ids;                       // column group
  static constexpr std::array<const char*, 4> kMetrics = {"c_dice", "v_dice", "v_tpr",
                                                          "v_fpr"};
  // values[row][metric][column]; columns are clients in id order plus "avg";
  // fractions in [0,1] (rendered x100), NaN marks a failed cell
  std::vector<std::array<std::vector<double>, 4>> values;
  std::vector<std::string> failures;  // "<strategy> fold <k>: <error>"

  std::string to_csv() const;
  std::string to_text() const;
};

/// Runs every configured strategy on identical folds and seeds, persists
/// table.csv / table.txt / ratios.csv / per-strategy round logs and
/// checkpoints under config.output_dir, and returns the table. A failing
/// strategy marks its cells NaN and the remaining rows still run.
ComparisonTable compare(const ExperimentConfig& config);

}  // namespace fedseg
