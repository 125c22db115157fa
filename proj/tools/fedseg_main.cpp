#include <algorithm>
#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedseg/checkpoint.hpp"
#include "fedseg/experiment.hpp"
#include "fedseg/federation.hpp"
#include "fedseg/objectives.hpp"
#include "fedseg/synth.hpp"

namespace {

void print_metrics(const std::string& label, const fedseg::MetricsReport& m) {
  std::printf("%-12s C-Dice %6.2f  V-Dice %6.2f  V-TPR %6.2f  V-FPR %6.2f\n",
              label.c_str(), m.c_dice * 100.0, m.v_dice * 100.0, m.v_tpr * 100.0,
              m.v_fpr * 100.0);
}

int cmd_gen_data(const std::string& config_path, const std::string& out_override) {
  const auto config = fedseg::load_experiment_config(config_path);
  const auto data = fedseg::generate_experiment_data(config);
  std::vector<fedseg::Sample> all;
  for (const auto& client : data) {
    all.insert(all.end(), client.begin(), client.end());
  }
  const std::filesystem::path dir =
      out_override.empty() ? config.output_dir / "dataset" : std::filesystem::path(out_override);
  fedseg::save_dataset(all, dir, fedseg::client_config_digest(config.clients));
  std::printf("wrote %zu cases from %zu clients to %s\n", all.size(), data.size(),
              dir.string().c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& strategy, int fold) {
  auto config = fedseg::load_experiment_config(config_path);
  if (fold < 0 || fold >= config.kfold) {
    throw std::invalid_argument("fold index out of range");
  }
  const auto data = fedseg::generate_experiment_data(config);
  std::vector<std::string> ids;
  std::vector<std::size_t> counts;
  for (const auto& client : data) {
    ids.push_back(client.front().client_id);
    counts.push_back(client.size());
  }
  const auto splits = fedseg::kfold_split(ids, counts, config.kfold, config.seed);
  const auto fold_data = fedseg::materialize_fold(data, splits, fold);
  const std::filesystem::path dir =
      config.output_dir / strategy / ("fold" + std::to_string(fold));
  const auto reports = fedseg::run_strategy_fold(strategy, config, fold_data, fold, &dir);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    print_metrics(ids[i], reports[i]);
  }
  std::printf("artifacts in %s\n", dir.string().c_str());
  return 0;
}

int cmd_compare(const std::string& config_path) {
  const auto config = fedseg::load_experiment_config(config_path);
  const auto table = fedseg::compare(config);
  std::cout << table.to_text();
  if (!table.failures.empty()) {
    std::cout << "failures:\n";
    for (const auto& f : table.failures) std::cout << "  " << f << "\n";
  }
  std::cout << "table.csv / table.txt / ratios.csv written to " << config.output_dir.string()
            << "\n";
  return table.failures.empty() ? 0 : 1;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_dir) {
  const auto loaded = fedseg::load_checkpoint(checkpoint_path);
  const auto model = fedseg::SegNet::config_from_params(loaded.params);
  const auto samples = fedseg::load_dataset(dataset_dir);
  if (samples.empty()) {
    throw std::runtime_error("dataset is empty");
  }
  std::map<std::string, std::vector<fedseg::Sample>> by_client;
  for (const auto& s : samples) by_client[s.client_id].push_back(s);
  std::vector<fedseg::Sample> all;
  for (const auto& [id, cases] : by_client) {
    print_metrics(id, fedseg::evaluate_model(model, loaded.params, cases));
    all.insert(all.end(), cases.begin(), cases.end());
  }
  if (by_client.size() > 1) {
    print_metrics("overall", fedseg::evaluate_model(model, loaded.params, all));
  }
  return 0;
}

int cmd_gradcheck(int seeds) {
  using namespace fedseg;
  ModelConfig mini;
  mini.blocks = {4, 6};
  const SegNet net(mini);

  double worst = 0.0;
  std::string worst_param;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(mix_seed(0x6c0deULL, static_cast<std::uint64_t>(seed)));
    Tensor input({1, 1, 8, 8});
    for (auto& v : input.data()) v = rng.normal(0.0, 1.0);
    Tensor label({1, 1, 8, 8});
    for (auto& v : label.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;

    auto f = [&](ParamSet& p, bool want_grad) {
      SegNet::Tape tape;
      Tensor pred = net.forward(p, input, BnMode::Train, &tape);
      SoftDiceResult dice = soft_dice_loss(pred, label);
      if (want_grad) net.backward(p, tape, dice.grad);
      return dice.loss;
    };
    const ParamSet params = SegNet::build_params(mini, static_cast<std::uint64_t>(seed));
    const GradCheckReport report = grad_check(f, params, 1e-5);
    if (report.max_rel_error > worst) {
      worst = report.max_rel_error;
      worst_param = report.worst_param;
    }
  }
  std::printf("full-model gradient check over %d seeds: max relative error %.3e (%s)\n",
              seeds, worst, worst_param.c_str());
  const bool ok = worst < 1e-4;
  std::printf("%s\n", ok ? "PASS (< 1e-4)" : "FAIL (>= 1e-4)");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedseg - federated lesion-segmentation simulator"};
  app.require_subcommand(1);

  std::string config_path, out_override, strategy = "FedMSRW";
  std::string checkpoint_path, dataset_dir;
  int fold = 0;
  int seeds = 5;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen->add_option("config", config_path, "experiment config JSON")->required();
  gen->add_option("--out", out_override, "dataset directory (default <output_dir>/dataset)");

  auto* train = app.add_subcommand("train", "train one strategy on one fold");
  train->add_option("config", config_path, "experiment config JSON")->required();
  train->add_option("--strategy", strategy, "preset, Single, or Central");
  train->add_option("--fold", fold, "fold index (default 0)");

  auto* cmp = app.add_subcommand("compare", "run every configured strategy");
  cmp->add_option("config", config_path, "experiment config JSON")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("dataset", dataset_dir, "dataset directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc->add_option("--seeds", seeds, "number of seeds (default 5)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_override);
    if (train->parsed()) return cmd_train(config_path, strategy, fold);
    if (cmp->parsed()) return cmd_compare(config_path);
    if (eval->parsed()) return cmd_eval(checkpoint_path, dataset_dir);
    if (gc->parsed()) return cmd_gradcheck(seeds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
