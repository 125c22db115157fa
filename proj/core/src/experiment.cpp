#include "fedseg/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedseg/checkpoint.hpp"

namespace fedseg {

namespace {

// seed-derivation tags; all streams hang off (config.seed, fold, tag, ...)
constexpr std::uint64_t kTagData = 0xd474;
constexpr std::uint64_t kTagFolds = 0xf01d;
constexpr std::uint64_t kTagModel = 0x4d0d;
constexpr std::uint64_t kTagTask = 0x7a5c;

std::pair<int, int> json_range_int(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) {
    throw std::invalid_argument("config: expected [min, max] pair");
  }
  return {j[0].get<int>(), j[1].get<int>()};
}

std::pair<double, double> json_range(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) {
    throw std::invalid_argument("config: expected [min, max] pair");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

ClientConfig client_from_json(const nlohmann::json& j) {
  ClientConfig c;
  c.client_id = j.at("client_id").get<std::string>();
  c.n_cases = j.value("n_cases", c.n_cases);
  c.image_size = j.value("image_size", c.image_size);
  if (j.contains("brain_axis")) std::tie(c.brain_axis_min, c.brain_axis_max) = json_range(j["brain_axis"]);
  c.intensity_mean = j.value("intensity_mean", c.intensity_mean);
  c.intensity_std = j.value("intensity_std", c.intensity_std);
  if (j.contains("lesion_count")) std::tie(c.lesion_count_min, c.lesion_count_max) = json_range_int(j["lesion_count"]);
  if (j.contains("lesion_sigma")) std::tie(c.lesion_sigma_min, c.lesion_sigma_max) = json_range(j["lesion_sigma"]);
  if (j.contains("target_ratio")) std::tie(c.ratio_min, c.ratio_max) = json_range(j["target_ratio"]);
  c.lesion_contrast = j.value("lesion_contrast", c.lesion_contrast);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.seed = j.value("seed", c.seed);
  c.max_ratio_retries = j.value("max_ratio_retries", c.max_ratio_retries);
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (clients.empty()) fail("no clients");
  if (kfold < 2) fail("kfold must be >= 2");
  for (const auto& c : clients) {
    c.validate();
    if (c.n_cases < kfold) {
      fail("client '" + c.client_id + "' has " + std::to_string(c.n_cases) +
           " cases, fewer than kfold=" + std::to_string(kfold));
    }
    if (patch_size > c.image_size) fail("patch_size exceeds image_size of '" + c.client_id + "'");
  }
  if (rounds < 1 || iters_per_round < 1) fail("rounds and iters_per_round must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  for (const auto& s : strategies) {
    if (s != "Single" && s != "Central") StrategyConfig::preset(s);  // throws on unknown
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("cannot open config file '" + path.string() + "'");
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed JSON in '" + path.string() + "': " + e.what());
  }

  ExperimentConfig cfg;
  cfg.scenario = j.value("scenario", cfg.scenario);
  cfg.rounds = j.value("rounds", cfg.rounds);
  cfg.iters_per_round = j.value("iters_per_round", cfg.iters_per_round);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  cfg.kfold = j.value("kfold", cfg.kfold);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.parallel_clients = j.value("parallel_clients", cfg.parallel_clients);
  cfg.lesion_center_prob = j.value("lesion_center_prob", cfg.lesion_center_prob);
  cfg.proximal_mu = j.value("proximal_mu", cfg.proximal_mu);
  if (j.contains("output_dir")) cfg.output_dir = j["output_dir"].get<std::string>();
  if (j.contains("strategies")) cfg.strategies = j["strategies"].get<std::vector<std::string>>();
  if (j.contains("model")) {
    const auto& m = j["model"];
    cfg.model.in_channels = m.value("in_channels", cfg.model.in_channels);
    if (m.contains("blocks")) cfg.model.blocks = m["blocks"].get<std::vector<std::size_t>>();
    cfg.model.kernel = m.value("kernel", cfg.model.kernel);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    cfg.optimizer.learning_rate = o.value("learning_rate", cfg.optimizer.learning_rate);
    cfg.optimizer.momentum = o.value("momentum", cfg.optimizer.momentum);
    cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
  }
  for (const auto& cj : j.at("clients")) cfg.clients.push_back(client_from_json(cj));
  if (cfg.strategies.empty()) {
    cfg.strategies = {"Single", "Central"};
    for (const auto& name : StrategyConfig::preset_names()) cfg.strategies.push_back(name);
  }
  cfg.validate();
  return cfg;
}

std::vector<std::vector<FoldSplit>> kfold_split(const std::vector<std::string>& client_ids,
                                                const std::vector<std::size_t>& case_counts,
                                                int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (client_ids.size() != case_counts.size()) {
    throw std::invalid_argument("kfold_split: id/count size mismatch");
  }
  std::vector<std::vector<FoldSplit>> result(client_ids.size());
  Rng base(mix_seed(seed, kTagFolds));

  for (std::size_t ci = 0; ci < client_ids.size(); ++ci) {
    const std::size_t n = case_counts[ci];
    if (n < static_cast<std::size_t>(k)) {
      throw std::invalid_argument("kfold_split: client '" + client_ids[ci] + "' has " +
                                  std::to_string(n) + " cases, fewer than k=" +
                                  std::to_string(k));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = base.fork(ci);
    for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates
      const std::size_t j = rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }

    // larger folds first when n does not divide evenly
    const std::size_t base_size = n / static_cast<std::size_t>(k);
    const std::size_t remainder = n % static_cast<std::size_t>(k);
    std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
    std::size_t pos = 0;
    for (std::size_t f = 0; f < static_cast<std::size_t>(k); ++f) {
      const std::size_t sz = base_size + (f < remainder ? 1 : 0);
      folds[f].test.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                           order.begin() + static_cast<std::ptrdiff_t>(pos + sz));
      pos += sz;
    }
    for (std::size_t f = 0; f < folds.size(); ++f) {
      for (std::size_t g = 0; g < folds.size(); ++g) {
        if (g == f) continue;
        folds[f].train.insert(folds[f].train.end(), folds[g].test.begin(),
                              folds[g].test.end());
      }
      std::sort(folds[f].train.begin(), folds[f].train.end());
      std::sort(folds[f].test.begin(), folds[f].test.end());
    }
    result[ci] = std::move(folds);
  }
  return result;
}

MetricsReport evaluate_model(const ModelConfig& model, const ParamSet& params,
                             const std::vector<Sample>& cases) {
  if (cases.empty()) throw std::invalid_argument("evaluate_model: no cases");
  SegNet net(model);
  ParamSet working = params;  // eval mode never mutates, but forward is non-const
  std::vector<ConfusionCounts> per_case;
  per_case.reserve(cases.size());
  for (const auto& s : cases) {
    Tensor input = Tensor::from_data(
        {1, 1, s.image.extent(1), s.image.extent(2)},
        std::vector<double>(s.image.data().begin(), s.image.data().end()));
    Tensor pred = net.forward(working, input, BnMode::Eval);
    Tensor label = Tensor::from_data(
        {1, 1, s.label.extent(1), s.label.extent(2)},
        std::vector<double>(s.label.data().begin(), s.label.data().end()));
    per_case.push_back(confusion(pred, label, 0.5));
  }
  return aggregate_metrics(per_case);
}

std::vector<std::vector<Sample>> generate_experiment_data(const ExperimentConfig& config) {
  std::vector<ClientConfig> sorted = config.clients;
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientConfig& a, const ClientConfig& b) { return a.client_id < b.client_id; });
  std::vector<std::vector<Sample>> data;
  data.reserve(sorted.size());
  for (auto cfg : sorted) {
    // the experiment seed perturbs per-client data so seed sweeps resample
    cfg.seed = mix_seed(mix_seed(config.seed, kTagData), cfg.seed);
    data.push_back(generate_client(cfg));
  }
  return data;
}

std::vector<ClientFold> materialize_fold(const std::vector<std::vector<Sample>>& data,
                                         const std::vector<std::vector<FoldSplit>>& splits,
                                         int fold) {
  std::vector<ClientFold> out(data.size());
  for (std::size_t ci = 0; ci < data.size(); ++ci) {
    const FoldSplit& split = splits[ci][static_cast<std::size_t>(fold)];
    for (std::size_t idx : split.train) out[ci].train.push_back(data[ci][idx]);
    for (std::size_t idx : split.test) out[ci].test.push_back(data[ci][idx]);
  }
  return out;
}

namespace {

std::vector<std::string> sorted_client_ids(const ExperimentConfig& config) {
  std::vector<std::string> ids;
  for (const auto& c : config.clients) ids.push_back(c.client_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

SegTask::Options task_options(const ExperimentConfig& config, const StrategyConfig& strategy) {
  SegTask::Options o;
  o.batch_size = config.batch_size;
  o.patch_size = config.patch_size;
  o.lesion_center_prob = config.lesion_center_prob;
  o.ability_variant = strategy.aggregation == Aggregation::AbilityEntropy
                          ? Aggregation::AbilityEntropy
                          : Aggregation::AbilityProb;
  return o;
}

std::ofstream open_log(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open round log '" + path.string() + "'");
  return os;
}

}  // namespace

std::vector<MetricsReport> run_strategy_fold(const std::string& row,
                                             const ExperimentConfig& config,
                                             const std::vector<ClientFold>& fold_data,
                                             int fold_index,
                                             const std::filesystem::path* persist_dir) {
  const std::vector<std::string> ids = sorted_client_ids(config);
  const std::size_t n = ids.size();
  if (fold_data.size() != n) {
    throw std::invalid_argument("run_strategy_fold: fold data does not match client count");
  }
  const std::uint64_t fold_seed = mix_seed(config.seed, static_cast<std::uint64_t>(fold_index));
  const std::uint64_t model_seed = mix_seed(fold_seed, kTagModel);
  const std::uint64_t digest = model_config_digest(config.model);

  FederationConfig fed;
  fed.rounds = config.rounds;
  fed.iters_per_round = config.iters_per_round;
  fed.parallel_clients = config.parallel_clients;

  auto make_state = [&](const std::string& id) {
    ClientState state;
    state.client_id = id;
    state.params = SegNet::build_params(config.model, model_seed);
    state.optimizer = config.optimizer;
    return state;
  };
  auto task_rng = [&](std::size_t client_index) {
    return Rng(mix_seed(mix_seed(fold_seed, kTagTask), client_index));
  };

  std::vector<MetricsReport> reports;

  if (row == "Single") {
    const StrategyConfig strategy = StrategyConfig::preset("FedAvg");
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<ClientState> states;
      states.push_back(make_state(ids[i]));
      SegTask task(&fold_data[i].train, config.model, task_options(config, strategy),
                   task_rng(i));
      std::vector<LocalTask*> tasks = {&task};
      std::ofstream log;
      std::ostream* log_ptr = nullptr;
      if (persist_dir) {
        log = open_log(*persist_dir / ids[i] / "rounds.jsonl");
        log_ptr = &log;
      }
      FederationResult result = run_federation(std::move(states), tasks, strategy, fed, log_ptr);
      if (persist_dir) {
        save_checkpoint(*persist_dir / (ids[i] + ".ckpt"), result.clients[0].params, digest);
      }
      reports.push_back(evaluate_model(config.model, result.clients[0].params, fold_data[i].test));
    }
    return reports;
  }

  if (row == "Central") {
    const StrategyConfig strategy = StrategyConfig::preset("FedAvg");
    std::vector<Sample> pooled;
    for (const auto& cf : fold_data) {
      pooled.insert(pooled.end(), cf.train.begin(), cf.train.end());
    }
    std::vector<ClientState> states;
    states.push_back(make_state("central"));
    SegTask task(&pooled, config.model, task_options(config, strategy), task_rng(0));
    std::vector<LocalTask*> tasks = {&task};
    std::ofstream log;
    std::ostream* log_ptr = nullptr;
    if (persist_dir) {
      log = open_log(*persist_dir / "rounds.jsonl");
      log_ptr = &log;
    }
    FederationResult result = run_federation(std::move(states), tasks, strategy, fed, log_ptr);
    if (persist_dir) {
      save_checkpoint(*persist_dir / "central.ckpt", result.clients[0].params, digest);
    }
    for (std::size_t i = 0; i < n; ++i) {
      reports.push_back(evaluate_model(config.model, result.clients[0].params, fold_data[i].test));
    }
    return reports;
  }

  StrategyConfig strategy = StrategyConfig::preset(row, config.proximal_mu);
  std::vector<ClientState> states;
  std::vector<std::unique_ptr<SegTask>> tasks_owned;
  std::vector<LocalTask*> tasks;
  for (std::size_t i = 0; i < n; ++i) {
    states.push_back(make_state(ids[i]));
    tasks_owned.push_back(std::make_unique<SegTask>(
        &fold_data[i].train, config.model, task_options(config, strategy), task_rng(i)));
    tasks.push_back(tasks_owned.back().get());
  }
  std::ofstream log;
  std::ostream* log_ptr = nullptr;
  if (persist_dir) {
    log = open_log(*persist_dir / "rounds.jsonl");
    log_ptr = &log;
  }
  FederationResult result = run_federation(std::move(states), tasks, strategy, fed, log_ptr);
  for (std::size_t i = 0; i < n; ++i) {
    if (persist_dir) {
      save_checkpoint(*persist_dir / (ids[i] + ".ckpt"), result.clients[i].params, digest);
    }
    reports.push_back(evaluate_model(config.model, result.clients[i].params, fold_data[i].test));
  }
  return reports;
}

namespace {

std::vector<std::vector<FoldSplit>> experiment_folds(const ExperimentConfig& config) {
  std::vector<std::string> ids = sorted_client_ids(config);
  std::vector<std::size_t> counts;
  std::vector<ClientConfig> sorted = config.clients;
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientConfig& a, const ClientConfig& b) { return a.client_id < b.client_id; });
  for (const auto& c : sorted) counts.push_back(static_cast<std::size_t>(c.n_cases));
  return kfold_split(ids, counts, config.kfold, config.seed);
}

MetricsReport average_reports(const std::vector<MetricsReport>& folds) {
  MetricsReport avg;
  for (const auto& r : folds) {
    avg.c_dice += r.c_dice;
    avg.v_dice += r.v_dice;
    avg.v_tpr += r.v_tpr;
    avg.v_fpr += r.v_fpr;
    avg.case_dice.insert(avg.case_dice.end(), r.case_dice.begin(), r.case_dice.end());
  }
  const double k = static_cast<double>(folds.size());
  avg.c_dice /= k;
  avg.v_dice /= k;
  avg.v_tpr /= k;
  avg.v_fpr /= k;
  return avg;
}

std::vector<MetricsReport> run_row_all_folds(const ExperimentConfig& config,
                                             const std::string& row) {
  const auto data = generate_experiment_data(config);
  const auto splits = experiment_folds(config);
  const std::size_t n = data.size();
  std::vector<std::vector<MetricsReport>> per_client(n);
  for (int f = 0; f < config.kfold; ++f) {
    const auto fold_data = materialize_fold(data, splits, f);
    const auto reports = run_strategy_fold(row, config, fold_data, f, nullptr);
    for (std::size_t i = 0; i < n; ++i) per_client[i].push_back(reports[i]);
  }
  std::vector<MetricsReport> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(average_reports(per_client[i]));
  return out;
}

}  // namespace

std::vector<MetricsReport> run_single(const ExperimentConfig& config) {
  config.validate();
  return run_row_all_folds(config, "Single");
}

std::vector<MetricsReport> run_central(const ExperimentConfig& config) {
  config.validate();
  return run_row_all_folds(config, "Central");
}

namespace {

std::string format_cell(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
  return buf;
}

}  // namespace

std::string ComparisonTable::to_csv() const {
  std::ostringstream os;
  os << "strategy";
  for (const char* metric : kMetrics) {
    for (const auto& id : client_ids) os << "," << metric << "_" << id;
    os << "," << metric << "_avg";
  }
  os << "\n";
  for (std::size_t r = 0; r < strategies.size(); ++r) {
    os << strategies[r];
    for (std::size_t m = 0; m < kMetrics.size(); ++m) {
      for (double v : values[r][m]) os << "," << format_cell(v);
    }
    os << "\n";
  }
  return os.str();
}

std::string ComparisonTable::to_text() const {
  std::ostringstream os;
  const std::size_t name_w = 10;
  os << std::string(name_w, ' ');
  for (const char* metric : kMetrics) {
    std::string group = metric;
    for (auto& ch : group) ch = static_cast<char>(std::toupper(ch));
    const std::size_t group_width = (client_ids.size() + 1) * 9;
    os << "| " << group << std::string(group_width - group.size() - 2, ' ');
  }
  os << "\n" << std::string(name_w, ' ');
  for (std::size_t m = 0; m < kMetrics.size(); ++m) {
    os << "|";
    for (const auto& id : client_ids) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), " %7s ", id.c_str());
      os << buf;
    }
    os << "     avg ";
  }
  os << "\n";
  for (std::size_t r = 0; r < strategies.size(); ++r) {
    char name[16];
    std::snprintf(name, sizeof(name), "%-10s", strategies[r].c_str());
    os << name;
    for (std::size_t m = 0; m < kMetrics.size(); ++m) {
      os << "|";
      for (double v : values[r][m]) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), " %7s ", format_cell(v).c_str());
        os << buf;
      }
    }
    os << "\n";
  }
  return os.str();
}

ComparisonTable compare(const ExperimentConfig& config) {
  config.validate();
  if (config.strategies.empty()) {
    throw std::invalid_argument("compare: no strategies configured");
  }
  std::filesystem::create_directories(config.output_dir);

  const auto data = generate_experiment_data(config);
  const auto ids = sorted_client_ids(config);
  const auto splits = experiment_folds(config);
  const std::size_t n = ids.size();

  // Fig-1-style per-case ratio export
  {
    std::ofstream os(config.output_dir / "ratios.csv", std::ios::trunc);
    os << "client_id,case_id,ratio\n";
    for (std::size_t ci = 0; ci < n; ++ci) {
      for (const auto& s : data[ci]) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", lesion_ratio(s).value_or(0.0));
        os << s.client_id << "," << s.case_id << "," << buf << "\n";
      }
    }
  }

  ComparisonTable table;
  table.strategies = config.strategies;
  table.client_ids = ids;

  for (const auto& row : config.strategies) {
    std::array<std::vector<double>, 4> row_values;
    std::vector<std::vector<MetricsReport>> per_client(n);
    bool failed = false;
    for (int f = 0; f < config.kfold && !failed; ++f) {
      const auto fold_data = materialize_fold(data, splits, f);
      const std::filesystem::path dir =
          config.output_dir / row / ("fold" + std::to_string(f));
      try {
        const auto reports = run_strategy_fold(row, config, fold_data, f, &dir);
        for (std::size_t i = 0; i < n; ++i) per_client[i].push_back(reports[i]);
      } catch (const std::exception& e) {
        table.failures.push_back(row + " fold " + std::to_string(f) + ": " + e.what());
        failed = true;
      }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (failed) {
      for (auto& mv : row_values) mv.assign(n + 1, nan);
    } else {
      std::vector<MetricsReport> averaged;
      for (std::size_t i = 0; i < n; ++i) averaged.push_back(average_reports(per_client[i]));
      for (std::size_t m = 0; m < 4; ++m) row_values[m].resize(n + 1, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        row_values[0][i] = averaged[i].c_dice;
        row_values[1][i] = averaged[i].v_dice;
        row_values[2][i] = averaged[i].v_tpr;
        row_values[3][i] = averaged[i].v_fpr;
      }
      for (std::size_t m = 0; m < 4; ++m) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += row_values[m][i];
        row_values[m][n] = sum / static_cast<double>(n);
      }
    }
    table.values.push_back(std::move(row_values));
  }

  {
    std::ofstream os(config.output_dir / "table.csv", std::ios::trunc);
    os << table.to_csv();
  }
  {
    std::ofstream os(config.output_dir / "table.txt", std::ios::trunc);
    os << table.to_text();
    if (!table.failures.empty()) {
      os << "\nfailures:\n";
      for (const auto& f : table.failures) os << "  " << f << "\n";
    }
  }
  return table;
}

}  // namespace fedseg
