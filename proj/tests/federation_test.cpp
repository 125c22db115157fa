#include <cmath>
#include <limits>
#include <sstream>

#include <stdexcept>

#include <doctest.h>

#include "fedseg/federation.hpp"
#include "fedseg/objectives.hpp"
#include "fedseg/synth.hpp"

using namespace fedseg;

namespace {

ParamSet toy_params(double w0, double b0) {
  ParamSet p;
  p.add("w", ParamTag::Rest, true, Tensor::from_data({1}, {w0}));
  p.add("b", ParamTag::Norm, true, Tensor::from_data({1}, {b0}));
  return p;
}

// 2-parameter least-squares client; ability and lesion ratio are configurable
// so protocol behavior can be pinned independently of any network.
class ToyTask final : public LocalTask {
 public:
  ToyTask(double x, double y, double ratio, std::optional<double> fixed_ability = {})
      : x_(x), y_(y), ratio_(ratio), fixed_ability_(fixed_ability) {}

  IterationOutcome forward_backward(ParamSet& p, double loss_weight) override {
    const double w = p.at("w").value[0];
    const double b = p.at("b").value[0];
    const double r = w * x_ + b - y_;
    p.at("w").grad[0] += loss_weight * r * x_;
    p.at("b").grad[0] += loss_weight * r;
    IterationOutcome out;
    out.loss = loss_weight * 0.5 * r * r;
    out.ability = fixed_ability_ ? *fixed_ability_ : 1.0 / (1.0 + 0.5 * r * r);
    out.lesion_ratio = ratio_;
    out.lesion_voxels = ratio_ * 100.0;
    return out;
  }

 private:
  double x_, y_, ratio_;
  std::optional<double> fixed_ability_;
};

ClientState toy_client(const std::string& id, double w0, double b0,
                       double lr = 0.1, double momentum = 0.0) {
  ClientState c;
  c.client_id = id;
  c.params = toy_params(w0, b0);
  c.optimizer.learning_rate = lr;
  c.optimizer.momentum = momentum;
  c.optimizer.weight_decay = 0.0;
  return c;
}

}  // namespace

TEST_CASE("ability_score on perfect prediction is 1") {
  const Tensor y = Tensor::from_data({4}, {1, 0, 0, 1});
  const auto p = ability_score(y, y);
  REQUIRE(p.has_value());
  CHECK(*p == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ability_score worked example") {
  const Tensor y = Tensor::from_data({4}, {1, 0, 0, 1});
  const Tensor pred = Tensor::from_data({4}, {0.8, 0.2, 0.1, 0.9});
  const auto p = ability_score(pred, y);
  REQUIRE(p.has_value());
  CHECK(std::fabs(*p - 0.825714) < 1e-6);
}

TEST_CASE("ability_score flat 0.5 prediction") {
  const Tensor y = Tensor::from_data({4}, {1, 1, 0, 0});
  const Tensor pred = Tensor::from_data({4}, {0.5, 0.5, 0.5, 0.5});
  const double dice_loss = soft_dice_loss(pred, y).loss;
  const auto p = ability_score(pred, y);
  REQUIRE(p.has_value());
  CHECK(*p == doctest::Approx(0.5 * (1.0 - dice_loss)).epsilon(1e-12));
}

TEST_CASE("ability_score skips all-zero labels") {
  const Tensor y = Tensor::from_data({3}, {0, 0, 0});
  const Tensor pred = Tensor::from_data({3}, {0.2, 0.3, 0.4});
  CHECK_FALSE(ability_score(pred, y).has_value());
}

TEST_CASE("ability_score_entropy values") {
  const Tensor y = Tensor::from_data({4}, {1, 0, 0, 1});
  // saturated predictions carry almost no entropy
  const Tensor sat = Tensor::from_data({4}, {1e-9, 1e-9, 1e-9, 1.0 - 1e-9});
  CHECK(ability_score_entropy(sat, y) < 1e-6);
  // flat 0.5: -0.5*ln(0.5) per voxel before the dice factor
  const Tensor flat = Tensor::from_data({4}, {0.5, 0.5, 0.5, 0.5});
  const double dice_loss = soft_dice_loss(flat, y).loss;
  CHECK(ability_score_entropy(flat, y) ==
        doctest::Approx(0.34657359 * (1.0 - dice_loss)).epsilon(1e-6));
}

TEST_CASE("ability_score_entropy is non-negative") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor pred({8}), y({8});
    for (auto& v : pred.data()) v = rng.uniform(1e-6, 1.0 - 1e-6);
    for (auto& v : y.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    CHECK(ability_score_entropy(pred, y) >= 0.0);
  }
}

TEST_CASE("local_loss_weight symmetry and worked example") {
  const std::vector<double> equal = {0.02, 0.02, 0.02};
  for (std::size_t i = 0; i < equal.size(); ++i) {
    CHECK(local_loss_weight(equal, i) == doctest::Approx(1.0).epsilon(1e-12));
  }

  const std::vector<double> vr = {0.01, 0.02, 0.03};
  CHECK(std::fabs(local_loss_weight(vr, 0) - 2.0) < 1e-12);
  CHECK(std::fabs(local_loss_weight(vr, 1) - 1.0) < 1e-12);
  CHECK(std::fabs(local_loss_weight(vr, 2) - 2.0 / 3.0) < 1e-12);

  // w_i * vr_i == mean(vr) for every i
  const double mean = (0.01 + 0.02 + 0.03) / 3.0;
  for (std::size_t i = 0; i < vr.size(); ++i) {
    CHECK(std::fabs(local_loss_weight(vr, i) * vr[i] - mean) < 1e-12);
  }
}

TEST_CASE("local_loss_weight floors zeros and caps the result") {
  const std::vector<double> vr = {0.0, 0.1};
  const double w0 = local_loss_weight(vr, 0, 1e-6, 10.0);
  CHECK(w0 == doctest::Approx(10.0 * 2).epsilon(1e-12));  // capped at 10*N
  CHECK(std::isfinite(w0));
}

TEST_CASE("aggregate hand values") {
  ParamSet a = toy_params(1.0, 0.0);
  ParamSet b = toy_params(3.0, 0.0);
  const std::vector<const ParamSet*> clients = {&a, &b};

  const std::vector<double> uniform = {1.0, 1.0};
  CHECK(std::fabs(aggregate(clients, uniform, false).at("w").value[0] - 2.0) < 1e-12);

  const std::vector<double> weighted = {1.0, 3.0};
  CHECK(std::fabs(aggregate(clients, weighted, false).at("w").value[0] - 2.5) < 1e-12);
}

TEST_CASE("aggregate weight-scale invariance") {
  ParamSet a = toy_params(0.37, -1.4);
  ParamSet b = toy_params(-2.11, 0.9);
  const std::vector<const ParamSet*> clients = {&a, &b};
  const std::vector<double> w1 = {0.3, 0.7};
  const std::vector<double> w2 = {0.3 * 7.31, 0.7 * 7.31};
  const ParamSet r1 = aggregate(clients, w1, false);
  const ParamSet r2 = aggregate(clients, w2, false);
  CHECK(std::fabs(r1.at("w").value[0] - r2.at("w").value[0]) < 1e-12);
  CHECK(std::fabs(r1.at("b").value[0] - r2.at("b").value[0]) < 1e-12);

  // equal weights of any positive scale match uniform
  const std::vector<double> equal = {4.2, 4.2};
  const std::vector<double> ones = {1.0, 1.0};
  CHECK(std::fabs(aggregate(clients, equal, false).at("w").value[0] -
                  aggregate(clients, ones, false).at("w").value[0]) < 1e-12);
}

TEST_CASE("aggregate zero total weight falls back to uniform") {
  ParamSet a = toy_params(1.0, 0.0);
  ParamSet b = toy_params(3.0, 0.0);
  const std::vector<const ParamSet*> clients = {&a, &b};
  const std::vector<double> zeros = {0.0, 0.0};
  CHECK(aggregate(clients, zeros, false).at("w").value[0] ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("aggregate names the first differing entry") {
  ParamSet a = toy_params(1.0, 0.0);
  ParamSet b;
  b.add("w", ParamTag::Rest, true, Tensor::from_data({2}, {3.0, 1.0}));  // wrong shape
  b.add("b", ParamTag::Norm, true, Tensor::from_data({1}, {0.0}));
  const std::vector<const ParamSet*> clients = {&a, &b};
  const std::vector<double> w = {1.0, 1.0};
  CHECK_THROWS_WITH_AS(aggregate(clients, w, false), doctest::Contains("'w'"),
                       std::invalid_argument);
}

TEST_CASE("bn_exclude keeps Norm entries client-local through broadcast") {
  ParamSet a = toy_params(1.0, 5.0);
  ParamSet b = toy_params(3.0, -5.0);
  const std::vector<const ParamSet*> clients = {&a, &b};
  const std::vector<double> w = {1.0, 1.0};
  const ParamSet tmpl = aggregate(clients, w, true);

  ParamSet a2 = a;
  ParamSet b2 = b;
  broadcast(a2, tmpl, true);
  broadcast(b2, tmpl, true);
  CHECK(a2.at("w").value[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(b2.at("w").value[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(a2.at("b").value[0] == 5.0);   // untouched, bitwise
  CHECK(b2.at("b").value[0] == -5.0);
}

TEST_CASE("local_round with zero learning rate records stats without moving params") {
  ClientConfig cfg;
  cfg.client_id = "C1";
  cfg.n_cases = 3;
  cfg.image_size = 32;
  cfg.seed = 4;
  const auto data = generate_client(cfg);

  ModelConfig model;
  model.blocks = {4};
  ClientState state;
  state.client_id = "C1";
  state.params = SegNet::build_params(model, 8);
  state.optimizer.learning_rate = 0.0;

  SegTask::Options opts;
  opts.batch_size = 2;
  opts.patch_size = 16;
  SegTask task(&data, model, opts, Rng(12));

  const ParamSet before = state.params;
  const StrategyConfig strategy = StrategyConfig::preset("FedBN");
  const LocalRoundStats stats = local_round(state, task, strategy, 1.0, 1);

  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& name = before.entry(i).name;
    const bool is_stat = name.find("running_") != std::string::npos ||
                         name.find(".batches") != std::string::npos;
    if (!is_stat) {
      CHECK(state.params.entry(i).value == before.entry(i).value);
    }
  }
  CHECK(state.params.at("block0.bn.batches").value[0] == 1.0);
  CHECK(state.rounds_completed == 1);
  CHECK(stats.mean_loss >= 0.0);
  CHECK(state.vr.has_value());
}

TEST_CASE("proximal term contributes zero at the global point") {
  ClientState state = toy_client("C1", 2.0, 1.0, 0.0);  // lr 0 so params stay put
  StrategyConfig strategy = StrategyConfig::preset("FedProx", 0.5);

  ToyTask task(1.0, 1.0, 0.02);  // residual 2*1 + 1 - 1 = 2, loss = 2
  const LocalRoundStats stats = local_round(state, task, strategy, 1.0, 1);
  // at the snapshot point the proximal term adds nothing
  CHECK(stats.mean_loss == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("vr running mean over two rounds") {
  ClientState state = toy_client("C1", 0.0, 0.0, 0.0);
  const StrategyConfig strategy = StrategyConfig::preset("FedBN");
  ToyTask r1(1.0, 1.0, 0.01);
  local_round(state, r1, strategy, 1.0, 2);
  CHECK(*state.vr == doctest::Approx(0.01).epsilon(1e-15));
  ToyTask r2(1.0, 1.0, 0.03);
  local_round(state, r2, strategy, 1.0, 2);
  CHECK(*state.vr == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(state.vr_rounds == 2);
}

TEST_CASE("run_federation symmetry: identical clients converge bitwise") {
  std::vector<ClientState> clients;
  clients.push_back(toy_client("C1", 1.0, 0.5));
  clients.push_back(toy_client("C2", 1.0, 0.5));
  ToyTask t1(1.0, 3.0, 0.02);
  ToyTask t2(1.0, 3.0, 0.02);
  const std::vector<LocalTask*> tasks = {&t1, &t2};

  FederationConfig fed;
  fed.rounds = 3;
  fed.iters_per_round = 4;
  const auto result =
      run_federation(std::move(clients), tasks, StrategyConfig::preset("FedAvg"), fed);
  CHECK(result.clients[0].params.at("w").value[0] ==
        result.clients[1].params.at("w").value[0]);
  CHECK(result.clients[0].params.at("b").value[0] ==
        result.clients[1].params.at("b").value[0]);
}

TEST_CASE("FedMSRW with equal stats matches FedBN trajectory") {
  auto build_clients = [] {
    std::vector<ClientState> clients;
    clients.push_back(toy_client("C1", 1.0, 0.5));
    clients.push_back(toy_client("C2", -2.0, 0.1));
    return clients;
  };
  FederationConfig fed;
  fed.rounds = 4;
  fed.iters_per_round = 3;

  // equal fixed ability and equal ratios -> FedMSRW weights collapse to uniform
  ToyTask a1(1.0, 3.0, 0.02, 0.5), a2(0.5, -1.0, 0.02, 0.5);
  const std::vector<LocalTask*> tasks_a = {&a1, &a2};
  const auto msrw =
      run_federation(build_clients(), tasks_a, StrategyConfig::preset("FedMSRW"), fed);

  ToyTask b1(1.0, 3.0, 0.02, 0.5), b2(0.5, -1.0, 0.02, 0.5);
  const std::vector<LocalTask*> tasks_b = {&b1, &b2};
  const auto fedbn =
      run_federation(build_clients(), tasks_b, StrategyConfig::preset("FedBN"), fed);

  CHECK(msrw.clients[0].params.at("w").value[0] ==
        fedbn.clients[0].params.at("w").value[0]);
  CHECK(msrw.clients[0].params.at("b").value[0] ==
        fedbn.clients[0].params.at("b").value[0]);
  CHECK(msrw.clients[1].params.at("b").value[0] ==
        fedbn.clients[1].params.at("b").value[0]);
}

TEST_CASE("round report aggregation weights sum to one") {
  std::vector<ClientState> clients;
  clients.push_back(toy_client("C1", 1.0, 0.5));
  clients.push_back(toy_client("C2", -1.0, 0.2));
  clients.push_back(toy_client("C3", 0.3, -0.4));
  ToyTask t1(1.0, 3.0, 0.01), t2(0.5, -1.0, 0.02), t3(2.0, 1.0, 0.05);
  const std::vector<LocalTask*> tasks = {&t1, &t2, &t3};

  FederationConfig fed;
  fed.rounds = 5;
  fed.iters_per_round = 2;
  const auto result =
      run_federation(std::move(clients), tasks, StrategyConfig::preset("FedMSRW"), fed);
  REQUIRE(result.rounds.size() == 5);
  for (const auto& report : result.rounds) {
    double total = 0.0;
    for (const auto& row : report.clients) total += row.agg_weight;
    CHECK(std::fabs(total - 1.0) < 1e-12);
  }
  // loss weights: round 1 all ones, later rounds satisfy the Eq-6 identity
  for (const auto& row : result.rounds[0].clients) CHECK(row.loss_weight == 1.0);
  const auto& last = result.rounds.back().clients;
  const double mean_vr = (*last[0].vr + *last[1].vr + *last[2].vr) / 3.0;
  for (const auto& row : last) {
    CHECK(std::fabs(row.loss_weight * *row.vr - mean_vr) < 1e-12);
  }
}

TEST_CASE("round report jsonl is stable") {
  RoundReport r;
  r.round = 2;
  RoundReport::ClientRow row;
  row.client_id = "C1";
  row.p_score = 0.5;
  row.vr = 0.01;
  row.agg_weight = 1.0;
  row.loss_weight = 1.0;
  row.mean_loss = 0.25;
  r.clients.push_back(row);
  const std::string line = round_report_jsonl(r);
  CHECK(line.find("\"round\":2") != std::string::npos);
  CHECK(line.find("\"id\":\"C1\"") != std::string::npos);
  CHECK(line.find('\n') == std::string::npos);
}

TEST_CASE("run_federation propagates client errors with id") {
  class ExplodingTask final : public LocalTask {
   public:
    IterationOutcome forward_backward(ParamSet&, double) override {
      IterationOutcome out;
      out.loss = std::numeric_limits<double>::quiet_NaN();
      return out;
    }
  };
  std::vector<ClientState> clients;
  clients.push_back(toy_client("boom", 1.0, 0.0));
  ExplodingTask task;
  const std::vector<LocalTask*> tasks = {&task};
  FederationConfig fed;
  fed.rounds = 1;
  fed.iters_per_round = 1;
  CHECK_THROWS_WITH_AS(
      run_federation(std::move(clients), tasks, StrategyConfig::preset("FedAvg"), fed),
      doctest::Contains("boom"), std::runtime_error);
}
