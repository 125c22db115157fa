#include "fedseg/federation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "fedseg/objectives.hpp"

namespace fedseg {

StrategyConfig StrategyConfig::preset(const std::string& name, double proximal_mu) {
  StrategyConfig s;
  s.name = name;
  if (name == "FedAvg") {
    // defaults
  } else if (name == "FedProx") {
    s.proximal_mu = proximal_mu;
  } else if (name == "FedBN") {
    s.bn_exclude = true;
  } else if (name == "FedMSRW") {
    s.bn_exclude = true;
    s.aggregation = Aggregation::AbilityProb;
    s.local_reweight = LocalReweight::Ratio;
  } else if (name == "Ours-ent") {
    s.bn_exclude = true;
    s.aggregation = Aggregation::AbilityEntropy;
    s.local_reweight = LocalReweight::Ratio;
  } else if (name == "Ours-vol") {
    s.bn_exclude = true;
    s.aggregation = Aggregation::AbilityProb;
    s.local_reweight = LocalReweight::VoxelCount;
  } else if (name == "RW-CA") {
    s.bn_exclude = true;
    s.aggregation = Aggregation::AbilityProb;
  } else if (name == "RW-LT") {
    s.bn_exclude = true;
    s.local_reweight = LocalReweight::Ratio;
  } else {
    throw std::invalid_argument("unknown strategy preset '" + name + "'");
  }
  return s;
}

const std::vector<std::string>& StrategyConfig::preset_names() {
  static const std::vector<std::string> names = {
      "FedAvg", "FedProx", "FedBN", "FedMSRW", "RW-CA", "RW-LT", "Ours-ent", "Ours-vol"};
  return names;
}

std::optional<double> ability_score(const Tensor& pred, const Tensor& label) {
  if (!pred.same_shape(label)) {
    throw std::invalid_argument("ability_score: shape mismatch, pred " + pred.shape_str() +
                                " vs label " + label.shape_str());
  }
  double inter = 0.0, label_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * label[i];
    label_sum += label[i];
  }
  if (label_sum == 0.0) return std::nullopt;
  const double confidence = inter / label_sum;
  const double dice_term = 1.0 - soft_dice_loss(pred, label).loss;
  return confidence * dice_term;
}

double ability_score_entropy(const Tensor& pred, const Tensor& label) {
  if (!pred.same_shape(label)) {
    throw std::invalid_argument("ability_score_entropy: shape mismatch");
  }
  double entropy = 0.0;
  for (double p : pred.data()) {
    const double c = std::clamp(p, 1e-12, 1.0 - 1e-12);
    entropy += -c * std::log(c);
  }
  entropy /= static_cast<double>(pred.size());
  const double dice_term = 1.0 - soft_dice_loss(pred, label).loss;
  return entropy * dice_term;
}

double local_loss_weight(std::span<const double> stats, std::size_t i, double floor,
                         double cap_factor) {
  if (i >= stats.size()) {
    throw std::out_of_range("local_loss_weight: index out of range");
  }
  const double n = static_cast<double>(stats.size());
  double total = 0.0;
  for (double s : stats) total += std::max(s, floor);
  const double w = total / (n * std::max(stats[i], floor));
  return std::min(w, cap_factor * n);
}

namespace {

double pairwise_weighted_sum(const std::vector<const ParamSet*>& clients,
                             std::span<const double> weights, std::size_t entry,
                             std::size_t elem, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) {
    return weights[lo] * clients[lo]->entry(entry).value[elem];
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_weighted_sum(clients, weights, entry, elem, lo, mid) +
         pairwise_weighted_sum(clients, weights, entry, elem, mid, hi);
}

}  // namespace

ParamSet aggregate(const std::vector<const ParamSet*>& clients,
                   std::span<const double> weights, bool bn_exclude) {
  if (clients.empty()) {
    throw std::invalid_argument("aggregate: no clients");
  }
  if (weights.size() != clients.size()) {
    throw std::invalid_argument("aggregate: weight count does not match client count");
  }
  std::string mismatch;
  for (std::size_t i = 1; i < clients.size(); ++i) {
    if (!clients[0]->same_structure(*clients[i], &mismatch)) {
      throw std::invalid_argument("aggregate: client " + std::to_string(i) +
                                  " structure differs: " + mismatch);
    }
  }

  double total = 0.0;
  bool valid = true;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) valid = false;
    total += w;
  }
  std::vector<double> norm(clients.size());
  if (!valid || !(total > 0.0)) {
    std::cerr << "[fedseg] warning: aggregation weights sum to zero or are invalid; "
                 "falling back to uniform\n";
    std::fill(norm.begin(), norm.end(), 1.0 / static_cast<double>(clients.size()));
  } else {
    for (std::size_t i = 0; i < norm.size(); ++i) norm[i] = weights[i] / total;
  }

  ParamSet out = *clients[0];
  for (std::size_t ei = 0; ei < out.size(); ++ei) {
    ParamEntry& e = out.entry(ei);
    if (bn_exclude && e.tag == ParamTag::Norm) {
      continue;  // stays client-local; template keeps client 0's values
    }
    for (std::size_t j = 0; j < e.value.size(); ++j) {
      e.value[j] = pairwise_weighted_sum(clients, norm, ei, j, 0, clients.size());
    }
  }
  // momentum/grad buffers are per-client state, not part of the template
  out.zero_grad();
  for (auto& e : out) {
    for (auto& m : e.momentum.data()) m = 0.0;
  }
  return out;
}

void broadcast(ParamSet& client, const ParamSet& aggregated, bool bn_exclude) {
  std::string mismatch;
  if (!client.same_structure(aggregated, &mismatch)) {
    throw std::invalid_argument("broadcast: structure differs: " + mismatch);
  }
  for (std::size_t ei = 0; ei < client.size(); ++ei) {
    ParamEntry& dst = client.entry(ei);
    if (bn_exclude && dst.tag == ParamTag::Norm) continue;
    dst.value = aggregated.entry(ei).value;
  }
}

LocalRoundStats local_round(ClientState& state, LocalTask& task,
                            const StrategyConfig& strategy, double loss_weight,
                            int iterations) {
  if (iterations < 1) {
    throw std::invalid_argument("local_round: iterations must be >= 1");
  }

  // FedProx tether: snapshot of the broadcast parameters at round start.
  std::vector<Tensor> prox_ref;
  const double mu = strategy.proximal_mu.value_or(0.0);
  if (mu > 0.0) {
    prox_ref.reserve(state.params.size());
    for (const auto& e : state.params) prox_ref.push_back(e.value);
  }

  std::vector<double> abilities;
  std::vector<double> ratios;
  std::vector<double> voxels;
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(iterations));

  for (int q = 0; q < iterations; ++q) {
    state.params.zero_grad();
    IterationOutcome outcome = task.forward_backward(state.params, loss_weight);
    double loss = outcome.loss;

    if (mu > 0.0) {
      double sq = 0.0;
      for (std::size_t ei = 0; ei < state.params.size(); ++ei) {
        ParamEntry& e = state.params.entry(ei);
        if (!e.trainable) continue;
        const Tensor& ref = prox_ref[ei];
        for (std::size_t j = 0; j < e.value.size(); ++j) {
          const double d = e.value[j] - ref[j];
          sq += d * d;
          e.grad[j] += mu * d;
        }
      }
      loss += 0.5 * mu * sq;
    }

    if (!std::isfinite(loss)) {
      throw std::runtime_error("local_round: non-finite loss at iteration " +
                               std::to_string(q));
    }
    sgd_step(state.params, state.optimizer);

    losses.push_back(loss);
    if (outcome.ability) abilities.push_back(*outcome.ability);
    if (outcome.lesion_ratio) ratios.push_back(*outcome.lesion_ratio);
    if (outcome.lesion_voxels) voxels.push_back(*outcome.lesion_voxels);
  }

  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  LocalRoundStats stats;
  stats.p_score = abilities.empty() ? 0.0 : mean(abilities);
  if (!ratios.empty()) stats.round_ratio = mean(ratios);
  if (!voxels.empty()) stats.round_voxels = mean(voxels);
  stats.mean_loss = mean(losses);

  state.p_score = stats.p_score;
  state.last_round_losses = std::move(losses);
  if (stats.round_ratio) {
    // running mean over contributing rounds; an all-skipped round reuses the
    // previous value untouched
    const double k = static_cast<double>(state.vr_rounds);
    state.vr = (k * state.vr.value_or(0.0) + *stats.round_ratio) / (k + 1.0);
    state.voxel_mean =
        (k * state.voxel_mean.value_or(0.0) + stats.round_voxels.value_or(0.0)) / (k + 1.0);
    state.vr_rounds += 1;
  }
  state.rounds_completed += 1;
  return stats;
}

std::string round_report_jsonl(const RoundReport& report) {
  nlohmann::json j;
  j["round"] = report.round;
  j["clients"] = nlohmann::json::array();
  for (const auto& c : report.clients) {
    nlohmann::json row;
    row["id"] = c.client_id;
    row["p_score"] = c.p_score;
    if (c.vr)
      row["vr"] = *c.vr;
    else
      row["vr"] = nullptr;
    row["agg_weight"] = c.agg_weight;
    row["loss_weight"] = c.loss_weight;
    row["mean_loss"] = c.mean_loss;
    j["clients"].push_back(std::move(row));
  }
  return j.dump();
}

FederationResult run_federation(std::vector<ClientState> clients,
                                const std::vector<LocalTask*>& tasks,
                                const StrategyConfig& strategy,
                                const FederationConfig& config,
                                std::ostream* round_log) {
  const std::size_t n = clients.size();
  if (n == 0) throw std::invalid_argument("run_federation: no clients");
  if (tasks.size() != n) {
    throw std::invalid_argument("run_federation: task count does not match client count");
  }
  if (config.rounds < 1 || config.iters_per_round < 1) {
    throw std::invalid_argument("run_federation: rounds and iters_per_round must be >= 1");
  }

  FederationResult result;
  std::vector<double> loss_weights(n, 1.0);  // before the first aggregation

  for (int round = 0; round < config.rounds; ++round) {
    std::vector<LocalRoundStats> stats(n);
    std::vector<std::exception_ptr> errors(n);

    auto run_client = [&](std::size_t i) {
      try {
        stats[i] = local_round(clients[i], *tasks[i], strategy, loss_weights[i],
                               config.iters_per_round);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };

    if (config.parallel_clients && n > 1) {
      std::vector<std::thread> threads;
      threads.reserve(n);
      for (std::size_t i = 0; i < n; ++i) threads.emplace_back(run_client, i);
      for (auto& t : threads) t.join();
    } else {
      for (std::size_t i = 0; i < n; ++i) run_client(i);
    }

    for (std::size_t i = 0; i < n; ++i) {
      if (errors[i]) {
        try {
          std::rethrow_exception(errors[i]);
        } catch (const std::exception& e) {
          throw std::runtime_error("client '" + clients[i].client_id + "' round " +
                                   std::to_string(round + 1) + ": " + e.what());
        }
      }
    }

    // server side: ability-weighted or uniform aggregation, then broadcast
    std::vector<double> agg_weights(n, 1.0);
    if (strategy.aggregation != Aggregation::Uniform) {
      for (std::size_t i = 0; i < n; ++i) agg_weights[i] = clients[i].p_score;
    }
    double total = 0.0;
    bool valid = true;
    for (double w : agg_weights) {
      if (!std::isfinite(w) || w < 0.0) valid = false;
      total += w;
    }
    if (!valid || !(total > 0.0)) {
      std::fill(agg_weights.begin(), agg_weights.end(), 1.0);
      total = static_cast<double>(n);
    }

    std::vector<const ParamSet*> param_ptrs;
    param_ptrs.reserve(n);
    for (const auto& c : clients) param_ptrs.push_back(&c.params);
    ParamSet global = aggregate(param_ptrs, agg_weights, strategy.bn_exclude);
    for (auto& c : clients) broadcast(c.params, global, strategy.bn_exclude);

    RoundReport report;
    report.round = round + 1;
    for (std::size_t i = 0; i < n; ++i) {
      RoundReport::ClientRow row;
      row.client_id = clients[i].client_id;
      row.p_score = clients[i].p_score;
      row.vr = clients[i].vr;
      row.agg_weight = agg_weights[i] / total;
      row.loss_weight = loss_weights[i];
      row.mean_loss = stats[i].mean_loss;
      report.clients.push_back(std::move(row));
    }
    if (round_log) {
      *round_log << round_report_jsonl(report) << "\n";
      round_log->flush();
    }
    result.rounds.push_back(std::move(report));

    // re-weighting factors for the next round, from the updated running stats
    if (strategy.local_reweight != LocalReweight::None) {
      std::vector<double> stat(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::optional<double>& s = strategy.local_reweight == LocalReweight::Ratio
                                             ? clients[i].vr
                                             : clients[i].voxel_mean;
        stat[i] = s.value_or(strategy.ratio_floor);
      }
      for (std::size_t i = 0; i < n; ++i) {
        loss_weights[i] =
            local_loss_weight(stat, i, strategy.ratio_floor, strategy.weight_cap_factor);
      }
    }
  }

  result.clients = std::move(clients);
  return result;
}

SegTask::SegTask(const std::vector<Sample>* data, ModelConfig model, Options options,
                 Rng rng)
    : data_(data), net_(std::move(model)), options_(options), rng_(rng) {
  if (!data_ || data_->empty()) {
    throw std::invalid_argument("SegTask: empty dataset");
  }
  if (options_.batch_size < 1 || options_.patch_size < 1) {
    throw std::invalid_argument("SegTask: batch_size and patch_size must be >= 1");
  }
}

IterationOutcome SegTask::forward_backward(ParamSet& params, double loss_weight) {
  const std::size_t bs = static_cast<std::size_t>(options_.batch_size);
  const std::size_t ps = static_cast<std::size_t>(options_.patch_size);

  Tensor images({bs, 1, ps, ps});
  Tensor labels({bs, 1, ps, ps});
  std::vector<double> patch_ratios;
  double voxel_sum = 0.0;

  for (std::size_t b = 0; b < bs; ++b) {
    const Sample& s = (*data_)[rng_.uniform_int(data_->size())];
    Patch p = sample_patch(s, options_.patch_size, rng_, options_.lesion_center_prob);
    p = augment(p, rng_);
    if (auto r = lesion_ratio(p)) patch_ratios.push_back(*r);
    double lesion_voxels = 0.0;
    for (double v : p.label.data()) lesion_voxels += v != 0.0 ? 1.0 : 0.0;
    voxel_sum += lesion_voxels;
    std::copy(p.image.data().begin(), p.image.data().end(),
              images.data().begin() + static_cast<std::ptrdiff_t>(b * ps * ps));
    std::copy(p.label.data().begin(), p.label.data().end(),
              labels.data().begin() + static_cast<std::ptrdiff_t>(b * ps * ps));
  }

  SegNet::Tape tape;
  Tensor pred = net_.forward(params, images, BnMode::Train, &tape);
  SoftDiceResult dice = soft_dice_loss(pred, labels);

  Tensor grad(dice.grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = loss_weight * dice.grad[i];
  net_.backward(params, tape, grad);

  IterationOutcome out;
  out.loss = loss_weight * dice.loss;
  if (options_.ability_variant == Aggregation::AbilityEntropy) {
    out.ability = ability_score_entropy(pred, labels);
  } else {
    out.ability = ability_score(pred, labels);  // nullopt when batch has no lesion
  }
  if (!patch_ratios.empty()) {
    double s = 0.0;
    for (double r : patch_ratios) s += r;
    out.lesion_ratio = s / static_cast<double>(patch_ratios.size());
  }
  out.lesion_voxels = voxel_sum / static_cast<double>(bs);
  return out;
}

}  // namespace fedseg
