#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedseg/model.hpp"
#include "fedseg/rng.hpp"
#include "fedseg/synth.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

enum class Aggregation { Uniform, AbilityProb, AbilityEntropy };
enum class LocalReweight { None, Ratio, VoxelCount };

/// Orthogonal protocol toggles. The named presets wire them together:
///   FedAvg  = {bn_exclude:false, Uniform, no mu, None}
///   FedProx = FedAvg + proximal_mu
///   FedBN   = {bn_exclude:true, Uniform, no mu, None}
///   FedMSRW = {bn_exclude:true, AbilityProb, no mu, Ratio}
///   Ours-ent = FedMSRW with AbilityEntropy
///   Ours-vol = FedMSRW with VoxelCount
///   RW-CA   = FedBN + AbilityProb
///   RW-LT   = FedBN + Ratio
struct StrategyConfig {
  std::string name = "FedAvg";
  bool bn_exclude = false;
  Aggregation aggregation = Aggregation::Uniform;
  std::optional<double> proximal_mu;
  LocalReweight local_reweight = LocalReweight::None;
  double ratio_floor = 1e-6;        // epsilon floor before the Eq-style quotient
  double weight_cap_factor = 10.0;  // local loss weights capped at factor * N

  static StrategyConfig preset(const std::string& name, double proximal_mu = 0.01);
  static const std::vector<std::string>& preset_names();
};

/// Segmentation-ability score for one prediction/label pair:
///   P = [sum(pred*label) / sum(label)] * (1 - soft_dice_loss(pred, label)).
/// Returns nullopt when the label is all-zero (the iteration is excluded from
/// the round mean).
std::optional<double> ability_score(const Tensor& pred, const Tensor& label);

/// Entropy-map variant: mean over voxels of -p*log(p), times
/// (1 - soft_dice_loss); p is clamped to [1e-12, 1-1e-12].
double ability_score_entropy(const Tensor& pred, const Tensor& label);

/// Loss re-weighting quotient w_i = sum_j(stat_j) / (N * stat_i), with each
/// stat floored at `floor` and the result capped at cap_factor * N. The same
/// formula serves the ratio and voxel-count variants; callers pass whichever
/// running statistic the strategy selects.
double local_loss_weight(std::span<const double> stats, std::size_t i,
                         double floor = 1e-6, double cap_factor = 10.0);

/// Weighted average of structurally-identical ParamSets. Rest entries are
/// always averaged; Norm entries are averaged only when bn_exclude is false
/// (under bn_exclude every Norm entry stays client-local and the returned
/// template carries the first client's values as a placeholder). Non-positive
/// or non-finite total weight falls back to uniform with a warning on stderr.
/// Client order is fixed by the caller; summation is pairwise in that order.
ParamSet aggregate(const std::vector<const ParamSet*>& clients,
                   std::span<const double> weights, bool bn_exclude);

/// Installs the aggregated template into a client: Rest entries always, Norm
/// entries only when bn_exclude is false.
void broadcast(ParamSet& client, const ParamSet& aggregated, bool bn_exclude);

/// One federation participant.
struct ClientState {
  std::string client_id;
  ParamSet params;
  OptimizerConfig optimizer;
  std::optional<double> vr;          // running mean of per-round lesion ratios
  std::optional<double> voxel_mean;  // running mean of per-round lesion voxel counts
  int vr_rounds = 0;                 // rounds that contributed to vr
  int rounds_completed = 0;
  double p_score = 0.0;  // mean per-iteration ability of the latest round
  std::vector<double> last_round_losses;
};

struct IterationOutcome {
  double loss = 0.0;                     // optimized objective value
  std::optional<double> ability;         // per-iteration P contribution
  std::optional<double> lesion_ratio;    // mean patch ratio; nullopt if no brain seen
  std::optional<double> lesion_voxels;   // mean lesion voxel count per patch
};

/// One client's training task: produce gradients for one batch. The engine
/// owns stepping, proximal tethering and loss re-weighting; implementations
/// scale their task loss (and its gradient) by `loss_weight`.
class LocalTask {
 public:
  virtual ~LocalTask() = default;
  virtual IterationOutcome forward_backward(ParamSet& params, double loss_weight) = 0;
};

struct LocalRoundStats {
  double p_score = 0.0;
  std::optional<double> round_ratio;
  std::optional<double> round_voxels;
  double mean_loss = 0.0;
};

/// Q optimization iterations on one client: forward/backward, optional
/// proximal pull toward the round-start parameters, SGD step; accumulates the
/// ability score and lesion-ratio statistics into `state`. Throws on
/// non-finite loss.
LocalRoundStats local_round(ClientState& state, LocalTask& task,
                            const StrategyConfig& strategy, double loss_weight,
                            int iterations);

struct RoundReport {
  int round = 0;
  struct ClientRow {
    std::string client_id;
    double p_score = 0.0;
    std::optional<double> vr;
    double agg_weight = 0.0;  // normalized; rows sum to 1
    double loss_weight = 1.0;
    double mean_loss = 0.0;
  };
  std::vector<ClientRow> clients;
};

/// One JSON object per line, stable field order; used for the round log.
std::string round_report_jsonl(const RoundReport& report);

struct FederationConfig {
  int rounds = 10;           // P
  int iters_per_round = 100; // Q
  bool parallel_clients = false;
};

struct FederationResult {
  std::vector<ClientState> clients;  // final models: shared Rest + private Norm
  std::vector<RoundReport> rounds;
};

/// The round loop: every round all clients train locally, the server
/// aggregates (ability-weighted if configured), broadcasts, and the loss
/// re-weighting factors for the next round are derived from the updated
/// running statistics. Client order in `clients` fixes the aggregation order;
/// results do not depend on whether client rounds run concurrently.
/// `round_log`, when given, receives one flushed JSONL record per round.
FederationResult run_federation(std::vector<ClientState> clients,
                                const std::vector<LocalTask*>& tasks,
                                const StrategyConfig& strategy,
                                const FederationConfig& config,
                                std::ostream* round_log = nullptr);

/// Patch-based segmentation training task; batches are drawn from the
/// client's cases, augmented, and scored with the soft Dice loss.
class SegTask final : public LocalTask {
 public:
  struct Options {
    int batch_size = 8;
    int patch_size = 32;
    double lesion_center_prob = 0.0;
    Aggregation ability_variant = Aggregation::AbilityProb;
  };

  SegTask(const std::vector<Sample>* data, ModelConfig model, Options options, Rng rng);

  IterationOutcome forward_backward(ParamSet& params, double loss_weight) override;

 private:
  const std::vector<Sample>* data_;
  SegNet net_;
  Options options_;
  Rng rng_;
};

}  // namespace fedseg
