#include "fedseg/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fedseg/rng.hpp"

namespace fedseg {

ParamEntry& ParamSet::add(std::string name, ParamTag tag, bool trainable, Tensor value) {
  if (has(name)) {
    throw std::invalid_argument("ParamSet: duplicate entry '" + name + "'");
  }
  ParamEntry e;
  e.name = std::move(name);
  e.tag = tag;
  e.trainable = trainable;
  e.grad = Tensor(value.shape());
  e.momentum = Tensor(value.shape());
  e.value = std::move(value);
  entries_.push_back(std::move(e));
  return entries_.back();
}

bool ParamSet::has(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

ParamEntry& ParamSet::at(const std::string& name) {
  for (auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("ParamSet: no entry '" + name + "'");
}

const ParamEntry& ParamSet::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("ParamSet: no entry '" + name + "'");
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) {
    for (auto& g : e.grad.data()) g = 0.0;
  }
}

std::size_t ParamSet::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

bool ParamSet::same_structure(const ParamSet& other, std::string* first_mismatch) const {
  const std::size_t n = std::min(entries_.size(), other.entries_.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.tag != b.tag || a.value.shape() != b.value.shape()) {
      if (first_mismatch) {
        *first_mismatch = "entry " + std::to_string(i) + ": '" + a.name + "' " +
                          a.value.shape_str() + " vs '" + b.name + "' " +
                          b.value.shape_str();
      }
      return false;
    }
  }
  if (entries_.size() != other.entries_.size()) {
    if (first_mismatch) {
      *first_mismatch = "entry count " + std::to_string(entries_.size()) + " vs " +
                        std::to_string(other.entries_.size());
    }
    return false;
  }
  return true;
}

PartitionView partition(const ParamSet& params) {
  PartitionView v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    (params.entry(i).tag == ParamTag::Norm ? v.norm : v.rest).push_back(i);
  }
  return v;
}

std::uint64_t model_config_digest(const ModelConfig& config) {
  std::ostringstream os;
  os << "fedseg-model/in=" << config.in_channels << "/blocks=";
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    if (i) os << ",";
    os << config.blocks[i];
  }
  os << "/k=" << config.kernel;
  const std::string s = os.str();
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SegNet::SegNet(ModelConfig config) : config_(std::move(config)) {
  if (config_.blocks.empty()) {
    throw std::invalid_argument("SegNet: need at least one block");
  }
  for (std::size_t w : config_.blocks) {
    if (w < 1) throw std::invalid_argument("SegNet: block width must be >= 1");
  }
  if (config_.kernel % 2 == 0) {
    throw std::invalid_argument("SegNet: kernel size must be odd");
  }
}

namespace {
std::string block_prefix(std::size_t i) { return "block" + std::to_string(i); }
}  // namespace

ParamSet SegNet::build_params(const ModelConfig& config, std::uint64_t seed) {
  SegNet checked(config);  // validates
  ParamSet params;
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  const std::size_t k = config.kernel;

  std::size_t cin = config.in_channels;
  for (std::size_t bi = 0; bi < config.blocks.size(); ++bi) {
    const std::size_t cout = config.blocks[bi];
    const std::string p = block_prefix(bi);
    Tensor kernel({cout, cin, k, k});
    const double scale = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    for (auto& v : kernel.data()) v = rng.normal(0.0, scale);
    params.add(p + ".conv.weight", ParamTag::Rest, true, std::move(kernel));
    params.add(p + ".conv.bias", ParamTag::Rest, true, Tensor({cout}, 0.0));
    params.add(p + ".bn.gamma", ParamTag::Norm, true, Tensor({cout}, 1.0));
    params.add(p + ".bn.beta", ParamTag::Norm, true, Tensor({cout}, 0.0));
    params.add(p + ".bn.running_mean", ParamTag::Norm, false, Tensor({cout}, 0.0));
    params.add(p + ".bn.running_var", ParamTag::Norm, false, Tensor({cout}, 1.0));
    params.add(p + ".bn.batches", ParamTag::Norm, false, Tensor({1}, 0.0));
    cin = cout;
  }

  Tensor head({1, cin, 1, 1});
  const double scale = std::sqrt(2.0 / static_cast<double>(cin));
  for (auto& v : head.data()) v = rng.normal(0.0, scale);
  params.add("head.conv.weight", ParamTag::Rest, true, std::move(head));
  params.add("head.conv.bias", ParamTag::Rest, true, Tensor({1}, 0.0));
  return params;
}

ModelConfig SegNet::config_from_params(const ParamSet& params) {
  ModelConfig config;
  config.blocks.clear();
  for (std::size_t bi = 0;; ++bi) {
    const std::string name = block_prefix(bi) + ".conv.weight";
    if (!params.has(name)) break;
    const Tensor& w = params.at(name).value;
    if (bi == 0) config.in_channels = w.extent(1);
    config.blocks.push_back(w.extent(0));
    config.kernel = w.extent(2);
  }
  if (config.blocks.empty() || !params.has("head.conv.weight")) {
    throw std::invalid_argument("config_from_params: not a SegNet parameter set");
  }
  return config;
}

namespace {

BatchNormState bn_state_from(const ParamSet& params, const std::string& prefix) {
  BatchNormState s;
  s.gamma = params.at(prefix + ".gamma").value;
  s.beta = params.at(prefix + ".beta").value;
  s.running_mean = params.at(prefix + ".running_mean").value;
  s.running_var = params.at(prefix + ".running_var").value;
  return s;
}

}  // namespace

Tensor SegNet::forward(ParamSet& params, const Tensor& input, BnMode mode,
                       Tape* tape) const {
  if (input.rank() != 4 || input.extent(1) != config_.in_channels) {
    throw std::invalid_argument("SegNet::forward: expected [B," +
                                std::to_string(config_.in_channels) +
                                ",H,W] input, got " + input.shape_str());
  }
  const int pad = static_cast<int>(config_.kernel / 2);
  if (tape) {
    tape->blocks.clear();
    tape->blocks.resize(config_.blocks.size());
  }

  Tensor x = input;
  for (std::size_t bi = 0; bi < config_.blocks.size(); ++bi) {
    const std::string p = block_prefix(bi);
    const Tensor& w = params.at(p + ".conv.weight").value;
    const Tensor& b = params.at(p + ".conv.bias").value;
    Tensor conv = conv2d_forward(x, w, b, pad);

    BatchNormState bn = bn_state_from(params, p + ".bn");
    BnCache local_cache;
    BnCache* cache = tape ? &tape->blocks[bi].bn_cache : &local_cache;
    Tensor norm = batchnorm_forward(conv, bn, mode, cache);
    if (mode == BnMode::Train) {
      params.at(p + ".bn.running_mean").value = bn.running_mean;
      params.at(p + ".bn.running_var").value = bn.running_var;
      params.at(p + ".bn.batches").value[0] += 1.0;
    }

    Tensor act = relu(norm);
    if (tape) {
      tape->blocks[bi].conv_in = std::move(x);
      tape->blocks[bi].conv_out = std::move(conv);
      tape->blocks[bi].bn_out = std::move(norm);
    }
    x = std::move(act);
  }

  const Tensor& hw = params.at("head.conv.weight").value;
  const Tensor& hb = params.at("head.conv.bias").value;
  Tensor logits = conv2d_forward(x, hw, hb, 0);
  Tensor pred = sigmoid(logits);
  if (tape) {
    tape->head_in = std::move(x);
    tape->pred = pred;
  }
  return pred;
}

Tensor SegNet::backward(ParamSet& params, const Tape& tape, const Tensor& grad_pred) const {
  const int pad = static_cast<int>(config_.kernel / 2);

  Tensor g = sigmoid_backward(tape.pred, grad_pred);
  {
    const Tensor& hw = params.at("head.conv.weight").value;
    Conv2dGrads cg = conv2d_backward(tape.head_in, hw, g, 0);
    auto& gw = params.at("head.conv.weight").grad;
    auto& gb = params.at("head.conv.bias").grad;
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += cg.kernel[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += cg.bias[i];
    g = std::move(cg.input);
  }

  for (std::size_t bi = config_.blocks.size(); bi-- > 0;) {
    const std::string p = block_prefix(bi);
    const Tape::Block& blk = tape.blocks[bi];

    g = relu_backward(blk.bn_out, g);

    BatchNormState bn = bn_state_from(params, p + ".bn");
    BnGrads bng = batchnorm_backward(g, blk.bn_cache, bn);
    {
      auto& gg = params.at(p + ".bn.gamma").grad;
      auto& gb = params.at(p + ".bn.beta").grad;
      for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += bng.gamma[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += bng.beta[i];
    }
    g = std::move(bng.input);

    const Tensor& w = params.at(p + ".conv.weight").value;
    Conv2dGrads cg = conv2d_backward(blk.conv_in, w, g, pad);
    {
      auto& gw = params.at(p + ".conv.weight").grad;
      auto& gb = params.at(p + ".conv.bias").grad;
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += cg.kernel[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += cg.bias[i];
    }
    g = std::move(cg.input);
  }
  return g;
}

void sgd_step(ParamSet& params, const OptimizerConfig& opt) {
  for (auto& e : params) {
    if (!e.trainable) continue;
    if (!e.grad.all_finite()) {
      throw std::runtime_error("sgd_step: non-finite gradient for parameter '" +
                               e.name + "'");
    }
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double buf = opt.momentum * e.momentum[i] + e.grad[i] +
                         opt.weight_decay * e.value[i];
      e.momentum[i] = buf;
      e.value[i] -= opt.learning_rate * buf;
    }
  }
}

GradCheckReport grad_check(const std::function<double(ParamSet&, bool)>& f,
                           const ParamSet& params, double h) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

  ParamSet with_grad = params;
  with_grad.zero_grad();
  const double base_loss = f(with_grad, true);
  if (!std::isfinite(base_loss)) {
    throw std::runtime_error("grad_check: non-finite loss");
  }

  GradCheckReport report;
  for (std::size_t ei = 0; ei < params.size(); ++ei) {
    const ParamEntry& entry = params.entry(ei);
    if (!entry.trainable) continue;
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      ParamSet plus = params;
      plus.entry(ei).value[i] += h;
      const double lp = f(plus, false);

      ParamSet minus = params;
      minus.entry(ei).value[i] -= h;
      const double lm = f(minus, false);

      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw std::runtime_error("grad_check: non-finite loss at perturbed '" +
                                 entry.name + "'");
      }
      const double central = (lp - lm) / (2.0 * h);
      const double analytic = with_grad.entry(ei).grad[i];
      const double denom =
          std::max({std::fabs(analytic), std::fabs(central), 1e-12});
      const double rel = std::fabs(analytic - central) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = entry.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace fedseg
