#include "fedseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fedseg {

void ClientConfig::validate() const {
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument("ClientConfig '" + client_id + "': " + msg);
  };
  if (client_id.empty()) fail("empty client_id");
  if (n_cases < 1) fail("n_cases must be >= 1");
  if (image_size < 8) fail("image_size must be >= 8");
  if (!(brain_axis_min > 0.0 && brain_axis_min <= brain_axis_max && brain_axis_max <= 1.0))
    fail("brain axis range must satisfy 0 < min <= max <= 1");
  if (lesion_count_min < 1 || lesion_count_min > lesion_count_max)
    fail("lesion count range must satisfy 1 <= min <= max");
  if (!(lesion_sigma_min > 0.0 && lesion_sigma_min <= lesion_sigma_max))
    fail("lesion sigma range must satisfy 0 < min <= max");
  if (!(ratio_min > 0.0 && ratio_min <= ratio_max && ratio_max <= 0.2))
    fail("target ratio range must lie in (0, 0.2]");
  if (intensity_std < 0.0 || noise_std < 0.0) fail("negative std");
  if (max_ratio_retries < 1) fail("max_ratio_retries must be >= 1");
}

namespace {

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct Ellipse {
  double cy, cx, ay, ax;
  bool contains(double y, double x) const {
    const double dy = (y - cy) / ay;
    const double dx = (x - cx) / ax;
    return dy * dy + dx * dx <= 1.0;
  }
};

}  // namespace

std::vector<Sample> generate_client(const ClientConfig& cfg) {
  cfg.validate();
  const std::size_t H = static_cast<std::size_t>(cfg.image_size);
  const std::size_t W = H;
  const double half = static_cast<double>(cfg.image_size) / 2.0;

  Rng client_rng(mix_seed(cfg.seed, fnv1a(cfg.client_id)));
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(cfg.n_cases));

  for (int case_id = 0; case_id < cfg.n_cases; ++case_id) {
    Rng rng = client_rng.fork(static_cast<std::uint64_t>(case_id));

    // brain: filled ellipse with Gaussian texture
    Ellipse brain;
    brain.cy = half + rng.uniform(-half / 8.0, half / 8.0);
    brain.cx = half + rng.uniform(-half / 8.0, half / 8.0);
    brain.ay = rng.uniform(cfg.brain_axis_min, cfg.brain_axis_max) * half;
    brain.ax = rng.uniform(cfg.brain_axis_min, cfg.brain_axis_max) * half;

    Tensor image({1, H, W});
    Tensor brain_mask({1, H, W});
    std::size_t brain_voxels = 0;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = y * W + x;
        if (brain.contains(static_cast<double>(y), static_cast<double>(x))) {
          brain_mask[i] = 1.0;
          image[i] = cfg.intensity_mean + rng.normal(0.0, cfg.intensity_std);
          ++brain_voxels;
        }
      }
    }
    if (brain_voxels == 0) {
      throw std::runtime_error("generate_client '" + cfg.client_id +
                               "': degenerate empty brain");
    }

    // lesions: Gaussian bumps inside the brain, resampled until the measured
    // ratio lands in the target range
    Tensor label({1, H, W});
    Tensor bump({1, H, W});
    bool accepted = false;
    for (int attempt = 0; attempt < cfg.max_ratio_retries && !accepted; ++attempt) {
      std::fill(label.data().begin(), label.data().end(), 0.0);
      std::fill(bump.data().begin(), bump.data().end(), 0.0);
      const int count = rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max);
      for (int li = 0; li < count; ++li) {
        const double sigma = rng.uniform(cfg.lesion_sigma_min, cfg.lesion_sigma_max);
        double ly = 0.0, lx = 0.0;
        for (int tries = 0;; ++tries) {
          ly = rng.uniform(0.0, static_cast<double>(H));
          lx = rng.uniform(0.0, static_cast<double>(W));
          if (brain.contains(ly, lx)) break;
          if (tries > 1000) {
            throw std::runtime_error("generate_client '" + cfg.client_id +
                                     "': cannot place lesion inside brain");
          }
        }
        const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
        // binary mask = bump above half peak
        const double reach = sigma * 3.0;
        const std::size_t y0 = static_cast<std::size_t>(std::max(0.0, ly - reach));
        const std::size_t y1 = std::min(H, static_cast<std::size_t>(std::max(0.0, ly + reach + 1.0)));
        const std::size_t x0 = static_cast<std::size_t>(std::max(0.0, lx - reach));
        const std::size_t x1 = std::min(W, static_cast<std::size_t>(std::max(0.0, lx + reach + 1.0)));
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) {
            const std::size_t i = y * W + x;
            if (brain_mask[i] == 0.0) continue;
            const double dy = static_cast<double>(y) - ly;
            const double dx = static_cast<double>(x) - lx;
            const double v = std::exp(-(dy * dy + dx * dx) * inv2s2);
            bump[i] = std::max(bump[i], v);
            if (v > 0.5) label[i] = 1.0;
          }
        }
      }
      std::size_t lesion_voxels = 0;
      for (double v : label.data()) lesion_voxels += v != 0.0 ? 1 : 0;
      const double ratio =
          static_cast<double>(lesion_voxels) / static_cast<double>(brain_voxels);
      accepted = ratio >= cfg.ratio_min && ratio <= cfg.ratio_max;
    }
    if (!accepted) {
      throw std::runtime_error(
          "generate_client '" + cfg.client_id + "' case " + std::to_string(case_id) +
          ": no lesion placement hit ratio range [" + std::to_string(cfg.ratio_min) +
          ", " + std::to_string(cfg.ratio_max) + "] after " +
          std::to_string(cfg.max_ratio_retries) + " retries");
    }

    for (std::size_t i = 0; i < image.size(); ++i) {
      image[i] += cfg.lesion_contrast * bump[i];
      image[i] += rng.normal(0.0, cfg.noise_std);
    }

    Sample s;
    s.image = std::move(image);
    s.label = std::move(label);
    s.brain_mask = std::move(brain_mask);
    s.client_id = cfg.client_id;
    s.case_id = case_id;
    samples.push_back(std::move(s));
  }
  return samples;
}

std::optional<double> lesion_ratio(const Tensor& label, const Tensor& brain_mask) {
  std::size_t brain = 0, lesion = 0;
  for (double v : brain_mask.data()) brain += v != 0.0 ? 1 : 0;
  if (brain == 0) return std::nullopt;
  for (double v : label.data()) lesion += v != 0.0 ? 1 : 0;
  return static_cast<double>(lesion) / static_cast<double>(brain);
}

std::optional<double> lesion_ratio(const Patch& p) {
  return lesion_ratio(p.label, p.brain_mask);
}

std::optional<double> lesion_ratio(const Sample& s) {
  return lesion_ratio(s.label, s.brain_mask);
}

namespace {

Tensor crop(const Tensor& t, std::size_t y0, std::size_t x0, std::size_t size) {
  const std::size_t W = t.extent(2);
  Tensor out({1, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    const double* src = t.data().data() + (y0 + y) * W + x0;
    double* dst = out.data().data() + y * size;
    std::copy(src, src + size, dst);
  }
  return out;
}

}  // namespace

Patch sample_patch(const Sample& s, int size, Rng& rng, double lesion_center_prob) {
  const std::size_t H = s.image.extent(1), W = s.image.extent(2);
  const std::size_t sz = static_cast<std::size_t>(size);
  if (sz < 1 || sz > H || sz > W) {
    throw std::invalid_argument("sample_patch: size " + std::to_string(size) +
                                " does not fit image " + s.image.shape_str());
  }
  std::size_t y0 = 0, x0 = 0;
  bool centered = false;
  if (lesion_center_prob > 0.0 && rng.uniform() < lesion_center_prob) {
    std::vector<std::size_t> lesion_idx;
    for (std::size_t i = 0; i < s.label.size(); ++i) {
      if (s.label[i] != 0.0) lesion_idx.push_back(i);
    }
    if (!lesion_idx.empty()) {
      const std::size_t pick = lesion_idx[rng.uniform_int(lesion_idx.size())];
      const long cy = static_cast<long>(pick / W), cx = static_cast<long>(pick % W);
      const long half = static_cast<long>(sz) / 2;
      y0 = static_cast<std::size_t>(
          std::clamp(cy - half, 0L, static_cast<long>(H - sz)));
      x0 = static_cast<std::size_t>(
          std::clamp(cx - half, 0L, static_cast<long>(W - sz)));
      centered = true;
    }
  }
  if (!centered) {
    y0 = rng.uniform_int(H - sz + 1);
    x0 = rng.uniform_int(W - sz + 1);
  }
  Patch p;
  p.image = crop(s.image, y0, x0, sz);
  p.label = crop(s.label, y0, x0, sz);
  p.brain_mask = crop(s.brain_mask, y0, x0, sz);
  return p;
}

AugmentOps draw_augment(Rng& rng) {
  AugmentOps ops;
  ops.hflip = rng.coin();
  ops.vflip = rng.coin();
  ops.quarter_turns = static_cast<int>(rng.uniform_int(4));
  return ops;
}

namespace {

Tensor transform_grid(const Tensor& t, const AugmentOps& ops) {
  const std::size_t H = t.extent(1), W = t.extent(2);
  Tensor out = t;
  if (ops.hflip) {
    Tensor next({1, H, W});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) next[y * W + x] = out[y * W + (W - 1 - x)];
    out = std::move(next);
  }
  if (ops.vflip) {
    Tensor next({1, H, W});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) next[y * W + x] = out[(H - 1 - y) * W + x];
    out = std::move(next);
  }
  const int turns = ((ops.quarter_turns % 4) + 4) % 4;
  for (int t90 = 0; t90 < turns; ++t90) {
    // clockwise quarter turn; square grids only
    Tensor next({1, H, W});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) next[y * W + x] = out[(H - 1 - x) * W + y];
    out = std::move(next);
  }
  return out;
}

}  // namespace

Patch apply_augment(const Patch& p, const AugmentOps& ops) {
  const int turns = ((ops.quarter_turns % 4) + 4) % 4;
  if (turns != 0 && p.image.extent(1) != p.image.extent(2)) {
    throw std::invalid_argument("apply_augment: rotation requires a square patch");
  }
  Patch out;
  out.image = transform_grid(p.image, ops);
  out.label = transform_grid(p.label, ops);
  out.brain_mask = transform_grid(p.brain_mask, ops);
  return out;
}

Patch augment(const Patch& p, Rng& rng) { return apply_augment(p, draw_augment(rng)); }

std::uint64_t client_config_digest(const std::vector<ClientConfig>& configs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_num = [&h](double v) {
    h = fnv1a(std::to_string(v), h);
    h = fnv1a("/", h);
  };
  for (const auto& c : configs) {
    h = fnv1a(c.client_id, h);
    mix_num(c.n_cases);
    mix_num(c.image_size);
    mix_num(c.brain_axis_min);
    mix_num(c.brain_axis_max);
    mix_num(c.intensity_mean);
    mix_num(c.intensity_std);
    mix_num(c.lesion_count_min);
    mix_num(c.lesion_count_max);
    mix_num(c.lesion_sigma_min);
    mix_num(c.lesion_sigma_max);
    mix_num(c.ratio_min);
    mix_num(c.ratio_max);
    mix_num(c.lesion_contrast);
    mix_num(c.noise_std);
    mix_num(static_cast<double>(c.seed));
  }
  return h;
}

}  // namespace fedseg
