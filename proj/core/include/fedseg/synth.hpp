#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedseg/rng.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

/// One synthetic client's generator knobs. intensity_mean / intensity_std /
/// noise_std are the domain-shift controls; target ratio bounds pin each
/// case's lesion-to-brain volume ratio.
struct ClientConfig {
  std::string client_id = "C1";
  int n_cases = 10;
  int image_size = 64;
  double brain_axis_min = 0.55;  // semi-axis as fraction of half extent
  double brain_axis_max = 0.85;
  double intensity_mean = 0.5;
  double intensity_std = 0.05;
  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_sigma_min = 1.0;  // Gaussian bump sigma, pixels
  double lesion_sigma_max = 2.5;
  double ratio_min = 0.01;
  double ratio_max = 0.03;
  double lesion_contrast = 0.45;
  double noise_std = 0.04;
  std::uint64_t seed = 0;
  int max_ratio_retries = 500;

  void validate() const;  // throws std::invalid_argument
};

/// One case: intensity image, binary lesion label, binary brain mask. The
/// label is always contained in the brain mask.
struct Sample {
  Tensor image;       // [1,H,W]
  Tensor label;       // [1,H,W], values 0/1
  Tensor brain_mask;  // [1,H,W], values 0/1
  std::string client_id;
  int case_id = 0;
};

struct Patch {
  Tensor image;
  Tensor label;
  Tensor brain_mask;
};

/// Deterministic in (config, seed): replaying a config reproduces every byte.
/// Lesion blobs are resampled until the case ratio lands in
/// [ratio_min, ratio_max]; throws after max_ratio_retries misses.
std::vector<Sample> generate_client(const ClientConfig& config);

/// count(label) / count(brain); nullopt when the crop contains no brain.
std::optional<double> lesion_ratio(const Tensor& label, const Tensor& brain_mask);
std::optional<double> lesion_ratio(const Patch& p);
std::optional<double> lesion_ratio(const Sample& s);

/// Uniform random top-left corner; all three grids cropped congruently. With
/// lesion_center_prob > 0 the crop is centered on a random lesion voxel with
/// that probability (clamped to the image).
Patch sample_patch(const Sample& s, int size, Rng& rng, double lesion_center_prob = 0.0);

struct AugmentOps {
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;  // multiples of 90 degrees
};

AugmentOps draw_augment(Rng& rng);
/// Applies the same transform to image, label and brain mask; requires a
/// square patch when rotating.
Patch apply_augment(const Patch& p, const AugmentOps& ops);
Patch augment(const Patch& p, Rng& rng);

/// Order-preserving digest of generator configs, recorded in dataset manifests.
std::uint64_t client_config_digest(const std::vector<ClientConfig>& configs);

/// Dataset directory: manifest.json plus per-case rasters (f64 image, one-byte
/// label/brain masks). Round-trips bit-exactly.
void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir,
                  std::uint64_t config_digest = 0);

std::vector<Sample> load_dataset(const std::filesystem::path& dir);

}  // namespace fedseg
