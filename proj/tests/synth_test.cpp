#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <stdexcept>

#include <doctest.h>

#include "fedseg/synth.hpp"

using namespace fedseg;

namespace {

ClientConfig easy_config(const std::string& id = "C1") {
  ClientConfig c;
  c.client_id = id;
  c.n_cases = 6;
  c.image_size = 48;
  c.ratio_min = 0.01;
  c.ratio_max = 0.05;
  c.seed = 11;
  return c;
}

bool tensors_equal(const Tensor& a, const Tensor& b) { return a == b; }

bool samples_equal(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].client_id != b[i].client_id || a[i].case_id != b[i].case_id) return false;
    if (!tensors_equal(a[i].image, b[i].image)) return false;
    if (!tensors_equal(a[i].label, b[i].label)) return false;
    if (!tensors_equal(a[i].brain_mask, b[i].brain_mask)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generation is bitwise deterministic") {
  const ClientConfig cfg = easy_config();
  const auto a = generate_client(cfg);
  const auto b = generate_client(cfg);
  CHECK(samples_equal(a, b));
}

TEST_CASE("every case satisfies containment and ratio range") {
  ClientConfig cfg = easy_config();
  cfg.n_cases = 10;
  const auto samples = generate_client(cfg);
  REQUIRE(samples.size() == 10);
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < s.label.size(); ++i) {
      if (s.label[i] != 0.0) CHECK(s.brain_mask[i] == 1.0);
    }
    const auto ratio = lesion_ratio(s);
    REQUIRE(ratio.has_value());
    CHECK(*ratio >= cfg.ratio_min);
    CHECK(*ratio <= cfg.ratio_max);
    CHECK(s.brain_mask.sum() > 0.0);
  }
}

TEST_CASE("narrow ratio band is honored") {
  ClientConfig cfg = easy_config();
  cfg.ratio_min = 0.02;
  cfg.ratio_max = 0.03;
  cfg.n_cases = 5;
  const auto samples = generate_client(cfg);
  for (const auto& s : samples) {
    const double r = *lesion_ratio(s);
    CHECK(r >= 0.02);
    CHECK(r <= 0.03);
  }
}

TEST_CASE("infeasible ratio range errors after bounded retries") {
  ClientConfig cfg = easy_config();
  cfg.lesion_count_min = cfg.lesion_count_max = 1;
  cfg.lesion_sigma_min = cfg.lesion_sigma_max = 1.0;
  cfg.ratio_min = 0.19;  // one tiny blob cannot reach 19% of the brain
  cfg.ratio_max = 0.2;
  cfg.max_ratio_retries = 25;
  CHECK_THROWS_WITH_AS(generate_client(cfg), doctest::Contains("retries"),
                       std::runtime_error);
}

TEST_CASE("intensity shift separates client means") {
  ClientConfig a = easy_config("A");
  a.intensity_mean = 0.4;
  ClientConfig b = easy_config("B");
  b.intensity_mean = 0.7;

  auto brain_mean = [](const std::vector<Sample>& samples) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : samples) {
      for (std::size_t i = 0; i < s.image.size(); ++i) {
        if (s.brain_mask[i] != 0.0 && s.label[i] == 0.0) {
          sum += s.image[i];
          ++count;
        }
      }
    }
    return sum / static_cast<double>(count);
  };
  const double mean_a = brain_mean(generate_client(a));
  const double mean_b = brain_mean(generate_client(b));
  CHECK(mean_b - mean_a > 0.2);
}

TEST_CASE("lesion_ratio conventions") {
  Tensor label({1, 2, 2});
  Tensor brain({1, 2, 2}, 1.0);
  CHECK(*lesion_ratio(label, brain) == 0.0);

  label[0] = 1.0;
  CHECK(*lesion_ratio(label, brain) == doctest::Approx(0.25).epsilon(1e-15));

  Tensor no_brain({1, 2, 2}, 0.0);
  CHECK_FALSE(lesion_ratio(Tensor({1, 2, 2}), no_brain).has_value());
}

TEST_CASE("lesion_ratio 3 of 300") {
  Tensor label({1, 20, 15});
  Tensor brain({1, 20, 15}, 1.0);
  label[0] = label[1] = label[2] = 1.0;
  CHECK(*lesion_ratio(label, brain) == doctest::Approx(0.01).epsilon(1e-15));
}

TEST_CASE("sample_patch full-size returns the whole sample") {
  const auto samples = generate_client(easy_config());
  Rng rng(3);
  const Patch p = sample_patch(samples[0], samples[0].image.extent(1), rng);
  CHECK(tensors_equal(p.image, samples[0].image));
  CHECK(tensors_equal(p.label, samples[0].label));
  CHECK(tensors_equal(p.brain_mask, samples[0].brain_mask));
}

TEST_CASE("sample_patch corners cover all offsets") {
  ClientConfig cfg = easy_config();
  cfg.image_size = 16;
  cfg.lesion_sigma_min = 0.8;
  cfg.lesion_sigma_max = 1.2;
  cfg.ratio_min = 0.01;
  cfg.ratio_max = 0.15;
  const auto samples = generate_client(cfg);
  Rng rng(5);
  const int size = 12;
  const int offsets = 16 - size + 1;  // 5 per axis
  std::map<std::pair<double, double>, int> seen;
  const int draws = 4000;
  for (int i = 0; i < draws; ++i) {
    const Patch p = sample_patch(samples[0], size, rng);
    seen[{p.image[0], p.image[size]}]++;  // corner fingerprint
  }
  // chi-square against uniform over the 25 corner cells
  CHECK(seen.size() == static_cast<std::size_t>(offsets * offsets));
  const double expected = static_cast<double>(draws) / (offsets * offsets);
  double chi2 = 0.0;
  for (const auto& [key, count] : seen) {
    const double d = count - expected;
    chi2 += d * d / expected;
  }
  // 24 dof; p > 0.001 demands chi2 < 51.18
  CHECK(chi2 < 51.18);
}

TEST_CASE("cropped label never exceeds cropped brain mask") {
  const auto samples = generate_client(easy_config());
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const Patch p = sample_patch(samples[i % samples.size()], 24, rng);
    for (std::size_t j = 0; j < p.label.size(); ++j) {
      if (p.label[j] != 0.0) CHECK(p.brain_mask[j] == 1.0);
    }
  }
}

TEST_CASE("augment identity draw leaves the patch unchanged") {
  const auto samples = generate_client(easy_config());
  Rng rng(9);
  const Patch p = sample_patch(samples[0], 24, rng);
  const AugmentOps identity{};
  const Patch q = apply_augment(p, identity);
  CHECK(tensors_equal(p.image, q.image));
  CHECK(tensors_equal(p.label, q.label));
  CHECK(tensors_equal(p.brain_mask, q.brain_mask));
}

TEST_CASE("augment preserves lesion ratio exactly") {
  const auto samples = generate_client(easy_config());
  Rng rng(13);
  for (int i = 0; i < 30; ++i) {
    const Patch p = sample_patch(samples[i % samples.size()], 24, rng);
    const Patch q = augment(p, rng);
    const auto rp = lesion_ratio(p);
    const auto rq = lesion_ratio(q);
    CHECK(rp.has_value() == rq.has_value());
    if (rp) CHECK(*rp == *rq);
  }
}

TEST_CASE("double horizontal flip is the identity") {
  const auto samples = generate_client(easy_config());
  Rng rng(15);
  const Patch p = sample_patch(samples[0], 24, rng);
  AugmentOps hflip;
  hflip.hflip = true;
  const Patch q = apply_augment(apply_augment(p, hflip), hflip);
  CHECK(tensors_equal(p.image, q.image));
  CHECK(tensors_equal(p.label, q.label));
}

TEST_CASE("four quarter turns are the identity") {
  const auto samples = generate_client(easy_config());
  Rng rng(17);
  const Patch p = sample_patch(samples[0], 24, rng);
  AugmentOps turn;
  turn.quarter_turns = 1;
  Patch q = p;
  for (int i = 0; i < 4; ++i) q = apply_augment(q, turn);
  CHECK(tensors_equal(p.image, q.image));
}

TEST_CASE("dataset round-trips bit-exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "fedseg_ds_roundtrip";
  std::filesystem::remove_all(dir);
  const auto samples = generate_client(easy_config());
  save_dataset(samples, dir, 0xabcdef);
  const auto loaded = load_dataset(dir);
  CHECK(samples_equal(samples, loaded));
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset load detects truncation") {
  const auto dir = std::filesystem::temp_directory_path() / "fedseg_ds_trunc";
  std::filesystem::remove_all(dir);
  const auto samples = generate_client(easy_config());
  save_dataset(samples, dir);

  const auto victim = dir / "C1_case000.image.f64";
  std::string bytes;
  {
    std::ifstream is(victim, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  std::ofstream(victim, std::ios::binary | std::ios::trunc)
      << bytes.substr(0, bytes.size() - 17);
  CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("truncated"),
                       std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset load detects bad magic and shape mismatch") {
  const auto dir = std::filesystem::temp_directory_path() / "fedseg_ds_corrupt";
  std::filesystem::remove_all(dir);
  const auto samples = generate_client(easy_config());
  save_dataset(samples, dir);

  const auto victim = dir / "C1_case001.label.u8";
  std::string bytes;
  {
    std::ifstream is(victim, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'Z';
    std::ofstream(victim, std::ios::binary | std::ios::trunc) << bad;
    CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("magic"),
                         std::runtime_error);
  }
  SUBCASE("shape mismatch against manifest") {
    std::string bad = bytes;
    bad[11] = static_cast<char>(bad[11] + 1);  // first extent, little-endian low byte
    std::ofstream(victim, std::ios::binary | std::ios::trunc) << bad;
    CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("shape"),
                         std::runtime_error);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("disjoint target ranges give disjoint empirical distributions") {
  ClientConfig lo = easy_config("LO");
  lo.ratio_min = 0.005;
  lo.ratio_max = 0.012;
  lo.lesion_sigma_min = 0.8;
  lo.lesion_sigma_max = 1.6;
  lo.n_cases = 8;
  ClientConfig hi = easy_config("HI");
  hi.ratio_min = 0.05;
  hi.ratio_max = 0.09;
  hi.lesion_sigma_min = 2.0;
  hi.lesion_sigma_max = 3.5;
  hi.lesion_count_min = 2;
  hi.lesion_count_max = 5;
  hi.n_cases = 8;

  double lo_max = 0.0, hi_min = 1.0;
  for (const auto& s : generate_client(lo)) lo_max = std::max(lo_max, *lesion_ratio(s));
  for (const auto& s : generate_client(hi)) hi_min = std::min(hi_min, *lesion_ratio(s));
  CHECK(lo_max < hi_min);
}
