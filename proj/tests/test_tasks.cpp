#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ens/tasks.hpp"

using namespace ens;

TEST_CASE("clean images stay inside the safe range") {
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    Tensor img = generate_clean_image(32, rng);
    CHECK(img.shape == std::array<int, 4>{1, 3, 32, 32});
    for (double v : img.data) {
      CHECK(v >= 0.08);
      CHECK(v <= 0.92);
    }
  }
}

TEST_CASE("datasets are deterministic and split-disjoint") {
  RestorationTask task;
  task.seed = 7;
  auto a = generate_dataset(task, "train", 4);
  auto b = generate_dataset(task, "train", 4);
  auto c = generate_dataset(task, "val", 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(a[i].clean.data == b[i].clean.data);
    CHECK(a[i].degraded.data == b[i].degraded.data);
    CHECK(a[i].clean.data != c[i].clean.data);
  }
  // growing a split keeps the existing items stable
  auto big = generate_dataset(task, "train", 6);
  CHECK(big[3].clean.data == a[3].clean.data);
}

TEST_CASE("gaussian noise at sigma 0.1 lands near 20 dB") {
  RestorationTask task;
  task.kind = TaskKind::Denoise;
  task.noise_sigma = 0.1;
  task.seed = 3;
  task.image_size = 32;
  auto pairs = generate_dataset(task, "train", 24);
  double mean = input_baseline_psnr(pairs);
  CHECK(mean == doctest::Approx(20.0).epsilon(0.01));  // within ~0.2 dB
}

TEST_CASE("deblur and derain degrade without leaving the dynamic range") {
  for (TaskKind kind : {TaskKind::Deblur, TaskKind::Derain}) {
    RestorationTask task;
    task.kind = kind;
    task.seed = 5;
    auto pairs = generate_dataset(task, "train", 4);
    for (const auto& p : pairs) {
      CHECK(p.degraded.data != p.clean.data);
      for (double v : p.degraded.data) {
        CHECK(v >= -1e-12);
        CHECK(v <= 1.0 + 1e-12);
      }
      CHECK(psnr(p.degraded, p.clean) < 40.0);
    }
  }
}

TEST_CASE("task kind string round trip") {
  for (TaskKind k : {TaskKind::Denoise, TaskKind::Deblur, TaskKind::Derain})
    CHECK(task_kind_from_string(task_kind_to_string(k)) == k);
  CHECK_THROWS_AS(task_kind_from_string("sharpen"), ConfigError);
}

TEST_CASE("psnr basics") {
  Tensor a = Tensor::full(1, 1, 4, 4, 0.5);
  Tensor b = a;
  CHECK(psnr(a, b) == 99.0);  // identical images cap
  b.data[0] = 0.6;
  double mse = 0.01 / 16.0;
  CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-12));
  CHECK(psnr(a, b) == psnr(b, a));
  // out-of-range values are clamped before comparison
  Tensor c = a, d = a;
  c.data[0] = 1.5;
  d.data[0] = 1.2;
  CHECK(psnr(c, d) == 99.0);
  Tensor e(1, 1, 4, 4);
  CHECK_THROWS_AS(psnr(a, e = Tensor(1, 1, 2, 2)), DimensionError);
}

TEST_CASE("psnr improves as images get closer") {
  Rng rng(9);
  Tensor clean = generate_clean_image(16, rng);
  Tensor near = clean, far = clean;
  for (std::size_t i = 0; i < clean.numel(); ++i) {
    near.data[i] += 0.01 * rng.normal();
    far.data[i] += 0.1 * rng.normal();
  }
  CHECK(psnr(near, clean) > psnr(far, clean));
}

TEST_CASE("ssim properties") {
  Rng rng(11);
  Tensor a = generate_clean_image(16, rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor noisy = a, noisier = a;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    noisy.data[i] += 0.03 * rng.normal();
    noisier.data[i] += 0.15 * rng.normal();
  }
  double s1 = ssim(noisy, a), s2 = ssim(noisier, a);
  CHECK(s1 < 1.0);
  CHECK(s2 < s1);
  CHECK(s2 > -1.0);
  CHECK(ssim(noisy, a) == doctest::Approx(ssim(a, noisy)).epsilon(1e-12));
  CHECK_THROWS_AS(ssim(a, a, 32), ConfigError);  // window larger than image
}

TEST_CASE("train schedule validation") {
  TrainSchedule s;
  CHECK_THROWS_AS(s.validate(), ConfigError);  // no phases
  s.phases = {{12, 1, 10}};
  CHECK_THROWS_AS(s.validate(), ConfigError);  // patch not divisible by 8
  s.phases = {{16, 1, 10}, {8, 1, 10}};
  CHECK_THROWS_AS(s.validate(), ConfigError);  // patches must not shrink
  s.phases = {{8, 1, 10}, {16, 2, 10}};
  s.validate();
  CHECK(s.total_steps() == 20);
}

TEST_CASE("erf of the identity is a point mass at the centre") {
  Rng rng(13);
  std::vector<Tensor> probes{generate_clean_image(16, rng)};
  Tensor map = erf_map([](Graph&, Value v) { return v; }, probes);
  CHECK(map.at(0, 0, 8, 8) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(erf_mass_within(map, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("erf of an averaging conv spreads mass beyond the centre") {
  Rng rng(15);
  std::vector<Tensor> probes{generate_clean_image(16, rng)};
  Tensor w = Tensor::full(3, 1, 3, 3, 1.0 / 9.0);
  Tensor b(1, 3, 1, 1);
  Tensor map = erf_map(
      [&](Graph& g, Value v) {
        Value y = g.depthwise_conv_3x3(v, g.input(w), g.input(b));
        return g.depthwise_conv_3x3(y, g.input(w), g.input(b));
      },
      probes);
  double total = 0;
  for (double v : map.data) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(erf_mass_within(map, 0.5) < 1.0);
  CHECK(erf_mass_within(map, 2.9) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(erf_mass_within(map, 1.0) > erf_mass_within(map, 0.5));
}
