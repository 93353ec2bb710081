#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ens/tensor.hpp"
#include "ens/unet.hpp"

namespace ens {

enum class TaskKind { Denoise, Deblur, Derain };

TaskKind task_kind_from_string(const std::string& s);
std::string task_kind_to_string(TaskKind k);

// Synthetic restoration task: procedural clean textures plus a seeded
// degradation operator.
struct RestorationTask {
  TaskKind kind = TaskKind::Denoise;
  int image_size = 32;
  std::uint64_t seed = 1;
  // denoise
  double noise_sigma = 0.1;
  // deblur
  int blur_length = 5;
  // derain
  int streak_count = 6;
  double streak_intensity = 0.35;
};

struct ImagePair {
  Tensor degraded;  // (1,3,h,w)
  Tensor clean;
};

// Procedural clean image: gradient field + oriented sinusoids + polygons,
// values kept inside [0.08, 0.92] so additive degradations rarely clip.
Tensor generate_clean_image(int size, Rng& rng);
Tensor degrade(const Tensor& clean, const RestorationTask& task, Rng& rng);

// Deterministic per (task.seed, split, index); splits are disjoint by seed
// derivation.
std::vector<ImagePair> generate_dataset(const RestorationTask& task, const std::string& split,
                                        int n);

// --- metrics ---------------------------------------------------------------

// 10*log10(peak^2 / MSE) on [0,peak]-clamped inputs; identical images cap at 99 dB.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

// Mean local SSIM over uniform sliding windows.
double ssim(const Tensor& a, const Tensor& b, int window = 8, double k1 = 0.01,
            double k2 = 0.03, double peak = 1.0);

struct EvalReport {
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};
EvalReport evaluate(Network& net, const std::vector<ImagePair>& pairs);
double input_baseline_psnr(const std::vector<ImagePair>& pairs);

// --- training ----------------------------------------------------------------

struct TrainPhase {
  int patch = 32;
  int batch = 2;
  int steps = 1000;
};

struct TrainSchedule {
  std::vector<TrainPhase> phases;
  double lr = 2e-3;
  double momentum = 0.9;
  int total_steps() const {
    int t = 0;
    for (const auto& p : phases) t += p.steps;
    return t;
  }
  void validate() const;
};

struct TrainError : std::runtime_error {
  double last_finite_loss;
  explicit TrainError(const std::string& msg, double last)
      : std::runtime_error(msg), last_finite_loss(last) {}
};

// l1 training with progressive patches. Returns the per-step loss curve.
std::vector<double> train(Network& net, const std::vector<ImagePair>& train_set,
                          const TrainSchedule& schedule, Rng& rng);

// --- effective receptive field ----------------------------------------------

// Mean absolute input-gradient of the centre output activation (summed over
// channels), normalized to total mass 1. `f` maps an input Value to the
// output Value on the same graph.
Tensor erf_map(const std::function<Value(Graph&, Value)>& f, const std::vector<Tensor>& probes);

// Fraction of map mass within Euclidean `radius` of the centre pixel.
double erf_mass_within(const Tensor& map, double radius);

}  // namespace ens
