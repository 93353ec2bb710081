#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ens/tasks.hpp"
#include "ens/unet.hpp"

namespace ens {

// Continuous-to-discrete decoding: component i of x in [0,1] picks option
// min(floor(x_i * K_i), K_i - 1).
ArchCode decode(const std::vector<double>& x, const std::vector<StageSpec>& specs);

// Weighted block count; teacher blocks cost more than surrogate blocks.
// Requires w_teacher > w_surrogate > 0.
double penalty(const ArchCode& code, const std::vector<StageSpec>& specs,
               double w_teacher = 3.0, double w_surrogate = 1.0);

struct Observation {
  std::vector<double> x;  // continuous location in [0,1]^D
  ArchCode code;
  double f1 = 0.0;  // accuracy objective (teacher PSNR minus candidate PSNR)
  double f2 = 0.0;  // penalty objective
  bool cached = false;  // value reused from an earlier evaluation of the same code
};

struct FrontPoint {
  double f1 = 0.0, f2 = 0.0;
  int index = -1;  // position in the history it came from
};

// Non-dominated subset (minimization, both axes), sorted by ascending f1.
// Duplicate objective vectors keep only the earliest observation.
std::vector<FrontPoint> pareto_front(const std::vector<Observation>& hist);

// Dominated hypervolume w.r.t. reference (r1, r2); front need not be sorted.
double hypervolume(std::vector<FrontPoint> front, double r1, double r2);

double norm_pdf(double z);
double norm_cdf(double z);

// Closed-form bi-objective expected hypervolume improvement for independent
// Gaussian predictions (mu1, s1) x (mu2, s2); s = 0 degenerates to the point
// mass. `front` must be sorted ascending in f1 with strictly descending f2.
double ehvi(double mu1, double s1, double mu2, double s2,
            const std::vector<FrontPoint>& front, double r1, double r2);

// Index (into the sorted front) of the knee: maximum perpendicular distance
// from the normalized chord between the front's endpoints; ties resolve
// toward lower f1.
int knee_point(const std::vector<FrontPoint>& front);

// Deterministically scrambled Halton sequence in [0,1]^dim (digit
// permutations drawn once per dimension from the seed).
std::vector<std::vector<double>> scrambled_halton(int n, int dim, std::uint64_t seed);

struct EnsConfig {
  int initial = 17;          // 2*D + 1 for the full 8-component space
  int budget = 500;          // total history rows, initial design included
  int knee_candidates = 5;
  double ref_margin = 0.1;   // reference point = max + margin * range
  int candidates = 4096;     // uniform acquisition candidates per iteration
  int perturbations = 32;    // Gaussian candidates per incumbent front member
  double perturb_sigma = 0.05;
  int refit_interval = 25;   // hyperparameter refits are this many rows apart
  int gp_restarts = 4;
  int nm_iters = 150;
  std::uint64_t seed = 1;
  void validate() const;
};

using ObjectiveFn = std::function<std::pair<double, double>(const ArchCode&)>;

struct EnsResult {
  std::vector<Observation> history;
  std::vector<int> front_indices;  // history indices, ascending f1
  int knee_index = -1;             // history index of the knee point
  std::vector<int> knee_indices;   // selected candidates near the knee, closest first
  bool knee_truncated = false;     // front had fewer members than requested
};

// Raised when the objective fails mid-run; carries everything evaluated so far.
struct EnsError : std::runtime_error {
  std::vector<Observation> history;
  EnsError(const std::string& msg, std::vector<Observation> hist)
      : std::runtime_error(msg), history(std::move(hist)) {}
};

EnsResult run_ens(const std::vector<StageSpec>& specs, const ObjectiveFn& objective,
                  const EnsConfig& cfg);

// Objective over a distilled library: f1 = teacher_psnr - mean eval PSNR of
// the assembled hybrid, f2 = block penalty.
ObjectiveFn make_restoration_objective(const BlockLibrary& lib,
                                       const std::vector<ImagePair>& eval_set,
                                       double teacher_psnr, double w_teacher = 3.0,
                                       double w_surrogate = 1.0);

void write_history_csv(const std::string& path, const EnsResult& result);
nlohmann::json result_to_json(const EnsResult& result, const std::vector<StageSpec>& specs);

}  // namespace ens
