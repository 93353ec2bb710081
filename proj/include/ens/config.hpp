#pragma once

#include <string>

#include <json.hpp>

#include "ens/distill.hpp"
#include "ens/ens.hpp"
#include "ens/tasks.hpp"

namespace ens {

// Everything a pipeline run needs, loadable from versioned JSON. Unknown keys
// are rejected so typos fail loudly instead of silently using defaults.
struct RunConfig {
  int version = 1;
  std::uint64_t seed = 1;

  RestorationTask task;
  int n_train = 32, n_val = 8, n_test = 8;

  int base_width = 16;
  ModelDims dims;

  TrainSchedule teacher_train;
  DistillHyper distill;
  int distill_probes = 4;

  EnsConfig search;
  double w_teacher = 3.0, w_surrogate = 1.0;

  TrainSchedule finetune;

  RunConfig();

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;

  // FNV-1a over the canonical JSON dump; names output artifacts.
  std::string hash() const;
};

std::string fnv1a_hex(const std::string& s);

}  // namespace ens
