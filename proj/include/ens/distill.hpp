#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ens/unet.hpp"

namespace ens {

struct DistillHyper {
  int steps = 200;
  double lr = 1e-2;
  double momentum = 0.9;
};

// One probe's (input, output) feature pair at a given stage of the teacher.
struct StageFeature {
  Tensor in, out;
};

struct DistillReport {
  int stage = 0;
  int option = 0;  // index into the stage's option pool (>= 1)
  int blocks = 0;
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
  nlohmann::json to_json(const std::string& stage_id) const;
};

// Runs the all-teacher network on each input and records every stage's
// (input, output) activations.
std::array<std::vector<StageFeature>, 8> capture_features(Network& teacher,
                                                          const std::vector<Tensor>& inputs);

// Trains `variant` to match the recorded teacher features (mean squared
// feature error, SGD with momentum). Throws TrainError on divergence.
DistillReport distill_stage(StageVariant& variant, const std::vector<StageFeature>& feats,
                            const DistillHyper& hyper);

// Creates and trains every surrogate variant in the library, filling
// options[i][1..] and meta[i]. Deterministic for a given seed regardless of
// `workers`: each surrogate draws from its own derived stream.
std::vector<DistillReport> distill_all(BlockLibrary& lib, const std::vector<Tensor>& inputs,
                                       const DistillHyper& hyper, std::uint64_t seed,
                                       int workers = 1);

}  // namespace ens
