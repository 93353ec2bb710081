#include "ens/distill.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include "ens/optim.hpp"
#include "ens/tasks.hpp"

namespace ens {

nlohmann::json DistillReport::to_json(const std::string& stage_id) const {
  return {
      {"stage", stage_id},      {"option", option},           {"blocks", blocks},
      {"seed", seed},           {"initial_loss", initial_loss},
      {"final_loss", final_loss}, {"steps", steps},
  };
}

std::array<std::vector<StageFeature>, 8> capture_features(Network& teacher,
                                                          const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ConfigError("capture_features: no probe inputs");
  std::array<std::vector<StageFeature>, 8> feats;
  for (const Tensor& x : inputs) {
    Graph g;
    Network::Trace tr = teacher.forward_trace(g, g.input(x));
    for (int i = 0; i < 8; ++i)
      feats[i].push_back({g.value(tr.stage_in[i]), g.value(tr.stage_out[i])});
  }
  return feats;
}

namespace {

// Stack all probe pairs along the batch axis so each step sees the full set.
void batch_features(const std::vector<StageFeature>& feats, Tensor& in, Tensor& out) {
  const Tensor& f0 = feats[0].in;
  const Tensor& o0 = feats[0].out;
  int P = static_cast<int>(feats.size());
  in = Tensor(P * f0.n(), f0.c(), f0.h(), f0.w());
  out = Tensor(P * o0.n(), o0.c(), o0.h(), o0.w());
  std::size_t in_stride = f0.numel(), out_stride = o0.numel();
  for (int p = 0; p < P; ++p) {
    require_same_shape(feats[p].in, f0, "distill feature batch");
    std::copy(feats[p].in.data.begin(), feats[p].in.data.end(),
              in.data.begin() + p * in_stride);
    std::copy(feats[p].out.data.begin(), feats[p].out.data.end(),
              out.data.begin() + p * out_stride);
  }
}

}  // namespace

DistillReport distill_stage(StageVariant& variant, const std::vector<StageFeature>& feats,
                            const DistillHyper& hyper) {
  if (feats.empty()) throw ConfigError("distill_stage: no features");
  Tensor xin, target;
  batch_features(feats, xin, target);

  auto params = variant.params();
  Adam opt(params, hyper.lr, hyper.steps, hyper.momentum);
  std::vector<Tensor> backup(params.size());
  DistillReport rep;
  rep.blocks = variant.block_count();
  rep.steps = hyper.steps;
  for (int s = 0; s < hyper.steps; ++s) {
    for (std::size_t i = 0; i < params.size(); ++i) backup[i] = *params[i];
    Graph g;
    double lv;
    Value loss;
    try {
      // squared feature error, averaged over probes only: keeping the sum
      // over channels/pixels gives gradients a useful magnitude
      Value d = g.sub(stage_forward(g, g.input(xin), variant), g.input(target));
      loss = g.scale(g.sum(g.hadamard(d, d)), 1.0 / static_cast<double>(feats.size()));
      lv = g.value(loss).data[0];
    } catch (const ContractError& e) {
      // diverged parameters can break value-level contracts (e.g. step sizes
      // underflowing to zero); treat that the same as a non-finite loss
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = backup[i];
      throw TrainError("distill: diverged at step " + std::to_string(s) + ": " + e.what(),
                       rep.final_loss);
    }
    if (!std::isfinite(lv)) {
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = backup[i];
      throw TrainError("distill: loss became non-finite at step " + std::to_string(s),
                       rep.final_loss);
    }
    if (s == 0) rep.initial_loss = lv;
    rep.final_loss = lv;
    g.backward(loss);
    opt.step(g, s);
  }
  return rep;
}

std::vector<DistillReport> distill_all(BlockLibrary& lib, const std::vector<Tensor>& inputs,
                                       const DistillHyper& hyper, std::uint64_t seed,
                                       int workers) {
  if (!lib.options[0].empty() && lib.options[0].size() > 1)
    throw ConfigError("distill_all: library already contains surrogates");
  ArchCode teacher_code(lib.specs.size(), 0);
  Network teacher = assemble(teacher_code, lib);
  auto feats = capture_features(teacher, inputs);

  struct WorkItem {
    int stage, option, blocks, width;
    std::uint64_t seed;
  };
  std::vector<WorkItem> items;
  for (int i = 0; i < 8; ++i) {
    lib.options[i].resize(lib.specs[i].option_count());
    lib.meta[i].resize(lib.specs[i].surrogate_blocks.size());
    for (std::size_t j = 0; j < lib.specs[i].surrogate_blocks.size(); ++j)
      items.push_back({i, static_cast<int>(j) + 1, lib.specs[i].surrogate_blocks[j],
                       lib.base_width * kStageWidthMult[i],
                       Rng::derive(seed, 100 + static_cast<std::uint64_t>(i) * 8 + j)});
  }

  std::vector<DistillReport> reports(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  auto run_item = [&](std::size_t k) {
    const WorkItem& it = items[k];
    try {
      Rng rng(it.seed);
      StageVariant v = StageVariant::surrogate(it.blocks, it.width, lib.dims, rng);
      DistillReport rep = distill_stage(v, feats[it.stage], hyper);
      rep.stage = it.stage;
      rep.option = it.option;
      rep.seed = it.seed;
      lib.options[it.stage][it.option] = std::move(v);
      lib.meta[it.stage][it.option - 1] = {rep.initial_loss, rep.final_loss, rep.seed, rep.steps};
      reports[k] = rep;
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  if (workers <= 1) {
    for (std::size_t k = 0; k < items.size(); ++k) run_item(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    int n = std::min<int>(workers, static_cast<int>(items.size()));
    for (int t = 0; t < n; ++t)
      pool.emplace_back([&] {
        for (std::size_t k = next.fetch_add(1); k < items.size(); k = next.fetch_add(1))
          run_item(k);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return reports;
}

}  // namespace ens
