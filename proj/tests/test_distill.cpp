#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ens/distill.hpp"
#include "ens/tasks.hpp"

using namespace ens;

namespace {

std::vector<Tensor> probe_inputs(int n, int size, std::uint64_t seed) {
  std::vector<Tensor> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) out.push_back(generate_clean_image(size, rng));
  return out;
}

std::vector<Tensor> feature_probes(int n, int c, int size, std::uint64_t seed) {
  std::vector<Tensor> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Tensor t(1, c, size, size);
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST_CASE("capture_features records every stage at the right resolution") {
  BlockLibrary lib = make_teacher_library(default_stage_specs(), 4, ModelDims{}, 1);
  Network teacher = assemble(ArchCode(8, 0), lib);
  auto inputs = probe_inputs(3, 16, 2);
  auto feats = capture_features(teacher, inputs);
  for (int i = 0; i < 8; ++i) {
    REQUIRE(feats[i].size() == 3);
    CHECK(feats[i][0].in.c() == 4 * kStageWidthMult[i]);
    CHECK(feats[i][0].in.h() == 16 / kStageScale[i]);
    CHECK(feats[i][0].out.shape == feats[i][0].in.shape);
  }
}

TEST_CASE("self-distillation starts and stays at zero loss") {
  Rng rng(3);
  StageVariant v = StageVariant::surrogate(2, 4, ModelDims{}, rng);
  auto inputs = feature_probes(2, 4, 8, 4);
  std::vector<StageFeature> feats;
  for (const auto& x : inputs) {
    Graph g;
    feats.push_back({x, g.value(stage_forward(g, g.input(x), v))});
  }
  auto before = v.params();
  std::vector<Tensor> snapshot;
  for (Tensor* p : before) snapshot.push_back(*p);
  DistillHyper h;
  h.steps = 3;
  auto rep = distill_stage(v, feats, h);
  CHECK(rep.initial_loss == 0.0);
  CHECK(rep.final_loss == 0.0);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i]->data == snapshot[i].data);
}

TEST_CASE("a surrogate memorizes its teacher stage") {
  Rng trng(5), srng(6);
  StageVariant teacher = StageVariant::teacher(1, 4, ModelDims{}, trng);
  StageVariant student = StageVariant::surrogate(2, 4, ModelDims{}, srng);
  auto inputs = feature_probes(2, 4, 8, 7);
  std::vector<StageFeature> feats;
  for (const auto& x : inputs) {
    Graph g;
    feats.push_back({x, g.value(stage_forward(g, g.input(x), teacher))});
  }
  DistillHyper h;
  h.steps = 120;
  h.lr = 2e-2;
  auto rep = distill_stage(student, feats, h);
  CHECK(rep.final_loss < 0.5 * rep.initial_loss);
  CHECK(rep.final_loss > 0.0);
}

TEST_CASE("divergence raises a training error and keeps parameters finite") {
  Rng trng(8), srng(9);
  StageVariant teacher = StageVariant::teacher(1, 4, ModelDims{}, trng);
  StageVariant student = StageVariant::surrogate(1, 4, ModelDims{}, srng);
  auto inputs = feature_probes(1, 4, 8, 10);
  std::vector<StageFeature> feats;
  {
    Graph g;
    feats.push_back({inputs[0], g.value(stage_forward(g, g.input(inputs[0]), teacher))});
  }
  DistillHyper h;
  h.steps = 400;
  h.lr = 1e6;  // guaranteed blow-up
  CHECK_THROWS_AS(distill_stage(student, feats, h), TrainError);
  for (Tensor* p : student.params()) CHECK(p->all_finite());
}

TEST_CASE("distill_all fills the library and is schedule-independent") {
  auto specs = default_stage_specs();
  auto inputs = probe_inputs(2, 16, 11);
  DistillHyper h;
  h.steps = 4;
  h.lr = 1e-3;

  BlockLibrary serial = make_teacher_library(specs, 4, ModelDims{}, 12);
  BlockLibrary parallel = make_teacher_library(specs, 4, ModelDims{}, 12);
  auto rs = distill_all(serial, inputs, h, 99, 1);
  auto rp = distill_all(parallel, inputs, h, 99, 4);

  REQUIRE(serial.complete());
  REQUIRE(parallel.complete());
  CHECK(rs.size() == 22);
  REQUIRE(rp.size() == rs.size());
  for (std::size_t k = 0; k < rs.size(); ++k) {
    CHECK(rs[k].stage == rp[k].stage);
    CHECK(rs[k].final_loss == rp[k].final_loss);  // bitwise determinism
  }
  for (int i = 0; i < 8; ++i)
    for (std::size_t j = 1; j < serial.options[i].size(); ++j) {
      auto a = serial.options[i][j].params();
      auto b = parallel.options[i][j].params();
      REQUIRE(a.size() == b.size());
      for (std::size_t p = 0; p < a.size(); ++p) CHECK(a[p]->data == b[p]->data);
    }
  // meta mirrors the reports
  CHECK(serial.meta[0].size() == 2);
  CHECK(serial.meta[3].size() == 4);
  CHECK(serial.meta[0][0].steps == 4);
}

TEST_CASE("distill report serializes to one JSON line") {
  DistillReport r;
  r.stage = 3;
  r.option = 2;
  r.blocks = 4;
  r.seed = 42;
  r.initial_loss = 1.5;
  r.final_loss = 0.25;
  r.steps = 10;
  auto j = r.to_json("B");
  CHECK(j["stage"] == "B");
  CHECK(j["blocks"] == 4);
  CHECK(j["final_loss"] == 0.25);
}
