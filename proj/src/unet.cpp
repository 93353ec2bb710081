#include "ens/unet.hpp"

#include "ens/checkpoint.hpp"

namespace ens {

std::vector<StageSpec> default_stage_specs() {
  return {
      {"E1", 4, {4, 2}},
      {"E2", 6, {6, 4, 2}},
      {"E3", 6, {6, 4, 2}},
      {"B", 8, {8, 6, 4, 2}},
      {"D3", 6, {6, 4, 2}},
      {"D2", 6, {6, 4, 2}},
      {"D1", 4, {4, 2}},
      {"R", 4, {4, 2}},
  };
}

std::uint64_t search_space_size(const std::vector<StageSpec>& specs) {
  std::uint64_t total = 1;
  for (const auto& s : specs) total *= static_cast<std::uint64_t>(s.option_count());
  return total;
}

void enumerate_search_space(const std::vector<StageSpec>& specs,
                            const std::function<void(const ArchCode&)>& fn) {
  ArchCode code(specs.size(), 0);
  while (true) {
    fn(code);
    int i = static_cast<int>(specs.size()) - 1;
    while (i >= 0) {
      if (++code[i] < specs[i].option_count()) break;
      code[i] = 0;
      --i;
    }
    if (i < 0) return;
  }
}

void validate_code(const ArchCode& code, const std::vector<StageSpec>& specs) {
  if (code.size() != specs.size())
    throw ConfigError("code has " + std::to_string(code.size()) + " components, expected " +
                      std::to_string(specs.size()));
  for (std::size_t i = 0; i < code.size(); ++i)
    if (code[i] < 0 || code[i] >= specs[i].option_count())
      throw ConfigError("code component " + std::to_string(i + 1) + " (" + specs[i].id +
                        ") out of range: " + std::to_string(code[i]) + " not in [0, " +
                        std::to_string(specs[i].option_count() - 1) + "]");
}

std::string code_str(const ArchCode& code) {
  std::string s = "[";
  for (std::size_t i = 0; i < code.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(code[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------

void NetworkGlue::init(int base_width, Rng& rng) {
  const int c = base_width;
  stem.init(c, 3, rng);
  down[0].init(2 * c, 4 * c, rng);
  down[1].init(4 * c, 8 * c, rng);
  down[2].init(8 * c, 16 * c, rng);
  up[0].init(16 * c, 8 * c, rng);  // before shuffle into D3
  up[1].init(8 * c, 4 * c, rng);   // before shuffle into D2
  up[2].init(4 * c, 2 * c, rng);   // before shuffle into D1
  fuse[0].init(4 * c, 8 * c, rng);
  fuse[1].init(2 * c, 4 * c, rng);
  fuse[2].init(2 * c, 2 * c, rng);
  out.init(3, 2 * c, rng);
}

void NetworkGlue::visit(const std::string& p, const ParamVisitor& fn) {
  stem.visit(p + "/stem", fn);
  for (int i = 0; i < 3; ++i) down[i].visit(p + "/down" + std::to_string(i), fn);
  for (int i = 0; i < 3; ++i) up[i].visit(p + "/up" + std::to_string(i), fn);
  for (int i = 0; i < 3; ++i) fuse[i].visit(p + "/fuse" + std::to_string(i), fn);
  out.visit(p + "/out", fn);
}

bool BlockLibrary::complete() const {
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (static_cast<int>(options[i].size()) != specs[i].option_count()) return false;
  return true;
}

BlockLibrary make_teacher_library(const std::vector<StageSpec>& specs, int base_width,
                                  const ModelDims& dims, std::uint64_t seed) {
  if (specs.size() != 8) throw ConfigError("library requires exactly 8 stage specs");
  BlockLibrary lib;
  lib.base_width = base_width;
  lib.dims = dims;
  lib.specs = specs;
  Rng glue_rng(Rng::derive(seed, 0));
  lib.glue.init(base_width, glue_rng);
  for (int i = 0; i < 8; ++i) {
    Rng rng(Rng::derive(seed, 1 + i));
    lib.options[i].push_back(StageVariant::teacher(
        specs[i].teacher_blocks, base_width * kStageWidthMult[i], dims, rng));
  }
  return lib;
}

Network assemble(const ArchCode& code, const BlockLibrary& library) {
  validate_code(code, library.specs);
  Network net;
  net.base_width = library.base_width;
  net.dims = library.dims;
  net.code = code;
  net.glue = library.glue;
  for (int i = 0; i < 8; ++i) {
    if (code[i] >= static_cast<int>(library.options[i].size()))
      throw ConfigError("library is missing option " + std::to_string(code[i]) + " for stage " +
                        library.specs[i].id);
    net.stages[i] = library.options[i][code[i]];
  }
  return net;
}

void save_library(const std::string& path, BlockLibrary& lib) {
  std::map<std::string, Tensor> entries;
  lib.glue.visit("glue", [&](const std::string& n, Tensor& t) { entries[n] = t; });
  Tensor present(1, 1, 8, 8);  // option presence mask
  for (int i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < lib.options[i].size(); ++j) {
      present.at(0, 0, i, static_cast<int>(j)) = 1.0;
      lib.options[i][j].visit("stage" + std::to_string(i) + "/opt" + std::to_string(j),
                              [&](const std::string& n, Tensor& t) { entries[n] = t; });
    }
  entries["meta/options"] = present;
  save_checkpoint(path, entries);
}

BlockLibrary load_library(const std::string& path, const std::vector<StageSpec>& specs,
                          int base_width, const ModelDims& dims) {
  auto entries = load_checkpoint(path);
  auto it = entries.find("meta/options");
  if (it == entries.end()) throw std::runtime_error("library checkpoint missing meta/options");
  const Tensor& present = it->second;

  BlockLibrary lib;
  lib.base_width = base_width;
  lib.dims = dims;
  lib.specs = specs;
  Rng dummy(0);
  lib.glue.init(base_width, dummy);
  auto restore = [&](StageVariant& v, const std::string& prefix) {
    v.visit(prefix, [&](const std::string& n, Tensor& t) {
      auto e = entries.find(n);
      if (e == entries.end()) throw std::runtime_error("library checkpoint missing " + n);
      if (e->second.shape != t.shape)
        throw DimensionError("library entry " + n + " has shape " + e->second.shape_str() +
                             ", expected " + t.shape_str());
      t = e->second;
    });
  };
  lib.glue.visit("glue", [&](const std::string& n, Tensor& t) {
    auto e = entries.find(n);
    if (e == entries.end()) throw std::runtime_error("library checkpoint missing " + n);
    t = e->second;
  });
  for (int i = 0; i < 8; ++i) {
    int width = base_width * kStageWidthMult[i];
    for (int j = 0; j < specs[i].option_count(); ++j) {
      if (present.at(0, 0, i, j) == 0.0) continue;
      StageVariant v = j == 0
                           ? StageVariant::teacher(specs[i].teacher_blocks, width, dims, dummy)
                           : StageVariant::surrogate(specs[i].surrogate_blocks[j - 1], width,
                                                     dims, dummy);
      restore(v, "stage" + std::to_string(i) + "/opt" + std::to_string(j));
      lib.options[i].push_back(std::move(v));
    }
  }
  return lib;
}

// ---------------------------------------------------------------------------

Network::Trace Network::forward_trace(Graph& g, Value x) {
  const Tensor& xv = g.value(x);
  if (xv.c() != 3)
    throw DimensionError("network forward: expected 3 input channels, got " + xv.shape_str());
  if (xv.h() % 8 != 0 || xv.w() % 8 != 0)
    throw DimensionError("network forward: spatial dims of " + xv.shape_str() +
                         " must be divisible by 8");
  Trace tr;
  auto run_stage = [&](int i, Value in) {
    tr.stage_in[i] = in;
    tr.stage_out[i] = stage_forward(g, in, stages[i]);
    return tr.stage_out[i];
  };
  auto downsample = [&](Value v, Conv1x1P& proj) {
    return g.conv_1x1(g.pixel_unshuffle(v, 2), g.param(proj.w), g.param(proj.b));
  };
  auto upsample = [&](Value v, Conv1x1P& proj) {
    return g.pixel_shuffle(g.conv_1x1(v, g.param(proj.w), g.param(proj.b)), 2);
  };

  Value f0 = g.conv_1x1(x, g.param(glue.stem.w), g.param(glue.stem.b));
  Value f1 = run_stage(0, f0);
  Value f2 = run_stage(1, downsample(f1, glue.down[0]));
  Value f3 = run_stage(2, downsample(f2, glue.down[1]));
  Value f4 = run_stage(3, downsample(f3, glue.down[2]));

  Value u3 = upsample(f4, glue.up[0]);
  Value g3 = run_stage(4, g.conv_1x1(g.concat_channels(f3, u3), g.param(glue.fuse[0].w),
                                     g.param(glue.fuse[0].b)));
  Value u2 = upsample(g3, glue.up[1]);
  Value g2 = run_stage(5, g.conv_1x1(g.concat_channels(f2, u2), g.param(glue.fuse[1].w),
                                     g.param(glue.fuse[1].b)));
  Value u1 = upsample(g2, glue.up[2]);
  Value g1 = run_stage(6, g.conv_1x1(g.concat_channels(f1, u1), g.param(glue.fuse[2].w),
                                     g.param(glue.fuse[2].b)));
  Value fr = run_stage(7, g1);
  Value residual = g.conv_1x1(fr, g.param(glue.out.w), g.param(glue.out.b));
  tr.output = g.add(x, residual);
  return tr;
}

Tensor Network::infer(const Tensor& x) {
  Graph g;
  return g.value(forward(g, g.input(x)));
}

void Network::visit(const ParamVisitor& fn) {
  glue.visit("glue", fn);
  for (int i = 0; i < 8; ++i) stages[i].visit("stage" + std::to_string(i), fn);
}

std::vector<Tensor*> Network::params() {
  std::vector<Tensor*> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::size_t Network::param_count() {
  std::size_t total = 0;
  visit([&](const std::string&, Tensor& t) { total += t.numel(); });
  return total;
}

nlohmann::json Network::describe() {
  static const char* kIds[8] = {"E1", "E2", "E3", "B", "D3", "D2", "D1", "R"};
  nlohmann::json stages_json = nlohmann::json::array();
  std::size_t total = 0;
  for (int i = 0; i < 8; ++i) {
    std::size_t pc = stages[i].param_count();
    total += pc;
    stages_json.push_back({
        {"id", kIds[i]},
        {"kind", stages[i].kind == BlockKind::Teacher ? "teacher" : "surrogate"},
        {"blocks", stages[i].block_count()},
        {"width", base_width * kStageWidthMult[i]},
        {"params", pc},
    });
  }
  glue.visit("glue", [&](const std::string&, Tensor& t) { total += t.numel(); });
  return nlohmann::json{{"code", code}, {"base_width", base_width}, {"stages", stages_json},
                        {"total_params", total}};
}

void Network::save(const std::string& path) {
  std::map<std::string, Tensor> entries;
  visit([&](const std::string& name, Tensor& t) { entries[name] = t; });
  save_checkpoint(path, entries);
}

void Network::load(const std::string& path) {
  auto entries = load_checkpoint(path);
  visit([&](const std::string& name, Tensor& t) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw std::runtime_error("checkpoint missing entry: " + name);
    if (it->second.shape != t.shape)
      throw DimensionError("checkpoint entry " + name + " has shape " +
                           it->second.shape_str() + ", expected " + t.shape_str());
    t = it->second;
  });
}

}  // namespace ens
