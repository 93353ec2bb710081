#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ens/checkpoint.hpp"
#include "ens/config.hpp"
#include "ens/distill.hpp"
#include "ens/ens.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool logging_enabled() {
  const char* v = std::getenv("ENS_LOG");
  return v && std::string(v) != "0" && std::string(v) != "";
}

void log(const std::string& msg) {
  if (logging_enabled()) std::cerr << "[ens] " << msg << "\n";
}

struct Ctx {
  ens::RunConfig cfg;
  std::string out = "out";
  std::string hash;

  std::string path(const std::string& name, const std::string& ext) const {
    return (fs::path(out) / (name + "_" + hash + "." + ext)).string();
  }
};

Ctx make_ctx(const std::string& config_path, std::optional<std::uint64_t> seed,
             const std::string& out) {
  Ctx ctx;
  ctx.cfg = config_path.empty() ? ens::RunConfig() : ens::RunConfig::load(config_path);
  if (seed) {
    ctx.cfg.seed = *seed;
    ctx.cfg.task.seed = ens::Rng::derive(*seed, 10);
    ctx.cfg.search.seed = ens::Rng::derive(*seed, 20);
  }
  ctx.out = out;
  ctx.hash = ctx.cfg.hash();
  fs::create_directories(ctx.out);
  return ctx;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  json j;
  f >> j;
  return j;
}

std::vector<ens::Tensor> degraded_inputs(const std::vector<ens::ImagePair>& pairs, int n) {
  std::vector<ens::Tensor> out;
  for (int i = 0; i < n && i < static_cast<int>(pairs.size()); ++i)
    out.push_back(pairs[i].degraded);
  return out;
}

// Network checkpoint with the architecture code embedded so it can be
// reconstructed without the library file.
void save_network_with_code(const std::string& path, ens::Network& net) {
  std::map<std::string, ens::Tensor> entries;
  net.visit([&](const std::string& n, ens::Tensor& t) { entries[n] = t; });
  ens::Tensor code(1, 1, 1, static_cast<int>(net.code.size()));
  for (std::size_t i = 0; i < net.code.size(); ++i) code.data[i] = net.code[i];
  entries["meta/code"] = code;
  ens::save_checkpoint(path, entries);
}

ens::Network load_network_with_code(const std::string& path,
                                    const std::vector<ens::StageSpec>& specs, int base_width,
                                    const ens::ModelDims& dims) {
  auto entries = ens::load_checkpoint(path);
  auto it = entries.find("meta/code");
  if (it == entries.end()) throw std::runtime_error("checkpoint missing meta/code: " + path);
  ens::ArchCode code;
  for (double v : it->second.data) code.push_back(static_cast<int>(v));
  ens::validate_code(code, specs);

  ens::Network net;
  net.base_width = base_width;
  net.dims = dims;
  net.code = code;
  ens::Rng dummy(0);
  net.glue.init(base_width, dummy);
  for (int i = 0; i < 8; ++i) {
    int width = base_width * ens::kStageWidthMult[i];
    net.stages[i] =
        code[i] == 0
            ? ens::StageVariant::teacher(specs[i].teacher_blocks, width, dims, dummy)
            : ens::StageVariant::surrogate(specs[i].surrogate_blocks[code[i] - 1], width, dims,
                                           dummy);
  }
  net.visit([&](const std::string& n, ens::Tensor& t) {
    auto e = entries.find(n);
    if (e == entries.end()) throw std::runtime_error("checkpoint missing " + n);
    if (e->second.shape != t.shape)
      throw ens::DimensionError("checkpoint entry " + n + " shape mismatch");
    t = e->second;
  });
  return net;
}

ens::ArchCode parse_code(const std::string& s, const std::vector<ens::StageSpec>& specs) {
  ens::ArchCode code;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) code.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  ens::validate_code(code, specs);
  return code;
}

// --- subcommands ------------------------------------------------------------

int cmd_gen_data(const Ctx& ctx) {
  json splits = json::object();
  const std::map<std::string, int> ns = {
      {"train", ctx.cfg.n_train}, {"val", ctx.cfg.n_val}, {"test", ctx.cfg.n_test}};
  for (const auto& [split, n] : ns) {
    auto pairs = ens::generate_dataset(ctx.cfg.task, split, n);
    double mean_psnr = ens::input_baseline_psnr(pairs);
    double mn = 1e300, mx = -1e300;
    for (const auto& p : pairs)
      for (double v : p.degraded.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
    splits[split] = {{"count", n},
                     {"baseline_psnr", mean_psnr},
                     {"degraded_min", mn},
                     {"degraded_max", mx}};
    log("gen-data: " + split + " baseline " + std::to_string(mean_psnr) + " dB");
  }
  json out = {{"config_hash", ctx.hash},
              {"task", ens::task_kind_to_string(ctx.cfg.task.kind)},
              {"image_size", ctx.cfg.task.image_size},
              {"splits", splits}};
  write_json(ctx.path("data", "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_train_teacher(const Ctx& ctx) {
  auto specs = ens::default_stage_specs();
  auto train_set = ens::generate_dataset(ctx.cfg.task, "train", ctx.cfg.n_train);
  auto val_set = ens::generate_dataset(ctx.cfg.task, "val", ctx.cfg.n_val);
  auto lib = ens::make_teacher_library(specs, ctx.cfg.base_width, ctx.cfg.dims,
                                       ens::Rng::derive(ctx.cfg.seed, 30));
  ens::Network net = ens::assemble(ens::ArchCode(specs.size(), 0), lib);
  ens::Rng rng(ens::Rng::derive(ctx.cfg.seed, 31));
  log("train-teacher: " + std::to_string(ctx.cfg.teacher_train.total_steps()) + " steps");
  auto curve = ens::train(net, train_set, ctx.cfg.teacher_train, rng);
  lib.glue = net.glue;
  for (int i = 0; i < 8; ++i) lib.options[i][0] = net.stages[i];
  ens::save_library(ctx.path("teacher", "bin"), lib);
  auto rep = ens::evaluate(net, val_set);
  json out = {{"config_hash", ctx.hash},
              {"steps", curve.size()},
              {"first_loss", curve.empty() ? 0.0 : curve.front()},
              {"final_loss", curve.empty() ? 0.0 : curve.back()},
              {"val_psnr", rep.mean_psnr},
              {"val_ssim", rep.mean_ssim},
              {"baseline_psnr", ens::input_baseline_psnr(val_set)},
              {"checkpoint", ctx.path("teacher", "bin")}};
  write_json(ctx.path("teacher", "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_distill(const Ctx& ctx, int workers) {
  auto specs = ens::default_stage_specs();
  auto lib = ens::load_library(ctx.path("teacher", "bin"), specs, ctx.cfg.base_width,
                               ctx.cfg.dims);
  auto train_set = ens::generate_dataset(ctx.cfg.task, "train", ctx.cfg.n_train);
  auto probes = degraded_inputs(train_set, ctx.cfg.distill_probes);
  log("distill: " + std::to_string(workers) + " workers");
  auto reports =
      ens::distill_all(lib, probes, ctx.cfg.distill, ens::Rng::derive(ctx.cfg.seed, 32), workers);
  ens::save_library(ctx.path("library", "bin"), lib);
  std::ofstream jl(ctx.path("distill", "jsonl"));
  for (const auto& r : reports) jl << r.to_json(specs[r.stage].id).dump() << "\n";
  json out = {{"config_hash", ctx.hash},
              {"surrogates", reports.size()},
              {"library", ctx.path("library", "bin")},
              {"report", ctx.path("distill", "jsonl")}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_search(const Ctx& ctx) {
  auto specs = ens::default_stage_specs();
  auto lib = ens::load_library(ctx.path("library", "bin"), specs, ctx.cfg.base_width,
                               ctx.cfg.dims);
  if (!lib.complete()) throw std::runtime_error("library is missing surrogate options");
  auto val_set = ens::generate_dataset(ctx.cfg.task, "val", ctx.cfg.n_val);
  ens::Network teacher = ens::assemble(ens::ArchCode(specs.size(), 0), lib);
  double teacher_psnr = ens::evaluate(teacher, val_set).mean_psnr;
  log("search: teacher " + std::to_string(teacher_psnr) + " dB, budget " +
      std::to_string(ctx.cfg.search.budget));
  auto obj = ens::make_restoration_objective(lib, val_set, teacher_psnr, ctx.cfg.w_teacher,
                                             ctx.cfg.w_surrogate);
  int evaluated = 0;
  ens::ObjectiveFn counted = [&](const ens::ArchCode& code) {
    ++evaluated;
    if (evaluated % 25 == 0) log("search: evaluation " + std::to_string(evaluated));
    return obj(code);
  };
  ens::EnsResult res = ens::run_ens(specs, counted, ctx.cfg.search);
  ens::write_history_csv(ctx.path("search", "csv"), res);
  write_json(ctx.path("search", "csv") + ".meta.json",
             {{"config_hash", ctx.hash}, {"config", ctx.cfg.to_json()}});
  json out = ens::result_to_json(res, specs);
  out["config_hash"] = ctx.hash;
  out["teacher_psnr"] = teacher_psnr;
  out["unique_codes_evaluated"] = evaluated;
  write_json(ctx.path("search", "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_finetune(const Ctx& ctx, const std::string& code_arg, bool no_distill, bool random_arch,
                 bool equal_split) {
  auto specs = ens::default_stage_specs();
  auto lib = ens::load_library(ctx.path("library", "bin"), specs, ctx.cfg.base_width,
                               ctx.cfg.dims);
  ens::ArchCode code;
  std::string tag = "knee";
  if (!code_arg.empty()) {
    code = parse_code(code_arg, specs);
    tag = "code";
  } else if (random_arch) {
    ens::Rng rng(ens::Rng::derive(ctx.cfg.seed, 34));
    for (const auto& s : specs) code.push_back(static_cast<int>(rng.uniform_int(s.option_count())));
    tag = "random";
  } else if (equal_split) {
    // first half (rounded up) keeps the teacher, rest takes the largest surrogate
    int teachers = (static_cast<int>(specs.size()) + 1) / 2;
    for (std::size_t i = 0; i < specs.size(); ++i)
      code.push_back(static_cast<int>(i) < teachers ? 0 : 1);
    tag = "equal";
  } else {
    json search = read_json(ctx.path("search", "json"));
    code = search.at("knee_code").get<ens::ArchCode>();
  }
  if (no_distill) {
    // swap the selected surrogates for fresh, untrained ones
    for (std::size_t i = 0; i < code.size(); ++i) {
      if (code[i] == 0) continue;
      ens::Rng rng(ens::Rng::derive(ctx.cfg.seed, 35 + i));
      lib.options[i][code[i]] = ens::StageVariant::surrogate(
          specs[i].surrogate_blocks[code[i] - 1], ctx.cfg.base_width * ens::kStageWidthMult[i],
          ctx.cfg.dims, rng);
    }
    tag += "-nodistill";
  }
  auto train_set = ens::generate_dataset(ctx.cfg.task, "train", ctx.cfg.n_train);
  auto test_set = ens::generate_dataset(ctx.cfg.task, "test", ctx.cfg.n_test);
  ens::Network net = ens::assemble(code, lib);
  auto before = ens::evaluate(net, test_set);
  ens::Rng rng(ens::Rng::derive(ctx.cfg.seed, 36));
  log("finetune: code " + ens::code_str(code));
  auto curve = ens::train(net, train_set, ctx.cfg.finetune, rng);
  auto after = ens::evaluate(net, test_set);
  std::string ckpt = ctx.path("finetune_" + tag, "bin");
  save_network_with_code(ckpt, net);
  json out = {{"config_hash", ctx.hash},
              {"code", code},
              {"variant", tag},
              {"penalty", ens::penalty(code, specs, ctx.cfg.w_teacher, ctx.cfg.w_surrogate)},
              {"test_psnr_before", before.mean_psnr},
              {"test_psnr_after", after.mean_psnr},
              {"test_ssim_after", after.mean_ssim},
              {"final_loss", curve.empty() ? 0.0 : curve.back()},
              {"checkpoint", ckpt}};
  write_json(ctx.path("finetune_" + tag, "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const Ctx& ctx, const std::string& checkpoint) {
  auto specs = ens::default_stage_specs();
  std::string path = checkpoint.empty() ? ctx.path("finetune_knee", "bin") : checkpoint;
  ens::Network net = load_network_with_code(path, specs, ctx.cfg.base_width, ctx.cfg.dims);
  auto test_set = ens::generate_dataset(ctx.cfg.task, "test", ctx.cfg.n_test);
  auto rep = ens::evaluate(net, test_set);
  json out = {{"config_hash", ctx.hash},
              {"checkpoint", path},
              {"code", net.code},
              {"test_psnr", rep.mean_psnr},
              {"test_ssim", rep.mean_ssim},
              {"baseline_psnr", ens::input_baseline_psnr(test_set)}};
  write_json(ctx.path("evaluate", "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_erf(const Ctx& ctx, const std::string& checkpoint, int probes) {
  auto specs = ens::default_stage_specs();
  std::string path = checkpoint.empty() ? ctx.path("finetune_knee", "bin") : checkpoint;
  ens::Network net = load_network_with_code(path, specs, ctx.cfg.base_width, ctx.cfg.dims);
  auto val_set = ens::generate_dataset(ctx.cfg.task, "val", std::max(probes, 1));
  std::vector<ens::Tensor> inputs = degraded_inputs(val_set, probes);
  ens::Tensor map = ens::erf_map(
      [&](ens::Graph& g, ens::Value in) { return net.forward(g, in); }, inputs);
  int side = map.h();
  json out = {{"config_hash", ctx.hash},
              {"checkpoint", path},
              {"probes", inputs.size()},
              {"mass_within_eighth", ens::erf_mass_within(map, side / 8.0)},
              {"mass_within_quarter", ens::erf_mass_within(map, side / 4.0)},
              {"mass_within_half", ens::erf_mass_within(map, side / 2.0)},
              {"map", map.data}};
  write_json(ctx.path("erf", "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_report(const Ctx& ctx) {
  json out = {{"config_hash", ctx.hash}, {"config", ctx.cfg.to_json()}};
  const char* sections[] = {"data",     "teacher",       "search",        "evaluate",
                            "erf",      "finetune_knee", "finetune_random",
                            "finetune_equal"};
  for (const char* s : sections) {
    std::string p = ctx.path(s, "json");
    if (fs::exists(p)) {
      json j = read_json(p);
      j.erase("map");  // keep the report compact
      out[s] = j;
    }
  }
  write_json(ctx.path("report", "json"), out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid restoration network search pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "override the configured seed");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("gen-data", "summarize the synthetic datasets");
  auto* teach = app.add_subcommand("train-teacher", "train the all-teacher network");
  auto* dist = app.add_subcommand("distill", "distill every surrogate variant");
  int workers = 1;
  dist->add_option("--workers", workers, "parallel distillation workers");
  auto* search = app.add_subcommand("search", "bi-objective architecture search");
  auto* fine = app.add_subcommand("finetune", "fine-tune a selected hybrid");
  std::string code_arg, checkpoint;
  bool no_distill = false, random_arch = false, equal_split = false;
  fine->add_option("--code", code_arg, "explicit architecture code, comma separated");
  fine->add_flag("--no-distill", no_distill, "replace selected surrogates with fresh ones");
  fine->add_flag("--random-arch", random_arch, "fine-tune a random architecture");
  fine->add_flag("--equal-split", equal_split,
                 "half teacher / half surrogate baseline (extra stage stays teacher)");
  auto* eval = app.add_subcommand("evaluate", "evaluate a network checkpoint");
  eval->add_option("--checkpoint", checkpoint, "network checkpoint path");
  auto* erf = app.add_subcommand("erf", "effective receptive field of a checkpoint");
  int erf_probes = 2;
  erf->add_option("--checkpoint", checkpoint, "network checkpoint path");
  erf->add_option("--probes", erf_probes, "number of probe images");
  auto* report = app.add_subcommand("report", "aggregate artifacts into one report");

  CLI11_PARSE(app, argc, argv);

  try {
    Ctx ctx = make_ctx(config_path, seed, out_dir);
    if (gen->parsed()) return cmd_gen_data(ctx);
    if (teach->parsed()) return cmd_train_teacher(ctx);
    if (dist->parsed()) return cmd_distill(ctx, workers);
    if (search->parsed()) return cmd_search(ctx);
    if (fine->parsed()) return cmd_finetune(ctx, code_arg, no_distill, random_arch, equal_split);
    if (eval->parsed()) return cmd_evaluate(ctx, checkpoint);
    if (erf->parsed()) return cmd_erf(ctx, checkpoint, erf_probes);
    if (report->parsed()) return cmd_report(ctx);
  } catch (const ens::ConfigError& e) {
    std::cerr << json{{"error", e.what()}, {"type", "config"}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"type", "runtime"}}.dump() << "\n";
    return 1;
  }
  return 0;
}
