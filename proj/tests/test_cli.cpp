#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli() {
  const char* p = std::getenv("ENS_CLI");
  REQUIRE_MESSAGE(p != nullptr, "ENS_CLI must point at the pipeline binary");
  return p;
}

int run(const std::string& args, const std::string& log = "cli_run.log") {
  std::string cmd = cli() + " " + args + " > " + log + " 2> " + log + ".err";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

json slurp(const std::string& path) {
  std::ifstream f(path);
  REQUIRE_MESSAGE(f.good(), path);
  json j;
  f >> j;
  return j;
}

const char* kTinyConfig = R"({
  "seed": 1,
  "task": {"kind": "denoise", "image_size": 16, "noise_sigma": 0.1},
  "data": {"train": 4, "val": 2, "test": 2},
  "model": {"base_width": 4},
  "train": {"lr": 1e-3, "phases": [{"patch": 16, "batch": 1, "steps": 3}]},
  "distill": {"steps": 2, "lr": 1e-2, "probes": 2},
  "search": {"initial": 5, "budget": 8, "knee_candidates": 3, "candidates": 64,
             "perturbations": 4, "refit_interval": 10, "gp_restarts": 1, "nm_iters": 30},
  "finetune": {"lr": 1e-3, "phases": [{"patch": 16, "batch": 1, "steps": 2}]}
})";

struct Workspace {
  std::string dir = "cli_ws";
  std::string config = "cli_ws/config.json";
  Workspace() {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(config) << kTinyConfig;
  }
  std::string artifact(const std::string& name, const std::string& ext, const json& meta) {
    return dir + "/" + name + "_" + meta.at("config_hash").get<std::string>() + "." + ext;
  }
};

}  // namespace

TEST_CASE("full pipeline runs end to end") {
  Workspace ws;
  std::string base = "--config " + ws.config + " --out " + ws.dir + " ";

  REQUIRE(run(base + "gen-data", ws.dir + "/01.log") == 0);
  json data = slurp(ws.dir + "/01.log");
  CHECK(data["splits"]["train"]["count"] == 4);
  CHECK(data["splits"]["val"]["baseline_psnr"].get<double>() > 15.0);

  REQUIRE(run(base + "train-teacher", ws.dir + "/02.log") == 0);
  json teacher = slurp(ws.dir + "/02.log");
  CHECK(teacher["steps"] == 3);
  CHECK(fs::exists(teacher["checkpoint"].get<std::string>()));

  REQUIRE(run(base + "distill --workers 2", ws.dir + "/03.log") == 0);
  json distill = slurp(ws.dir + "/03.log");
  CHECK(distill["surrogates"] == 22);
  CHECK(fs::exists(distill["library"].get<std::string>()));
  // one JSON line per surrogate
  std::ifstream jl(distill["report"].get<std::string>());
  std::string line;
  int lines = 0;
  while (std::getline(jl, line))
    if (!line.empty()) {
      json::parse(line);
      ++lines;
    }
  CHECK(lines == 22);

  REQUIRE(run(base + "search", ws.dir + "/04.log") == 0);
  json search = slurp(ws.dir + "/04.log");
  CHECK(search["evaluations"] == 8);
  CHECK(search["knee_code"].size() == 8);
  CHECK(fs::exists(ws.artifact("search", "csv", search)));
  CHECK(fs::exists(ws.artifact("search", "csv", search) + ".meta.json"));

  REQUIRE(run(base + "finetune", ws.dir + "/05.log") == 0);
  json fine = slurp(ws.dir + "/05.log");
  CHECK(fine["code"] == search["knee_code"]);
  CHECK(fs::exists(fine["checkpoint"].get<std::string>()));

  REQUIRE(run(base + "evaluate", ws.dir + "/06.log") == 0);
  json eval = slurp(ws.dir + "/06.log");
  CHECK(eval["test_psnr"].get<double>() > 0.0);
  CHECK(eval["code"] == search["knee_code"]);

  REQUIRE(run(base + "erf --probes 1", ws.dir + "/07.log") == 0);
  json erf = slurp(ws.dir + "/07.log");
  CHECK(erf["map"].size() == 16 * 16);
  double quarter = erf["mass_within_quarter"].get<double>();
  CHECK(quarter > 0.0);
  CHECK(quarter <= erf["mass_within_half"].get<double>() + 1e-12);

  REQUIRE(run(base + "report", ws.dir + "/08.log") == 0);
  json rep = slurp(ws.dir + "/08.log");
  CHECK(rep.contains("teacher"));
  CHECK(rep.contains("search"));
  CHECK(rep.contains("finetune_knee"));

  fs::remove_all(ws.dir);
}

TEST_CASE("alternative finetune selectors work without a search result") {
  Workspace ws;
  std::string base = "--config " + ws.config + " --out " + ws.dir + " ";
  REQUIRE(run(base + "train-teacher", ws.dir + "/t.log") == 0);
  REQUIRE(run(base + "distill", ws.dir + "/d.log") == 0);

  REQUIRE(run(base + "finetune --equal-split", ws.dir + "/eq.log") == 0);
  json eq = slurp(ws.dir + "/eq.log");
  // 8 stages: 4 teachers (rounded up), 4 largest surrogates
  CHECK(eq["code"] == json::array({0, 0, 0, 0, 1, 1, 1, 1}));

  REQUIRE(run(base + "finetune --random-arch --no-distill", ws.dir + "/rnd.log") == 0);
  json rnd = slurp(ws.dir + "/rnd.log");
  CHECK(rnd["variant"] == "random-nodistill");

  REQUIRE(run(base + "finetune --code 0,1,0,2,0,1,0,1", ws.dir + "/c.log") == 0);
  json c = slurp(ws.dir + "/c.log");
  CHECK(c["code"] == json::array({0, 1, 0, 2, 0, 1, 0, 1}));

  fs::remove_all(ws.dir);
}

TEST_CASE("errors exit nonzero with machine-readable diagnostics") {
  Workspace ws;
  // invalid config: unknown key
  std::ofstream(ws.dir + "/bad.json") << R"({"sseed": 3})";
  CHECK(run("--config " + ws.dir + "/bad.json --out " + ws.dir + " gen-data",
            ws.dir + "/e1.log") == 2);
  json err = slurp(ws.dir + "/e1.log.err");
  CHECK(err["type"] == "config");
  CHECK(err["error"].get<std::string>().find("sseed") != std::string::npos);

  // missing upstream artifact
  CHECK(run("--config " + ws.config + " --out " + ws.dir + " search", ws.dir + "/e2.log") == 1);
  json err2 = slurp(ws.dir + "/e2.log.err");
  CHECK(err2["type"] == "runtime");

  // bad code for finetune
  CHECK(run("--config " + ws.config + " --out " + ws.dir + " finetune --code 9,9,9,9,9,9,9,9",
            ws.dir + "/e3.log") != 0);

  fs::remove_all(ws.dir);
}

TEST_CASE("seed override changes the config hash") {
  Workspace ws;
  REQUIRE(run("--config " + ws.config + " --out " + ws.dir + " gen-data", ws.dir + "/a.log") ==
          0);
  REQUIRE(run("--config " + ws.config + " --seed 7 --out " + ws.dir + " gen-data",
              ws.dir + "/b.log") == 0);
  json a = slurp(ws.dir + "/a.log"), b = slurp(ws.dir + "/b.log");
  CHECK(a["config_hash"] != b["config_hash"]);
  fs::remove_all(ws.dir);
}
