#include "ens/config.hpp"

#include <cstdio>
#include <fstream>

namespace ens {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

TrainSchedule schedule_from_json(const json& j, const std::string& where,
                                 const TrainSchedule& defaults) {
  check_keys(j, {"lr", "momentum", "phases"}, where);
  TrainSchedule s = defaults;
  get_if(j, "lr", s.lr);
  get_if(j, "momentum", s.momentum);
  if (j.contains("phases")) {
    s.phases.clear();
    for (const auto& pj : j.at("phases")) {
      check_keys(pj, {"patch", "batch", "steps"}, where + ".phases[]");
      TrainPhase p;
      get_if(pj, "patch", p.patch);
      get_if(pj, "batch", p.batch);
      get_if(pj, "steps", p.steps);
      s.phases.push_back(p);
    }
  }
  return s;
}

json schedule_to_json(const TrainSchedule& s) {
  json phases = json::array();
  for (const auto& p : s.phases)
    phases.push_back({{"patch", p.patch}, {"batch", p.batch}, {"steps", p.steps}});
  return {{"lr", s.lr}, {"momentum", s.momentum}, {"phases", phases}};
}

}  // namespace

RunConfig::RunConfig() {
  teacher_train.phases = {{16, 2, 200}, {32, 2, 200}};
  teacher_train.lr = 2e-3;
  finetune.phases = {{32, 2, 150}};
  finetune.lr = 5e-4;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  check_keys(j, {"version", "seed", "task", "data", "model", "train", "distill", "search",
                 "finetune"},
             "top level");
  RunConfig c;
  get_if(j, "version", c.version);
  if (c.version != 1)
    throw ConfigError("config: unsupported version " + std::to_string(c.version));
  get_if(j, "seed", c.seed);

  if (j.contains("task")) {
    const auto& t = j.at("task");
    check_keys(t, {"kind", "image_size", "noise_sigma", "blur_length", "streak_count",
                   "streak_intensity"},
               "task");
    if (t.contains("kind")) c.task.kind = task_kind_from_string(t.at("kind").get<std::string>());
    get_if(t, "image_size", c.task.image_size);
    get_if(t, "noise_sigma", c.task.noise_sigma);
    get_if(t, "blur_length", c.task.blur_length);
    get_if(t, "streak_count", c.task.streak_count);
    get_if(t, "streak_intensity", c.task.streak_intensity);
    if (c.task.image_size < 8 || c.task.image_size % 8 != 0)
      throw ConfigError("config: task.image_size must be a positive multiple of 8");
  }
  c.task.seed = Rng::derive(c.seed, 10);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"train", "val", "test"}, "data");
    get_if(d, "train", c.n_train);
    get_if(d, "val", c.n_val);
    get_if(d, "test", c.n_test);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"base_width", "heads", "gdfn_expand", "vssm_expand", "d_state",
                   "ca_reduction"},
               "model");
    get_if(m, "base_width", c.base_width);
    get_if(m, "heads", c.dims.heads);
    get_if(m, "gdfn_expand", c.dims.gdfn_expand);
    get_if(m, "vssm_expand", c.dims.vssm_expand);
    get_if(m, "d_state", c.dims.d_state);
    get_if(m, "ca_reduction", c.dims.ca_reduction);
    if (c.base_width < 1) throw ConfigError("config: model.base_width must be positive");
  }

  if (j.contains("train"))
    c.teacher_train = schedule_from_json(j.at("train"), "train", c.teacher_train);
  if (j.contains("finetune"))
    c.finetune = schedule_from_json(j.at("finetune"), "finetune", c.finetune);

  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    check_keys(d, {"steps", "lr", "momentum", "probes"}, "distill");
    get_if(d, "steps", c.distill.steps);
    get_if(d, "lr", c.distill.lr);
    get_if(d, "momentum", c.distill.momentum);
    get_if(d, "probes", c.distill_probes);
    if (c.distill_probes < 1) throw ConfigError("config: distill.probes must be >= 1");
  }

  if (j.contains("search")) {
    const auto& s = j.at("search");
    check_keys(s, {"initial", "budget", "knee_candidates", "ref_margin", "candidates",
                   "perturbations", "perturb_sigma", "refit_interval", "gp_restarts",
                   "nm_iters", "w_teacher", "w_surrogate"},
               "search");
    get_if(s, "initial", c.search.initial);
    get_if(s, "budget", c.search.budget);
    get_if(s, "knee_candidates", c.search.knee_candidates);
    get_if(s, "ref_margin", c.search.ref_margin);
    get_if(s, "candidates", c.search.candidates);
    get_if(s, "perturbations", c.search.perturbations);
    get_if(s, "perturb_sigma", c.search.perturb_sigma);
    get_if(s, "refit_interval", c.search.refit_interval);
    get_if(s, "gp_restarts", c.search.gp_restarts);
    get_if(s, "nm_iters", c.search.nm_iters);
    get_if(s, "w_teacher", c.w_teacher);
    get_if(s, "w_surrogate", c.w_surrogate);
    c.search.validate();
    if (!(c.w_teacher > c.w_surrogate && c.w_surrogate > 0.0))
      throw ConfigError("config: search weights must satisfy w_teacher > w_surrogate > 0");
  }
  c.search.seed = Rng::derive(c.seed, 20);

  c.teacher_train.validate();
  c.finetune.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  return {
      {"version", version},
      {"seed", seed},
      {"task",
       {{"kind", task_kind_to_string(task.kind)},
        {"image_size", task.image_size},
        {"noise_sigma", task.noise_sigma},
        {"blur_length", task.blur_length},
        {"streak_count", task.streak_count},
        {"streak_intensity", task.streak_intensity}}},
      {"data", {{"train", n_train}, {"val", n_val}, {"test", n_test}}},
      {"model",
       {{"base_width", base_width},
        {"heads", dims.heads},
        {"gdfn_expand", dims.gdfn_expand},
        {"vssm_expand", dims.vssm_expand},
        {"d_state", dims.d_state},
        {"ca_reduction", dims.ca_reduction}}},
      {"train", schedule_to_json(teacher_train)},
      {"distill",
       {{"steps", distill.steps},
        {"lr", distill.lr},
        {"momentum", distill.momentum},
        {"probes", distill_probes}}},
      {"search",
       {{"initial", search.initial},
        {"budget", search.budget},
        {"knee_candidates", search.knee_candidates},
        {"ref_margin", search.ref_margin},
        {"candidates", search.candidates},
        {"perturbations", search.perturbations},
        {"perturb_sigma", search.perturb_sigma},
        {"refit_interval", search.refit_interval},
        {"gp_restarts", search.gp_restarts},
        {"nm_iters", search.nm_iters},
        {"w_teacher", w_teacher},
        {"w_surrogate", w_surrogate}}},
      {"finetune", schedule_to_json(finetune)},
  };
}

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const { return fnv1a_hex(to_json().dump()); }

}  // namespace ens
