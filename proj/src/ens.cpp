#include "ens/ens.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <Eigen/Dense>

#include "ens/gp.hpp"

namespace ens {

ArchCode decode(const std::vector<double>& x, const std::vector<StageSpec>& specs) {
  if (x.size() != specs.size())
    throw ConfigError("decode: point has " + std::to_string(x.size()) +
                      " components, expected " + std::to_string(specs.size()));
  ArchCode code(specs.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0.0 || x[i] > 1.0)
      throw ConfigError("decode: component " + std::to_string(i) + " outside [0,1]");
    int k = specs[i].option_count();
    code[i] = std::min(static_cast<int>(std::floor(x[i] * k)), k - 1);
  }
  return code;
}

double penalty(const ArchCode& code, const std::vector<StageSpec>& specs, double w_teacher,
               double w_surrogate) {
  if (!(w_teacher > w_surrogate && w_surrogate > 0.0))
    throw ConfigError("penalty: weights must satisfy w_teacher > w_surrogate > 0");
  validate_code(code, specs);
  double total = 0.0;
  for (std::size_t i = 0; i < code.size(); ++i)
    total += code[i] == 0 ? w_teacher * specs[i].teacher_blocks
                          : w_surrogate * specs[i].surrogate_blocks[code[i] - 1];
  return total;
}

std::vector<FrontPoint> pareto_front(const std::vector<Observation>& hist) {
  std::vector<FrontPoint> front;
  for (int i = 0; i < static_cast<int>(hist.size()); ++i) {
    bool dominated = false;
    for (int j = 0; j < static_cast<int>(hist.size()); ++j) {
      if (i == j) continue;
      bool leq = hist[j].f1 <= hist[i].f1 && hist[j].f2 <= hist[i].f2;
      bool strict = hist[j].f1 < hist[i].f1 || hist[j].f2 < hist[i].f2;
      bool equal = hist[j].f1 == hist[i].f1 && hist[j].f2 == hist[i].f2;
      if ((leq && strict) || (equal && j < i)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) front.push_back({hist[i].f1, hist[i].f2, i});
  }
  std::sort(front.begin(), front.end(),
            [](const FrontPoint& a, const FrontPoint& b) { return a.f1 < b.f1; });
  return front;
}

double hypervolume(std::vector<FrontPoint> front, double r1, double r2) {
  std::sort(front.begin(), front.end(),
            [](const FrontPoint& a, const FrontPoint& b) { return a.f1 < b.f1; });
  double hv = 0.0;
  for (std::size_t i = 0; i < front.size(); ++i) {
    if (front[i].f1 >= r1 || front[i].f2 >= r2) continue;
    double hi = i + 1 < front.size() ? std::min(front[i + 1].f1, r1) : r1;
    if (hi > front[i].f1) hv += (hi - front[i].f1) * (r2 - front[i].f2);
  }
  return hv;
}

double norm_pdf(double z) {
  return std::exp(-0.5 * z * z) / 2.5066282746310005024;
}

double norm_cdf(double z) { return 0.5 * std::erfc(-z / 1.4142135623730950488); }

namespace {

// E[(t - Y)^+] for Y ~ N(mu, s^2); point mass when s == 0.
double psi(double t, double mu, double s) {
  if (!std::isfinite(t)) return t < 0 ? 0.0 : std::numeric_limits<double>::infinity();
  if (s <= 0.0) return std::max(t - mu, 0.0);
  double z = (t - mu) / s;
  return (t - mu) * norm_cdf(z) + s * norm_pdf(z);
}

}  // namespace

double ehvi(double mu1, double s1, double mu2, double s2, const std::vector<FrontPoint>& front,
            double r1, double r2) {
  // Strips over the f1 axis: strip 0 is (-inf, b_1) with free height down to
  // r2, strip i covers [b_i, b_{i+1}) with the staircase level f2_i. Each
  // strip's contribution factorizes over the two independent coordinates:
  //   E[(hi - max(Y1, lo))^+] * E[(level - Y2)^+]
  // and the first factor telescopes to psi1(hi) - psi1(lo).
  const int k = static_cast<int>(front.size());
  double total = 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= k; ++i) {
    double lo = i == 0 ? -inf : front[i - 1].f1;
    double hi = i == k ? r1 : front[i].f1;
    double level = i == 0 ? r2 : front[i - 1].f2;
    if (hi <= lo) continue;
    double len = psi(std::min(hi, r1), mu1, s1) - (i == 0 ? 0.0 : psi(lo, mu1, s1));
    if (len <= 0.0) continue;
    total += len * psi(level, mu2, s2);
  }
  return total;
}

int knee_point(const std::vector<FrontPoint>& front) {
  if (front.empty()) throw ConfigError("knee_point: empty front");
  const int k = static_cast<int>(front.size());
  if (k <= 2) return 0;
  double f1_lo = front.front().f1, f1_hi = front.back().f1;
  double f2_lo = front.back().f2, f2_hi = front.front().f2;
  double d1 = std::max(f1_hi - f1_lo, 1e-12), d2 = std::max(f2_hi - f2_lo, 1e-12);
  // chord endpoints in normalized space: (0,1) -> (1,0)
  int best = 0;
  double best_dist = -1.0;
  for (int i = 0; i < k; ++i) {
    double u = (front[i].f1 - f1_lo) / d1;
    double v = (front[i].f2 - f2_lo) / d2;
    double dist = std::fabs(u + v - 1.0) / std::sqrt(2.0);
    if (dist > best_dist + 1e-15) {
      best_dist = dist;
      best = i;
    }
  }
  return best;
}

std::vector<std::vector<double>> scrambled_halton(int n, int dim, std::uint64_t seed) {
  static const int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};
  if (dim > static_cast<int>(sizeof(kPrimes) / sizeof(int)))
    throw ConfigError("scrambled_halton: dimension too large");
  std::vector<std::vector<int>> perms(dim);
  for (int d = 0; d < dim; ++d) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(d)));
    int b = kPrimes[d];
    perms[d].resize(b);
    for (int i = 0; i < b; ++i) perms[d][i] = i;
    for (int i = b - 1; i > 0; --i)
      std::swap(perms[d][i], perms[d][rng.uniform_int(i + 1)]);
    // keep 0 fixed so repeated trailing digits stay zero
    auto it = std::find(perms[d].begin(), perms[d].end(), 0);
    std::swap(*it, perms[d][0]);
  }
  std::vector<std::vector<double>> pts(n, std::vector<double>(dim));
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < dim; ++d) {
      int b = kPrimes[d];
      double f = 1.0, val = 0.0;
      int idx = i + 1;  // skip the origin
      while (idx > 0) {
        f /= b;
        val += f * perms[d][idx % b];
        idx /= b;
      }
      pts[i][d] = val;
    }
  return pts;
}

void EnsConfig::validate() const {
  if (initial < 1) throw ConfigError("ens config: initial design must be >= 1");
  if (budget < initial) throw ConfigError("ens config: budget smaller than initial design");
  if (knee_candidates < 1) throw ConfigError("ens config: knee_candidates must be >= 1");
  if (candidates < 1) throw ConfigError("ens config: candidates must be >= 1");
  if (ref_margin <= 0.0) throw ConfigError("ens config: ref_margin must be positive");
  if (perturb_sigma < 0.0 || perturbations < 0)
    throw ConfigError("ens config: bad perturbation settings");
  if (refit_interval < 1) throw ConfigError("ens config: refit_interval must be >= 1");
}

namespace {

void finalize_result(EnsResult& r, const EnsConfig& cfg) {
  auto front = pareto_front(r.history);
  r.front_indices.clear();
  for (const auto& p : front) r.front_indices.push_back(p.index);
  int knee = knee_point(front);
  r.knee_index = front[knee].index;

  // candidates = nearest front members to the knee in normalized space
  double f1_lo = front.front().f1, f1_hi = front.back().f1;
  double f2_lo = front.back().f2, f2_hi = front.front().f2;
  double d1 = std::max(f1_hi - f1_lo, 1e-12), d2 = std::max(f2_hi - f2_lo, 1e-12);
  double ku = (front[knee].f1 - f1_lo) / d1, kv = (front[knee].f2 - f2_lo) / d2;
  std::vector<std::pair<double, int>> by_dist;
  for (std::size_t i = 0; i < front.size(); ++i) {
    double u = (front[i].f1 - f1_lo) / d1, v = (front[i].f2 - f2_lo) / d2;
    by_dist.push_back({std::hypot(u - ku, v - kv), static_cast<int>(i)});
  }
  std::stable_sort(by_dist.begin(), by_dist.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  r.knee_truncated = static_cast<int>(front.size()) < cfg.knee_candidates;
  r.knee_indices.clear();
  for (int i = 0; i < std::min<int>(cfg.knee_candidates, front.size()); ++i)
    r.knee_indices.push_back(front[by_dist[i].second].index);
}

}  // namespace

EnsResult run_ens(const std::vector<StageSpec>& specs, const ObjectiveFn& objective,
                  const EnsConfig& cfg) {
  cfg.validate();
  const int D = static_cast<int>(specs.size());
  EnsResult result;
  std::map<ArchCode, std::pair<double, double>> cache;

  auto eval_point = [&](std::vector<double> x) {
    Observation o;
    o.x = std::move(x);
    o.code = decode(o.x, specs);
    auto it = cache.find(o.code);
    if (it != cache.end()) {
      o.f1 = it->second.first;
      o.f2 = it->second.second;
      o.cached = true;
    } else {
      try {
        std::tie(o.f1, o.f2) = objective(o.code);
      } catch (const std::exception& e) {
        throw EnsError(std::string("ens: objective failed at evaluation ") +
                           std::to_string(result.history.size()) + ": " + e.what(),
                       result.history);
      }
      cache[o.code] = {o.f1, o.f2};
    }
    result.history.push_back(std::move(o));
  };

  for (const auto& p : scrambled_halton(cfg.initial, D, Rng::derive(cfg.seed, 1)))
    eval_point(p);

  Rng acq_rng(Rng::derive(cfg.seed, 2));
  Rng fit_rng(Rng::derive(cfg.seed, 3));
  Gp gp1(D), gp2(D);
  int last_fit = -1;

  while (static_cast<int>(result.history.size()) < cfg.budget) {
    const int n = static_cast<int>(result.history.size());
    Eigen::MatrixXd X(n, D);
    Eigen::VectorXd y1(n), y2(n);
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < D; ++d) X(i, d) = result.history[i].x[d];
      y1[i] = result.history[i].f1;
      y2[i] = result.history[i].f2;
    }
    if (last_fit < 0 || n - last_fit >= cfg.refit_interval) {
      gp1.fit(X, y1, fit_rng, cfg.gp_restarts, cfg.nm_iters);
      gp2.fit(X, y2, fit_rng, cfg.gp_restarts, cfg.nm_iters);
      last_fit = n;
    } else {
      gp1.set_data(X, y1);
      gp2.set_data(X, y2);
    }

    auto front = pareto_front(result.history);
    double f1_max = y1.maxCoeff(), f1_min = y1.minCoeff();
    double f2_max = y2.maxCoeff(), f2_min = y2.minCoeff();
    double r1 = f1_max + cfg.ref_margin * std::max(f1_max - f1_min, 1e-6);
    double r2 = f2_max + cfg.ref_margin * std::max(f2_max - f2_min, 1e-6);

    int m = cfg.candidates + cfg.perturbations * static_cast<int>(front.size());
    Eigen::MatrixXd C(m, D);
    int row = 0;
    for (int i = 0; i < cfg.candidates; ++i, ++row)
      for (int d = 0; d < D; ++d) C(row, d) = acq_rng.uniform();
    for (const auto& fp : front)
      for (int p = 0; p < cfg.perturbations; ++p, ++row)
        for (int d = 0; d < D; ++d)
          C(row, d) = std::clamp(
              result.history[fp.index].x[d] + cfg.perturb_sigma * acq_rng.normal(), 0.0, 1.0);

    Eigen::VectorXd mu1, var1, mu2, var2;
    gp1.predict(C, mu1, var1);
    gp2.predict(C, mu2, var2);
    int best = 0;
    double best_val = -1.0;
    for (int i = 0; i < m; ++i) {
      double v = ehvi(mu1[i], std::sqrt(var1[i]), mu2[i], std::sqrt(var2[i]), front, r1, r2);
      if (v > best_val) {
        best_val = v;
        best = i;
      }
    }
    std::vector<double> x(D);
    for (int d = 0; d < D; ++d) x[d] = C(best, d);
    eval_point(std::move(x));
  }

  finalize_result(result, cfg);
  return result;
}

ObjectiveFn make_restoration_objective(const BlockLibrary& lib,
                                       const std::vector<ImagePair>& eval_set,
                                       double teacher_psnr, double w_teacher,
                                       double w_surrogate) {
  return [&lib, &eval_set, teacher_psnr, w_teacher, w_surrogate](const ArchCode& code) {
    Network net = assemble(code, lib);
    EvalReport rep = evaluate(net, eval_set);
    return std::make_pair(teacher_psnr - rep.mean_psnr, penalty(code, lib.specs, w_teacher, w_surrogate));
  };
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_history_csv(const std::string& path, const EnsResult& result) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::size_t dim = result.history.empty() ? 0 : result.history[0].x.size();
  f << "row";
  for (std::size_t d = 0; d < dim; ++d) f << ",x" << d;
  f << ",code,f1,f2,cached,on_front\n";
  std::vector<char> on_front(result.history.size(), 0);
  for (int i : result.front_indices) on_front[i] = 1;
  for (std::size_t i = 0; i < result.history.size(); ++i) {
    const Observation& o = result.history[i];
    f << i;
    for (double v : o.x) f << ',' << fmt17(v);
    f << ",\"" << code_str(o.code) << "\"," << fmt17(o.f1) << ',' << fmt17(o.f2) << ','
      << (o.cached ? 1 : 0) << ',' << static_cast<int>(on_front[i]) << '\n';
  }
}

nlohmann::json result_to_json(const EnsResult& result, const std::vector<StageSpec>& specs) {
  nlohmann::json front = nlohmann::json::array();
  for (int i : result.front_indices) {
    const Observation& o = result.history[i];
    front.push_back({{"row", i}, {"code", o.code}, {"f1", o.f1}, {"f2", o.f2}});
  }
  nlohmann::json knee = nlohmann::json::array();
  for (int i : result.knee_indices) {
    const Observation& o = result.history[i];
    knee.push_back({{"row", i}, {"code", o.code}, {"f1", o.f1}, {"f2", o.f2}});
  }
  nlohmann::json stage_ids = nlohmann::json::array();
  for (const auto& s : specs) stage_ids.push_back(s.id);
  return {{"evaluations", result.history.size()},
          {"stages", stage_ids},
          {"front", front},
          {"knee_row", result.knee_index},
          {"knee_code", result.history[result.knee_index].code},
          {"knee_candidates", knee},
          {"knee_truncated", result.knee_truncated}};
}

}  // namespace ens
