#include "ens/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "ens/optim.hpp"

namespace ens {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t split_id(const std::string& split) {
  if (split == "train") return 1;
  if (split == "val") return 2;
  if (split == "test") return 3;
  // FNV-1a for custom split names; platform-independent.
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : split) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h | 4;  // never collides with the named splits
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "denoise") return TaskKind::Denoise;
  if (s == "deblur") return TaskKind::Deblur;
  if (s == "derain") return TaskKind::Derain;
  throw ConfigError("unknown task kind: " + s);
}

std::string task_kind_to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Denoise: return "denoise";
    case TaskKind::Deblur: return "deblur";
    default: return "derain";
  }
}

Tensor generate_clean_image(int size, Rng& rng) {
  const int H = size, W = size;
  // Shared structure map.
  std::vector<double> s(static_cast<std::size_t>(H) * W, 0.0);
  double base = rng.uniform(0.35, 0.65);
  double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
  bool radial = rng.uniform() < 0.3;
  double cx = rng.uniform(0.2, 0.8) * W, cy = rng.uniform(0.2, 0.8) * H;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = base + gx * (static_cast<double>(x) / W - 0.5) +
                 gy * (static_cast<double>(y) / H - 0.5);
      if (radial) {
        double dx = (x - cx) / W, dy = (y - cy) / H;
        v += 0.2 * std::sqrt(dx * dx + dy * dy);
      }
      s[static_cast<std::size_t>(y) * W + x] = v;
    }
  int n_waves = 2 + static_cast<int>(rng.uniform_int(3));
  for (int k = 0; k < n_waves; ++k) {
    double amp = rng.uniform(0.05, 0.15);
    double freq = rng.uniform(1.0, 4.0) * 2.0 * kPi / size;
    double theta = rng.uniform(0.0, kPi);
    double phase = rng.uniform(0.0, 2.0 * kPi);
    double ux = std::cos(theta), uy = std::sin(theta);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        s[static_cast<std::size_t>(y) * W + x] +=
            amp * std::sin(freq * (ux * x + uy * y) + phase);
  }
  int n_polys = 1 + static_cast<int>(rng.uniform_int(3));
  for (int k = 0; k < n_polys; ++k) {
    double ax = rng.uniform(0, W), ay = rng.uniform(0, H);
    double bx = rng.uniform(0, W), by = rng.uniform(0, H);
    double px = rng.uniform(0, W), py = rng.uniform(0, H);
    double shift = rng.uniform(-0.25, 0.25);
    auto edge = [](double x0, double y0, double x1, double y1, double x, double y) {
      return (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
    };
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double e0 = edge(ax, ay, bx, by, x, y);
        double e1 = edge(bx, by, px, py, x, y);
        double e2 = edge(px, py, ax, ay, x, y);
        bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        if (inside) s[static_cast<std::size_t>(y) * W + x] += shift;
      }
  }
  Tensor img(1, 3, H, W);
  for (int c = 0; c < 3; ++c) {
    double gain = rng.uniform(0.8, 1.2);
    double shift = rng.uniform(-0.08, 0.08);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = clamp01(gain * s[static_cast<std::size_t>(y) * W + x] + shift);
        img.at(0, c, y, x) = 0.08 + 0.84 * v;  // keep away from the clip rails
      }
  }
  return img;
}

namespace {

Tensor degrade_blur(const Tensor& clean, int length, Rng& rng) {
  int k = std::max(3, length | 1);
  std::vector<double> kernel(static_cast<std::size_t>(k) * k, 0.0);
  double theta = rng.uniform(0.0, kPi);
  double ux = std::cos(theta), uy = std::sin(theta);
  double half = (length - 1) / 2.0, center = (k - 1) / 2.0;
  int samples = 8 * length;
  for (int i = 0; i < samples; ++i) {
    double t = -half + (2.0 * half) * i / (samples - 1);
    double x = center + t * ux, y = center + t * uy;
    int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        int xx = x0 + dx, yy = y0 + dy;
        if (xx < 0 || xx >= k || yy < 0 || yy >= k) continue;
        double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
        kernel[static_cast<std::size_t>(yy) * k + xx] += wgt;
      }
  }
  double total = 0.0;
  for (double v : kernel) total += v;
  for (double& v : kernel) v /= total;

  const int H = clean.h(), W = clean.w(), r = k / 2;
  Tensor out(1, 3, H, W);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            int yy = std::clamp(y + dy, 0, H - 1);
            int xx = std::clamp(x + dx, 0, W - 1);
            acc += kernel[static_cast<std::size_t>(dy + r) * k + (dx + r)] * clean.at(0, c, yy, xx);
          }
        out.at(0, c, y, x) = acc;
      }
  return out;
}

Tensor degrade_rain(const Tensor& clean, int streaks, double intensity, Rng& rng) {
  Tensor out = clean;
  const int H = clean.h(), W = clean.w();
  for (int s = 0; s < streaks; ++s) {
    double x = rng.uniform(0, W), y = rng.uniform(0, H);
    double theta = kPi / 2 + rng.uniform(-0.35, 0.35);  // near vertical
    double ux = std::cos(theta), uy = std::sin(theta);
    int length = 4 + static_cast<int>(rng.uniform_int(9));
    double bright = intensity * rng.uniform(0.5, 1.5);
    for (int i = 0; i < 2 * length; ++i) {
      int xx = static_cast<int>(std::lround(x + 0.5 * i * ux));
      int yy = static_cast<int>(std::lround(y + 0.5 * i * uy));
      if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
      for (int c = 0; c < 3; ++c)
        out.at(0, c, yy, xx) = clamp01(out.at(0, c, yy, xx) + bright);
    }
  }
  return out;
}

}  // namespace

Tensor degrade(const Tensor& clean, const RestorationTask& task, Rng& rng) {
  switch (task.kind) {
    case TaskKind::Denoise: {
      Tensor out = clean;
      for (double& v : out.data) v += task.noise_sigma * rng.normal();
      return out;
    }
    case TaskKind::Deblur:
      return degrade_blur(clean, task.blur_length, rng);
    default:
      return degrade_rain(clean, task.streak_count, task.streak_intensity, rng);
  }
}

std::vector<ImagePair> generate_dataset(const RestorationTask& task, const std::string& split,
                                        int n) {
  if (n <= 0) throw ConfigError("generate_dataset: n must be positive");
  std::vector<ImagePair> out;
  out.reserve(n);
  std::uint64_t sid = split_id(split);
  for (int i = 0; i < n; ++i) {
    Rng rng(Rng::derive(Rng::derive(task.seed, sid), static_cast<std::uint64_t>(i)));
    ImagePair p;
    p.clean = generate_clean_image(task.image_size, rng);
    p.degraded = degrade(p.clean, task, rng);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// metrics

double psnr(const Tensor& a, const Tensor& b, double peak) {
  require_same_shape(a, b, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double av = std::clamp(a.data[i], 0.0, peak);
    double bv = std::clamp(b.data[i], 0.0, peak);
    mse += (av - bv) * (av - bv);
  }
  mse /= static_cast<double>(a.numel());
  if (mse == 0.0) return 99.0;
  double db = 10.0 * std::log10(peak * peak / mse);
  return std::min(db, 99.0);
}

double ssim(const Tensor& a, const Tensor& b, int window, double k1, double k2, double peak) {
  require_same_shape(a, b, "ssim");
  if (window > std::min(a.h(), a.w()))
    throw ConfigError("ssim: window " + std::to_string(window) + " exceeds image size " +
                      a.shape_str());
  const double c1 = (k1 * peak) * (k1 * peak), c2 = (k2 * peak) * (k2 * peak);
  const int H = a.h(), W = a.w(), C = a.c(), N = a.n();
  const double inv = 1.0 / (window * window);
  double total = 0.0;
  long count = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y + window <= H; ++y)
        for (int x = 0; x + window <= W; ++x) {
          double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
          for (int dy = 0; dy < window; ++dy)
            for (int dx = 0; dx < window; ++dx) {
              double av = std::clamp(a.at(n, c, y + dy, x + dx), 0.0, peak);
              double bv = std::clamp(b.at(n, c, y + dy, x + dx), 0.0, peak);
              ma += av;
              mb += bv;
              va += av * av;
              vb += bv * bv;
              cov += av * bv;
            }
          ma *= inv;
          mb *= inv;
          va = va * inv - ma * ma;
          vb = vb * inv - mb * mb;
          cov = cov * inv - ma * mb;
          total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++count;
        }
  return total / count;
}

EvalReport evaluate(Network& net, const std::vector<ImagePair>& pairs) {
  EvalReport r;
  for (const auto& p : pairs) {
    Tensor out = net.infer(p.degraded);
    r.mean_psnr += psnr(out, p.clean);
    r.mean_ssim += ssim(out, p.clean);
  }
  r.mean_psnr /= pairs.size();
  r.mean_ssim /= pairs.size();
  return r;
}

double input_baseline_psnr(const std::vector<ImagePair>& pairs) {
  double total = 0.0;
  for (const auto& p : pairs) total += psnr(p.degraded, p.clean);
  return total / pairs.size();
}

// ---------------------------------------------------------------------------
// training

void TrainSchedule::validate() const {
  if (phases.empty()) throw ConfigError("train schedule: no phases");
  int prev = 0;
  for (const auto& p : phases) {
    if (p.patch % 8 != 0)
      throw ConfigError("train schedule: patch " + std::to_string(p.patch) +
                        " not divisible by 8");
    if (p.patch < prev) throw ConfigError("train schedule: patch sizes must be nondecreasing");
    if (p.batch < 1 || p.steps < 0) throw ConfigError("train schedule: bad batch/steps");
    prev = p.patch;
  }
}

std::vector<double> train(Network& net, const std::vector<ImagePair>& train_set,
                          const TrainSchedule& schedule, Rng& rng) {
  schedule.validate();
  if (train_set.empty()) throw ConfigError("train: empty dataset");
  auto params = net.params();
  Adam opt(params, schedule.lr, schedule.total_steps(), schedule.momentum);
  std::vector<double> curve;
  curve.reserve(schedule.total_steps());
  std::vector<Tensor> backup(params.size());
  int step = 0;
  const int img_size = train_set[0].clean.h();
  for (const auto& phase : schedule.phases) {
    if (phase.patch > img_size)
      throw ConfigError("train: patch " + std::to_string(phase.patch) + " exceeds image size " +
                        std::to_string(img_size));
    for (int s = 0; s < phase.steps; ++s, ++step) {
      Tensor xin(phase.batch, 3, phase.patch, phase.patch);
      Tensor target(phase.batch, 3, phase.patch, phase.patch);
      for (int b = 0; b < phase.batch; ++b) {
        const ImagePair& p = train_set[rng.uniform_int(train_set.size())];
        int oy = phase.patch < img_size
                     ? static_cast<int>(rng.uniform_int(img_size - phase.patch + 1))
                     : 0;
        int ox = phase.patch < img_size
                     ? static_cast<int>(rng.uniform_int(img_size - phase.patch + 1))
                     : 0;
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < phase.patch; ++y)
            for (int x = 0; x < phase.patch; ++x) {
              xin.at(b, c, y, x) = p.degraded.at(0, c, oy + y, ox + x);
              target.at(b, c, y, x) = p.clean.at(0, c, oy + y, ox + x);
            }
      }
      for (std::size_t i = 0; i < params.size(); ++i) backup[i] = *params[i];
      Graph g;
      double lv;
      Value loss;
      try {
        Value out = net.forward(g, g.input(xin));
        loss = g.mean(g.abs(g.sub(out, g.input(target))));
        lv = g.value(loss).data[0];
      } catch (const ContractError& e) {
        // diverged parameters can break value-level contracts mid-run
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = backup[i];
        double last = curve.empty() ? 0.0 : curve.back();
        throw TrainError(
            "train: diverged at step " + std::to_string(step) + ": " + e.what(), last);
      }
      if (!std::isfinite(lv)) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = backup[i];
        double last = curve.empty() ? 0.0 : curve.back();
        throw TrainError("train: loss became non-finite at step " + std::to_string(step), last);
      }
      g.backward(loss);
      opt.step(g, step);
      curve.push_back(lv);
    }
  }
  return curve;
}

// ---------------------------------------------------------------------------
// ERF

Tensor erf_map(const std::function<Value(Graph&, Value)>& f, const std::vector<Tensor>& probes) {
  if (probes.empty()) throw ConfigError("erf_map: need at least one probe");
  const int H = probes[0].h(), W = probes[0].w();
  Tensor map(1, 1, H, W);
  for (const Tensor& probe : probes) {
    Graph g;
    Value in = g.input(probe, /*requires_grad=*/true);
    Value out = f(g, in);
    const Tensor& ov = g.value(out);
    Tensor mask(ov.n(), ov.c(), ov.h(), ov.w());
    for (int c = 0; c < ov.c(); ++c) mask.at(0, c, ov.h() / 2, ov.w() / 2) = 1.0;
    Value loss = g.sum(g.hadamard(out, g.input(mask)));
    g.backward(loss);
    const Tensor& grad = g.grad(in);
    for (int c = 0; c < probe.c(); ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) map.at(0, 0, y, x) += std::fabs(grad.at(0, c, y, x));
  }
  double total = 0.0;
  for (double v : map.data) total += v;
  if (total > 0.0)
    for (double& v : map.data) v /= total;
  return map;
}

double erf_mass_within(const Tensor& map, double radius) {
  const int H = map.h(), W = map.w();
  const int cy = H / 2, cx = W / 2;
  double mass = 0.0, total = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = map.at(0, 0, y, x);
      total += v;
      double d = std::sqrt(static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx)));
      if (d <= radius) mass += v;
    }
  return total > 0.0 ? mass / total : 0.0;
}

}  // namespace ens
