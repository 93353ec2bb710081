#include "ens/gp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace ens {

namespace {

constexpr double kSqrt5 = 2.23606797749978969;

double matern52(double r2) {
  double r = std::sqrt(r2);
  return (1.0 + kSqrt5 * r + 5.0 / 3.0 * r2) * std::exp(-kSqrt5 * r);
}

// Standard Nelder-Mead simplex minimization with adaptive initial steps.
Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x0, double step, int iters) {
  const int n = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> xs(n + 1, x0);
  std::vector<double> fs(n + 1);
  for (int i = 0; i < n; ++i) xs[i + 1][i] += step;
  for (int i = 0; i <= n; ++i) fs[i] = f(xs[i]);

  auto order = [&] {
    std::vector<int> idx(n + 1);
    for (int i = 0; i <= n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return fs[a] < fs[b]; });
    std::vector<Eigen::VectorXd> xs2(n + 1);
    std::vector<double> fs2(n + 1);
    for (int i = 0; i <= n; ++i) {
      xs2[i] = xs[idx[i]];
      fs2[i] = fs[idx[i]];
    }
    xs = std::move(xs2);
    fs = std::move(fs2);
  };

  for (int it = 0; it < iters; ++it) {
    order();
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) centroid += xs[i];
    centroid /= n;
    Eigen::VectorXd xr = centroid + (centroid - xs[n]);
    double fr = f(xr);
    if (fr < fs[0]) {
      Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs[n]);
      double fe = f(xe);
      if (fe < fr) {
        xs[n] = xe;
        fs[n] = fe;
      } else {
        xs[n] = xr;
        fs[n] = fr;
      }
    } else if (fr < fs[n - 1]) {
      xs[n] = xr;
      fs[n] = fr;
    } else {
      Eigen::VectorXd xc = centroid + 0.5 * (xs[n] - centroid);
      double fc = f(xc);
      if (fc < fs[n]) {
        xs[n] = xc;
        fs[n] = fc;
      } else {
        for (int i = 1; i <= n; ++i) {
          xs[i] = xs[0] + 0.5 * (xs[i] - xs[0]);
          fs[i] = f(xs[i]);
        }
      }
    }
  }
  order();
  return xs[0];
}

GpHyper unpack(const Eigen::VectorXd& theta, int dim) {
  GpHyper h;
  h.log_ls = theta.head(dim);
  h.log_sf = theta[dim];
  h.log_sn = theta[dim + 1];
  // keep the search in a sane box
  for (int i = 0; i < dim; ++i) h.log_ls[i] = std::clamp(h.log_ls[i], std::log(1e-3), std::log(1e2));
  h.log_sf = std::clamp(h.log_sf, std::log(1e-3), std::log(1e2));
  h.log_sn = std::clamp(h.log_sn, 0.5 * std::log(kGpNoiseFloor), std::log(1.0));
  return h;
}

Eigen::VectorXd pack(const GpHyper& h) {
  Eigen::VectorXd theta(h.log_ls.size() + 2);
  theta.head(h.log_ls.size()) = h.log_ls;
  theta[h.log_ls.size()] = h.log_sf;
  theta[h.log_ls.size() + 1] = h.log_sn;
  return theta;
}

// LLT with jitter escalation. Returns the jitter that succeeded.
double robust_llt(Eigen::MatrixXd K, Eigen::LLT<Eigen::MatrixXd>& llt) {
  for (double jitter = 0.0;; jitter = jitter == 0.0 ? 1e-10 : jitter * 10.0) {
    Eigen::MatrixXd Kj = K;
    if (jitter > 0.0) Kj.diagonal().array() += jitter;
    llt.compute(Kj);
    if (llt.info() == Eigen::Success) return jitter;
    if (jitter >= 1e-2)
      throw std::runtime_error("gp: kernel matrix not positive definite even with jitter 1e-2");
  }
}

}  // namespace

Gp::Gp(int dim) : dim_(dim) {
  hyper_.log_ls = Eigen::VectorXd::Constant(dim, std::log(0.3));
  hyper_.log_sf = 0.0;
  hyper_.log_sn = std::log(1e-2);
}

void Gp::set_hyper(const GpHyper& h) {
  if (h.log_ls.size() != dim_) throw ConfigError("gp: hyperparameter dimension mismatch");
  hyper_ = h;
}

double Gp::kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
  double r2 = 0.0;
  for (int i = 0; i < dim_; ++i) {
    double d = (a[i] - b[i]) / std::exp(hyper_.log_ls[i]);
    r2 += d * d;
  }
  return std::exp(2.0 * hyper_.log_sf) * matern52(r2);
}

Eigen::MatrixXd Gp::kernel_matrix(const GpHyper& h, const Eigen::MatrixXd& X) const {
  const int n = static_cast<int>(X.rows());
  double sf2 = std::exp(2.0 * h.log_sf);
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i) {
    K(i, i) = sf2;
    for (int j = i + 1; j < n; ++j) {
      double r2 = 0.0;
      for (int d = 0; d < dim_; ++d) {
        double dd = (X(i, d) - X(j, d)) / std::exp(h.log_ls[d]);
        r2 += dd * dd;
      }
      K(i, j) = K(j, i) = sf2 * matern52(r2);
    }
  }
  double sn2 = std::max(std::exp(2.0 * h.log_sn), kGpNoiseFloor);
  K.diagonal().array() += sn2;
  return K;
}

double Gp::lml_for(const GpHyper& h, const Eigen::MatrixXd& X, const Eigen::VectorXd& yc) const {
  Eigen::LLT<Eigen::MatrixXd> llt;
  try {
    robust_llt(kernel_matrix(h, X), llt);
  } catch (const std::runtime_error&) {
    return -std::numeric_limits<double>::infinity();
  }
  Eigen::VectorXd alpha = llt.solve(yc);
  double logdet = 0.0;
  for (int i = 0; i < X.rows(); ++i) logdet += std::log(llt.matrixL()(i, i));
  return -0.5 * yc.dot(alpha) - logdet -
         0.5 * X.rows() * std::log(2.0 * 3.14159265358979323846);
}

void Gp::set_data(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  if (X.cols() != dim_) throw ConfigError("gp: X has wrong dimension");
  if (X.rows() != y.size()) throw ConfigError("gp: X and y row counts differ");
  if (X.rows() < 1) throw ConfigError("gp: need at least one observation");
  X_ = X;
  ymean_ = y.mean();
  Eigen::VectorXd yc = y.array() - ymean_;
  Eigen::LLT<Eigen::MatrixXd> llt;
  jitter_ = robust_llt(kernel_matrix(hyper_, X), llt);
  L_ = llt.matrixL();
  alpha_ = llt.solve(yc);
  double logdet = 0.0;
  for (int i = 0; i < X.rows(); ++i) logdet += std::log(L_(i, i));
  lml_ = -0.5 * yc.dot(alpha_) - logdet -
         0.5 * X.rows() * std::log(2.0 * 3.14159265358979323846);
  fitted_ = true;
}

void Gp::fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Rng& rng, int restarts,
             int nm_iters) {
  if (X.cols() != dim_) throw ConfigError("gp: X has wrong dimension");
  Eigen::VectorXd yc = y.array() - y.mean();
  double yscale = std::max(std::sqrt(yc.squaredNorm() / std::max<int>(1, yc.size())), 1e-8);

  auto objective = [&](const Eigen::VectorXd& theta) {
    return -lml_for(unpack(theta, dim_), X, yc);
  };

  GpHyper start;
  start.log_ls = Eigen::VectorXd::Constant(dim_, std::log(0.3));
  start.log_sf = std::log(yscale);
  start.log_sn = std::log(0.05 * yscale + 1e-6);

  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_theta = pack(start);
  for (int r = 0; r < restarts; ++r) {
    GpHyper h0 = start;
    if (r > 0) {
      for (int d = 0; d < dim_; ++d) h0.log_ls[d] = std::log(0.05) + rng.uniform() * (std::log(2.0) - std::log(0.05));
      h0.log_sf = std::log(yscale) + rng.uniform(-1.0, 1.0);
      h0.log_sn = std::log(1e-4) + rng.uniform() * (std::log(0.2) - std::log(1e-4));
    }
    Eigen::VectorXd theta = nelder_mead(objective, pack(h0), 0.5, nm_iters);
    double val = objective(theta);
    if (val < best) {
      best = val;
      best_theta = theta;
    }
  }
  hyper_ = unpack(best_theta, dim_);
  set_data(X, y);
}

void Gp::predict(const Eigen::MatrixXd& Xs, Eigen::VectorXd& mu, Eigen::VectorXd& var) const {
  if (!fitted_) throw std::runtime_error("gp: predict before set_data/fit");
  if (Xs.cols() != dim_) throw ConfigError("gp: query has wrong dimension");
  const int m = static_cast<int>(Xs.rows());
  const int n = static_cast<int>(X_.rows());
  double sf2 = std::exp(2.0 * hyper_.log_sf);
  Eigen::MatrixXd Ks(n, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) {
      double r2 = 0.0;
      for (int d = 0; d < dim_; ++d) {
        double dd = (X_(i, d) - Xs(j, d)) / std::exp(hyper_.log_ls[d]);
        r2 += dd * dd;
      }
      Ks(i, j) = sf2 * matern52(r2);
    }
  mu = Ks.transpose() * alpha_;
  mu.array() += ymean_;
  Eigen::MatrixXd V = L_.triangularView<Eigen::Lower>().solve(Ks);
  var.resize(m);
  for (int j = 0; j < m; ++j) var[j] = std::max(sf2 - V.col(j).squaredNorm(), 0.0);
}

}  // namespace ens
