#pragma once

#include <Eigen/Dense>

#include "ens/rng.hpp"
#include "ens/tensor.hpp"

namespace ens {

struct GpHyper {
  Eigen::VectorXd log_ls;  // per-dimension log lengthscales
  double log_sf = 0.0;     // log signal stddev
  double log_sn = -3.45;   // log noise stddev
};

// Matern-5/2 ARD Gaussian process with exact inference (Cholesky).
class Gp {
 public:
  explicit Gp(int dim);

  void set_hyper(const GpHyper& h);
  const GpHyper& hyper() const { return hyper_; }

  // Factorizes with the current hyperparameters. Escalates jitter from 1e-10
  // to 1e-2 if the kernel matrix is not numerically positive definite.
  void set_data(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

  // Multi-start Nelder-Mead maximization of the log marginal likelihood,
  // then factorizes with the best hyperparameters found.
  void fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Rng& rng, int restarts = 4,
           int nm_iters = 150);

  double log_marginal() const { return lml_; }
  double y_mean() const { return ymean_; }
  double jitter_used() const { return jitter_; }
  int dim() const { return dim_; }

  double kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const;

  // Posterior mean and latent variance at each row of Xs.
  void predict(const Eigen::MatrixXd& Xs, Eigen::VectorXd& mu, Eigen::VectorXd& var) const;

 private:
  double lml_for(const GpHyper& h, const Eigen::MatrixXd& X, const Eigen::VectorXd& yc) const;
  Eigen::MatrixXd kernel_matrix(const GpHyper& h, const Eigen::MatrixXd& X) const;

  int dim_;
  GpHyper hyper_;
  Eigen::MatrixXd X_;
  Eigen::VectorXd alpha_;
  Eigen::MatrixXd L_;
  double ymean_ = 0.0;
  double lml_ = 0.0;
  double jitter_ = 0.0;
  bool fitted_ = false;
};

// Minimum observation-noise variance; keeps the fit from collapsing onto
// deterministic replicas.
constexpr double kGpNoiseFloor = 1e-6;

}  // namespace ens
