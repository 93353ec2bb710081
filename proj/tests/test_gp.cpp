#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ens/gp.hpp"

using namespace ens;

namespace {

Eigen::MatrixXd random_inputs(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = rng.uniform();
  return X;
}

}  // namespace

TEST_CASE("posterior mean matches the dense textbook formula") {
  const int n = 12, d = 3, m = 7;
  Eigen::MatrixXd X = random_inputs(n, d, 1);
  Rng rng(2);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = std::sin(3.0 * X(i, 0)) + 0.2 * X(i, 1) + 0.1 * rng.normal();

  Gp gp(d);
  GpHyper h;
  h.log_ls = Eigen::VectorXd::Constant(d, std::log(0.4));
  h.log_sf = std::log(0.8);
  h.log_sn = std::log(0.05);
  gp.set_hyper(h);
  gp.set_data(X, y);

  Eigen::MatrixXd Xs = random_inputs(m, d, 3);
  Eigen::VectorXd mu, var;
  gp.predict(Xs, mu, var);

  // dense reference: mu = k*' (K + sn^2 I)^-1 (y - mean), var = k** - k*' K^-1 k*
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      K(i, j) = gp.kernel(X.row(i).transpose(), X.row(j).transpose());
  double sn2 = std::max(std::exp(2.0 * h.log_sn), kGpNoiseFloor);
  K.diagonal().array() += sn2;
  Eigen::MatrixXd Kinv = K.inverse();
  Eigen::VectorXd yc = y.array() - y.mean();
  for (int q = 0; q < m; ++q) {
    Eigen::VectorXd ks(n);
    for (int i = 0; i < n; ++i)
      ks[i] = gp.kernel(X.row(i).transpose(), Xs.row(q).transpose());
    double mu_ref = y.mean() + ks.dot(Kinv * yc);
    double var_ref =
        gp.kernel(Xs.row(q).transpose(), Xs.row(q).transpose()) - ks.dot(Kinv * ks);
    CHECK(std::fabs(mu[q] - mu_ref) < 1e-8);
    CHECK(std::fabs(var[q] - std::max(var_ref, 0.0)) < 1e-8);
  }
}

TEST_CASE("near-noiseless gp interpolates its training data") {
  const int n = 10, d = 2;
  Eigen::MatrixXd X = random_inputs(n, d, 4);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = std::cos(2.0 * X(i, 0)) * X(i, 1);

  Gp gp(d);
  GpHyper h;
  h.log_ls = Eigen::VectorXd::Constant(d, std::log(0.5));
  h.log_sf = 0.0;
  h.log_sn = 0.5 * std::log(kGpNoiseFloor);
  gp.set_hyper(h);
  gp.set_data(X, y);

  Eigen::VectorXd mu, var;
  gp.predict(X, mu, var);
  for (int i = 0; i < n; ++i) {
    CHECK(std::fabs(mu[i] - y[i]) < 1e-3);
    CHECK(var[i] < 1e-3);
    CHECK(var[i] >= 0.0);
  }
  // away from the data the variance grows
  Eigen::MatrixXd far = Eigen::MatrixXd::Constant(1, d, 7.0);
  gp.predict(far, mu, var);
  CHECK(var[0] > 0.5);
}

TEST_CASE("fitted lengthscales track the wiggliness of the data") {
  const int n = 40, d = 1;
  Eigen::MatrixXd X = random_inputs(n, d, 5);
  Eigen::VectorXd smooth(n), wiggly(n);
  for (int i = 0; i < n; ++i) {
    smooth[i] = std::sin(2.0 * 3.14159265358979 * X(i, 0));
    wiggly[i] = std::sin(8.0 * 3.14159265358979 * X(i, 0));
  }

  Gp gs(d), gw(d);
  Rng r1(6), r2(7);
  gs.fit(X, smooth, r1, 4, 200);
  gw.fit(X, wiggly, r2, 4, 200);
  CHECK(std::exp(gw.hyper().log_ls[0]) < 0.5 * std::exp(gs.hyper().log_ls[0]));
  CHECK(gs.log_marginal() > 0.0);  // smooth data is easy to explain

  // prediction quality at held-out points
  Eigen::MatrixXd Xs = random_inputs(20, d, 8);
  Eigen::VectorXd mu, var;
  gs.predict(Xs, mu, var);
  for (int i = 0; i < 20; ++i)
    CHECK(std::fabs(mu[i] - std::sin(2.0 * 3.14159265358979 * Xs(i, 0))) < 0.15);
}

TEST_CASE("fit separates relevant from irrelevant dimensions") {
  const int n = 60, d = 2;
  Eigen::MatrixXd X = random_inputs(n, d, 8);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = std::sin(4.0 * X(i, 0));  // dim 1 is noise

  Gp gp(d);
  Rng rng(9);
  gp.fit(X, y, rng, 5, 200);
  CHECK(std::exp(gp.hyper().log_ls[1]) > 2.0 * std::exp(gp.hyper().log_ls[0]));
}

TEST_CASE("duplicate rows do not break the factorization") {
  const int d = 2;
  Eigen::MatrixXd X(6, d);
  X << 0.1, 0.2, 0.1, 0.2, 0.5, 0.5, 0.5, 0.5, 0.9, 0.1, 0.9, 0.1;
  Eigen::VectorXd y(6);
  y << 1.0, 1.0, 2.0, 2.0, 0.5, 0.5;
  Gp gp(d);
  GpHyper h;
  h.log_ls = Eigen::VectorXd::Constant(d, std::log(0.3));
  h.log_sn = std::log(1e-5);  // below what the duplicates can support
  gp.set_hyper(h);
  gp.set_data(X, y);  // must succeed via jitter escalation if needed
  Eigen::VectorXd mu, var;
  gp.predict(X, mu, var);
  CHECK(mu.allFinite());
}

TEST_CASE("input validation") {
  Gp gp(3);
  Eigen::MatrixXd X = random_inputs(5, 2, 10);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(5);
  CHECK_THROWS_AS(gp.set_data(X, y), ConfigError);
  Eigen::MatrixXd X3 = random_inputs(5, 3, 11);
  CHECK_THROWS_AS(gp.set_data(X3, Eigen::VectorXd::Zero(4)), ConfigError);
  Eigen::VectorXd mu, var;
  CHECK_THROWS(gp.predict(X3, mu, var));  // not fitted yet
}
