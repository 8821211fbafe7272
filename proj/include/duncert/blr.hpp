#pragma once

#include <utility>
#include <vector>

#include "duncert/tensor.hpp"

namespace duncert {

/// Exact Bayesian linear regression posterior for prior N(0, alpha^{-1} I)
/// and Gaussian likelihood with precision beta. Lambda = beta X^T X + alpha I
/// and the energy covariance Sigma = (X^T X + (alpha/beta) I) / N satisfy
/// Lambda = beta N Sigma exactly.
struct BlrPosterior {
    Tensor mu;      // D
    Tensor lambda;  // D x D posterior precision
    Tensor sigma;   // D x D energy covariance
    int n = 0;
    double alpha = 0.0;
    double beta = 0.0;
    // Cached Cholesky factors of lambda and sigma (lower triangular, row-major).
    std::vector<double> chol_lambda;
    std::vector<double> chol_sigma;
};

BlrPosterior fit_blr(const Tensor& x, const Tensor& y, double alpha, double beta);

/// Posterior predictive N(mu^T x_*, 1/beta + x_*^T Lambda^{-1} x_*);
/// returns (mean, variance). Solves against the cached factorization.
std::pair<double, double> blr_predict(const BlrPosterior& post, double beta,
                                      const Tensor& x_star);

/// Gaussian energy E(x_*) = 1/2 x_*^T Sigma^{-1} x_*.
double blr_energy(const BlrPosterior& post, const Tensor& x_star);

/// |Var[y_*] - 1/beta - (2/(beta N)) E(x_*)|; the exact-BLR identity makes
/// this residual vanish up to roundoff.
double criterion_identity_check(const BlrPosterior& post, double beta,
                                const Tensor& x_star);

/// Variance of w^T x_* under the constrained posterior q(w) = N(mu, gamma
/// Sigma^{-1}): gamma x_*^T Sigma^{-1} x_* = 2 gamma E(x_*).
double constrained_posterior_variance(const BlrPosterior& post, double gamma,
                                      const Tensor& x_star);

struct LaplaceLogisticPosterior {
    Tensor mu_map;  // D
    Tensor lambda;  // D x D precision at the MAP
    int newton_iterations = 0;
    double final_grad_norm = 0.0;
};

/// MAP weight by Newton iterations on the alpha-penalized log-likelihood,
/// precision Lambda = sum_i s_i (1 - s_i) x_i x_i^T + alpha I at the MAP.
/// Serves as an analytic oracle only; never a training path.
LaplaceLogisticPosterior fit_laplace_logistic(const Tensor& x,
                                              const std::vector<int>& y,
                                              double alpha,
                                              double tol = 1e-10,
                                              int max_iterations = 100);

}  // namespace duncert
