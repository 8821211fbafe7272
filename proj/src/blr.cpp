#include "duncert/blr.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace duncert {

namespace {

// Cholesky A = L L^T for SPD A (row-major d x d). Throws if A is not SPD.
std::vector<double> cholesky(const std::vector<double>& a, int d, const char* who) {
    std::vector<double> l(a.size(), 0.0);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<size_t>(i) * d + j];
            for (int k = 0; k < j; ++k)
                s -= l[static_cast<size_t>(i) * d + k] * l[static_cast<size_t>(j) * d + k];
            if (i == j) {
                if (s <= 0.0)
                    throw std::runtime_error(std::string(who) + ": matrix not positive definite");
                l[static_cast<size_t>(i) * d + i] = std::sqrt(s);
            } else {
                l[static_cast<size_t>(i) * d + j] = s / l[static_cast<size_t>(j) * d + j];
            }
        }
    }
    return l;
}

std::vector<double> chol_solve(const std::vector<double>& l, int d,
                               const std::vector<double>& b) {
    std::vector<double> z(b);
    for (int i = 0; i < d; ++i) {
        double s = z[static_cast<size_t>(i)];
        for (int k = 0; k < i; ++k) s -= l[static_cast<size_t>(i) * d + k] * z[static_cast<size_t>(k)];
        z[static_cast<size_t>(i)] = s / l[static_cast<size_t>(i) * d + i];
    }
    for (int i = d - 1; i >= 0; --i) {
        double s = z[static_cast<size_t>(i)];
        for (int k = i + 1; k < d; ++k) s -= l[static_cast<size_t>(k) * d + i] * z[static_cast<size_t>(k)];
        z[static_cast<size_t>(i)] = s / l[static_cast<size_t>(i) * d + i];
    }
    return z;
}

double quad_via_solve(const std::vector<double>& l, int d, const std::vector<double>& x) {
    std::vector<double> z = chol_solve(l, d, x);
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += x[static_cast<size_t>(i)] * z[static_cast<size_t>(i)];
    return acc;
}

std::vector<double> probe_vec(const BlrPosterior& post, const Tensor& x_star,
                              const char* who) {
    const int d = post.mu.dim(0);
    if (x_star.rank() != 1 || x_star.dim(0) != d)
        throw std::invalid_argument(std::string(who) + ": probe " + shape_str(x_star.shape()) +
                                    " does not match dimension " + std::to_string(d));
    return x_star.values();
}

double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

BlrPosterior fit_blr(const Tensor& x, const Tensor& y, double alpha, double beta) {
    if (x.rank() != 2 || y.rank() != 1 || x.dim(0) != y.dim(0))
        throw std::invalid_argument("fit_blr: X " + shape_str(x.shape()) + " vs y " +
                                    shape_str(y.shape()));
    if (x.dim(0) < 1) throw std::invalid_argument("fit_blr: need N >= 1");
    if (alpha <= 0.0 || beta <= 0.0)
        throw std::domain_error("fit_blr: alpha and beta must be positive");
    for (double v : x.values())
        if (!std::isfinite(v)) throw std::runtime_error("fit_blr: non-finite input in X");
    for (double v : y.values())
        if (!std::isfinite(v)) throw std::runtime_error("fit_blr: non-finite input in y");

    const int n = x.dim(0), d = x.dim(1);
    std::vector<double> gram(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a) {
            const double xa = x.at(i, a);
            for (int b = 0; b <= a; ++b) gram[static_cast<size_t>(a) * d + b] += xa * x.at(i, b);
        }
    for (int a = 0; a < d; ++a)
        for (int b = a + 1; b < d; ++b)
            gram[static_cast<size_t>(a) * d + b] = gram[static_cast<size_t>(b) * d + a];

    BlrPosterior post;
    post.n = n;
    post.alpha = alpha;
    post.beta = beta;

    std::vector<double> lambda(gram), sigma(gram);
    for (size_t i = 0; i < lambda.size(); ++i) lambda[i] *= beta;
    for (int a = 0; a < d; ++a) lambda[static_cast<size_t>(a) * d + a] += alpha;
    for (int a = 0; a < d; ++a) sigma[static_cast<size_t>(a) * d + a] += alpha / beta;
    for (size_t i = 0; i < sigma.size(); ++i) sigma[i] /= static_cast<double>(n);

    post.lambda = Tensor::of(lambda, {d, d});
    post.sigma = Tensor::of(sigma, {d, d});
    post.chol_lambda = cholesky(lambda, d, "fit_blr");
    post.chol_sigma = cholesky(sigma, d, "fit_blr");

    std::vector<double> xty(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a) xty[static_cast<size_t>(a)] += x.at(i, a) * y.at(i);
    for (double& v : xty) v *= beta;
    post.mu = Tensor::vec(chol_solve(post.chol_lambda, d, xty));
    return post;
}

std::pair<double, double> blr_predict(const BlrPosterior& post, double beta,
                                      const Tensor& x_star) {
    std::vector<double> xs = probe_vec(post, x_star, "blr_predict");
    const int d = post.mu.dim(0);
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += post.mu.at(i) * xs[static_cast<size_t>(i)];
    const double variance = 1.0 / beta + quad_via_solve(post.chol_lambda, d, xs);
    return {mean, variance};
}

double blr_energy(const BlrPosterior& post, const Tensor& x_star) {
    std::vector<double> xs = probe_vec(post, x_star, "blr_energy");
    return 0.5 * quad_via_solve(post.chol_sigma, post.mu.dim(0), xs);
}

double criterion_identity_check(const BlrPosterior& post, double beta,
                                const Tensor& x_star) {
    const double variance = blr_predict(post, beta, x_star).second;
    const double energy = blr_energy(post, x_star);
    return std::abs(variance - 1.0 / beta - 2.0 / (beta * post.n) * energy);
}

double constrained_posterior_variance(const BlrPosterior& post, double gamma,
                                      const Tensor& x_star) {
    if (gamma <= 0.0)
        throw std::domain_error("constrained_posterior_variance: gamma must be positive");
    return 2.0 * gamma * blr_energy(post, x_star);
}

LaplaceLogisticPosterior fit_laplace_logistic(const Tensor& x,
                                              const std::vector<int>& y,
                                              double alpha, double tol,
                                              int max_iterations) {
    if (x.rank() != 2 || static_cast<int>(y.size()) != x.dim(0))
        throw std::invalid_argument("fit_laplace_logistic: X " + shape_str(x.shape()) +
                                    " vs " + std::to_string(y.size()) + " labels");
    for (int label : y)
        if (label != 0 && label != 1)
            throw std::invalid_argument("fit_laplace_logistic: labels must be 0/1");

    const int n = x.dim(0), d = x.dim(1);
    std::vector<double> w(static_cast<size_t>(d), 0.0);
    double grad_norm = 0.0;
    int iter = 0;
    for (; iter < max_iterations; ++iter) {
        std::vector<double> grad(static_cast<size_t>(d), 0.0);
        std::vector<double> hess(static_cast<size_t>(d) * d, 0.0);
        for (int i = 0; i < n; ++i) {
            double act = 0.0;
            for (int a = 0; a < d; ++a) act += w[static_cast<size_t>(a)] * x.at(i, a);
            const double s = sigmoid(act);
            const double r = s * (1.0 - s);
            const double resid = s - static_cast<double>(y[static_cast<size_t>(i)]);
            for (int a = 0; a < d; ++a) {
                grad[static_cast<size_t>(a)] += resid * x.at(i, a);
                for (int b = 0; b <= a; ++b)
                    hess[static_cast<size_t>(a) * d + b] += r * x.at(i, a) * x.at(i, b);
            }
        }
        for (int a = 0; a < d; ++a) {
            grad[static_cast<size_t>(a)] += alpha * w[static_cast<size_t>(a)];
            hess[static_cast<size_t>(a) * d + a] += alpha;
            for (int b = a + 1; b < d; ++b)
                hess[static_cast<size_t>(a) * d + b] = hess[static_cast<size_t>(b) * d + a];
        }
        grad_norm = 0.0;
        for (double g : grad) grad_norm += g * g;
        grad_norm = std::sqrt(grad_norm);
        if (grad_norm <= tol) break;
        std::vector<double> l = cholesky(hess, d, "fit_laplace_logistic");
        std::vector<double> step = chol_solve(l, d, grad);
        for (int a = 0; a < d; ++a) w[static_cast<size_t>(a)] -= step[static_cast<size_t>(a)];
    }
    if (grad_norm > tol)
        throw std::runtime_error(
            "fit_laplace_logistic: Newton did not converge, |grad| = " +
            std::to_string(grad_norm));

    LaplaceLogisticPosterior post;
    post.mu_map = Tensor::vec(w);
    post.newton_iterations = iter;
    post.final_grad_norm = grad_norm;
    std::vector<double> lambda(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        double act = 0.0;
        for (int a = 0; a < d; ++a) act += w[static_cast<size_t>(a)] * x.at(i, a);
        const double s = sigmoid(act);
        const double r = s * (1.0 - s);
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b)
                lambda[static_cast<size_t>(a) * d + b] += r * x.at(i, a) * x.at(i, b);
    }
    for (int a = 0; a < d; ++a) lambda[static_cast<size_t>(a) * d + a] += alpha;
    post.lambda = Tensor::of(lambda, {d, d});
    return post;
}

}  // namespace duncert
