#include "duncert/energy.hpp"

#include <cmath>
#include <stdexcept>

namespace duncert {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Lift a rank-1 input to a single-row batch; remember to lower the result.
Tensor as_batch(const Tensor& h, int dim, bool& was_vector) {
    if (h.rank() == 1) {
        if (h.dim(0) != dim)
            throw std::invalid_argument("energy: input length " +
                                        std::to_string(h.dim(0)) +
                                        " does not match dim " + std::to_string(dim));
        was_vector = true;
        return reshape(h, {1, dim});
    }
    if (h.rank() != 2 || h.dim(1) != dim)
        throw std::invalid_argument("energy: input " + shape_str(h.shape()) +
                                    " does not match dim " + std::to_string(dim));
    was_vector = false;
    return h;
}

Tensor lower(const Tensor& per_row, bool was_vector) {
    return was_vector ? reshape(per_row, {}) : per_row;
}

Tensor ones(int n) { return Tensor::full({n}, 1.0); }

/// Broadcast a rank-0 tracked scalar across a length-n vector.
Tensor bcast(const Tensor& s, int n) { return scale(ones(n), s); }

}  // namespace

// ---------------------------------------------------------------------------
// LdlGaussianEnergy

LdlGaussianEnergy::LdlGaussianEnergy(int dim)
    : dim_(dim),
      l_strict_(Tensor::param(Tensor::zeros({dim, dim}))),
      log_d_(Tensor::param(Tensor::zeros({dim}))) {}

Tensor LdlGaussianEnergy::energy(const Tensor& h, bool train_params) const {
    bool vec = false;
    Tensor hb = as_batch(h, dim_, vec);
    Tensor l = train_params ? l_strict_ : l_strict_.detach();
    Tensor ld = train_params ? log_d_ : log_d_.detach();
    Tensor u = unit_lower_matmul(hb, l);
    Tensor weighted = square(u) * outer(ones(hb.dim(0)), exp(ld));
    return lower(0.5 * rowsum(weighted), vec);
}

Tensor LdlGaussianEnergy::log_likelihood(const Tensor& h, bool train_params) const {
    bool vec = false;
    Tensor hb = as_batch(h, dim_, vec);
    Tensor ld = train_params ? log_d_ : log_d_.detach();
    Tensor e = energy(hb, train_params);
    // -1/2 log|Sigma| = +1/2 sum(log_d)
    Tensor half_logdet = 0.5 * sum(ld);
    Tensor ll = mul_scalar(e, -1.0) + bcast(half_logdet, hb.dim(0));
    return lower(add_scalar(ll, -0.5 * dim_ * kLog2Pi), vec);
}

double LdlGaussianEnergy::log_det_sigma() const {
    double acc = 0.0;
    for (double x : log_d_.values()) acc += x;
    return -acc;
}

void LdlGaussianEnergy::collect_params(const std::string& prefix,
                                       std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".L_strict", l_strict_, false});
    out.push_back({prefix + ".log_d", log_d_, false});
}

// ---------------------------------------------------------------------------
// Rank1MixtureEnergy

Rank1MixtureEnergy::Rank1MixtureEnergy(int dim, int k, Rng& rng) : dim_(dim), k_(k) {
    if (k < 1) throw std::invalid_argument("Rank1MixtureEnergy: need K >= 1");
    std::vector<double> v0(static_cast<size_t>(k) * dim);
    const double std0 = std::sqrt(0.01 / dim);
    for (double& x : v0) x = std0 * rng.normal();
    v_ = Tensor::param(Tensor::of(std::move(v0), {k, dim}));
    log_d_ = Tensor::param(Tensor::zeros({k, dim}));
    logits_ = Tensor::param(Tensor::zeros({k}));
}

Tensor Rank1MixtureEnergy::component_quadratics(const Tensor& h_batch,
                                                const Tensor& v,
                                                const Tensor& log_d) const {
    const int n = h_batch.dim(0);
    Tensor h_sq = square(h_batch);
    std::vector<Tensor> cols;
    cols.reserve(static_cast<size_t>(k_));
    for (int k = 0; k < k_; ++k) {
        Tensor vk = row(v, k);
        Tensor dinv = exp(mul_scalar(row(log_d, k), -1.0));
        Tensor t1 = rowsum(h_sq * outer(ones(n), dinv));
        Tensor s = matvec(h_batch, vk * dinv);
        Tensor c = add_scalar(sum(square(vk) * dinv), 1.0);
        cols.push_back(t1 - scale(square(s), reciprocal(c)));
    }
    return stack_cols(cols);
}

Tensor Rank1MixtureEnergy::energy(const Tensor& h, bool train_params) const {
    bool vec = false;
    Tensor hb = as_batch(h, dim_, vec);
    Tensor v = train_params ? v_ : v_.detach();
    Tensor ld = train_params ? log_d_ : log_d_.detach();
    Tensor lg = train_params ? logits_ : logits_.detach();
    Tensor q = component_quadratics(hb, v, ld);
    Tensor log_pi = lg - bcast(logsumexp(lg), k_);
    // column k: log pi_k - q_k/2; stabilized mixture via log-sum-exp per row.
    Tensor scores = mul_scalar(q, -0.5) + outer(ones(hb.dim(0)), log_pi);
    return lower(mul_scalar(logsumexp_rows(scores), -1.0), vec);
}

Tensor Rank1MixtureEnergy::log_likelihood(const Tensor& h, bool train_params) const {
    bool vec = false;
    Tensor hb = as_batch(h, dim_, vec);
    Tensor v = train_params ? v_ : v_.detach();
    Tensor ld = train_params ? log_d_ : log_d_.detach();
    Tensor lg = train_params ? logits_ : logits_.detach();
    const int n = hb.dim(0);
    Tensor q = component_quadratics(hb, v, ld);
    Tensor log_pi = lg - bcast(logsumexp(lg), k_);
    // Per-component normalizer: -1/2 log|Sigma_k| - (D/2) log 2pi.
    std::vector<Tensor> norm_cols;
    norm_cols.reserve(static_cast<size_t>(k_));
    for (int k = 0; k < k_; ++k) {
        Tensor vk = row(v, k);
        Tensor ldk = row(ld, k);
        Tensor dinv = exp(mul_scalar(ldk, -1.0));
        Tensor log_det = log(add_scalar(sum(square(vk) * dinv), 1.0)) + sum(ldk);
        norm_cols.push_back(bcast(mul_scalar(log_det, -0.5), n));
    }
    Tensor scores = mul_scalar(q, -0.5) + outer(ones(n), log_pi) + stack_cols(norm_cols);
    Tensor ll = add_scalar(logsumexp_rows(scores), -0.5 * dim_ * kLog2Pi);
    return lower(ll, vec);
}

void Rank1MixtureEnergy::collect_params(const std::string& prefix,
                                        std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".v", v_, false});
    out.push_back({prefix + ".log_d", log_d_, false});
    out.push_back({prefix + ".logits", logits_, false});
}

// ---------------------------------------------------------------------------
// Plain Sherman-Morrison helpers

double rank1_inverse_quadratic(const std::vector<double>& v,
                               const std::vector<double>& d_diag,
                               const std::vector<double>& h) {
    if (v.size() != d_diag.size() || v.size() != h.size())
        throw std::invalid_argument("rank1_inverse_quadratic: length mismatch");
    double t1 = 0.0, s = 0.0, c = 1.0;
    for (size_t i = 0; i < v.size(); ++i) {
        if (d_diag[i] <= 0.0)
            throw std::domain_error("rank1_inverse_quadratic: non-positive diagonal");
        t1 += h[i] * h[i] / d_diag[i];
        s += v[i] * h[i] / d_diag[i];
        c += v[i] * v[i] / d_diag[i];
    }
    return t1 - s * s / c;
}

double rank1_log_det(const std::vector<double>& v,
                     const std::vector<double>& d_diag) {
    if (v.size() != d_diag.size())
        throw std::invalid_argument("rank1_log_det: length mismatch");
    double c = 1.0, acc = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        if (d_diag[i] <= 0.0)
            throw std::domain_error("rank1_log_det: non-positive diagonal");
        c += v[i] * v[i] / d_diag[i];
        acc += std::log(d_diag[i]);
    }
    return std::log(c) + acc;
}

// ---------------------------------------------------------------------------

Tensor generative_loss(const std::vector<const EnergyModel*>& models,
                       const std::vector<Tensor>& activations,
                       double prior_weight) {
    if (models.size() != activations.size())
        throw std::invalid_argument("generative_loss: " + std::to_string(models.size()) +
                                    " models vs " + std::to_string(activations.size()) +
                                    " activation sets");
    Tensor loss = Tensor::scalar(0.0);
    std::vector<NamedParam> params;
    for (size_t l = 0; l < models.size(); ++l) {
        loss = loss + mul_scalar(mean(models[l]->log_likelihood(activations[l], true)), -1.0);
        models[l]->collect_params("energy." + std::to_string(l), params);
    }
    if (prior_weight != 0.0) {
        Tensor penalty = Tensor::scalar(0.0);
        for (const auto& p : params) penalty = penalty + sum(square(p.tensor));
        loss = loss + mul_scalar(penalty, 0.5 * prior_weight);
    }
    return loss;
}

}  // namespace duncert
