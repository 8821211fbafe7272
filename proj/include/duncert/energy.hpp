#pragma once

#include <memory>
#include <string>
#include <vector>

#include "duncert/tensor.hpp"

namespace duncert {

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = false;
};

/// Zero-mean Gaussian (or mixture) energy over a layer's input. energy() and
/// log_likelihood() accept a single vector (rank-1, returns rank-0) or a
/// batch of rows (N x D, returns length-N); rows are independent.
/// train_params=false evaluates through detached parameter copies so
/// discriminative gradients reach h but never the energy parameters.
class EnergyModel {
public:
    virtual ~EnergyModel() = default;
    virtual int dim() const = 0;
    virtual Tensor energy(const Tensor& h, bool train_params = true) const = 0;
    virtual Tensor log_likelihood(const Tensor& h, bool train_params = true) const = 0;
    virtual void collect_params(const std::string& prefix,
                                std::vector<NamedParam>& out) const = 0;
};

/// Full-rank precision Sigma^{-1} = L D L^T with unit lower-triangular L
/// (strictly-lower entries free) and D = diag(exp(log_d)).
class LdlGaussianEnergy : public EnergyModel {
public:
    explicit LdlGaussianEnergy(int dim);

    int dim() const override { return dim_; }
    /// E(h) = 1/2 ||D^{1/2} L^T h||^2, no inversion involved.
    Tensor energy(const Tensor& h, bool train_params = true) const override;
    /// Fully normalized: -E(h) - 1/2 log|Sigma| - (D/2) log 2pi.
    Tensor log_likelihood(const Tensor& h, bool train_params = true) const override;
    void collect_params(const std::string& prefix,
                        std::vector<NamedParam>& out) const override;

    /// log|Sigma| = -sum(log_d).
    double log_det_sigma() const;

    Tensor& l_strict() { return l_strict_; }
    Tensor& log_d() { return log_d_; }
    const Tensor& l_strict() const { return l_strict_; }
    const Tensor& log_d() const { return log_d_; }

private:
    int dim_;
    Tensor l_strict_;  // D x D, strictly-lower entries used
    Tensor log_d_;     // D
};

/// K-component mixture with component covariances v_k v_k^T + diag(exp(log_d_k)).
/// The energy is -log sum_k pi_k exp(-q_k(h)/2), which is >= 0 and reduces to
/// q(h)/2 for K = 1.
class Rank1MixtureEnergy : public EnergyModel {
public:
    Rank1MixtureEnergy(int dim, int k, Rng& rng);

    int dim() const override { return dim_; }
    int components() const { return k_; }
    Tensor energy(const Tensor& h, bool train_params = true) const override;
    Tensor log_likelihood(const Tensor& h, bool train_params = true) const override;
    void collect_params(const std::string& prefix,
                        std::vector<NamedParam>& out) const override;

    Tensor& v() { return v_; }
    Tensor& log_d() { return log_d_; }
    Tensor& logits() { return logits_; }
    const Tensor& v() const { return v_; }
    const Tensor& log_d() const { return log_d_; }
    const Tensor& logits() const { return logits_; }

private:
    /// N x K matrix of per-row Sherman-Morrison quadratics q_k(h_i).
    Tensor component_quadratics(const Tensor& h_batch, const Tensor& v,
                                const Tensor& log_d) const;

    int dim_;
    int k_;
    Tensor v_;       // K x D rank-1 factors
    Tensor log_d_;   // K x D log-diagonals
    Tensor logits_;  // K mixture logits
};

/// h^T Sigma^{-1} h for Sigma = v v^T + diag(d), via Sherman-Morrison in O(D).
double rank1_inverse_quadratic(const std::vector<double>& v,
                               const std::vector<double>& d_diag,
                               const std::vector<double>& h);

/// log|v v^T + diag(d)| = log(1 + v^T D^{-1} v) + sum log d_j.
double rank1_log_det(const std::vector<double>& v,
                     const std::vector<double>& d_diag);

/// Joint generative objective: sum over layers of the negative mean
/// log-likelihood of that layer's (detached) activations, plus
/// prior_weight * 1/2 ||omega||^2 over all energy parameters.
Tensor generative_loss(const std::vector<const EnergyModel*>& models,
                       const std::vector<Tensor>& activations,
                       double prior_weight);

}  // namespace duncert
