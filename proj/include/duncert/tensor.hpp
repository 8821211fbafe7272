#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace duncert {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Op {
    kLeaf,
    kMatmul,
    kMatvec,
    kTranspose,
    kAdd,
    kAddRowvec,
    kAddScalar,
    kSub,
    kMul,
    kMulScalar,
    kScale,
    kOuter,
    kRelu,
    kExp,
    kLog,
    kSqrt,
    kSquare,
    kSoftplus,
    kReciprocal,
    kSum,
    kMean,
    kRowsum,
    kColsum,
    kLogsumexp,
    kLogsumexpRows,
    kConcat,
    kSlice,
    kStackCols,
    kReshape,
    kUnitLowerMatvecT,
    kUnitLowerMatmul,
};

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
    Op op = Op::kLeaf;
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<double> aux;  // op-specific constants (slice offsets, scalars)

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad();
};

/// Dense row-major float64 array. A Tensor is a cheap handle onto a graph
/// node; op results keep their parents alive so backward() can replay them.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double v);
    static Tensor of(std::vector<double> data, Shape shape);
    static Tensor vec(std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor from_rows(const std::vector<std::vector<double>>& rows);
    /// Tracked leaf: participates in backward() whenever a tape is active.
    static Tensor param(const Tensor& init);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    const std::vector<double>& values() const { return node_->value; }
    /// Mutable access for leaves only (initialization, optimizer updates).
    std::vector<double>& mutable_values();

    double item() const;
    double at(int i) const;
    double at(int i, int j) const;

    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad();

    /// Untracked copy: same values, no graph history, no grad.
    Tensor detach() const;

    std::shared_ptr<Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<Node> n);

private:
    std::shared_ptr<Node> node_;
};

/// Define-by-run gradient tape. Constructing a Tape makes it the active
/// recorder for the current thread; ops whose inputs require grad append
/// their nodes in creation order, which is already topological.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from
    /// loss, then clears the tape. loss must be a scalar.
    void backward(const Tensor& loss);

    size_t size() const { return nodes_.size(); }

    static Tape* active();
    static void record(std::shared_ptr<Node> n);

private:
    std::vector<std::shared_ptr<Node>> nodes_;
    Tape* prev_ = nullptr;
};

/// Counter-based generator: a fixed key plus an incrementing counter fed
/// through a splitmix64 finalizer. Identical seeds give identical streams,
/// and split() derives independent streams without shared state.
class Rng {
public:
    explicit Rng(uint64_t seed);

    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    double normal();                        // N(0, 1), Box-Muller
    int uniform_int(int n);                 // {0, ..., n-1}

    Rng split(uint64_t stream) const;

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }
    static Rng from_state(uint64_t key, uint64_t counter);

private:
    Rng(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

// Primitive operations. Each validates shapes (throwing std::invalid_argument
// naming the op) and records itself on the active tape when any input is
// tracked.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matvec(const Tensor& a, const Tensor& x);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor add_scalar(const Tensor& a, double c);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, const Tensor& s);  // s is rank-0
Tensor outer(const Tensor& u, const Tensor& v);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor rowsum(const Tensor& m);
Tensor colsum(const Tensor& m);
Tensor logsumexp(const Tensor& a);
Tensor logsumexp_rows(const Tensor& m);
Tensor concat(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& a, int start, int len);
Tensor stack_cols(const std::vector<Tensor>& cols);
Tensor reshape(const Tensor& a, const Shape& shape);
/// Row k of a matrix as a vector.
Tensor row(const Tensor& m, int k);

/// (I + strict_lower(L))^T h. Only the strictly-lower entries of L are read;
/// gradients flow into exactly those entries.
Tensor unit_lower_matvec_t(const Tensor& l_strict, const Tensor& h);
/// Batched right-multiplication H (I + strict_lower(L)); row i equals
/// unit_lower_matvec_t(L, H[i]).
Tensor unit_lower_matmul(const Tensor& h, const Tensor& l_strict);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }

Tensor sample_standard_normal(Rng& rng, const Shape& shape);

/// Central-difference gradient audit. f must be a deterministic scalar
/// function of the given leaf parameters (freeze any sampling with a fixed
/// Rng inside f). Returns the max relative error over all elements, with
/// denominator max(|analytic|, |numeric|, 1e-12).
double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double step);

}  // namespace duncert
