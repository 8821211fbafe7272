#include "duncert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace duncert {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
    if (!ok)
        shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

double softplus_val(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double v) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(static_cast<size_t>(numel_of(shape)), v);
    return wrap(std::move(n));
}

Tensor Tensor::of(std::vector<double> data, Shape shape) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
        shape_error("Tensor::of", "data size " + std::to_string(data.size()) +
                                      " does not fill " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return wrap(std::move(n));
}

Tensor Tensor::vec(std::vector<double> data) {
    Shape s{static_cast<int>(data.size())};
    return of(std::move(data), std::move(s));
}

Tensor Tensor::scalar(double v) { return of({v}, Shape{}); }

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) shape_error("Tensor::from_rows", "no rows");
    const int cols = static_cast<int>(rows[0].size());
    std::vector<double> data;
    data.reserve(rows.size() * static_cast<size_t>(cols));
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) != cols)
            shape_error("Tensor::from_rows", "ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return of(std::move(data), {static_cast<int>(rows.size()), cols});
}

Tensor Tensor::param(const Tensor& init) {
    auto n = std::make_shared<Node>();
    n->shape = init.shape();
    n->value = init.values();
    n->requires_grad = true;
    return wrap(std::move(n));
}

std::vector<double>& Tensor::mutable_values() {
    if (!node_->parents.empty())
        throw std::logic_error("mutable_values: only leaves may be mutated");
    return node_->value;
}

double Tensor::item() const {
    if (numel() != 1)
        shape_error("item", "tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

double Tensor::at(int i) const { return node_->value[static_cast<size_t>(i)]; }

double Tensor::at(int i, int j) const {
    return node_->value[static_cast<size_t>(i) * dim(1) + j];
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->value = node_->value;
    return wrap(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<Node> n) {
    g_active_tape->nodes_.push_back(std::move(n));
}

namespace {

void accumulate_parents(Node& n);

}  // namespace

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::logic_error(
            "backward: loss is not connected to tracked parameters");
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.grad.empty()) accumulate_parents(n);
    }
    nodes_.clear();
}

// ---------------------------------------------------------------------------
// Op construction

namespace {

Tensor make_op(Op op, Shape shape, std::vector<double> value,
               const std::vector<Tensor>& parents,
               std::vector<double> aux = {}) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->aux = std::move(aux);
    if (Tape::active() != nullptr) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (const auto& p : parents) n->parents.push_back(p.node());
            Tape::record(n);
        }
    }
    return Tensor::wrap(std::move(n));
}

Tensor unary_map(Op op, const Tensor& a, double (*f)(double)) {
    std::vector<double> out(a.values().size());
    const auto& x = a.values();
    for (size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return make_op(op, a.shape(), std::move(out), {a});
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        require(false, "matmul", a, b);
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (int i = 0; i < n; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* brow = pb + static_cast<size_t>(kk) * m;
            double* orow = out.data() + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) orow[j] += aik * brow[j];
        }
    return make_op(Op::kMatmul, {n, m}, std::move(out), {a, b});
}

Tensor matvec(const Tensor& a, const Tensor& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0))
        require(false, "matvec", a, x);
    const int n = a.dim(0), k = a.dim(1);
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += a.at(i, j) * x.at(j);
        out[static_cast<size_t>(i)] = acc;
    }
    return make_op(Op::kMatvec, {n}, std::move(out), {a, x});
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) shape_error("transpose", "need rank-2, got " + shape_str(a.shape()));
    const int n = a.dim(0), m = a.dim(1);
    std::vector<double> out(static_cast<size_t>(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<size_t>(j) * n + i] = a.at(i, j);
    return make_op(Op::kTranspose, {m, n}, std::move(out), {a});
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add", a, b);
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op(Op::kAdd, a.shape(), std::move(out), {a, b});
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
        require(false, "add_rowvec", m, v);
    const int n = m.dim(0), d = m.dim(1);
    std::vector<double> out(m.values().size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out[static_cast<size_t>(i) * d + j] = m.at(i, j) + v.at(j);
    return make_op(Op::kAddRowvec, m.shape(), std::move(out), {m, v});
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
    return make_op(Op::kAddScalar, a.shape(), std::move(out), {a}, {c});
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub", a, b);
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op(Op::kSub, a.shape(), std::move(out), {a, b});
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul", a, b);
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op(Op::kMul, a.shape(), std::move(out), {a, b});
}

Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return make_op(Op::kMulScalar, a.shape(), std::move(out), {a}, {c});
}

Tensor scale(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1)
        shape_error("scale", "scale factor must be scalar, got " + shape_str(s.shape()));
    const double c = s.values()[0];
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return make_op(Op::kScale, a.shape(), std::move(out), {a, s});
}

Tensor outer(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1) require(false, "outer", u, v);
    const int n = u.dim(0), m = v.dim(0);
    std::vector<double> out(static_cast<size_t>(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<size_t>(i) * m + j] = u.at(i) * v.at(j);
    return make_op(Op::kOuter, {n, m}, std::move(out), {u, v});
}

Tensor relu(const Tensor& a) {
    return unary_map(Op::kRelu, a, +[](double x) { return x > 0 ? x : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary_map(Op::kExp, a, +[](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
    return unary_map(Op::kLog, a, +[](double x) { return std::log(x); });
}

Tensor sqrt(const Tensor& a) {
    return unary_map(Op::kSqrt, a, +[](double x) { return std::sqrt(x); });
}

Tensor square(const Tensor& a) {
    return unary_map(Op::kSquare, a, +[](double x) { return x * x; });
}

Tensor softplus(const Tensor& a) {
    return unary_map(Op::kSoftplus, a, +[](double x) { return softplus_val(x); });
}

Tensor reciprocal(const Tensor& a) {
    return unary_map(Op::kReciprocal, a, +[](double x) { return 1.0 / x; });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.values()) acc += x;
    return make_op(Op::kSum, {}, {acc}, {a});
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) shape_error("mean", "empty tensor");
    double acc = 0.0;
    for (double x : a.values()) acc += x;
    return make_op(Op::kMean, {}, {acc / static_cast<double>(a.numel())}, {a});
}

Tensor rowsum(const Tensor& m) {
    if (m.rank() != 2) shape_error("rowsum", "need rank-2, got " + shape_str(m.shape()));
    const int n = m.dim(0), d = m.dim(1);
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += m.at(i, j);
        out[static_cast<size_t>(i)] = acc;
    }
    return make_op(Op::kRowsum, {n}, std::move(out), {m});
}

Tensor colsum(const Tensor& m) {
    if (m.rank() != 2) shape_error("colsum", "need rank-2, got " + shape_str(m.shape()));
    const int n = m.dim(0), d = m.dim(1);
    std::vector<double> out(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += m.at(i, j);
    return make_op(Op::kColsum, {d}, std::move(out), {m});
}

namespace {

double lse(const double* x, int n) {
    double m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::exp(x[i] - m);
    return m + std::log(acc);
}

}  // namespace

Tensor logsumexp(const Tensor& a) {
    if (a.numel() == 0) shape_error("logsumexp", "empty tensor");
    return make_op(Op::kLogsumexp, {},
                   {lse(a.values().data(), static_cast<int>(a.numel()))}, {a});
}

Tensor logsumexp_rows(const Tensor& m) {
    if (m.rank() != 2) shape_error("logsumexp_rows", "need rank-2, got " + shape_str(m.shape()));
    const int n = m.dim(0), d = m.dim(1);
    std::vector<double> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        out[static_cast<size_t>(i)] = lse(m.values().data() + static_cast<size_t>(i) * d, d);
    return make_op(Op::kLogsumexpRows, {n}, std::move(out), {m});
}

Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) require(false, "concat", a, b);
    std::vector<double> out;
    out.reserve(a.values().size() + b.values().size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    return make_op(Op::kConcat, {a.dim(0) + b.dim(0)}, std::move(out), {a, b});
}

Tensor slice(const Tensor& a, int start, int len) {
    if (start < 0 || len < 0 || start + len > a.numel())
        shape_error("slice", "range [" + std::to_string(start) + ", " +
                                 std::to_string(start + len) + ") out of " +
                                 shape_str(a.shape()));
    std::vector<double> out(a.values().begin() + start,
                            a.values().begin() + start + len);
    return make_op(Op::kSlice, {len}, std::move(out), {a},
                   {static_cast<double>(start)});
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
    if (cols.empty()) shape_error("stack_cols", "no columns");
    const int n = cols[0].dim(0);
    const int k = static_cast<int>(cols.size());
    for (const auto& c : cols)
        if (c.rank() != 1 || c.dim(0) != n)
            shape_error("stack_cols", "column shape mismatch " + shape_str(c.shape()));
    std::vector<double> out(static_cast<size_t>(n) * k);
    for (int j = 0; j < k; ++j)
        for (int i = 0; i < n; ++i)
            out[static_cast<size_t>(i) * k + j] = cols[static_cast<size_t>(j)].at(i);
    return make_op(Op::kStackCols, {n, k}, std::move(out), cols);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (numel_of(shape) != a.numel())
        shape_error("reshape", shape_str(a.shape()) + " to " + shape_str(shape));
    return make_op(Op::kReshape, shape, a.values(), {a});
}

Tensor row(const Tensor& m, int k) {
    if (m.rank() != 2) shape_error("row", "need rank-2, got " + shape_str(m.shape()));
    const int d = m.dim(1);
    Tensor flat = reshape(m, {m.dim(0) * d});
    return slice(flat, k * d, d);
}

Tensor unit_lower_matvec_t(const Tensor& l_strict, const Tensor& h) {
    if (l_strict.rank() != 2 || l_strict.dim(0) != l_strict.dim(1) ||
        h.rank() != 1 || h.dim(0) != l_strict.dim(0))
        require(false, "unit_lower_matvec_t", l_strict, h);
    const int d = h.dim(0);
    std::vector<double> out(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) {
        double acc = h.at(j);
        for (int k = j + 1; k < d; ++k) acc += l_strict.at(k, j) * h.at(k);
        out[static_cast<size_t>(j)] = acc;
    }
    return make_op(Op::kUnitLowerMatvecT, {d}, std::move(out), {l_strict, h});
}

Tensor unit_lower_matmul(const Tensor& h, const Tensor& l_strict) {
    if (h.rank() != 2 || l_strict.rank() != 2 ||
        l_strict.dim(0) != l_strict.dim(1) || h.dim(1) != l_strict.dim(0))
        require(false, "unit_lower_matmul", h, l_strict);
    const int n = h.dim(0), d = h.dim(1);
    std::vector<double> out(h.values());
    for (int i = 0; i < n; ++i) {
        const double* hrow = h.values().data() + static_cast<size_t>(i) * d;
        double* orow = out.data() + static_cast<size_t>(i) * d;
        for (int k = 1; k < d; ++k) {
            const double hk = hrow[k];
            if (hk == 0.0) continue;
            const double* lrow = l_strict.values().data() + static_cast<size_t>(k) * d;
            for (int j = 0; j < k; ++j) orow[j] += hk * lrow[j];
        }
    }
    return make_op(Op::kUnitLowerMatmul, h.shape(), std::move(out), {h, l_strict});
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void accumulate_parents(Node& n) {
    auto pgrad = [](const std::shared_ptr<Node>& p) -> double* {
        p->ensure_grad();
        return p->grad.data();
    };
    auto wants = [](const std::shared_ptr<Node>& p) { return p->requires_grad; };
    const std::vector<double>& g = n.grad;

    switch (n.op) {
        case Op::kLeaf:
            break;
        case Op::kMatmul: {
            const auto& a = *n.parents[0];
            const auto& b = *n.parents[1];
            const int rows = a.shape[0], inner = a.shape[1], cols = b.shape[1];
            if (wants(n.parents[0])) {
                double* da = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) {
                        const double gij = g[static_cast<size_t>(i) * cols + j];
                        if (gij == 0.0) continue;
                        for (int kk = 0; kk < inner; ++kk)
                            da[i * inner + kk] += gij * b.value[static_cast<size_t>(kk) * cols + j];
                    }
            }
            if (wants(n.parents[1])) {
                double* db = pgrad(n.parents[1]);
                for (int i = 0; i < rows; ++i)
                    for (int kk = 0; kk < inner; ++kk) {
                        const double aik = a.value[static_cast<size_t>(i) * inner + kk];
                        if (aik == 0.0) continue;
                        for (int j = 0; j < cols; ++j)
                            db[kk * cols + j] += aik * g[static_cast<size_t>(i) * cols + j];
                    }
            }
            break;
        }
        case Op::kMatvec: {
            const auto& a = *n.parents[0];
            const auto& x = *n.parents[1];
            const int rows = a.shape[0], inner = a.shape[1];
            if (wants(n.parents[0])) {
                double* da = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < inner; ++j)
                        da[i * inner + j] += g[static_cast<size_t>(i)] * x.value[static_cast<size_t>(j)];
            }
            if (wants(n.parents[1])) {
                double* dx = pgrad(n.parents[1]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < inner; ++j)
                        dx[j] += a.value[static_cast<size_t>(i) * inner + j] * g[static_cast<size_t>(i)];
            }
            break;
        }
        case Op::kTranspose: {
            if (wants(n.parents[0])) {
                const int rows = n.shape[0], cols = n.shape[1];
                double* da = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        da[j * rows + i] += g[static_cast<size_t>(i) * cols + j];
            }
            break;
        }
        case Op::kAdd:
            for (int p = 0; p < 2; ++p)
                if (wants(n.parents[p])) {
                    double* d = pgrad(n.parents[p]);
                    for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                }
            break;
        case Op::kAddRowvec: {
            const int rows = n.shape[0], cols = n.shape[1];
            if (wants(n.parents[0])) {
                double* dm = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) dm[i] += g[i];
            }
            if (wants(n.parents[1])) {
                double* dv = pgrad(n.parents[1]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        dv[j] += g[static_cast<size_t>(i) * cols + j];
            }
            break;
        }
        case Op::kAddScalar:
        case Op::kReshape:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            break;
        case Op::kSub: {
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            if (wants(n.parents[1])) {
                double* d = pgrad(n.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
            }
            break;
        }
        case Op::kMul: {
            const auto& a = *n.parents[0];
            const auto& b = *n.parents[1];
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b.value[i];
            }
            if (wants(n.parents[1])) {
                double* d = pgrad(n.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a.value[i];
            }
            break;
        }
        case Op::kMulScalar:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                const double c = n.aux[0];
                for (size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
            }
            break;
        case Op::kScale: {
            const auto& a = *n.parents[0];
            const double c = n.parents[1]->value[0];
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
            }
            if (wants(n.parents[1])) {
                double acc = 0.0;
                for (size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value[i];
                pgrad(n.parents[1])[0] += acc;
            }
            break;
        }
        case Op::kOuter: {
            const auto& u = *n.parents[0];
            const auto& v = *n.parents[1];
            const int rows = n.shape[0], cols = n.shape[1];
            if (wants(n.parents[0])) {
                double* du = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        du[i] += g[static_cast<size_t>(i) * cols + j] * v.value[static_cast<size_t>(j)];
            }
            if (wants(n.parents[1])) {
                double* dv = pgrad(n.parents[1]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        dv[j] += g[static_cast<size_t>(i) * cols + j] * u.value[static_cast<size_t>(i)];
            }
            break;
        }
        case Op::kRelu: {
            if (wants(n.parents[0])) {
                const auto& x = n.parents[0]->value;
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i)
                    if (x[i] > 0) d[i] += g[i];
            }
            break;
        }
        case Op::kExp:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.value[i];
            }
            break;
        case Op::kLog:
            if (wants(n.parents[0])) {
                const auto& x = n.parents[0]->value;
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] / x[i];
            }
            break;
        case Op::kSqrt:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * 0.5 / n.value[i];
            }
            break;
        case Op::kSquare:
            if (wants(n.parents[0])) {
                const auto& x = n.parents[0]->value;
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * 2.0 * x[i];
            }
            break;
        case Op::kSoftplus:
            if (wants(n.parents[0])) {
                const auto& x = n.parents[0]->value;
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * sigmoid(x[i]);
            }
            break;
        case Op::kReciprocal:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i)
                    d[i] -= g[i] * n.value[i] * n.value[i];
            }
            break;
        case Op::kSum:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                const double g0 = g[0];
                for (size_t i = 0; i < n.parents[0]->value.size(); ++i) d[i] += g0;
            }
            break;
        case Op::kMean:
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                const double g0 = g[0] / static_cast<double>(n.parents[0]->value.size());
                for (size_t i = 0; i < n.parents[0]->value.size(); ++i) d[i] += g0;
            }
            break;
        case Op::kRowsum: {
            if (wants(n.parents[0])) {
                const int rows = n.parents[0]->shape[0], cols = n.parents[0]->shape[1];
                double* d = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        d[i * cols + j] += g[static_cast<size_t>(i)];
            }
            break;
        }
        case Op::kColsum: {
            if (wants(n.parents[0])) {
                const int rows = n.parents[0]->shape[0], cols = n.parents[0]->shape[1];
                double* d = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        d[i * cols + j] += g[static_cast<size_t>(j)];
            }
            break;
        }
        case Op::kLogsumexp:
            if (wants(n.parents[0])) {
                const auto& x = n.parents[0]->value;
                double* d = pgrad(n.parents[0]);
                const double y = n.value[0], g0 = g[0];
                for (size_t i = 0; i < x.size(); ++i)
                    d[i] += g0 * std::exp(x[i] - y);
            }
            break;
        case Op::kLogsumexpRows: {
            if (wants(n.parents[0])) {
                const auto& x = n.parents[0]->value;
                const int rows = n.parents[0]->shape[0], cols = n.parents[0]->shape[1];
                double* d = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i) {
                    const double yi = n.value[static_cast<size_t>(i)];
                    const double gi = g[static_cast<size_t>(i)];
                    if (gi == 0.0) continue;
                    for (int j = 0; j < cols; ++j)
                        d[i * cols + j] += gi * std::exp(x[static_cast<size_t>(i) * cols + j] - yi);
                }
            }
            break;
        }
        case Op::kConcat: {
            const size_t na = n.parents[0]->value.size();
            if (wants(n.parents[0])) {
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < na; ++i) d[i] += g[i];
            }
            if (wants(n.parents[1])) {
                double* d = pgrad(n.parents[1]);
                for (size_t i = 0; i < n.parents[1]->value.size(); ++i)
                    d[i] += g[na + i];
            }
            break;
        }
        case Op::kSlice:
            if (wants(n.parents[0])) {
                const size_t start = static_cast<size_t>(n.aux[0]);
                double* d = pgrad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[start + i] += g[i];
            }
            break;
        case Op::kStackCols: {
            const int rows = n.shape[0], cols = n.shape[1];
            for (int j = 0; j < cols; ++j)
                if (wants(n.parents[static_cast<size_t>(j)])) {
                    double* d = pgrad(n.parents[static_cast<size_t>(j)]);
                    for (int i = 0; i < rows; ++i)
                        d[i] += g[static_cast<size_t>(i) * cols + j];
                }
            break;
        }
        case Op::kUnitLowerMatvecT: {
            const auto& l = *n.parents[0];
            const auto& h = *n.parents[1];
            const int dd = h.shape[0];
            if (wants(n.parents[0])) {
                double* dl = pgrad(n.parents[0]);
                for (int k = 1; k < dd; ++k)
                    for (int j = 0; j < k; ++j)
                        dl[k * dd + j] += h.value[static_cast<size_t>(k)] * g[static_cast<size_t>(j)];
            }
            if (wants(n.parents[1])) {
                double* dh = pgrad(n.parents[1]);
                for (int k = 0; k < dd; ++k) {
                    double acc = g[static_cast<size_t>(k)];
                    for (int j = 0; j < k; ++j)
                        acc += l.value[static_cast<size_t>(k) * dd + j] * g[static_cast<size_t>(j)];
                    dh[k] += acc;
                }
            }
            break;
        }
        case Op::kUnitLowerMatmul: {
            const auto& h = *n.parents[0];
            const auto& l = *n.parents[1];
            const int rows = h.shape[0], dd = h.shape[1];
            if (wants(n.parents[0])) {
                double* dh = pgrad(n.parents[0]);
                for (int i = 0; i < rows; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * dd;
                    double* drow = dh + static_cast<size_t>(i) * dd;
                    for (int k = 0; k < dd; ++k) {
                        double acc = grow[k];
                        const double* lrow = l.value.data() + static_cast<size_t>(k) * dd;
                        for (int j = 0; j < k; ++j) acc += lrow[j] * grow[j];
                        drow[k] += acc;
                    }
                }
            }
            if (wants(n.parents[1])) {
                double* dl = pgrad(n.parents[1]);
                for (int i = 0; i < rows; ++i) {
                    const double* hrow = h.value.data() + static_cast<size_t>(i) * dd;
                    const double* grow = g.data() + static_cast<size_t>(i) * dd;
                    for (int k = 1; k < dd; ++k) {
                        const double hk = hrow[k];
                        if (hk == 0.0) continue;
                        for (int j = 0; j < k; ++j) dl[k * dd + j] += hk * grow[j];
                    }
                }
            }
            break;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Rng

namespace {

uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
}

uint64_t hash_pair(uint64_t key, uint64_t counter) {
    return mix64(key + 0x9e3779b97f4a7c15ull * (counter + 1));
}

}  // namespace

Rng::Rng(uint64_t seed) : key_(mix64(seed + 0x9e3779b97f4a7c15ull)), counter_(0) {}

Rng Rng::from_state(uint64_t key, uint64_t counter) { return Rng(key, counter); }

double Rng::uniform() {
    return static_cast<double>(hash_pair(key_, counter_++) >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
}

int Rng::uniform_int(int n) {
    return std::min(n - 1, static_cast<int>(uniform() * n));
}

Rng Rng::split(uint64_t stream) const {
    return Rng(mix64(key_ ^ hash_pair(0xd6e8feb86659fd93ull, stream)), 0);
}

Tensor sample_standard_normal(Rng& rng, const Shape& shape) {
    std::vector<double> out(static_cast<size_t>(numel_of(shape)));
    for (double& x : out) x = rng.normal();
    return Tensor::of(std::move(out), shape);
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double step) {
    if (step <= 0) throw std::invalid_argument("finite_diff_check: step must be > 0");
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = f();
        if (loss.numel() != 1)
            throw std::invalid_argument("finite_diff_check: f must be scalar");
        tape.backward(loss);
    }
    for (const auto& p : params) analytic.push_back(p.grad());

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto& v = p.mutable_values();
        for (size_t i = 0; i < v.size(); ++i) {
            const double orig = v[i];
            v[i] = orig + step;
            const double fp = f().item();
            v[i] = orig - step;
            const double fm = f().item();
            v[i] = orig;
            const double num = (fp - fm) / (2.0 * step);
            const double ana = analytic[pi][i];
            if (!std::isfinite(num) || !std::isfinite(ana))
                throw std::runtime_error("finite_diff_check: non-finite value");
            const double err = std::abs(ana - num) /
                               std::max({std::abs(ana), std::abs(num), 1e-12});
            max_err = std::max(max_err, err);
        }
    }
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
    return max_err;
}

}  // namespace duncert
