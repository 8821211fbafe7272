#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "duncert/tensor.hpp"

using namespace duncert;

namespace {

// Uniform magnitudes in [0.2, 1.2] with random sign: keeps gradient checks
// away from the kinks/singularities of relu, log, sqrt, reciprocal.
Tensor rand_signed(Rng& rng, const Shape& shape) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.2);
    return Tensor::of(std::move(v), shape);
}

Tensor rand_positive(Rng& rng, const Shape& shape) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) x = rng.uniform(0.2, 1.5);
    return Tensor::of(std::move(v), shape);
}

}  // namespace

TEST_CASE("primitive forward examples") {
    Tensor eye = Tensor::of({1, 0, 0, 1}, {2, 2});
    Tensor x = Tensor::vec({3, 4});
    Tensor y = matvec(eye, x);
    CHECK(y.at(0) == 3.0);
    CHECK(y.at(1) == 4.0);

    CHECK(logsumexp(Tensor::vec({0, 0})).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor r = relu(Tensor::vec({-1, 2}));
    CHECK(r.at(0) == 0.0);
    CHECK(r.at(1) == 2.0);

    CHECK_THROWS_AS(matvec(eye, Tensor::vec({1, 2, 3})), std::invalid_argument);
    CHECK_THROWS_AS(add(Tensor::vec({1}), Tensor::vec({1, 2})), std::invalid_argument);
}

TEST_CASE("matvec matches a naive triple-loop oracle bit-for-bit on integers") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 1 + rng.uniform_int(6), k = 1 + rng.uniform_int(6);
        std::vector<double> a(static_cast<size_t>(n) * k), x(static_cast<size_t>(k));
        for (double& v : a) v = static_cast<double>(rng.uniform_int(21) - 10);
        for (double& v : x) v = static_cast<double>(rng.uniform_int(21) - 10);
        Tensor A = Tensor::of(a, {n, k});
        Tensor X = Tensor::vec(x);
        Tensor y = matvec(A, X);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += a[static_cast<size_t>(i) * k + j] * x[static_cast<size_t>(j)];
            CHECK(y.at(i) == acc);
        }
    }
}

TEST_CASE("unit lower-triangular matvec") {
    // L_strict = 0: identity.
    Tensor l0 = Tensor::zeros({2, 2});
    Tensor h = Tensor::vec({3, 4});
    Tensor u = unit_lower_matvec_t(l0, h);
    CHECK(u.at(0) == 3.0);
    CHECK(u.at(1) == 4.0);

    // D=2, L21=1, h=[1,1]: L^T h = [2, 1].
    Tensor l2 = Tensor::of({0, 0, 1, 0}, {2, 2});
    Tensor u2 = unit_lower_matvec_t(l2, Tensor::vec({1, 1}));
    CHECK(u2.at(0) == 2.0);
    CHECK(u2.at(1) == 1.0);

    // D=3 all strictly-lower ones. Hand multiplication of (I+L)^T h:
    // u_j = h_j + sum_{k>j} L_kj h_k, so h=[1,0,0] -> [1,0,0] and
    // h=[0,0,1] -> [1,1,1].
    Tensor l3 = Tensor::of({0, 0, 0, 1, 0, 0, 1, 1, 0}, {3, 3});
    Tensor ua = unit_lower_matvec_t(l3, Tensor::vec({1, 0, 0}));
    CHECK(ua.at(0) == 1.0);
    CHECK(ua.at(1) == 0.0);
    CHECK(ua.at(2) == 0.0);
    Tensor ub = unit_lower_matvec_t(l3, Tensor::vec({0, 0, 1}));
    CHECK(ub.at(0) == 1.0);
    CHECK(ub.at(1) == 1.0);
    CHECK(ub.at(2) == 1.0);
}

TEST_CASE("unit lower-triangular matvec equals dense materialized (I+L)^T") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + rng.uniform_int(8);
        Tensor L = rand_signed(rng, {d, d});
        Tensor h = rand_signed(rng, {d});
        // Materialize (I + strict_lower(L))^T explicitly.
        std::vector<double> lt(static_cast<size_t>(d) * d, 0.0);
        for (int i = 0; i < d; ++i) {
            lt[static_cast<size_t>(i) * d + i] = 1.0;
            for (int k = i + 1; k < d; ++k)
                lt[static_cast<size_t>(i) * d + k] = L.at(k, i);
        }
        Tensor dense = matvec(Tensor::of(lt, {d, d}), h);
        Tensor fast = unit_lower_matvec_t(L, h);
        for (int i = 0; i < d; ++i)
            CHECK(fast.at(i) == doctest::Approx(dense.at(i)).epsilon(1e-12));
        // Batched right-multiplication agrees row-wise.
        Tensor H = rand_signed(rng, {3, d});
        Tensor U = unit_lower_matmul(H, L);
        for (int r = 0; r < 3; ++r) {
            Tensor ur = unit_lower_matvec_t(L, row(H, r));
            for (int i = 0; i < d; ++i)
                CHECK(U.at(r, i) == doctest::Approx(ur.at(i)).epsilon(1e-12));
        }
    }
}

TEST_CASE("backward examples") {
    Tensor x = Tensor::param(Tensor::vec({1, 2}));
    {
        Tape tape;
        Tensor loss = sum(square(x));
        tape.backward(loss);
    }
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    x.zero_grad();

    Tensor x2 = Tensor::param(Tensor::vec({-1, 3}));
    {
        Tape tape;
        tape.backward(sum(relu(x2)));
    }
    CHECK(x2.grad()[0] == 0.0);
    CHECK(x2.grad()[1] == 1.0);

    Tensor x3 = Tensor::param(Tensor::vec({0, 0}));
    {
        Tape tape;
        tape.backward(logsumexp(x3));
    }
    CHECK(x3.grad()[0] == doctest::Approx(0.5));
    CHECK(x3.grad()[1] == doctest::Approx(0.5));

    // Non-scalar loss violates the contract.
    Tensor x4 = Tensor::param(Tensor::vec({1, 2}));
    Tape tape;
    Tensor v = square(x4);
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);
}

TEST_CASE("gradients accumulate across uses and backward calls") {
    Tensor x = Tensor::param(Tensor::vec({1.5}));
    {
        Tape tape;
        Tensor loss = sum(mul(x, x) + x);  // d/dx = 2x + 1 = 4
        tape.backward(loss);
    }
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    {
        Tape tape;
        tape.backward(sum(x));
    }
    CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("no recording without an active tape") {
    Tensor x = Tensor::param(Tensor::vec({1, 2}));
    Tensor y = square(x);
    CHECK_FALSE(y.requires_grad());
    Tensor d = x.detach();
    CHECK_FALSE(d.requires_grad());
    {
        Tape tape;
        Tensor z = sum(square(d) + square(x));
        CHECK(z.requires_grad());
        tape.backward(z);
    }
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("finite differences: quadratic is exact up to roundoff") {
    Tensor theta = Tensor::param(Tensor::vec({1, 2}));
    double err = finite_diff_check([&] { return sum(square(theta)); }, {theta}, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("every primitive passes the finite-difference audit at random points") {
    const double tol = 1e-6, h = 1e-5;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        Tensor a = Tensor::param(rand_signed(rng, {3, 4}));
        Tensor b = Tensor::param(rand_signed(rng, {4, 2}));
        Tensor v4 = Tensor::param(rand_signed(rng, {4}));
        Tensor v3 = Tensor::param(rand_signed(rng, {3}));
        Tensor pos = Tensor::param(rand_positive(rng, {3, 4}));
        Tensor s = Tensor::param(Tensor::scalar(rng.uniform(0.5, 1.5)));
        Tensor lsq = Tensor::param(rand_signed(rng, {4, 4}));

        CHECK(finite_diff_check([&] { return sum(matmul(a, b)); }, {a, b}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(matvec(a, v4)); }, {a, v4}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(transpose(a))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(a + pos)); }, {a, pos}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(add_rowvec(a, v4))); }, {a, v4}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(add_scalar(a, 0.7))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(a - pos)); }, {a, pos}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(a * pos); }, {a, pos}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(2.5 * a)); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(scale(a, s))); }, {a, s}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(outer(v3, v4))); }, {v3, v4}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(relu(a)); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(exp(a)); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(log(pos)); }, {pos}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(sqrt(pos)); }, {pos}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(a)); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(softplus(a)); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(reciprocal(pos)); }, {pos}, h) < tol);
        CHECK(finite_diff_check([&] { return mean(square(a)); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(rowsum(a))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(colsum(a))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return logsumexp(a); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(logsumexp_rows(a))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(concat(v3, v4))); }, {v3, v4}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(slice(v4, 1, 2))); }, {v4}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(stack_cols({v3, v3 * 2.0}))); }, {v3}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(reshape(a, {4, 3}))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(row(a, 1))); }, {a}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(unit_lower_matvec_t(lsq, v4))); },
                                {lsq, v4}, h) < tol);
        CHECK(finite_diff_check([&] { return sum(square(unit_lower_matmul(a, lsq))); },
                                {a, lsq}, h) < tol);
    }
}

TEST_CASE("rng determinism and moments") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());

    Rng r(2024);
    Tensor z1 = sample_standard_normal(r, {1000000});
    Rng r2(2024);
    Tensor z2 = sample_standard_normal(r2, {1000000});
    CHECK(z1.values() == z2.values());

    double m = 0.0;
    for (double x : z1.values()) m += x;
    m /= static_cast<double>(z1.numel());
    CHECK(std::abs(m) < 0.005);
    double var = 0.0;
    for (double x : z1.values()) var += (x - m) * (x - m);
    var /= static_cast<double>(z1.numel());
    CHECK(std::abs(var - 1.0) < 0.01);
}

TEST_CASE("rng split streams differ and uniforms stay in range") {
    Rng base(9);
    Rng s0 = base.split(0), s1 = base.split(1);
    bool any_diff = false;
    for (int i = 0; i < 16; ++i) any_diff = any_diff || (s0.uniform() != s1.uniform());
    CHECK(any_diff);
    Rng u(5);
    for (int i = 0; i < 1000; ++i) {
        double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}
