#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "s0lab/tensor.hpp"

using namespace s0lab;

namespace {

Tensor random_tensor(Prng& rng, Shape shape, double scale = 1.0) {
    return Tensor::from(shape, rng.normal_vec(numel(shape), 0.0, scale));
}

// Naive triple-loop product, independent of the matmul implementation.
std::vector<double> matmul_oracle(std::span<const double> a, std::span<const double> b, int m,
                                  int k, int n) {
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
            }
            out[static_cast<std::size_t>(i) * n + j] = acc;
        }
    }
    return out;
}

// Extended-precision softmax cross-entropy.
long double ce_oracle(std::span<const double> logits, int target) {
    long double mx = logits[0];
    for (double v : logits) {
        mx = std::max(mx, static_cast<long double>(v));
    }
    long double z = 0.0L;
    for (double v : logits) {
        z += std::exp(static_cast<long double>(v) - mx);
    }
    return mx + std::log(z) - static_cast<long double>(logits[static_cast<std::size_t>(target)]);
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central finite differences (h = 1e-4) per coordinate against tape gradients.
void check_gradients(const ScalarFn& fn, const std::vector<Shape>& shapes, Prng& rng,
                     double tol = 1e-5) {
    GradTape tape;
    std::vector<Tensor> leaves;
    for (const auto& s : shapes) {
        leaves.push_back(tape.leaf(s, rng.normal_vec(numel(s), 0.0, 0.7)));
    }
    auto loss = fn(leaves);
    auto grads = tape.backward(loss);

    const double h = 1e-4;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        auto g = grads.grad(leaf).data();
        std::vector<double> base(leaf.data().begin(), leaf.data().end());
        for (std::int64_t i = 0; i < leaf.size(); ++i) {
            auto bumped = base;
            bumped[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] + h;
            leaf.set_data(bumped);
            const double up = fn(leaves).item();
            bumped[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] - h;
            leaf.set_data(bumped);
            const double down = fn(leaves).item();
            leaf.set_data(base);
            const double fd = (up - down) / (2.0 * h);
            const double ad = g[static_cast<std::size_t>(i)];
            const double rel = std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-6});
            CAPTURE(li);
            CAPTURE(i);
            CHECK(rel < tol);
        }
    }
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
    auto i2 = Tensor::eye(2);
    auto b = Tensor::from({2, 2}, {2, 3, 4, 5});
    CHECK(bitwise_equal(matmul(i2, b), b));

    auto r = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
    CHECK(r.item() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Prng rng(101);
    auto a = random_tensor(rng, {4, 5});
    auto b = random_tensor(rng, {5, 3});
    auto got = matmul(a, b);
    auto want = matmul_oracle(a.data(), b.data(), 4, 5, 3);
    for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(std::fabs(got.data()[i] - want[i]) < 1e-12);
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("outer products") {
    auto r = outer(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1}));
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 1.0);
    CHECK(r.data()[2] == 0.0);
    CHECK(r.data()[3] == 0.0);

    CHECK(outer(Tensor::from({1}, {2}), Tensor::from({1}, {3})).item() == 6.0);

    Prng rng(7);
    auto u = random_tensor(rng, {3});
    auto v = random_tensor(rng, {4});
    auto o = outer(u, v);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 4; ++j) {
            CHECK(o.data()[static_cast<std::size_t>(i) * 4 + j] == u.data()[i] * v.data()[j]);
        }
    }

    CHECK_THROWS_AS(outer(Tensor::zeros({2, 2}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("cross entropy hand values and stability") {
    auto uniform = log_softmax_cross_entropy(Tensor::from({2}, {0, 0}), 0);
    CHECK(uniform.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto peaked = log_softmax_cross_entropy(Tensor::from({2}, {1000, 0}), 0);
    CHECK(std::isfinite(peaked.item()));
    CHECK(peaked.item() >= 0.0);
    CHECK(peaked.item() < 1e-300);
}

TEST_CASE("cross entropy matches extended-precision oracle") {
    Prng rng(55);
    for (int rep = 0; rep < 50; ++rep) {
        auto logits = random_tensor(rng, {7}, 3.0);
        const int target = rng.uniform_int(7);
        const double got = log_softmax_cross_entropy(logits, target).item();
        const double want = static_cast<double>(ce_oracle(logits.data(), target));
        CHECK(std::fabs(got - want) < 1e-10);
    }
}

TEST_CASE("cross entropy contract errors") {
    CHECK_THROWS_AS(log_softmax_cross_entropy(Tensor::from({3}, {0, 0, 0}), 3), IndexError);
    CHECK_THROWS_AS(log_softmax_cross_entropy(Tensor::from({3}, {0, 0, 0}), -1), IndexError);
    CHECK_THROWS_AS(log_softmax_cross_entropy(Tensor::from({1}, {0.0}), 0), ContractError);
}

TEST_CASE("cross entropy nonnegative, zero only in the one-hot limit") {
    Prng rng(99);
    for (int rep = 0; rep < 200; ++rep) {
        auto logits = random_tensor(rng, {5}, 4.0);
        const int target = rng.uniform_int(5);
        CHECK(log_softmax_cross_entropy(logits, target).item() >= 0.0);
    }
    // Pushing the target logit toward +inf drives the loss to 0 from above.
    auto near_onehot = log_softmax_cross_entropy(Tensor::from({3}, {30.0, 0.0, 0.0}), 0);
    CHECK(near_onehot.item() > 0.0);
    CHECK(near_onehot.item() < 1e-12);
}

TEST_CASE("adam zero gradient leaves the parameter unchanged") {
    auto p = Tensor::from({3}, {1.0, -2.0, 0.5});
    auto g = Tensor::zeros({3});
    auto m = Tensor::zeros({3});
    auto v = Tensor::zeros({3});
    for (int t = 1; t <= 3; ++t) {
        auto r = adam_step(p, g, m, v, t, AdamHyper{});
        CHECK(bitwise_equal(r.param, p));
        p = r.param;
        m = r.moment1;
        v = r.moment2;
    }
    // Nonzero moments decay toward zero under a zero gradient.
    auto r = adam_step(p, g, Tensor::from({3}, {0.1, 0.1, 0.1}),
                       Tensor::from({3}, {0.2, 0.2, 0.2}), 4, AdamHyper{});
    for (int i = 0; i < 3; ++i) {
        CHECK(std::fabs(r.moment1.data()[i]) < 0.1);
        CHECK(std::fabs(r.moment2.data()[i]) < 0.2);
    }
}

TEST_CASE("adam first step is bounded by the learning rate") {
    AdamHyper hp;
    hp.lr = 0.05;
    auto r = adam_step(Tensor::from({2}, {1.0, 1.0}), Tensor::from({2}, {3.7, -0.01}),
                       Tensor::zeros({2}), Tensor::zeros({2}), 1, hp);
    for (int i = 0; i < 2; ++i) {
        CHECK(std::fabs(r.param.data()[i] - 1.0) <= hp.lr * (1.0 + 1e-6));
    }
    CHECK(r.param.data()[0] < 1.0);  // positive gradient decreases the parameter
}

TEST_CASE("adam 5-step trace matches a hand-rolled scalar oracle") {
    // Quadratic f(x) = 0.5*(x-2)^2, gradient x-2.
    const AdamHyper hp{0.1, 0.9, 0.999, 1e-8};
    long double x = 5.0L, m = 0.0L, v = 0.0L;
    auto p = Tensor::scalar(5.0);
    auto mt = Tensor::scalar(0.0);
    auto vt = Tensor::scalar(0.0);
    for (int t = 1; t <= 5; ++t) {
        const long double g = x - 2.0L;
        m = 0.9L * m + 0.1L * g;
        v = 0.999L * v + 0.001L * g * g;
        const long double mhat = m / (1.0L - std::pow(0.9L, t));
        const long double vhat = v / (1.0L - std::pow(0.999L, t));
        x = x - 0.1L * mhat / (std::sqrt(vhat) + 1e-8L);

        auto grad = Tensor::scalar(p.item() - 2.0);
        auto r = adam_step(p, grad, mt, vt, t, hp);
        p = r.param;
        mt = r.moment1;
        vt = r.moment2;
        CHECK(std::fabs(p.item() - static_cast<double>(x)) < 1e-12);
    }
}

TEST_CASE("backward of sum is all ones; backward of squared norm is 2x") {
    GradTape tape;
    auto s0 = tape.leaf({2, 3}, {1, -1, 2, 0.5, 3, -2});
    auto grads = tape.backward(sum(s0));
    for (double v : grads.grad(s0).data()) {
        CHECK(v == 1.0);
    }

    GradTape tape2;
    auto s1 = tape2.leaf({4}, {1, -1, 2, 0.5});
    auto grads2 = tape2.backward(sum_squares(s1));
    for (int i = 0; i < 4; ++i) {
        CHECK(grads2.grad(s1).data()[i] == doctest::Approx(2.0 * s1.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("unused leaves receive zero gradients") {
    GradTape tape;
    auto used = tape.leaf({2}, {1, 2});
    auto unused = tape.leaf({3}, {1, 2, 3});
    auto grads = tape.backward(sum(used));
    CHECK(grads.has(unused));
    for (double v : grads.grad(unused).data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("backward rejects non-scalar loss") {
    GradTape tape;
    auto x = tape.leaf({2}, {1, 2});
    CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ContractError);
}

TEST_CASE("frozen constants receive no gradient storage") {
    GradTape tape;
    auto leaf = tape.leaf({2}, {1.0, 2.0});
    auto frozen = Tensor::from({2}, {3.0, 4.0});
    auto loss = sum(mul(leaf, frozen));
    auto grads = tape.backward(loss);
    CHECK(grads.grad(leaf).data()[0] == 3.0);
    CHECK_THROWS_AS(grads.grad(frozen), ContractError);
    // Constant-only subgraphs record no parents at all.
    auto c = mul(frozen, frozen);
    CHECK_FALSE(c.requires_grad());
    CHECK(c.node()->parents.empty());
}

TEST_CASE("finite differences validate every differentiable op") {
    Prng rng(2024);

    check_gradients([](const std::vector<Tensor>& l) { return sum(add(l[0], l[1])); },
                    {{2, 3}, {2, 3}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(sub(l[0], l[1])); },
                    {{2, 3}, {2, 3}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum(mul(l[0], l[1])); },
                    {{4}, {4}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(matmul(l[0], l[1])); },
                    {{3, 4}, {4, 2}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(matvec(l[0], l[1])); },
                    {{3, 4}, {4}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(outer(l[0], l[1])); },
                    {{3}, {4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return sum_squares(transpose(matmul(l[0], l[0]))); },
        {{3, 3}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(sigmoid(l[0])); },
                    {{2, 4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return sum_squares(rms_norm_rows(l[0], l[1])); },
        {{3, 5}, {5}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(unit_rows(l[0])); },
                    {{3, 4}}, rng);
    check_gradients([](const std::vector<Tensor>& l) { return sum_squares(softmax_rows(l[0])); },
                    {{3, 4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return sum_squares(causal_softmax_rows(l[0])); },
        {{4, 4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return log_softmax_cross_entropy(l[0], 2); }, {{5}},
        rng);
    check_gradients(
        [](const std::vector<Tensor>& l) {
            return sum_squares(scale_by(l[0], elem(l[1], 1)));
        },
        {{3, 2}, {3}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) {
            std::vector<int> ids{1, 0, 1};
            return sum_squares(embedding_rows(l[0], ids));
        },
        {{3, 4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) {
            return sum_squares(concat_cols({slice_cols(l[0], 0, 2), slice_cols(l[0], 2, 3)}));
        },
        {{2, 3}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) {
            return sum_squares(stack_rows({row(l[0], 0), row(l[0], 1), row(l[0], 0)}));
        },
        {{2, 3}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return sum_squares(slice_cols(l[0], 1, 3)); },
        {{2, 4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return sum_squares(add_row_broadcast(l[0], l[1])); },
        {{3, 4}, {4}}, rng);
    check_gradients(
        [](const std::vector<Tensor>& l) { return sum_squares(reshape(l[0], {6})); }, {{2, 3}},
        rng);
}

TEST_CASE("ops on finite inputs stay finite") {
    Prng rng(31337);
    for (int rep = 0; rep < 20; ++rep) {
        auto a = random_tensor(rng, {4, 4}, 10.0);
        auto b = random_tensor(rng, {4, 4}, 10.0);
        CHECK(all_finite(matmul(a, b)));
        CHECK(all_finite(softmax_rows(a)));
        CHECK(all_finite(causal_softmax_rows(a)));
        CHECK(all_finite(rms_norm_rows(a, Tensor::full({4}, 1.0))));
        CHECK(all_finite(unit_rows(a)));
        CHECK(all_finite(sigmoid(scale(a, 100.0))));
    }
    // The zero row is guarded by eps rather than producing NaN.
    CHECK(all_finite(unit_rows(Tensor::zeros({2, 3}))));
}

TEST_CASE("prng determinism and distribution sanity") {
    Prng a(42), b(42), c(43);
    bool all_same = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next_u64();
        all_same = all_same && (va == b.next_u64());
        any_diff = any_diff || (va != c.next_u64());
    }
    CHECK(all_same);
    CHECK(any_diff);

    Prng r(7);
    double mean = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        mean += r.normal();
    }
    mean /= n;
    CHECK(std::fabs(mean) < 0.03);

    // Split streams are independent of draws on the parent.
    Prng p1(9);
    auto s1 = p1.split(3);
    p1.next_u64();
    auto s2 = Prng(9).split(3);
    CHECK(s1.next_u64() == s2.next_u64());
}

TEST_CASE("identical seed and op sequence give bitwise-identical tensors") {
    auto run = [] {
        Prng rng(12345);
        auto a = random_tensor(rng, {5, 5});
        auto b = random_tensor(rng, {5, 5});
        auto c = matmul(rms_norm_rows(a, Tensor::full({5}, 1.0)), softmax_rows(b));
        return add(c, scale(transpose(c), -0.5));
    };
    CHECK(bitwise_equal(run(), run()));
}
