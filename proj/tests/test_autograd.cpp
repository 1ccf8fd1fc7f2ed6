// Finite-difference checks for every autograd op. Each op is verified in
// isolation before anything downstream builds on it.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "duet/autograd.hpp"

using namespace duet;
using ag::Var;

namespace {

// Central finite differences of f against the analytic gradient stored on
// `leaf` after backward(). Returns max relative error.
double fd_check(Var& leaf, const std::function<Var()>& f, double step = 1e-6) {
    leaf.zero_grad();
    Var out = f();
    ag::backward(out);
    Tensor analytic = leaf.grad();
    double worst = 0.0;
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
        double saved = leaf.mutable_val()[i];
        leaf.mutable_val()[i] = saved + step;
        double hi = f().val()[0];
        leaf.mutable_val()[i] = saved - step;
        double lo = f().val()[0];
        leaf.mutable_val()[i] = saved;
        double fd = (hi - lo) / (2.0 * step);
        double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

Tensor randt(std::vector<std::int64_t> shape, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("add with trailing broadcast", "[autograd]") {
    Var a = Var::leaf(randt({2, 3, 4}, 1), true);
    Var b = Var::leaf(randt({4}, 2), true);
    auto f = [&] { return ag::mean_all(ag::mul(ag::add(a, b), ag::constant(randt({2, 3, 4}, 3)))); };
    CHECK(fd_check(a, f) < 1e-6);
    CHECK(fd_check(b, f) < 1e-6);
}

TEST_CASE("mul and scale", "[autograd]") {
    Var a = Var::leaf(randt({3, 5}, 4), true);
    Var b = Var::leaf(randt({3, 5}, 5), true);
    auto f = [&] { return ag::sum_all(ag::scale(ag::mul(a, b), 1.7)); };
    CHECK(fd_check(a, f) < 1e-6);
    CHECK(fd_check(b, f) < 1e-6);
}

TEST_CASE("matmul weight and batched", "[autograd]") {
    Var x = Var::leaf(randt({2, 3, 4}, 6), true);
    Var w = Var::leaf(randt({4, 5}, 7), true);
    Tensor probe = randt({2, 3, 5}, 8);
    auto f = [&] { return ag::mean_all(ag::mul(ag::matmul(x, w), ag::constant(probe))); };
    CHECK(fd_check(x, f) < 1e-6);
    CHECK(fd_check(w, f) < 1e-6);

    Var a = Var::leaf(randt({2, 2, 3, 4}, 9), true);
    Var b = Var::leaf(randt({2, 2, 4, 3}, 10), true);
    Tensor probe2 = randt({2, 2, 3, 3}, 11);
    auto g = [&] { return ag::mean_all(ag::mul(ag::matmul(a, b), ag::constant(probe2))); };
    CHECK(fd_check(a, g) < 1e-6);
    CHECK(fd_check(b, g) < 1e-6);
}

TEST_CASE("transpose, reshape, expand", "[autograd]") {
    Var a = Var::leaf(randt({2, 3, 4, 5}, 12), true);
    Tensor probe = randt({2, 4, 3, 5}, 13);
    auto f = [&] { return ag::mean_all(ag::mul(ag::transpose_12(a), ag::constant(probe))); };
    CHECK(fd_check(a, f) < 1e-6);

    Var b = Var::leaf(randt({2, 3, 4}, 14), true);
    Tensor probe2 = randt({2, 4, 3}, 15);
    auto g = [&] { return ag::mean_all(ag::mul(ag::transpose_last2(b), ag::constant(probe2))); };
    CHECK(fd_check(b, g) < 1e-6);

    Var c = Var::leaf(randt({3, 4}, 16), true);
    Tensor probe3 = randt({5, 3, 4}, 17);
    auto h = [&] { return ag::mean_all(ag::mul(ag::expand_batch(c, 5), ag::constant(probe3))); };
    CHECK(fd_check(c, h) < 1e-6);

    Var d = Var::leaf(randt({6, 4}, 18), true);
    Tensor probe4 = randt({2, 3, 4}, 19);
    auto k = [&] { return ag::mean_all(ag::mul(ag::reshape(d, {2, 3, 4}), ag::constant(probe4))); };
    CHECK(fd_check(d, k) < 1e-6);
}

TEST_CASE("concat and slice", "[autograd]") {
    Var a = Var::leaf(randt({2, 2, 3}, 20), true);
    Var b = Var::leaf(randt({2, 4, 3}, 21), true);
    Tensor probe = randt({2, 6, 3}, 22);
    auto f = [&] { return ag::mean_all(ag::mul(ag::concat({a, b}, 1), ag::constant(probe))); };
    CHECK(fd_check(a, f) < 1e-6);
    CHECK(fd_check(b, f) < 1e-6);

    Tensor probe2 = randt({2, 2, 3}, 23);
    auto g = [&] { return ag::mean_all(ag::mul(ag::slice(b, 1, 1, 2), ag::constant(probe2))); };
    CHECK(fd_check(b, g) < 1e-6);
}

TEST_CASE("softmax with hard mask", "[autograd]") {
    Var a = Var::leaf(randt({2, 3, 4}, 24), true);
    Tensor mask = Tensor::full({2, 3, 4}, 1.0);
    mask.at(0, 1, 2) = 0.0;
    mask.at(1, 0, 0) = 0.0;
    Tensor probe = randt({2, 3, 4}, 25);
    auto f = [&] { return ag::mean_all(ag::mul(ag::softmax_lastdim(a, &mask), ag::constant(probe))); };
    CHECK(fd_check(a, f) < 1e-6);

    // masked entries are exactly zero
    Var y = ag::softmax_lastdim(a, &mask);
    CHECK(y.val().at(0, 1, 2) == 0.0);
    CHECK(y.val().at(1, 0, 0) == 0.0);
    // rows sum to 1
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 3; ++j) {
            double s = 0.0;
            for (std::int64_t k = 0; k < 4; ++k) s += y.val().at(i, j, k);
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
}

TEST_CASE("log_softmax, exp, log_floor", "[autograd]") {
    Var a = Var::leaf(randt({3, 4}, 26), true);
    Tensor probe = randt({3, 4}, 27);
    auto f = [&] { return ag::mean_all(ag::mul(ag::log_softmax_lastdim(a), ag::constant(probe))); };
    CHECK(fd_check(a, f) < 1e-6);

    auto g = [&] { return ag::mean_all(ag::exp(ag::scale(a, 0.3))); };
    CHECK(fd_check(a, g) < 1e-6);

    Var p = Var::leaf(randt({3, 4}, 28, 0.1), true);
    for (auto& v : p.mutable_val().data) v = std::abs(v) + 0.05;
    auto h = [&] { return ag::mean_all(ag::log_floor(p, 1e-8)); };
    CHECK(fd_check(p, h) < 1e-6);
}

TEST_CASE("layer_norm", "[autograd]") {
    Var x = Var::leaf(randt({2, 3, 6}, 29), true);
    Var gamma = Var::leaf(randt({6}, 30, 0.5), true);
    Var beta = Var::leaf(randt({6}, 31, 0.5), true);
    Tensor probe = randt({2, 3, 6}, 32);
    auto f = [&] { return ag::mean_all(ag::mul(ag::layer_norm(x, gamma, beta), ag::constant(probe))); };
    CHECK(fd_check(x, f, 1e-5) < 1e-5);
    CHECK(fd_check(gamma, f) < 1e-6);
    CHECK(fd_check(beta, f) < 1e-6);
}

TEST_CASE("gelu", "[autograd]") {
    Var x = Var::leaf(randt({4, 5}, 33), true);
    auto f = [&] { return ag::mean_all(ag::gelu(x)); };
    CHECK(fd_check(x, f) < 1e-6);
}

TEST_CASE("l2_normalize", "[autograd]") {
    Var x = Var::leaf(randt({3, 8}, 34), true);
    Tensor probe = randt({3, 8}, 35);
    auto f = [&] { return ag::mean_all(ag::mul(ag::l2_normalize(x), ag::constant(probe))); };
    CHECK(fd_check(x, f) < 1e-6);

    Var y = ag::l2_normalize(x);
    for (std::int64_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::int64_t i = 0; i < 8; ++i) s += y.val().at(r, i) * y.val().at(r, i);
        CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
    }
}

TEST_CASE("embedding and gathers", "[autograd]") {
    Var w = Var::leaf(randt({7, 4}, 36), true);
    std::vector<std::vector<std::int64_t>> ids{{0, 3, 3}, {6, 1, 0}};
    Tensor probe = randt({2, 3, 4}, 37);
    auto f = [&] { return ag::mean_all(ag::mul(ag::embedding(w, ids), ag::constant(probe))); };
    CHECK(fd_check(w, f) < 1e-6);

    Var x = Var::leaf(randt({2, 5, 3}, 38), true);
    std::vector<std::int64_t> idx{4, 0};
    Tensor probe2 = randt({2, 3}, 39);
    auto g = [&] { return ag::mean_all(ag::mul(ag::gather_dim1(x, idx), ag::constant(probe2))); };
    CHECK(fd_check(x, g) < 1e-6);

    Var m = Var::leaf(randt({4, 4}, 40), true);
    Tensor probe3 = randt({4}, 41);
    auto h = [&] { return ag::mean_all(ag::mul(ag::diag(m), ag::constant(probe3))); };
    CHECK(fd_check(m, h) < 1e-6);
}

TEST_CASE("reductions", "[autograd]") {
    Var x = Var::leaf(randt({2, 3, 4}, 42), true);
    Tensor probe = randt({2, 3}, 43);
    auto f = [&] { return ag::mean_all(ag::mul(ag::sum_lastdim(x), ag::constant(probe))); };
    CHECK(fd_check(x, f) < 1e-6);
    auto g = [&] { return ag::sum_all(ag::mul(x, x)); };
    CHECK(fd_check(x, g, 1e-5) < 1e-6);
}

TEST_CASE("graph reuse accumulates into shared nodes once per backward", "[autograd]") {
    // y = sum(x*x) + sum(x): x used twice; grad = 2x + 1
    Var x = Var::leaf(randt({5}, 44), true);
    Var y = ag::add(ag::sum_all(ag::mul(x, x)), ag::sum_all(x));
    ag::backward(y);
    for (std::int64_t i = 0; i < 5; ++i)
        CHECK(std::abs(x.grad()[i] - (2.0 * x.val()[i] + 1.0)) < 1e-12);
}

TEST_CASE("sub composition", "[autograd]") {
    Var a = Var::leaf(randt({3, 3}, 45), true);
    Var b = Var::leaf(randt({3, 3}, 46), true);
    auto f = [&] { return ag::mean_all(ag::mul(ag::sub(a, b), ag::sub(a, b))); };
    CHECK(fd_check(a, f) < 1e-6);
    CHECK(fd_check(b, f) < 1e-6);
}
