#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "retrolens/rng.hpp"
#include "retrolens/tensor.hpp"

using namespace retrolens;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = rng.normal();
    return t;
}

void check_close(const std::vector<double>& got, const std::vector<double>& want,
                 double tol = 1e-12) {
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(std::fabs(got[i] - want[i]) <= tol);
}

}  // namespace

// ------------------------------------------------------------------ conv2d

TEST_CASE("conv2d scales ones by a 1x1 kernel of two") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == std::vector<int>{1, 1, 3, 3});
    for (double v : y.data()) CHECK(v == 2.0);
}

TEST_CASE("conv2d matches a hand cross-correlation") {
    // [1,2,3,4] (*) [1,-1]: 1-2, 2-3, 3-4
    Tensor x = Tensor::from_data({1, 1, 1, 4}, {1, 2, 3, 4});
    Tensor w = Tensor::from_data({1, 1, 1, 2}, {1, -1});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = conv2d(x, w, b, 1, 0);
    check_close(y.data(), {-1, -1, -1});
}

TEST_CASE("conv2d output shape follows the floor formula") {
    Rng rng(3);
    Tensor x = randn({1, 2, 8, 8}, rng);
    Tensor w = randn({3, 2, 4, 4}, rng);
    Tensor b = randn({3}, rng);
    Tensor y = conv2d(x, w, b, 2, 0);
    CHECK(y.shape() == std::vector<int>{1, 3, 3, 3});
}

TEST_CASE("conv2d with identity 1x1 kernel and zero bias is the identity map") {
    Rng rng(11);
    Tensor x = randn({2, 1, 5, 4}, rng);
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = conv2d(x, w, b, 1, 0);
    check_close(y.data(), x.data(), 0.0);
}

TEST_CASE("conv2d hand oracle with padding and two channels") {
    // independent scalar triple loop oracle on a random case
    Rng rng(17);
    Tensor x = randn({1, 2, 4, 5}, rng);
    Tensor w = randn({3, 2, 3, 3}, rng);
    Tensor b = randn({3}, rng);
    const int stride = 2, pad = 1;
    Tensor y = conv2d(x, w, b, stride, pad);
    const int ho = (4 + 2 * pad - 3) / stride + 1, wo = (5 + 2 * pad - 3) / stride + 1;
    REQUIRE(y.shape() == std::vector<int>{1, 3, ho, wo});
    for (int k = 0; k < 3; ++k)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double acc = b.data()[static_cast<size_t>(k)];
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int iy = oy * stride - pad + ky;
                            int ix = ox * stride - pad + kx;
                            if (iy < 0 || iy >= 4 || ix < 0 || ix >= 5) continue;
                            acc += x.data()[static_cast<size_t>((c * 4 + iy) * 5 + ix)] *
                                   w.data()[static_cast<size_t>(((k * 2 + c) * 3 + ky) * 3 + kx)];
                        }
                double got = y.data()[static_cast<size_t>((k * ho + oy) * wo + ox)];
                CHECK(std::fabs(got - acc) <= 1e-12);
            }
}

TEST_CASE("conv2d rejects bad shapes") {
    Tensor x = Tensor::full({1, 2, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 3, 1, 1}, 1.0);  // expects 3 channels, input has 2
    Tensor b = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 0), ShapeError);
    Tensor w2 = Tensor::full({1, 2, 5, 5}, 1.0);  // kernel larger than padded input
    CHECK_THROWS_AS(conv2d(x, w2, b, 1, 0), ShapeError);
}

// ------------------------------------------------------------------ upsample

TEST_CASE("upsample_conv replicates a single pixel") {
    Tensor x = Tensor::from_data({1, 1, 1, 1}, {5.0});
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = upsample_conv(x, w, b);
    CHECK(y.shape() == std::vector<int>{1, 1, 2, 2});
    for (double v : y.data()) CHECK(v == 5.0);
}

TEST_CASE("upsample_conv with identity kernel replicates each pixel into a 2x2 block") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = upsample_conv(x, w, b);
    check_close(y.data(), {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}, 0.0);
}

TEST_CASE("upsample then 2x2 average recovers the original single pixel") {
    Tensor x = Tensor::from_data({1, 1, 1, 1}, {3.25});
    Tensor w = Tensor::full({1, 1, 2, 2}, 0.25);
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = upsample_conv(x, w, b);
    CHECK(y.shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(y.data()[0] == doctest::Approx(3.25).epsilon(1e-12));
}

// ------------------------------------------------------------------ leaky relu

TEST_CASE("leaky_relu basic values") {
    Tensor x = Tensor::from_data({3}, {-1, 0, 2});
    check_close(leaky_relu(x, 0.2).data(), {-0.2, 0, 2});
    Rng rng(5);
    Tensor r = randn({10}, rng);
    check_close(leaky_relu(r, 1.0).data(), r.data(), 0.0);
}

TEST_CASE("leaky_relu gradient matches finite differences at -1 and 2") {
    Tensor p = Tensor::from_data({2}, {-1.0, 2.0});
    auto f = [](const Tensor& t) { return sum(leaky_relu(t, 0.2)); };
    auto rep = grad_check(f, p, 1e-5, 1e-6);
    CHECK(rep.pass);
    // analytic values directly
    Tensor x = Tensor::param({2}, {-1.0, 2.0});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, sum(leaky_relu(x, 0.2)));
    }
    check_close(x.grad(), {0.2, 1.0}, 0.0);
}

// ------------------------------------------------------------------ instance norm

TEST_CASE("instance_norm maps a constant plane to zeros") {
    Tensor x = Tensor::full({1, 1, 2, 3}, 4.2);
    Tensor g = Tensor::from_data({1}, {1.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = instance_norm(x, g, b, 1e-5);
    for (double v : y.data()) CHECK(std::fabs(v) < 1e-9);
}

TEST_CASE("instance_norm normalizes [1,3] to [-1,1]") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {1.0, 3.0});
    Tensor g = Tensor::from_data({1}, {1.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    Tensor y = instance_norm(x, g, b, 1e-12);
    check_close(y.data(), {-1.0, 1.0}, 1e-6);
}

TEST_CASE("instance_norm with gamma 0 beta 7 gives all sevens") {
    Rng rng(21);
    Tensor x = randn({2, 3, 4, 4}, rng);
    Tensor g = Tensor::full({3}, 0.0);
    Tensor b = Tensor::full({3}, 7.0);
    Tensor y = instance_norm(x, g, b, 1e-5);
    for (double v : y.data()) CHECK(v == 7.0);
}

TEST_CASE("instance_norm rejects a 1-pixel plane") {
    Tensor x = Tensor::full({1, 1, 1, 1}, 2.0);
    Tensor g = Tensor::from_data({1}, {1.0});
    Tensor b = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(instance_norm(x, g, b, 1e-5), ValueError);
}

// ------------------------------------------------------------------ matmul

TEST_CASE("matmul identity times A is A") {
    Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    check_close(matmul(id, a).data(), a.data(), 0.0);
}

TEST_CASE("matmul hand oracle") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {1, 1});
    check_close(matmul(a, b).data(), {3, 7});
}

TEST_CASE("matmul transpose identity (AB)^T = B^T A^T") {
    Rng rng(31);
    Tensor a = randn({3, 4}, rng);
    Tensor b = randn({4, 2}, rng);
    Tensor lhs = transpose2d(matmul(a, b));
    Tensor rhs = matmul(transpose2d(b), transpose2d(a));
    check_close(lhs.data(), rhs.data(), 1e-12);
}

TEST_CASE("matmul rejects mismatched inner dims") {
    Tensor a = Tensor::full({2, 3}, 1.0);
    Tensor b = Tensor::full({2, 2}, 1.0);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

// ------------------------------------------------------------------ softmax

TEST_CASE("softmax_rows of a zero row is uniform") {
    Tensor x = Tensor::from_data({1, 3}, {0, 0, 0});
    check_close(softmax_rows(x).data(), {1.0 / 3, 1.0 / 3, 1.0 / 3});
}

TEST_CASE("softmax_rows forces a masked column to exactly zero") {
    Tensor x = Tensor::from_data({1, 2}, {0, 0});
    Tensor bias = Tensor::from_data({1, 2}, {0, kMaskBias});
    Tensor y = softmax_rows(x, bias);
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 0.0);
}

TEST_CASE("softmax_rows matches the brute-force formula to 1e-12") {
    Tensor x = Tensor::from_data({1, 3}, {1, 2, 3});
    Tensor y = softmax_rows(x);
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    check_close(y.data(), {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z}, 1e-12);
}

TEST_CASE("softmax_rows rows sum to one within 1e-9 on random input") {
    Rng rng(41);
    Tensor x = randn({6, 9}, rng);
    Tensor y = softmax_rows(x);
    for (int i = 0; i < 6; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += y.data()[static_cast<size_t>(i * 9 + j)];
        CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("softmax_rows throws on a fully masked row") {
    Tensor x = Tensor::from_data({1, 2}, {0, 0});
    Tensor bias = Tensor::full({1, 2}, kMaskBias);
    CHECK_THROWS_AS(softmax_rows(x, bias), FullyMaskedError);
}

// ------------------------------------------------------------------ backward

TEST_CASE("backward of sum gives all-ones gradient") {
    Tensor x = Tensor::param({4}, {1, 2, 3, 4});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, sum(x));
    }
    check_close(x.grad(), {1, 1, 1, 1}, 0.0);
}

TEST_CASE("backward of sum(x*x) at [1,2] gives [2,4]") {
    Tensor x = Tensor::param({2}, {1, 2});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, sum(mul(x, x)));
    }
    check_close(x.grad(), {2, 4}, 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tensor x = Tensor::param({2}, {1, 2});
    Tape tape;
    TapeScope scope(tape);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(tape, y), ContractError);
}

TEST_CASE("backward through a composed network matches finite differences") {
    Rng rng(51);
    Tensor w1 = randn({4, 2, 3, 3}, rng);
    Tensor b1 = randn({4}, rng);
    Tensor g1 = Tensor::full({4}, 1.0);
    Tensor be1 = Tensor::full({4}, 0.0);
    Tensor w2 = randn({1, 4, 1, 1}, rng);
    Tensor b2 = randn({1}, rng);
    Tensor point = randn({1, 2, 6, 6}, rng);
    auto f = [&](const Tensor& x) {
        Tensor h = conv2d(x, w1, b1, 2, 1);
        h = instance_norm(h, g1, be1, 1e-5);
        h = leaky_relu(h, 0.2);
        h = conv2d(h, w2, b2, 1, 0);
        return mean(tanh_t(h));
    };
    auto rep = grad_check(f, point, 1e-5, 1e-4);
    INFO("max rel err ", rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("after backward every grad-enabled leaf touched by the tape has a gradient") {
    Rng rng(52);
    Tensor a = randn({3, 3}, rng);
    a.set_requires_grad(true);
    Tensor b = randn({3, 3}, rng);
    b.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, mean(mul(add(a, b), sub(a, b))));
    }
    CHECK(a.has_grad());
    CHECK(b.has_grad());
    CHECK(a.grad().size() == 9);
    CHECK(b.grad().size() == 9);
}

TEST_CASE("detach blocks the gradient path") {
    Tensor x = Tensor::param({2}, {1, 2});
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor d = x.detach();
        backward(tape, sum(mul(d, d)));
    }
    CHECK_FALSE(x.has_grad());
    CHECK(tape.size() == 0);
}

// ------------------------------------------------------------------ grad_check

TEST_CASE("slice_batch / concat_batch round-trip a batch") {
    Tensor b = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor s1 = slice_batch(b, 1);
    CHECK(s1.shape() == std::vector<int>{1, 2});
    CHECK(s1.data() == std::vector<double>{3, 4});
    Tensor back = concat_batch({slice_batch(b, 0), slice_batch(b, 1), slice_batch(b, 2)});
    CHECK(back.shape() == b.shape());
    CHECK(back.data() == b.data());
    CHECK_THROWS_AS(slice_batch(b, 3), ShapeError);
    CHECK_THROWS_AS(concat_batch({b, Tensor::zeros({1, 3})}), ShapeError);
    CHECK_THROWS_AS(concat_batch({}), ValueError);
}

TEST_CASE("grad_check passes for sum of squares at tol 1e-6") {
    Rng rng(61);
    Tensor p = randn({5}, rng);
    auto f = [](const Tensor& x) { return sum(mul(x, x)); };
    auto rep = grad_check(f, p, 1e-5, 1e-6);
    CHECK(rep.pass);
}

TEST_CASE("grad_check fails for a deliberately wrong backward rule") {
    // forward: sum of squares; recorded rule: gradient of sum (all ones).
    auto wrong = [](const Tensor& x) {
        double s = 0.0;
        for (double v : x.data()) s += v * v;
        Tensor out = Tensor::scalar(s);
        if (active_tape() != nullptr && x.requires_grad()) {
            out.set_requires_grad(true);
            auto nx = x.node();
            auto no = out.node();
            active_tape()->push([nx, no] {
                if (!no->grad_alloc) {
                    no->grad.assign(1, 0.0);
                    no->grad_alloc = true;
                }
                if (!nx->grad_alloc) {
                    nx->grad.assign(nx->data.size(), 0.0);
                    nx->grad_alloc = true;
                }
                for (auto& g : nx->grad) g += no->grad[0];  // wrong: should be 2*x_i
            });
        }
        return out;
    };
    Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5});
    auto rep = grad_check(wrong, p, 1e-5, 1e-4);
    CHECK_FALSE(rep.pass);
}

// ------------------------------------------------------------------ FD sweep

TEST_CASE("finite-difference sweep across every differentiable op") {
    Rng rng(71);
    int checked = 0;
    auto sweep = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                     std::vector<int> shape, int points) {
        for (int i = 0; i < points; ++i) {
            Tensor p = randn(shape, rng);
            auto rep = grad_check(f, p, 1e-5, 1e-4);
            INFO("op ", name, " point ", i, " max rel err ", rep.max_rel_err,
                 " at coord ", rep.worst_index);
            CHECK(rep.pass);
            ++checked;
        }
    };

    Rng aux(72);
    Tensor other = randn({6}, aux);
    sweep("add", [&](const Tensor& x) { return sum(add(x, other)); }, {6}, 3);
    sweep("sub", [&](const Tensor& x) { return sum(sub(other, x)); }, {6}, 3);
    sweep("mul", [&](const Tensor& x) { return sum(mul(x, other)); }, {6}, 3);
    sweep("mul-self", [&](const Tensor& x) { return sum(mul(x, x)); }, {6}, 3);
    sweep("neg", [&](const Tensor& x) { return sum(neg(x)); }, {6}, 3);
    sweep("add_scalar", [&](const Tensor& x) { return sum(add_scalar(x, 1.5)); }, {6}, 3);
    sweep("scale", [&](const Tensor& x) { return sum(scale(x, -2.5)); }, {6}, 3);
    sweep("exp", [&](const Tensor& x) { return sum(exp_t(x)); }, {6}, 3);
    sweep("log", [&](const Tensor& x) { return sum(log_t(add_scalar(mul(x, x), 0.5))); }, {6}, 3);
    sweep("abs", [&](const Tensor& x) { return sum(abs_t(add_scalar(x, 3.0))); }, {6}, 3);
    sweep("square", [&](const Tensor& x) { return sum(square(x)); }, {6}, 3);
    sweep("sqrt", [&](const Tensor& x) { return sum(sqrt_t(add_scalar(mul(x, x), 1.0))); }, {6}, 3);
    sweep("tanh", [&](const Tensor& x) { return sum(tanh_t(x)); }, {6}, 3);
    sweep("sigmoid", [&](const Tensor& x) { return sum(sigmoid_t(x)); }, {6}, 3);
    sweep("softplus", [&](const Tensor& x) { return sum(softplus_t(x)); }, {6}, 3);
    sweep("pow", [&](const Tensor& x) { return sum(pow_scalar(add_scalar(mul(x, x), 1.0), 1.7)); },
          {6}, 3);
    sweep("leaky_relu", [&](const Tensor& x) { return sum(leaky_relu(x, 0.2)); }, {6}, 3);
    sweep("mean", [&](const Tensor& x) { return mean(mul(x, x)); }, {7}, 3);
    sweep("mean_per_sample",
          [&](const Tensor& x) { return sum(mean_per_sample(mul(x, x))); }, {3, 4}, 3);
    sweep("reshape", [&](const Tensor& x) { return sum(mul(reshape(x, {2, 3}), reshape(x, {2, 3}))); },
          {6}, 3);
    sweep("transpose2d",
          [&](const Tensor& x) { return sum(mul(transpose2d(x), transpose2d(x))); }, {2, 3}, 3);
    sweep("matmul-left", [&](const Tensor& x) {
        Tensor m = reshape(x, {2, 3});
        Rng r2(5);
        static Tensor b = randn({3, 2}, r2);
        return sum(mul(matmul(m, b), matmul(m, b)));
    }, {6}, 3);
    sweep("matmul-right", [&](const Tensor& x) {
        Tensor m = reshape(x, {3, 2});
        Rng r2(6);
        static Tensor a = randn({2, 3}, r2);
        return sum(square(matmul(a, m)));
    }, {6}, 3);
    sweep("softmax", [&](const Tensor& x) {
        Tensor s = softmax_rows(reshape(x, {2, 4}));
        Rng r2(7);
        static Tensor wgt = randn({2, 4}, r2);
        return sum(mul(s, wgt));
    }, {8}, 3);
    sweep("softmax-masked", [&](const Tensor& x) {
        static Tensor bias = Tensor::from_data({2, 4}, {0, 0, kMaskBias, 0,
                                                        kMaskBias, 0, 0, 0});
        Tensor s = softmax_rows(reshape(x, {2, 4}), bias);
        Rng r2(8);
        static Tensor wgt = randn({2, 4}, r2);
        return sum(mul(s, wgt));
    }, {8}, 3);
    sweep("concat", [&](const Tensor& x) {
        Tensor a = reshape(x, {1, 2, 2, 2});
        Tensor c = concat_channels(a, scale(a, 2.0));
        return sum(square(c));
    }, {8}, 3);
    sweep("upsample_nearest2", [&](const Tensor& x) {
        return sum(square(upsample_nearest2(reshape(x, {1, 2, 2, 2}))));
    }, {8}, 3);
    sweep("select_mask", [&](const Tensor& x) {
        static Tensor cond = Tensor::from_data({6}, {1, 0, 1, 0, 1, 0});
        return sum(square(select_mask(cond, x, scale(x, 3.0))));
    }, {6}, 3);
    sweep("slice_batch", [&](const Tensor& x) {
        Tensor b = reshape(x, {3, 2});
        return sum(square(add(slice_batch(b, 0), slice_batch(b, 2))));
    }, {6}, 3);
    sweep("concat_batch", [&](const Tensor& x) {
        Tensor b = reshape(x, {1, 4});
        Tensor c = concat_batch({b, scale(b, -2.0), b});
        return sum(square(c));
    }, {4}, 3);

    // conv2d wrt input / weight / bias via closures over params
    {
        Tensor w = randn({2, 2, 3, 3}, rng);
        Tensor b = randn({2}, rng);
        sweep("conv2d-input", [&](const Tensor& x) {
            return mean(square(conv2d(reshape(x, {1, 2, 4, 4}), w, b, 1, 1)));
        }, {32}, 3);
        Tensor xin = randn({1, 2, 4, 4}, rng);
        sweep("conv2d-weight", [&](const Tensor& wflat) {
            return mean(square(conv2d(xin, reshape(wflat, {2, 2, 3, 3}), b, 2, 1)));
        }, {36}, 3);
        sweep("conv2d-bias", [&](const Tensor& bb) {
            return mean(square(conv2d(xin, w, bb, 1, 0)));
        }, {2}, 3);
    }
    {
        Tensor w = randn({1, 2, 3, 3}, rng);
        Tensor b = randn({1}, rng);
        sweep("upsample_conv-input", [&](const Tensor& x) {
            return mean(square(upsample_conv(reshape(x, {1, 2, 3, 3}), w, b)));
        }, {18}, 3);
    }
    {
        Tensor g = randn({2}, rng);
        Tensor be = randn({2}, rng);
        sweep("instance_norm-input", [&](const Tensor& x) {
            return mean(square(instance_norm(reshape(x, {1, 2, 3, 3}), g, be, 1e-5)));
        }, {18}, 3);
        Tensor xin = randn({1, 2, 3, 3}, rng);
        sweep("instance_norm-gamma", [&](const Tensor& gg) {
            return mean(square(instance_norm(xin, gg, be, 1e-5)));
        }, {2}, 3);
        sweep("instance_norm-beta", [&](const Tensor& bb) {
            return mean(square(instance_norm(xin, g, bb, 1e-5)));
        }, {2}, 3);
    }
    CHECK(checked > 90);
}

// ------------------------------------------------------------------ misc

TEST_CASE("forward passes are deterministic") {
    Rng rng(81);
    Tensor x = randn({1, 2, 6, 6}, rng);
    Tensor w = randn({3, 2, 3, 3}, rng);
    Tensor b = randn({3}, rng);
    Tensor g = Tensor::full({3}, 1.0);
    Tensor be = Tensor::full({3}, 0.0);
    auto run = [&] {
        return tanh_t(instance_norm(conv2d(x, w, b, 1, 1), g, be, 1e-5)).data();
    };
    auto a1 = run();
    auto a2 = run();
    REQUIRE(a1.size() == a2.size());
    for (size_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == a2[i]);
}

TEST_CASE("grad_check_params spot-checks named parameters") {
    Rng rng(91);
    Tensor w = Tensor::param({4, 3}, randn({12}, rng).data());
    Tensor b = Tensor::param({4, 1}, randn({4}, rng).data());
    Tensor x = randn({3, 1}, rng);
    auto loss = [&] {
        for (Tensor t : {w, b}) t.zero_grad();
        return mean(square(add(matmul(w, x), b)));
    };
    auto reports = grad_check_params(loss, {{"w", w}, {"b", b}}, 4, 1e-5, 1e-6, 123);
    REQUIRE(reports.size() == 2);
    for (const auto& r : reports) {
        INFO(r.name, " max rel err ", r.max_rel_err);
        CHECK(r.pass);
    }
}

TEST_CASE("from_data rejects mismatched length") {
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST_CASE("value() rejects non-scalars") {
    Tensor t = Tensor::full({2}, 1.0);
    CHECK_THROWS_AS(t.value(), ContractError);
}
