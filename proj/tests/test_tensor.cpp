#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rled/gradcheck.hpp"
#include "rled/ops.hpp"

using namespace rled;

namespace {

TensorD randd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return random_tensor<double>(std::move(shape), rng, lo, hi);
}

} // namespace

TEST_CASE("matmul identity and forced values") {
    Rng rng(7);
    TensorD a = randd({2, 2}, rng);
    TensorD eye = TensorD::from_data({2, 2}, {1, 0, 0, 1});
    TensorD out = matmul(eye, a);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.vals()[i] == doctest::Approx(a.vals()[i]));

    TensorD b = TensorD::from_data({2, 2}, {1, 2, 3, 4});
    TensorD ones = TensorD::from_data({2, 1}, {1, 1});
    TensorD r = matmul(b, ones);
    CHECK(r.at({0, 0}) == doctest::Approx(3));
    CHECK(r.at({1, 0}) == doctest::Approx(7));

    CHECK_THROWS_AS(matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul gradient vs central differences") {
    Rng rng(11);
    TensorD a = randd({3, 4}, rng);
    TensorD b = randd({4, 2}, rng);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) { return sum_all(matmul(in[0], in[1])); }, {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("batched matmul matches per-slice products") {
    Rng rng(13);
    TensorD a = randd({2, 3, 3, 4}, rng);
    TensorD b = randd({2, 3, 4, 5}, rng);
    TensorD out = matmul(a, b);
    CHECK(out.shape() == Shape{2, 3, 3, 5});
    // spot-check one batch against a rank-2 product
    TensorD a1 = TensorD::from_data({3, 4}, std::vector<double>(a.vals().begin() + 12,
                                                                a.vals().begin() + 24));
    TensorD b1 = TensorD::from_data({4, 5}, std::vector<double>(b.vals().begin() + 20,
                                                                b.vals().begin() + 40));
    TensorD ref = matmul(a1, b1);
    for (int i = 0; i < 15; ++i)
        CHECK(out.vals()[15 + i] == doctest::Approx(ref.vals()[i]));

    const double err = grad_check(
        [](const std::vector<TensorD>& in) { return sum_all(mul(matmul(in[0], in[1]), in[2])); },
        {randd({2, 2, 3, 2}, rng), randd({2, 2, 2, 4}, rng), randd({2, 2, 3, 4}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("conv2d identity kernel and analytic box sum") {
    TensorD x = TensorD::from_data({1, 2, 2}, {1, 2, 3, 4});
    TensorD w = TensorD::from_data({1, 1, 1, 1}, {1});
    TensorD b = TensorD::from_data({1}, {0});
    TensorD y = conv2d(x, w, b);
    for (int i = 0; i < 4; ++i) CHECK(y.vals()[i] == doctest::Approx(x.vals()[i]));

    TensorD ones_in = TensorD::full({1, 3, 3}, 1.0);
    TensorD ones_k = TensorD::full({1, 1, 3, 3}, 1.0);
    TensorD out = conv2d(ones_in, ones_k, b, 1, 1);
    CHECK(out.at({0, 1, 1}) == doctest::Approx(9));
    CHECK(out.at({0, 0, 0}) == doctest::Approx(4));
    CHECK(out.at({0, 0, 2}) == doctest::Approx(4));
    CHECK(out.at({0, 2, 0}) == doctest::Approx(4));
    CHECK(out.at({0, 2, 2}) == doctest::Approx(4));

    // (5 + 0 - 3) % 2 == 0 is fine; 4x4 input with stride 3 is not
    CHECK_THROWS_AS(conv2d(TensorD::zeros({1, 4, 4}), TensorD::zeros({1, 1, 3, 3}), b, 3, 0),
                    ShapeError);
}

TEST_CASE("conv2d gradient vs central differences") {
    Rng rng(17);
    TensorD x = randd({2, 5, 5}, rng);
    TensorD w = randd({3, 2, 3, 3}, rng);
    TensorD b = randd({3}, rng);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(conv2d(in[0], in[1], in[2], 1, 1));
        },
        {x, w, b});
    CHECK(err < 1e-6);

    // strided variant
    const double err_s = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(conv2d(in[0], in[1], in[2], 2, 1));
        },
        {randd({2, 7, 7}, rng), randd({4, 2, 3, 3}, rng), randd({4}, rng)});
    CHECK(err_s < 1e-6);
}

TEST_CASE("dwconv2d delta kernel is identity, zero kernel leaves bias") {
    Rng rng(19);
    TensorD x = randd({2, 4, 4}, rng);
    TensorD delta = TensorD::zeros({2, 1, 3, 3});
    delta.vals_mut()[4] = 1.0;  // center tap, channel 0
    delta.vals_mut()[13] = 1.0; // center tap, channel 1
    TensorD zero_b = TensorD::zeros({2});
    TensorD y = dwconv2d(x, delta, zero_b, 1);
    for (std::size_t i = 0; i < x.vals().size(); ++i)
        CHECK(y.vals()[i] == doctest::Approx(x.vals()[i]));

    TensorD w = randd({2, 1, 3, 3}, rng);
    std::fill(w.vals_mut().begin(), w.vals_mut().begin() + 9, 0.0);
    TensorD b = TensorD::from_data({2}, {0.25, -0.5});
    TensorD out = dwconv2d(x, w, b, 1);
    for (int i = 0; i < 16; ++i) CHECK(out.vals()[i] == doctest::Approx(0.25));

    CHECK_THROWS_AS(dwconv2d(x, TensorD::zeros({3, 1, 3, 3}), TensorD::zeros({3}), 1), ShapeError);
}

TEST_CASE("dwconv2d gradient vs central differences") {
    Rng rng(23);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) { return sum_all(dwconv2d(in[0], in[1], in[2], 1)); },
        {randd({3, 5, 5}, rng), randd({3, 1, 3, 3}, rng), randd({3}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("softmax symmetry, stability, normalization") {
    TensorD x = TensorD::from_data({3}, {0, 0, 0});
    TensorD y = softmax(x, 0);
    for (int i = 0; i < 3; ++i) CHECK(y.vals()[i] == doctest::Approx(1.0 / 3));

    TensorD big = TensorD::from_data({2}, {1000, 0});
    TensorD yb = softmax(big, 0);
    CHECK(yb.vals()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(yb.vals()[1] == doctest::Approx(0.0).epsilon(1e-6));

    Rng rng(29);
    for (int s = 0; s < 20; ++s) {
        TensorD r = randd({4, 6}, rng, -30, 30);
        TensorD sm = softmax(r, 1);
        for (int i = 0; i < 4; ++i) {
            double total = 0;
            for (int j = 0; j < 6; ++j) {
                const double v = sm.at({i, j});
                CHECK(v >= 0.0);
                total += v;
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("softmax jacobian vs central differences") {
    Rng rng(31);
    TensorD x = randd({5}, rng);
    // Random projections of the softmax output probe the full Jacobian.
    for (int trial = 0; trial < 5; ++trial) {
        TensorD u = randd({5}, rng);
        const double err = grad_check(
            [&u](const std::vector<TensorD>& in) { return sum_all(mul(softmax(in[0], 0), u)); },
            {x});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("layernorm constant slice and forced values") {
    TensorD gamma = TensorD::full({4}, 1.0);
    TensorD beta = TensorD::zeros({4});
    TensorD x = TensorD::full({2, 4}, 3.25);
    TensorD y = layernorm(x, gamma, beta, 1);
    for (double v : y.vals()) CHECK(std::abs(v) < 1e-12);

    TensorD g2 = TensorD::full({2}, 1.0);
    TensorD b2 = TensorD::zeros({2});
    TensorD x2 = TensorD::from_data({2}, {1, 3});
    TensorD y2 = layernorm(x2, g2, b2, 0);
    CHECK(y2.vals()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y2.vals()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layernorm gradient vs central differences") {
    Rng rng(37);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(mul(layernorm(in[0], in[1], in[2], 1), in[3]));
        },
        {randd({3, 6}, rng), randd({6}, rng, 0.5, 1.5), randd({6}, rng), randd({3, 6}, rng)});
    CHECK(err < 1e-5);
}

TEST_CASE("gelu exact values") {
    TensorD x = TensorD::from_data({3}, {0.0, 10.0, 1.0});
    TensorD y = gelu(x);
    CHECK(y.vals()[0] == doctest::Approx(0.0));
    CHECK(y.vals()[1] == doctest::Approx(10.0).epsilon(1e-6));
    const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(y.vals()[2] == doctest::Approx(1.0 * phi1).epsilon(1e-12));

    Rng rng(41);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) { return sum_all(gelu(in[0])); }, {randd({12}, rng, -3, 3)});
    CHECK(err < 1e-6);
}

TEST_CASE("reshape and permute round trips are bit exact") {
    Rng rng(43);
    TensorD x = randd({3, 4, 5}, rng);
    TensorD rt = reshape(reshape(x, {3, 20}), {3, 4, 5});
    CHECK(rt.vals() == x.vals());

    TensorD tt = permute(permute(x, {2, 0, 1}), {1, 2, 0});
    CHECK(tt.vals() == x.vals());

    // permuting never changes the multiset of values
    auto sorted_a = x.vals();
    auto p = permute(x, {1, 2, 0});
    auto sorted_b = p.vals();
    std::sort(sorted_a.begin(), sorted_a.end());
    std::sort(sorted_b.begin(), sorted_b.end());
    CHECK(sorted_a == sorted_b);

    CHECK_THROWS_AS(reshape(x, {7, 9}), ShapeError);
}

TEST_CASE("reshape gradient is the reshaped upstream gradient, exactly") {
    Rng rng(47);
    TensorD x = randd({2, 6}, rng);
    x.set_requires_grad(true);
    TensorD w = randd({3, 4}, rng);
    TensorD y = sum_all(mul(reshape(x, {3, 4}), w));
    y.backward();
    for (std::size_t i = 0; i < 12; ++i) CHECK(x.grad()[i] == w.vals()[i]);
}

TEST_CASE("roll2 round trip and reflect pad index mapping") {
    Rng rng(53);
    TensorD x = randd({2, 4, 6}, rng);
    TensorD r = roll2(roll2(x, 1, 3, 2, 2), 1, -3, 2, -2);
    CHECK(r.vals() == x.vals());

    TensorD padded = reflect_pad2(x, 1, 2, 1, 2);
    CHECK(padded.shape() == Shape{2, 7, 9});
    CHECK(padded.at({0, 0, 1}) == x.at({0, 1, 0})); // row mirror
    CHECK(padded.at({0, 1, 0}) == x.at({0, 0, 1})); // col mirror
    TensorD cropped = crop2(padded, 1, 1, 4, 6);
    CHECK(cropped.vals() == x.vals());

    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(mul(reflect_pad2(in[0], 2, 2, 2, 2), in[1]));
        },
        {randd({1, 3, 3}, rng), randd({1, 7, 7}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("slice and concat invert each other") {
    Rng rng(59);
    TensorD x = randd({6, 3, 3}, rng);
    TensorD lo = slice(x, 0, 0, 2);
    TensorD hi = slice(x, 0, 2, 4);
    TensorD back = concat<double>({lo, hi}, 0);
    CHECK(back.vals() == x.vals());

    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(mul(concat<double>({slice(in[0], 1, 1, 2), slice(in[0], 1, 0, 1)}, 1),
                               in[1]));
        },
        {randd({2, 3, 2}, rng), randd({2, 3, 2}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("pixel_shuffle layout and gradient") {
    TensorD x = TensorD::from_data({4, 1, 1}, {1, 2, 3, 4});
    TensorD y = pixel_shuffle(x, 2);
    CHECK(y.shape() == Shape{1, 2, 2});
    CHECK(y.vals() == std::vector<double>{1, 2, 3, 4});

    Rng rng(61);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(mul(pixel_shuffle(in[0], 2), in[1]));
        },
        {randd({8, 3, 2}, rng), randd({2, 6, 4}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("broadcast add/mul/div semantics and gradients") {
    TensorD a = TensorD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    TensorD b = TensorD::from_data({3}, {10, 20, 30});
    TensorD y = add(a, b);
    CHECK(y.at({1, 2}) == doctest::Approx(36));

    Rng rng(67);
    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(mul(div(add(in[0], in[1]), in[2]), in[3]));
        },
        {randd({2, 3, 4}, rng), randd({3, 1}, rng), randd({2, 1, 1}, rng, 0.5, 2.0),
         randd({2, 3, 4}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("embedding_rows gather and scatter gradient") {
    Rng rng(71);
    TensorD table = randd({5, 3}, rng);
    TensorD out = embedding_rows(table, {1, 1, 4});
    CHECK(out.shape() == Shape{3, 3});
    CHECK(out.at({0, 0}) == table.at({1, 0}));
    const double err = grad_check(
        [](const std::vector<TensorD>& in) {
            return sum_all(mul(embedding_rows(in[0], {0, 2, 2, 3}), in[1]));
        },
        {randd({4, 2}, rng), randd({4, 2}, rng)});
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check on analytic cases") {
    Rng rng(73);
    TensorD x = randd({7}, rng);
    const double err_sum = grad_check(
        [](const std::vector<TensorD>& in) { return sum_all(in[0]); }, {x});
    CHECK(err_sum < 1e-9);

    const double err_sq = grad_check(
        [](const std::vector<TensorD>& in) { return sum_all(mul(in[0], in[0])); }, {x});
    CHECK(err_sq < 1e-8);

    // analytic gradient of sum(x^2) is 2x
    TensorD x2 = x.detach();
    x2.set_requires_grad(true);
    TensorD y = sum_all(mul(x2, x2));
    y.backward();
    for (std::size_t i = 0; i < 7; ++i)
        CHECK(x2.grad()[i] == doctest::Approx(2.0 * x2.vals()[i]));

    CHECK_THROWS_AS(grad_check(
        [](const std::vector<TensorD>& in) {
            return mul_scalar(sum_all(sqrt(in[0])), std::numeric_limits<double>::quiet_NaN());
        }, {randd({3}, rng, 0.5, 1.0)}), OracleError);
}

TEST_CASE("every op gradient matches finite differences across 20 seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 977);
        const double err = grad_check(
            [](const std::vector<TensorD>& in) {
                TensorD t = conv2d(in[0], in[1], in[2], 1, 1);
                t = gelu(t);
                t = dwconv2d(t, in[3], in[4], 1);
                t = softmax(t, 1);
                t = layernorm(reshape(t, {2, 16}), in[5], in[6], 1);
                t = mul(t, in[7]);
                return mean_all(abs(t));
            },
            {random_tensor<double>({1, 4, 4}, rng), random_tensor<double>({2, 1, 3, 3}, rng),
             random_tensor<double>({2}, rng), random_tensor<double>({2, 1, 3, 3}, rng),
             random_tensor<double>({2}, rng), random_tensor<double>({16}, rng, 0.5, 1.5),
             random_tensor<double>({16}, rng), random_tensor<double>({2, 16}, rng, 0.25, 1.0)});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("ops are deterministic") {
    Rng rng(79);
    TensorD x = randd({3, 8, 8}, rng);
    TensorD w = randd({4, 3, 3, 3}, rng);
    TensorD b = randd({4}, rng);
    TensorD y1 = softmax(conv2d(x, w, b, 1, 1), 0);
    TensorD y2 = softmax(conv2d(x, w, b, 1, 1), 0);
    CHECK(y1.vals() == y2.vals());
}

TEST_CASE("float instantiation works end to end") {
    Rng rng(83);
    TensorF x = random_tensor<float>({2, 4, 4}, rng);
    TensorF w = random_tensor<float>({2, 2, 3, 3}, rng);
    TensorF b = random_tensor<float>({2}, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    TensorF loss = mean_all(mul(gelu(conv2d(x, w, b, 1, 1)), gelu(conv2d(x, w, b, 1, 1))));
    loss.backward();
    CHECK(std::isfinite(loss.item()));
    CHECK(!x.grad().empty());
    CHECK(!w.grad().empty());
}
