#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "rled/lsrb.hpp"
#include "test_support.hpp"

using namespace rled;
using rled::testing::flatten_params;
using rled::testing::random_image;

namespace {

ModelConfig small_cfg(int c, int r) {
    ModelConfig cfg;
    cfg.c = c;
    cfg.rank = r;
    cfg.window = 2;
    cfg.heads_sab = 2;
    cfg.heads_cab = 2;
    cfg.n_enc = 2;
    cfg.n_frb = 2;
    return cfg;
}

template <typename T>
struct LsrbFixture {
    ParamTree<T> tree;
    LsrbParams<T> params;
};

template <typename T>
LsrbFixture<T> make_lsrb(const ModelConfig& cfg, std::uint64_t seed) {
    LsrbFixture<T> fx;
    Rng rng(seed);
    ParamIo<T> io{fx.tree, &rng};
    fx.params = lsrb_build(io, cfg);
    return fx;
}

// Singular values of the hw*c matrix view of a (c,h,w) feature map.
template <typename T>
Eigen::VectorXd singular_values(const Tensor<T>& f) {
    const std::int64_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
    Eigen::MatrixXd m(hw, c);
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < hw; ++i)
            m(i, ch) = static_cast<double>(f.vals()[ch * hw + i]);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues();
}

} // namespace

TEST_CASE("shallow_extract shapes and zero parameters") {
    ModelConfig cfg = small_cfg(8, 2);
    auto fx = make_lsrb<double>(cfg, 1);
    Rng rng(3);
    TensorD x = random_image<double>(8, 8, rng);

    std::fill(fx.params.shallow.w.vals_mut().begin(), fx.params.shallow.w.vals_mut().end(), 0.0);
    TensorD f = shallow_extract(x, fx.params);
    CHECK(f.shape() == Shape{8, 8, 8});
    for (double v : f.vals()) CHECK(v == 0.0);

    CHECK_THROWS_AS(shallow_extract(TensorD::zeros({2, 8, 8}), fx.params), ShapeError);
}

TEST_CASE("shallow_extract output shape matches channel width") {
    ModelConfig cfg = small_cfg(32, 8);
    auto fx = make_lsrb<float>(cfg, 2);
    Rng rng(5);
    TensorF x = rled::testing::random_image<float>(64, 64, rng);
    CHECK(shallow_extract(x, fx.params).shape() == Shape{32, 64, 64});
}

TEST_CASE("shallow_extract gradient") {
    ModelConfig cfg = small_cfg(4, 2);
    auto fx = make_lsrb<double>(cfg, 7);
    Rng rng(11);
    TensorD x = random_image<double>(6, 6, rng);
    std::vector<TensorD> inputs{x};
    for (auto& t : flatten_params(fx.tree)) inputs.push_back(t);
    const double err = grad_check(
        [&](const std::vector<TensorD>& in) {
            return mean_all(mul(shallow_extract(in[0], fx.params), shallow_extract(in[0], fx.params)));
        },
        inputs);
    CHECK(err < 1e-5);
}

TEST_CASE("low-rank projection bounds the singular spectrum") {
    ModelConfig cfg = small_cfg(16, 4);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto fx = make_lsrb<float>(cfg, seed);
        Rng rng(seed * 101);
        TensorF x = rled::testing::random_image<float>(8, 8, rng);
        TensorF out = lsrb_forward(x, fx.params, cfg);
        CHECK(out.shape() == Shape{16, 8, 8});
        const auto sv = singular_values(out);
        REQUIRE(sv.size() >= cfg.rank + 1);
        CHECK(sv(cfg.rank) <= 1e-4 * sv(0));
    }
    // f64 is essentially exact
    auto fx = make_lsrb<double>(cfg, 42);
    Rng rng(4242);
    TensorD x = random_image<double>(8, 8, rng);
    const auto sv = singular_values(lsrb_forward(x, fx.params, cfg));
    CHECK(sv(cfg.rank) <= 1e-10 * sv(0));
}

TEST_CASE("full-rank factorization reproduces an arbitrary feature view") {
    // r = min(hw, c): with U = I the reconstruction U^T (U F) = F is exact.
    Rng rng(17);
    const std::int64_t hw = 4, c = 6;
    TensorD f = random_tensor<double>({hw, c}, rng);
    TensorD u = TensorD::zeros({hw, hw});
    for (std::int64_t i = 0; i < hw; ++i) u.vals_mut()[i * hw + i] = 1.0;
    TensorD v = matmul(u, f);                    // (r, c)
    TensorD fhat = matmul(permute(u, {1, 0}), v); // (hw, c)
    for (std::size_t i = 0; i < f.vals().size(); ++i)
        CHECK(fhat.vals()[i] == doctest::Approx(f.vals()[i]).epsilon(1e-12));
}

TEST_CASE("lsrb gradient through the whole block") {
    ModelConfig cfg = small_cfg(4, 2);
    auto fx = make_lsrb<double>(cfg, 23);
    Rng rng(29);
    TensorD x = random_image<double>(4, 4, rng);
    std::vector<TensorD> inputs{x};
    for (auto& t : flatten_params(fx.tree)) inputs.push_back(t);
    const double err = grad_check(
        [&](const std::vector<TensorD>& in) {
            TensorD out = lsrb_forward(in[0], fx.params, cfg);
            return mean_all(mul(out, out));
        },
        inputs);
    CHECK(err < 1e-4);
}

TEST_CASE("disabled projection is bitwise the shallow conv") {
    ModelConfig with = small_cfg(8, 2);
    ModelConfig without = with;
    without.enable_lsrb = false;

    // Same seed: the shallow conv draws first, so its weights agree.
    auto fx_with = make_lsrb<float>(with, 77);
    auto fx_without = make_lsrb<float>(without, 77);
    CHECK(fx_with.params.shallow.w.vals() == fx_without.params.shallow.w.vals());
    CHECK(fx_without.tree.entries.size() == 2); // shallow conv only

    Rng rng(31);
    TensorF x = rled::testing::random_image<float>(8, 8, rng);
    TensorF a = lsrb_forward(x, fx_without.params, without);
    TensorF b = shallow_extract(x, fx_without.params);
    CHECK(a.vals() == b.vals());
}

TEST_CASE("paper-literal basis source requires rank == c and runs") {
    ModelConfig cfg = small_cfg(4, 4);
    cfg.v_source = VSource::f_u;
    cfg.validate();

    ModelConfig bad = small_cfg(8, 2);
    bad.v_source = VSource::f_u;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    auto fx = make_lsrb<double>(cfg, 13);
    Rng rng(37);
    TensorD x = random_image<double>(6, 6, rng);
    TensorD out = lsrb_forward(x, fx.params, cfg);
    CHECK(out.shape() == Shape{4, 6, 6});
}

TEST_CASE("rank too large for the feature map is rejected") {
    ModelConfig cfg = small_cfg(16, 8);
    auto fx = make_lsrb<double>(cfg, 3);
    Rng rng(41);
    TensorD x = random_image<double>(4, 4, rng); // hw/4 = 4 <= r
    CHECK_THROWS_AS(lsrb_forward(x, fx.params, cfg), ShapeError);
}
