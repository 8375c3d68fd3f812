#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "rtn/ops.hpp"

using rtn::Shape;
using rtn::TensorD;
using rtn::TensorF;

TEST_CASE("elementwise ops: values and shape mismatch rejection") {
    auto a = TensorD::from_data({2, 2}, {1, 2, 3, 4});
    auto b = TensorD::from_data({2, 2}, {10, 20, 30, 40});
    auto s = rtn::add(a, b);
    CHECK(s.data()[3] == 44.0);
    auto d = rtn::sub(b, a);
    CHECK(d.data()[0] == 9.0);
    auto m = rtn::mul(a, b);
    CHECK(m.data()[2] == 90.0);
    auto c = TensorD::from_data({4}, {1, 2, 3, 4});
    CHECK_THROWS_AS(rtn::add(a, c), std::invalid_argument);
    CHECK_THROWS_AS(rtn::sub(a, c), std::invalid_argument);
    CHECK_THROWS_AS(rtn::mul(a, c), std::invalid_argument);
}

TEST_CASE("add_rowwise broadcasts bias across rows") {
    auto x = TensorD::from_data({2, 3}, {0, 0, 0, 1, 1, 1});
    auto bias = TensorD::from_data({3}, {10, 20, 30});
    auto y = rtn::add_rowwise(x, bias);
    CHECK(y.data()[0] == 10.0);
    CHECK(y.data()[5] == 31.0);
    CHECK_THROWS_AS(rtn::add_rowwise(x, TensorD::zeros({2})), std::invalid_argument);
}

TEST_CASE("matmul matches reference on random inputs up to extent 6") {
    rtn::Rng r(100);
    for (int trial = 0; trial < 8; ++trial) {
        const std::int64_t p = 1 + static_cast<std::int64_t>(r.uniform_int(6));
        const std::int64_t q = 1 + static_cast<std::int64_t>(r.uniform_int(6));
        const std::int64_t rr = 1 + static_cast<std::int64_t>(r.uniform_int(6));
        auto a = TensorD::randn({p, q}, r);
        auto b = TensorD::randn({q, rr}, r);
        auto c = rtn::matmul(a, b);
        auto ref = oracle::matmul_ref({a.data().begin(), a.data().end()},
                                      {b.data().begin(), b.data().end()}, p, q, rr);
        REQUIRE(c.shape() == Shape{p, rr});
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.data()[i] - ref[i]) < 1e-12);
    }
}

TEST_CASE("matmul broadcasts a rank-2 operand over leading batch dims") {
    rtn::Rng r(101);
    auto a = TensorD::randn({3, 2, 4}, r);
    auto b = TensorD::randn({4, 5}, r);
    auto c = rtn::matmul(a, b);
    REQUIRE(c.shape() == Shape{3, 2, 5});
    for (std::int64_t n = 0; n < 3; ++n) {
        std::vector<double> an(a.data().begin() + n * 8, a.data().begin() + (n + 1) * 8);
        auto ref = oracle::matmul_ref(an, {b.data().begin(), b.data().end()}, 2, 4, 5);
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(c.data()[static_cast<std::size_t>(n * 10) + i] - ref[i]) < 1e-12);
    }

    auto c2 = rtn::matmul(b, TensorD::randn({3, 5, 2}, r));
    REQUIRE(c2.shape() == Shape{3, 4, 2});

    CHECK_THROWS_AS(rtn::matmul(a, TensorD::zeros({5, 4})), std::invalid_argument);
    CHECK_THROWS_AS(rtn::matmul(TensorD::zeros({2, 2, 2}), TensorD::zeros({3, 2, 2})),
                    std::invalid_argument);
}

TEST_CASE("transpose and reshape round-trip") {
    auto x = TensorD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto xt = rtn::transpose(x);
    REQUIRE(xt.shape() == Shape{3, 2});
    CHECK(xt.data()[1] == 4.0);
    auto back = rtn::transpose(xt);
    for (std::size_t i = 0; i < 6; ++i) CHECK(back.data()[i] == x.data()[i]);

    auto flat = rtn::reshape(x, {6});
    CHECK(flat.data()[4] == 5.0);
    CHECK_THROWS_AS(rtn::reshape(x, {4}), std::invalid_argument);
}

TEST_CASE("softmax: frozen values, normalization, stability") {
    auto x = TensorD::from_data({3}, {1, 2, 3});
    auto y = rtn::softmax(x);
    CHECK(y.data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
    CHECK(y.data()[2] == doctest::Approx(0.6652409557748219).epsilon(1e-12));

    rtn::Rng r(5);
    auto big = TensorF::randn({4, 7}, r);
    for (auto& v : big.mutable_data()) v *= 1e4f;
    auto sm = rtn::softmax(big, -1);
    for (std::int64_t row = 0; row < 4; ++row) {
        float total = 0.0f;
        for (std::int64_t c = 0; c < 7; ++c) {
            const float v = sm.data()[static_cast<std::size_t>(row * 7 + c)];
            REQUIRE(std::isfinite(v));
            total += v;
        }
        CHECK(std::abs(total - 1.0f) < 1e-6f);
    }
}

TEST_CASE("softmax along axis 0 normalizes columns") {
    auto x = TensorD::from_data({2, 3}, {1, 5, 0, 3, 5, 2});
    auto y = rtn::softmax(x, 0);
    for (std::int64_t c = 0; c < 3; ++c)
        CHECK(y.data()[static_cast<std::size_t>(c)] + y.data()[static_cast<std::size_t>(3 + c)] ==
              doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("layernorm: constant row collapses to bias, [1,-1] hits eps-scaled value") {
    auto gain = TensorD::from_data({4}, {1, 1, 1, 1});
    auto bias = TensorD::zeros({4});
    auto x = TensorD::from_data({1, 4}, {5, 5, 5, 5});
    auto y = rtn::layernorm(x, gain, bias);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

    auto g2 = TensorD::from_data({2}, {1, 1});
    auto b2 = TensorD::zeros({2});
    auto x2 = TensorD::from_data({2}, {1, -1});
    auto y2 = rtn::layernorm(x2, g2, b2);
    CHECK(y2.data()[0] == doctest::Approx(0.9999950000374997).epsilon(1e-12));
    CHECK(y2.data()[1] == doctest::Approx(-0.9999950000374997).epsilon(1e-12));

    CHECK_THROWS_AS(rtn::layernorm(x, g2, b2), std::invalid_argument);
}

TEST_CASE("gelu: zero, frozen phi(1), symmetry identity") {
    auto x = TensorD::from_data({3}, {0.0, 1.0, -1.0});
    auto y = rtn::gelu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    // Phi(x) + Phi(-x) = 1, so gelu(x) - gelu(-x) = x
    CHECK(y.data()[1] - y.data()[2] == doctest::Approx(1.0).epsilon(1e-12));

    rtn::Rng r(6);
    for (int i = 0; i < 20; ++i) {
        const double v = r.normal() * 3.0;
        auto p = rtn::gelu(TensorD::scalar(v)).item();
        auto n = rtn::gelu(TensorD::scalar(-v)).item();
        CHECK(p - n == doctest::Approx(v).epsilon(1e-10));
    }
}

TEST_CASE("relu clamps negatives") {
    auto x = TensorD::from_data({4}, {-2, -0.5, 0, 3});
    auto y = rtn::relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 0.0);
    CHECK(y.data()[3] == 3.0);
}

TEST_CASE("conv3d: identity kernel, counting kernel, reference agreement") {
    // 1x1x1 kernel with weight 1 reproduces the input
    rtn::Rng r(7);
    auto x = TensorD::randn({1, 3, 3, 3}, r);
    auto w = TensorD::from_data({1, 1, 1, 1, 1}, {1.0});
    auto y = rtn::conv3d(x, w, TensorD::zeros({1}), 1, 0);
    REQUIRE(y.shape() == Shape{1, 3, 3, 3});
    for (std::size_t i = 0; i < 27; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));

    // all-ones 3x3x3 kernel over an all-ones 3x3x3 input counts 27 cells
    auto ones = TensorD::full({1, 3, 3, 3}, 1.0);
    auto wones = TensorD::full({1, 1, 3, 3, 3}, 1.0);
    auto c = rtn::conv3d(ones, wones, TensorD(), 1, 0);
    REQUIRE(c.shape() == Shape{1, 1, 1, 1});
    CHECK(c.data()[0] == doctest::Approx(27.0).epsilon(1e-12));

    // random configurations against the bounds-checked reference
    for (int trial = 0; trial < 6; ++trial) {
        const std::int64_t Cin = 1 + static_cast<std::int64_t>(r.uniform_int(2));
        const std::int64_t Cout = 1 + static_cast<std::int64_t>(r.uniform_int(2));
        const std::int64_t D = 3 + static_cast<std::int64_t>(r.uniform_int(4));
        const std::int64_t K = 1 + 2 * static_cast<std::int64_t>(r.uniform_int(2));
        const std::int64_t stride = 1 + static_cast<std::int64_t>(r.uniform_int(2));
        const std::int64_t pad = static_cast<std::int64_t>(r.uniform_int(2));
        auto xi = TensorD::randn({Cin, D, D, D}, r);
        auto wi = TensorD::randn({Cout, Cin, K, K, K}, r);
        auto bi = TensorD::randn({Cout}, r);
        auto yi = rtn::conv3d(xi, wi, bi, stride, pad);
        auto ref = oracle::conv3d_ref({xi.data().begin(), xi.data().end()},
                                      {wi.data().begin(), wi.data().end()},
                                      {bi.data().begin(), bi.data().end()}, Cin, D, D, D, Cout, K,
                                      stride, pad);
        REQUIRE(static_cast<std::size_t>(yi.size()) == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(yi.data()[i] - ref[i]) < 1e-10);
    }

    // kernel larger than the padded input is rejected
    CHECK_THROWS_AS(rtn::conv3d(TensorD::zeros({1, 2, 2, 2}), TensorD::zeros({1, 1, 3, 3, 3}),
                               TensorD(), 1, 0),
                    std::invalid_argument);
}

TEST_CASE("conv3d float path stays within 1e-5 of the reference") {
    rtn::Rng r(8);
    auto x = TensorF::randn({2, 6, 6, 6}, r);
    auto w = TensorF::randn({3, 2, 3, 3, 3}, r);
    auto b = TensorF::randn({3}, r);
    auto y = rtn::conv3d(x, w, b, 2, 1);
    std::vector<double> xd(x.data().begin(), x.data().end());
    std::vector<double> wd(w.data().begin(), w.data().end());
    std::vector<double> bd(b.data().begin(), b.data().end());
    auto ref = oracle::conv3d_ref(xd, wd, bd, 2, 6, 6, 6, 3, 3, 2, 1);
    REQUIRE(static_cast<std::size_t>(y.size()) == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(static_cast<double>(y.data()[i]) - ref[i]) < 1e-5);
}

TEST_CASE("global_avg_pool averages spatial cells per channel") {
    auto x = TensorD::from_data({2, 1, 1, 2}, {1, 3, 10, 30});
    auto y = rtn::global_avg_pool(x);
    REQUIRE(y.shape() == Shape{2});
    CHECK(y.data()[0] == doctest::Approx(2.0));
    CHECK(y.data()[1] == doctest::Approx(20.0));
}

TEST_CASE("cross_entropy_logits: ln2, stability, reference agreement, label guard") {
    auto logits = TensorD::from_data({1, 2}, {0, 0});
    std::vector<int> label0{0};
    CHECK(rtn::cross_entropy_logits(logits, label0).item() ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));

    auto huge = TensorD::from_data({1, 2}, {1e3, -1e3});
    const double stable = rtn::cross_entropy_logits(huge, label0).item();
    CHECK(std::isfinite(stable));
    CHECK(stable == doctest::Approx(0.0));

    rtn::Rng r(9);
    auto batch = TensorD::randn({8, 2}, r);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(r.uniform_int(2)));
    const double got = rtn::cross_entropy_logits(batch, labels).item();
    const double want = oracle::cross_entropy_ref({batch.data().begin(), batch.data().end()}, labels, 8, 2);
    CHECK(got == doctest::Approx(want).epsilon(1e-6));

    std::vector<int> bad{2};
    CHECK_THROWS_AS(rtn::cross_entropy_logits(logits, bad), std::invalid_argument);
    std::vector<int> wrongcount{0, 1};
    CHECK_THROWS_AS(rtn::cross_entropy_logits(logits, wrongcount), std::invalid_argument);
}

TEST_CASE("slicing and stitching invert each other") {
    auto x = TensorD::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    auto top = rtn::slice_rows(x, 0, 1);
    auto rest = rtn::slice_rows(x, 1, 3);
    auto back = rtn::concat_rows<double>({top, rest});
    REQUIRE(back.shape() == x.shape());
    for (std::size_t i = 0; i < 6; ++i) CHECK(back.data()[i] == x.data()[i]);

    auto left = rtn::slice_cols(x, 0, 1);
    auto right = rtn::slice_cols(x, 1, 2);
    auto back2 = rtn::concat_cols<double>({left, right});
    for (std::size_t i = 0; i < 6; ++i) CHECK(back2.data()[i] == x.data()[i]);

    CHECK_THROWS_AS(rtn::slice_rows(x, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(rtn::slice_rows(x, 0, 4), std::invalid_argument);
    CHECK_THROWS_AS(rtn::slice_cols(x, -1, 1), std::invalid_argument);
}

TEST_CASE("gather_rows selects and accumulates duplicates on backward") {
    auto x = TensorD::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    std::vector<int> idx{2, 0, 2};
    auto g = rtn::gather_rows(x, idx);
    REQUIRE(g.shape() == Shape{3, 2});
    CHECK(g.data()[0] == 5.0);
    CHECK(g.data()[2] == 1.0);
    rtn::sum(g).backward();
    CHECK(x.grad()[0] == doctest::Approx(1.0));  // row 0 picked once
    CHECK(x.grad()[2] == doctest::Approx(0.0));  // row 1 never picked
    CHECK(x.grad()[4] == doctest::Approx(2.0));  // row 2 picked twice

    std::vector<int> bad{3};
    CHECK_THROWS_AS(rtn::gather_rows(x, bad), std::invalid_argument);
}

TEST_CASE("mean_over_rows and max_over_rows") {
    auto x = TensorD::from_data({3, 2}, {1, 9, 5, 2, 3, 2}, true);
    auto mean = rtn::mean_over_rows(x);
    REQUIRE(mean.shape() == Shape{1, 2});
    CHECK(mean.data()[0] == doctest::Approx(3.0));
    CHECK(mean.data()[1] == doctest::Approx(13.0 / 3.0));

    auto mx = rtn::max_over_rows(x);
    CHECK(mx.data()[0] == 5.0);
    CHECK(mx.data()[1] == 9.0);
    rtn::sum(mx).backward();
    // column 0 max at row 1, column 1 max at row 0; ties go to the lowest row
    CHECK(x.grad()[2] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(1.0));
    CHECK(x.grad()[0] == doctest::Approx(0.0));

    auto tied = TensorD::from_data({2, 1}, {4, 4}, true);
    auto mt = rtn::max_over_rows(tied);
    rtn::sum(mt).backward();
    CHECK(tied.grad()[0] == doctest::Approx(1.0));
    CHECK(tied.grad()[1] == doctest::Approx(0.0));
}

TEST_CASE("pick extracts one element and routes its gradient") {
    auto x = TensorD::from_data({2, 2}, {1, 2, 3, 4}, true);
    auto p = rtn::pick(x, 2);
    CHECK(p.item() == 3.0);
    p.backward();
    CHECK(x.grad()[2] == doctest::Approx(1.0));
    CHECK(x.grad()[0] == doctest::Approx(0.0));
    CHECK_THROWS_AS(rtn::pick(x, 4), std::invalid_argument);
    CHECK_THROWS_AS(rtn::pick(x, -1), std::invalid_argument);
}

TEST_CASE("log is elementwise natural log") {
    auto x = TensorD::from_data({2}, {1.0, std::exp(1.0)});
    auto y = rtn::log(x);
    CHECK(y.data()[0] == doctest::Approx(0.0));
    CHECK(y.data()[1] == doctest::Approx(1.0));
}
