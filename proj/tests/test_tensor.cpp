#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "n3/tensor.hpp"

using namespace n3;

namespace {

// Independent oracle: elementwise triple loop, long double accumulators.
Mat matmul_oracle(const Mat& a, const Mat& b) {
    Mat out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            long double acc = 0.0L;
            for (int k = 0; k < a.cols(); ++k)
                acc += static_cast<long double>(a(i, k)) * static_cast<long double>(b(k, j));
            out(i, j) = static_cast<double>(acc);
        }
    return out;
}

// Independent oracle: direct exp/sum at extended precision, no max shift.
std::vector<double> softmax_oracle(std::span<const double> x) {
    long double z = 0.0L;
    for (double v : x) z += expl(static_cast<long double>(v));
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<double>(expl(static_cast<long double>(x[i])) / z);
    return out;
}

double max_abs_diff(const Mat& a, const Mat& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("grid flattening is temporal-major raster order") {
    Grid3 g{4, 4, 2};
    CHECK(g.flat(0, 0, 0) == 0);
    CHECK(g.flat(0, 1, 0) == 1);
    CHECK(g.flat(1, 0, 0) == 4);
    CHECK(g.flat(0, 0, 1) == 16);
    for (int t = 0; t < g.size(); ++t) CHECK(g.flat(g.unflat(t)) == t);
}

TEST_CASE("matmul identity and selector") {
    Mat m = Mat::from({{1, 2}, {3, 4}});
    CHECK(max_abs_diff(matmul(Mat::identity(2), m), m) == 0.0);

    Mat sel = Mat::from({{1, 0}});
    Mat col = Mat::from({{7.5}, {-2.0}});
    Mat r = matmul(sel, col);
    CHECK(r.rows() == 1);
    CHECK(r.cols() == 1);
    CHECK(r(0, 0) == 7.5);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(11);
    Mat a = rng.matrix(3, 4, -1, 1);
    Mat b = rng.matrix(4, 2, -1, 1);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
    Mat a(2, 3), b(4, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: shape mismatch (2x3 vs 4x2)",
                         std::invalid_argument);
}

TEST_CASE("matmul associativity on random triples") {
    Rng rng(5);
    for (int it = 0; it < 20; ++it) {
        Mat a = rng.matrix(1 + rng.index(4), 1 + rng.index(4), -2, 2);
        Mat b = rng.matrix(a.cols(), 1 + rng.index(4), -2, 2);
        Mat c = rng.matrix(b.cols(), 1 + rng.index(4), -2, 2);
        Mat lhs = matmul(matmul(a, b), c);
        Mat rhs = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < lhs.data().size(); ++i) {
            const double scale = std::max(1.0, std::abs(lhs.data()[i]));
            CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) / scale < 1e-9);
        }
    }
}

TEST_CASE("softmax symmetry, stability, oracle") {
    auto u = softmax_last(std::vector<double>{0, 0, 0});
    for (double v : u) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

    auto s = softmax_last(std::vector<double>{1000, 0});
    CHECK(std::isfinite(s[0]));
    CHECK(s[0] == doctest::Approx(1.0));
    CHECK(s[1] == doctest::Approx(0.0));

    std::vector<double> x{1, 2, 3};
    auto got = softmax_last(x);
    auto want = softmax_oracle(x);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-15);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    Rng rng(3);
    for (int it = 0; it < 30; ++it) {
        std::vector<double> x(1 + rng.index(8));
        for (double& v : x) v = rng.uniform(-5, 5);
        auto p = softmax_last(x);
        double total = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);

        std::vector<double> shifted = x;
        for (double& v : shifted) v += 7.25;
        auto q = softmax_last(shifted);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
    }
}

TEST_CASE("softmax rejects non-finite input") {
    CHECK_THROWS_AS(softmax_last(std::vector<double>{1.0, std::nan("")}), std::domain_error);
    CHECK_THROWS_AS(
        softmax_last(std::vector<double>{1.0, std::numeric_limits<double>::infinity()}),
        std::domain_error);
    CHECK_THROWS_AS(
        softmax_last(std::vector<double>{1.0, -std::numeric_limits<double>::infinity()}),
        std::domain_error);
}

TEST_CASE("layer_norm constant input and already normalized input") {
    std::vector<double> gain{1, 1, 1}, bias{0, 0, 0};
    auto z = layer_norm(std::vector<double>{4.2, 4.2, 4.2}, gain, bias, 1e-12);
    for (double v : z) CHECK(v == 0.0);

    auto y = layer_norm(std::vector<double>{-1, 1}, std::vector<double>{1, 1},
                        std::vector<double>{0, 0}, 0.0);
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("layer_norm output statistics") {
    Rng rng(9);
    std::vector<double> x(8), gain(8, 1.0), bias(8, 0.0);
    for (double& v : x) v = rng.uniform(-3, 3);
    auto y = layer_norm(x, gain, bias, 1e-12);
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= 8;
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean);
    var /= 8;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-9);
}

TEST_CASE("cross entropy: uniform, saturated, formula oracle") {
    std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
    CHECK(cross_entropy_logits(flat, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-14));

    std::vector<double> hot{0, 0, 1e6, 0};
    CHECK(cross_entropy_logits(hot, 2) == doctest::Approx(0.0));

    std::vector<double> x{1, 2, 3};
    const double direct = -std::log(softmax_oracle(x)[0]);
    CHECK(std::abs(cross_entropy_logits(x, 0) - direct) < 1e-12);

    CHECK_THROWS_AS(cross_entropy_logits(x, 3), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy_logits(x, -1), std::out_of_range);
}

TEST_CASE("backward: closed forms") {
    SUBCASE("x*x at 3 has gradient 6") {
        Tape tape;
        auto x = tape.leaf(Mat::from({{3.0}}));
        auto loss = tape.mul(x, x);
        tape.backward(loss);
        CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
    }
    SUBCASE("unreachable leaf gets zero gradient") {
        Tape tape;
        auto x = tape.leaf(Mat::from({{3.0}}));
        auto p = tape.leaf(Mat::from({{1.0, 2.0}}));
        auto loss = tape.mul(x, x);
        tape.backward(loss);
        CHECK(tape.grad(p)(0, 0) == 0.0);
        CHECK(tape.grad(p)(0, 1) == 0.0);
    }
    SUBCASE("loss must be scalar") {
        Tape tape;
        auto x = tape.leaf(Mat(2, 2, 1.0));
        CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    }
}

TEST_CASE("finite_diff_check: quadratic, softmax+CE, constant") {
    SUBCASE("sum of squares is exact up to rounding") {
        auto probe = [](const std::vector<Mat>& params, bool need) {
            GradProbe out;
            Tape tape;
            auto p = tape.leaf(params[0]);
            auto loss = tape.sum(tape.mul(p, p));
            out.value = tape.value(loss)(0, 0);
            if (need) {
                tape.backward(loss);
                out.grads = {tape.grad(p)};
            }
            return out;
        };
        Rng rng(4);
        CHECK(finite_diff_check(probe, {rng.matrix(2, 3, -1, 1)}, 1e-5) < 1e-8);
    }
    SUBCASE("softmax + cross entropy on 3 logits") {
        auto probe = [](const std::vector<Mat>& params, bool need) {
            GradProbe out;
            Tape tape;
            auto p = tape.leaf(params[0]);
            auto loss = tape.sum(tape.ce_rows(p, {1}));
            out.value = tape.value(loss)(0, 0);
            if (need) {
                tape.backward(loss);
                out.grads = {tape.grad(p)};
            }
            return out;
        };
        CHECK(finite_diff_check(probe, {Mat::from({{0.3, -1.2, 0.8}})}, 1e-5) < 1e-6);
    }
    SUBCASE("constant function has zero gradient and zero error") {
        auto probe = [](const std::vector<Mat>& params, bool need) {
            GradProbe out;
            Tape tape;
            auto p = tape.leaf(params[0]);
            auto loss = tape.sum(tape.detach(p));
            out.value = tape.value(loss)(0, 0);
            if (need) {
                tape.backward(loss);
                out.grads = {tape.grad(p)};
                for (double g : out.grads[0].data()) CHECK(g == 0.0);
            }
            return out;
        };
        CHECK(finite_diff_check(probe, {Mat(2, 2, 1.5)}, 1e-5) == 0.0);
    }
}

TEST_CASE("backward on a composite of primitives matches finite differences") {
    // One attention-free transformer-ish block: matmul, bias, layer norm,
    // gelu, softmax, gather, concat, cross entropy.
    auto probe = [](const std::vector<Mat>& params, bool need) {
        GradProbe out;
        Tape tape;
        auto table = tape.leaf(params[0]);   // 4 x 3 embedding
        auto w = tape.leaf(params[1]);       // 3 x 3
        auto b = tape.leaf(params[2]);       // 1 x 3
        auto gain = tape.leaf(params[3]);    // 1 x 3
        auto bias = tape.leaf(params[4]);    // 1 x 3
        auto extra = tape.leaf(params[5]);   // 1 x 3 row to concat

        auto x = tape.gather_rows(table, {0, 2, 3});
        auto h = tape.layer_norm_rows(x, gain, bias);
        h = tape.gelu(tape.add_row(tape.matmul(h, w), b));
        h = tape.concat_rows(h, extra);
        h = tape.softmax_rows(h);
        auto loss = tape.sum(tape.ce_rows(tape.matmul(h, w), {1, 0, 2, 1}));
        out.value = tape.value(loss)(0, 0);
        if (need) {
            tape.backward(loss);
            out.grads = {tape.grad(table), tape.grad(w),    tape.grad(b),
                         tape.grad(gain),  tape.grad(bias), tape.grad(extra)};
        }
        return out;
    };
    Rng rng(21);
    std::vector<Mat> params{rng.matrix(4, 3, -1, 1),   rng.matrix(3, 3, -0.7, 0.7),
                            rng.matrix(1, 3, -0.5, 0.5), rng.matrix(1, 3, 0.5, 1.5),
                            rng.matrix(1, 3, -0.5, 0.5), rng.matrix(1, 3, -1, 1)};
    CHECK(finite_diff_check(probe, params, 1e-5) < 1e-4);
}

TEST_CASE("matmul_nt agrees with explicit transpose") {
    Rng rng(17);
    Mat a = rng.matrix(3, 5, -1, 1);
    Mat b = rng.matrix(4, 5, -1, 1);
    Mat bt(5, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) bt(j, i) = b(i, j);
    CHECK(max_abs_diff(matmul_nt(a, b), matmul_oracle(a, bt)) < 1e-12);
}

TEST_CASE("seeded computation replays bit-identically") {
    auto run = [] {
        Rng rng(123);
        Mat a = rng.matrix(4, 4, -1, 1);
        Mat b = rng.matrix(4, 4, -1, 1);
        Tape tape;
        auto va = tape.leaf(a);
        auto vb = tape.leaf(b);
        auto loss = tape.sum(tape.gelu(tape.matmul(va, vb)));
        tape.backward(loss);
        std::vector<double> bits = tape.value(loss).data();
        auto g = tape.grad(va).data();
        bits.insert(bits.end(), g.begin(), g.end());
        return bits;
    };
    auto r1 = run();
    auto r2 = run();
    REQUIRE(r1.size() == r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("tensor4 layout and N3DT round trip") {
    Tensor4 t(2, 3, 2, 2);
    for (int k = 0; k < 2; ++k)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j)
                for (int c = 0; c < 2; ++c) t.at(i, j, k, c) = 100 * k + 10 * i + j + 0.5 * c;
    // canonical layout: k outermost, then i, then j, channels innermost
    CHECK(t.data()[0] == t.at(0, 0, 0, 0));
    CHECK(t.data()[1] == t.at(0, 0, 0, 1));
    CHECK(t.data()[2] == t.at(0, 1, 0, 0));
    CHECK(t.data()[2 * 3 * 2] == t.at(1, 0, 0, 0));
    CHECK(t.data()[2 * 3 * 2 * 2] == t.at(0, 0, 1, 0));

    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "N3DT");
    CHECK(bytes.size() == 4 + 16 + 2 * 3 * 2 * 2 * 8);
    Tensor4 back = read_tensor(ss);
    CHECK(back.grid() == t.grid());
    CHECK(back.d() == t.d());
    CHECK(back.data() == t.data());

    Mat m = t.to_matrix();
    CHECK(m.rows() == 12);
    CHECK(m.cols() == 2);
    Tensor4 again = Tensor4::from_matrix(t.grid(), m);
    CHECK(again.data() == t.data());
}

TEST_CASE("tensor file with bad magic is rejected") {
    std::stringstream ss;
    ss << "XXXX";
    CHECK_THROWS_AS(read_tensor(ss), std::runtime_error);
}

TEST_CASE("tensor4 rejects zero dims") {
    CHECK_THROWS_AS(Tensor4(0, 1, 1, 1), std::invalid_argument);
}
