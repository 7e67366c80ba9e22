#include "doctest.h"

#include <cmath>

#include "dba/rng.hpp"
#include "dba/tensor.hpp"

using namespace dba;

TEST_CASE("matmul identity passthrough") {
    Rng rng(3);
    Tensor x = gaussian(rng, 2, 5, 1.0);
    Tensor y = matmul(Tensor::identity(2), x);
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("matmul hand example") {
    Tensor a = Tensor::from_rows(2, 2, {1, 2, 3, 4});
    Tensor b = Tensor::from_rows(2, 1, {5, 6});
    Tensor c = matmul(a, b);
    CHECK(c(0, 0) == doctest::Approx(17.0));
    CHECK(c(1, 0) == doctest::Approx(39.0));
}

TEST_CASE("matmul zero annihilator") {
    Rng rng(11);
    Tensor z = Tensor::zeros(3, 4);
    Tensor b = gaussian(rng, 4, 2, 1.0);
    Tensor c = matmul(z, b);
    CHECK(c.rows() == 3);
    CHECK(c.cols() == 2);
    CHECK(max_abs(c) == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a(2, 3);
    Tensor b(4, 2);
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul associativity within 1e-9 on random 8x8") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = gaussian(rng, 8, 8, 1.0);
        Tensor b = gaussian(rng, 8, 8, 1.0);
        Tensor c = gaussian(rng, 8, 8, 1.0);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        CHECK(max_abs_diff(left, right) / std::max(1.0, max_abs(left)) < 1e-9);
    }
}

TEST_CASE("softmax of zero row is uniform") {
    Tensor x(1, 4);
    Tensor y = softmax_rows(x);
    for (std::size_t j = 0; j < 4; ++j) CHECK(y(0, j) == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("softmax closed form [0, ln 3]") {
    Tensor x = Tensor::from_rows(1, 2, {0.0, std::log(3.0)});
    Tensor y = softmax_rows(x);
    CHECK(y(0, 0) == doctest::Approx(0.25).epsilon(1e-13));
    CHECK(y(0, 1) == doctest::Approx(0.75).epsilon(1e-13));
}

TEST_CASE("softmax shift invariance") {
    Rng rng(5);
    Tensor x = gaussian(rng, 3, 6, 4.0);
    Tensor shifted = x;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += 13.75;
    CHECK(max_abs_diff(softmax_rows(x), softmax_rows(shifted)) < 1e-14);
}

TEST_CASE("softmax rows sum to one, extreme logits included") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = uniform_tensor(rng, 4, 9, -700.0, 700.0);
        Tensor y = softmax_rows(x);
        CHECK(y.all_finite());
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double sum = 0.0;
            double mn = 1.0;
            for (std::size_t j = 0; j < y.cols(); ++j) {
                sum += y(i, j);
                mn = std::min(mn, y(i, j));
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
            CHECK(mn >= 0.0);
        }
    }
}

TEST_CASE("gaussian is seed-deterministic") {
    Rng a(7), b(7);
    Tensor x = gaussian(a, 2, 2, 1.0);
    Tensor y = gaussian(b, 2, 2, 1.0);
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("gaussian moments at 1e5 samples") {
    Rng rng(42);
    const double var = 1.0 / 64.0;
    Tensor x = gaussian(rng, 100000, 1, var);
    double mean = 0.0;
    for (double v : x.flat()) mean += v;
    mean /= 1e5;
    double ss = 0.0;
    for (double v : x.flat()) ss += (v - mean) * (v - mean);
    const double sample_var = ss / (1e5 - 1.0);
    CHECK(std::abs(sample_var - var) / var < 0.05);

    Rng rng2(43);
    Tensor z = gaussian(rng2, 100000, 1, 1.0);
    double zmean = 0.0;
    for (double v : z.flat()) zmean += v;
    zmean /= 1e5;
    CHECK(std::abs(zmean) < 0.01);
}

TEST_CASE("gaussian rejects nonpositive variance") {
    Rng rng(1);
    CHECK_THROWS_AS(gaussian(rng, 2, 2, 0.0), ParameterError);
    CHECK_THROWS_AS(gaussian(rng, 2, 2, -1.0), ParameterError);
}

TEST_CASE("rng split streams are independent of draw order") {
    Rng base(99);
    Rng a = base.split(0);
    Rng b = base.split(1);
    const double a0 = a.normal();
    Rng base2(99);
    Rng b2 = base2.split(1);
    Rng a2 = base2.split(0);
    CHECK(b.normal() == b2.normal());
    CHECK(a0 == a2.normal());
}

TEST_CASE("rms_norm normalizes rows and applies gain") {
    Tensor x = Tensor::from_rows(1, 2, {3.0, 4.0});
    Tensor gain = Tensor::from_rows(1, 2, {2.0, 1.0});
    Tensor y = rms_norm(x, gain);
    const double rms = std::sqrt((9.0 + 16.0) / 2.0 + kRmsNormEps);
    CHECK(y(0, 0) == doctest::Approx(2.0 * 3.0 / rms));
    CHECK(y(0, 1) == doctest::Approx(4.0 / rms));
}

TEST_CASE("row_mean averages over rows") {
    Tensor x = Tensor::from_rows(2, 3, {1, 2, 3, 3, 4, 5});
    Tensor y = row_mean(x);
    CHECK(y.rows() == 1);
    CHECK(y(0, 0) == doctest::Approx(2.0));
    CHECK(y(0, 1) == doctest::Approx(3.0));
    CHECK(y(0, 2) == doctest::Approx(4.0));
}

TEST_CASE("cross_entropy_logits matches log-softmax by hand") {
    Tensor logits = Tensor::from_rows(1, 3, {1.0, 2.0, 3.0});
    Tensor loss = cross_entropy_logits(logits, {2});
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(loss(0, 0) == doctest::Approx(-std::log(std::exp(3.0) / denom)));
}

TEST_CASE("text dump round trip keeps every bit") {
    Rng rng(21);
    Tensor x = gaussian(rng, 3, 4, 2.0);
    Tensor y = parse_text(dump_text(x));
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("text dump format: shape line then rows") {
    Tensor x = Tensor::from_rows(2, 2, {1.0, 0.5, -2.0, 3.0});
    const std::string s = dump_text(x);
    CHECK(s.substr(0, 4) == "2 2\n");
    CHECK(s.find("1 0.5\n") != std::string::npos);
}

TEST_CASE("allocation log records tensor allocations") {
    AllocationLog log;
    {
        ScopedAllocationLog guard(log);
        Tensor a(16, 16);
        Tensor b(4, 4);
        CHECK(log.live_bytes == (256 + 16) * sizeof(double));
    }
    CHECK(log.live_bytes == 0);
    CHECK(log.saw_allocation_of(256 * sizeof(double)));
    CHECK(log.peak_bytes == (256 + 16) * sizeof(double));
}
