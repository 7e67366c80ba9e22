#include "doctest.h"

#include <cmath>

#include "dba/oracles.hpp"

using namespace dba;

TEST_CASE("jl_minimum_dim formula values") {
    CHECK(jl_minimum_dim(16, 0.5) == 222);
    CHECK(jl_minimum_dim(16, 0.9) == 343);  // smaller eps^2 - eps^3 means a larger floor
    CHECK(jl_minimum_dim(2, 0.5) <= jl_minimum_dim(4, 0.5));
    CHECK(jl_minimum_dim(4, 0.5) <= jl_minimum_dim(16, 0.5));
    CHECK_THROWS_AS(jl_minimum_dim(16, 0.0), ParameterError);
    CHECK_THROWS_AS(jl_minimum_dim(16, 1.0), ParameterError);
    CHECK_THROWS_AS(jl_minimum_dim(1, 0.5), ParameterError);
}

TEST_CASE("jl_monte_carlo with explicit identity R never fails") {
    JlTrialReport rep = jl_monte_carlo(32, 8, 32, 0.5, 200, 3, 1, /*identity_r=*/true);
    CHECK(rep.failures == 0);
    CHECK(rep.pass());
}

TEST_CASE("jl_monte_carlo flags a vacuous bound") {
    JlTrialReport rep = jl_monte_carlo(16, 16, 8, 0.05, 100, 5, 1);
    CHECK(rep.vacuous);
    CHECK(rep.bound == 1.0);
    CHECK(rep.pass());  // clamped regime is trivially satisfied
    CHECK(rep.params_string().find("vacuous") != std::string::npos);
}

TEST_CASE("jl_monte_carlo satisfies the tail bound on sample grid cells") {
    // Full grid is exercised by the acceptance suite; two representative
    // cells here keep the unit run quick.
    JlTrialReport a = jl_monte_carlo(16, 16, jl_minimum_dim(16, 0.5), 0.5, 400, 11, 2);
    CHECK(a.pass());
    JlTrialReport b = jl_monte_carlo(16, 8, 2 * jl_minimum_dim(8, 0.3), 0.3, 400, 11, 2);
    CHECK(b.pass());
}

TEST_CASE("jl_monte_carlo is deterministic across thread counts") {
    JlTrialReport one = jl_monte_carlo(16, 8, 167, 0.5, 200, 9, 1);
    JlTrialReport two = jl_monte_carlo(16, 8, 167, 0.5, 200, 9, 4);
    CHECK(one.failures == two.failures);
}

TEST_CASE("jl_monte_carlo enforces the trial floor") {
    CHECK_THROWS_AS(jl_monte_carlo(16, 8, 100, 0.5, 99, 1), ParameterError);
}

TEST_CASE("representability: rank claim verified constructively") {
    RepresentabilityReport rep = lowrank_representability_check(32, 8, 8, 21);
    CHECK(rep.measured_rank == 8);
    CHECK(rep.exact_error < 1e-8);
    CHECK(rep.pass);
}

TEST_CASE("representability: rank-1 outer product case") {
    RepresentabilityReport rep = lowrank_representability_check(16, 8, 1, 5);
    CHECK(rep.measured_rank == 1);
    CHECK(rep.exact_error < 1e-10);
    CHECK(rep.pass);
}

TEST_CASE("representability holds for every r at n=24, d=12") {
    for (std::size_t r = 1; r <= 12; ++r) {
        CAPTURE(r);
        RepresentabilityReport rep = lowrank_representability_check(24, 12, r, 100 + r);
        CHECK(rep.pass);
    }
}

TEST_CASE("identity scores have full rank and any truncation errs") {
    Tensor m = matmul(Tensor::identity(16), transpose(Tensor::identity(16)));
    CHECK(numeric_rank(m) == 16);
    for (std::size_t r : {std::size_t{4}, std::size_t{15}})
        CHECK(lowrank_relative_error(m, r) > 1e-4);
    CHECK(lowrank_relative_error(m, 16) < 1e-12);
}

TEST_CASE("representability rejects r beyond min(n, d)") {
    CHECK_THROWS_AS(lowrank_representability_check(24, 12, 13, 1), ParameterError);
}

TEST_CASE("reduction identity oracle") {
    CHECK(reduction_identity_max_deviation(16, 16, 5) <= 1e-10);
}

TEST_CASE("gradcheck_layer small configs stay within 1e-5") {
    AttentionConfig cfg;
    cfg.seq_len = 6;
    cfg.model_dim = 8;
    cfg.comp_len = 3;
    cfg.comp_dim = 4;
    cfg.heads = 2;
    cfg.mechanism = Mechanism::dba;
    for (std::uint64_t seed : {3, 7}) {
        GradcheckReport rep = gradcheck_layer(cfg, seed);
        CAPTURE(seed);
        CHECK(rep.max_discrepancy <= 1e-5);
        CHECK(rep.per_tensor.size() == 9);
    }
}

TEST_CASE("gradcheck_layer rejects oversized configs") {
    AttentionConfig cfg;
    cfg.seq_len = 128;
    cfg.model_dim = 8;
    cfg.comp_len = 3;
    cfg.comp_dim = 4;
    cfg.heads = 1;
    CHECK_THROWS_AS(gradcheck_layer(cfg, 1), ParameterError);
}

TEST_CASE("gradcheck at a degenerate point: zero params except wv = I") {
    AttentionConfig cfg;
    cfg.seq_len = 5;
    cfg.model_dim = 6;
    cfg.comp_len = 3;
    cfg.comp_dim = 4;
    cfg.heads = 1;
    cfg.mechanism = Mechanism::dba;
    Rng rng(2);
    DbaParams p = make_dba_params(cfg, rng);
    p.slots = Tensor::zeros(3, 6);
    p.dim_proj = Tensor::zeros(6, 4);
    p.restore_map = Tensor::zeros(6, 3);
    p.pool_map = Tensor::zeros(6, 3);
    p.wq = Tensor::zeros(6, 6);
    p.wk = Tensor::zeros(6, 6);
    p.wo = Tensor::zeros(6, 6);
    p.wv = Tensor::identity(6);
    Tensor x = uniform_tensor(rng, 5, 6, -1.0, 1.0);

    Tape tape;
    TapeContext tctx{&tape};
    DbaParamsT<Var> lifted = lift(tape, p);
    Var xv = tape.parameter(x);
    Var loss = tape.scale(sum_all(tape, tape.square(dba_self_attention(tctx, xv, lifted, cfg))), 0.5);
    GradMap grads = tape.backward(loss);

    auto f = [&](const Tensor& probe) {
        DbaParams q = p;
        q.wv = probe;
        EagerContext ctx;
        Tensor y = dba_self_attention(ctx, x, q, cfg);
        double s = 0.0;
        for (double v : y.flat()) s += v * v;
        return 0.5 * s;
    };
    Tensor fd = finite_diff_grad(f, p.wv, 1e-5);
    const Tensor& ad = grads.at(lifted.wv.id);
    for (std::size_t i = 0; i < fd.numel(); ++i)
        CHECK(std::abs(ad.data()[i] - fd.data()[i]) /
                  std::max({1.0, std::abs(ad.data()[i]), std::abs(fd.data()[i])}) <= 1e-5);
}

TEST_CASE("zero input gives exactly zero slot gradients") {
    AttentionConfig cfg;
    cfg.seq_len = 5;
    cfg.model_dim = 6;
    cfg.comp_len = 3;
    cfg.comp_dim = 4;
    cfg.heads = 1;
    cfg.mechanism = Mechanism::dba;
    Rng rng(13);
    DbaParams p = make_dba_params(cfg, rng);
    Tensor x = Tensor::zeros(5, 6);

    Tape tape;
    TapeContext tctx{&tape};
    DbaParamsT<Var> lifted = lift(tape, p);
    Var loss = tape.scale(sum_all(tape, tape.square(dba_self_attention(tctx, tape.constant(x), lifted, cfg))), 0.5);
    GradMap grads = tape.backward(loss);
    CHECK(max_abs(grads.at(lifted.slots.id)) == 0.0);
}

TEST_CASE("gradcheck_cross_layer stays within 1e-5") {
    AttentionConfig cfg;
    cfg.seq_len = 5;
    cfg.model_dim = 8;
    cfg.comp_len = 3;
    cfg.comp_dim = 4;
    cfg.heads = 2;
    cfg.mechanism = Mechanism::dba;
    GradcheckReport rep = gradcheck_cross_layer(cfg, 5, 7, 4);
    CHECK(rep.max_discrepancy <= 1e-5);
    CHECK(rep.per_tensor.count("p1.cross_slot_map") == 1);
    CHECK(rep.per_tensor.count("x2") == 1);
}

TEST_CASE("score approximation quality survives the layer's own compressed blocks") {
    // Compressed-score gap with a resampled hidden projection, using blocks
    // produced by the dynamic projections rather than raw Gaussians. Success
    // fraction must beat 1 - bound.
    const std::size_t n = 32, d = 16, dp = 8;
    const double eps = 0.5;
    const std::size_t din = jl_minimum_dim(dp, eps);
    const double bound = jl_failure_bound(dp, din, eps);
    const std::size_t trials = 2000;

    Rng rng(31);
    std::size_t ok = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng trial = rng.split(t);
        Tensor x = gaussian(trial, n, d, 1.0);
        Tensor slots = gaussian(trial, dp, d, 1.0 / d);
        auto [comp_q, comp_k] = dynamic_projections(slots, x, x);
        Tensor a = matmul(comp_q, x);             // dp x d
        Tensor b = transpose(matmul(comp_k, x));  // d x dp
        Tensor exact = matmul(a, b);
        Tensor r = gaussian(trial, d, din, 1.0 / static_cast<double>(din));
        Tensor approx = matmul(matmul(a, r), matmul(transpose(r), b));
        if (frobenius_norm(sub(approx, exact)) <= eps * frobenius_norm(exact)) ++ok;
    }
    const double fraction = static_cast<double>(ok) / trials;
    CHECK(fraction >= std::max(0.0, 1.0 - bound));
}

TEST_CASE("check records serialize with the exact key set") {
    CheckRecord rec{"jl_monte_carlo", "d=16 d_p=8", 2000, 3, 0.25, true};
    const std::string line = to_json_line(rec);
    CHECK(line == "{\"check\":\"jl_monte_carlo\",\"params\":\"d=16 d_p=8\",\"trials\":2000,"
                  "\"failures\":3,\"bound\":0.25,\"pass\":true}");
}
