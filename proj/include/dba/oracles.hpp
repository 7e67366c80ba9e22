#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dba/attention.hpp"
#include "dba/autodiff.hpp"
#include "dba/rng.hpp"
#include "dba/svd.hpp"
#include "dba/tensor.hpp"

namespace dba {

// ---------------------------------------------------------------------------
// Johnson-Lindenstrauss bound checks
// ---------------------------------------------------------------------------

/// Smallest projected dimension for which the JL tail bound guarantees a
/// relative score error <= epsilon: ceil(10 ln(d_p) / (eps^2 - eps^3)).
/// The log is natural; the bound it derives from is e-based.
inline std::size_t jl_minimum_dim(std::size_t d_p, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ParameterError("jl_minimum_dim: epsilon must lie in (0, 1)");
    if (d_p < 2) throw ParameterError("jl_minimum_dim: d_p must be >= 2");
    const double denom = epsilon * epsilon - epsilon * epsilon * epsilon;
    return static_cast<std::size_t>(std::ceil(10.0 * std::log(static_cast<double>(d_p)) / denom));
}

/// Theoretical failure probability 2 d_p^2 e^{-(eps^2 - eps^3) d_in / 4},
/// clamped to [0, 1].
inline double jl_failure_bound(std::size_t d_p, std::size_t d_in, double epsilon) {
    const double denom = epsilon * epsilon - epsilon * epsilon * epsilon;
    const double raw = 2.0 * static_cast<double>(d_p) * static_cast<double>(d_p) *
                       std::exp(-denom * static_cast<double>(d_in) / 4.0);
    return std::min(1.0, raw);
}

struct JlTrialReport {
    std::size_t d = 0, d_p = 0, d_in = 0;
    double epsilon = 0.0;
    std::size_t trials = 0;
    std::size_t failures = 0;
    double bound = 0.0;
    bool vacuous = false;  // bound clamped at 1, check trivially satisfied

    double empirical_rate() const {
        return trials ? static_cast<double>(failures) / static_cast<double>(trials) : 0.0;
    }
    /// Three-sigma binomial slack plus an absolute floor so Monte Carlo noise
    /// cannot flake the check.
    double slack() const {
        return 3.0 * std::sqrt(bound * (1.0 - bound) / static_cast<double>(trials)) + 0.01;
    }
    bool pass() const { return empirical_rate() <= bound + slack(); }
    std::string params_string() const {
        std::ostringstream os;
        os << "d=" << d << " d_p=" << d_p << " d_in=" << d_in << " eps=" << epsilon;
        if (vacuous) os << " (vacuous bound)";
        return os.str();
    }
};

/// One trial: are compressed scores preserved by a random projection of the
/// hidden dimension? A and B stand in for the already length-compressed
/// query/key blocks; the lemma being exercised constrains only R, so they
/// are sampled as standard Gaussians. R has i.i.d. N(0, 1/d_in) entries --
/// the scaling that makes E[R R^T] the identity.
inline bool jl_trial_fails(Rng& rng, std::size_t d, std::size_t d_p, std::size_t d_in, double epsilon,
                           bool identity_r) {
    Tensor a = gaussian(rng, d_p, d, 1.0);
    Tensor b = gaussian(rng, d, d_p, 1.0);
    Tensor exact = matmul(a, b);
    Tensor approx;
    if (identity_r) {
        if (d_in != d) throw ParameterError("jl_trial: identity R requires d_in == d");
        approx = exact;
    } else {
        Tensor r = gaussian(rng, d, d_in, 1.0 / static_cast<double>(d_in));
        approx = matmul(matmul(a, r), matmul(transpose(r), b));
    }
    return frobenius_norm(sub(approx, exact)) > epsilon * frobenius_norm(exact);
}

/// Trials are independent; they fan out across threads with per-trial
/// generators derived by seed splitting, so the thread count never changes
/// the outcome.
inline JlTrialReport jl_monte_carlo(std::size_t d, std::size_t d_p, std::size_t d_in, double epsilon,
                                    std::size_t trials, std::uint64_t seed, unsigned threads = 0,
                                    bool identity_r = false) {
    if (trials < 100) throw ParameterError("jl_monte_carlo: need at least 100 trials");
    JlTrialReport report;
    report.d = d;
    report.d_p = d_p;
    report.d_in = d_in;
    report.epsilon = epsilon;
    report.trials = trials;
    const double raw_bound = 2.0 * static_cast<double>(d_p) * static_cast<double>(d_p) *
                             std::exp(-(epsilon * epsilon - epsilon * epsilon * epsilon) *
                                      static_cast<double>(d_in) / 4.0);
    report.vacuous = raw_bound >= 1.0;
    report.bound = std::min(1.0, raw_bound);

    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, 16);
    const Rng base(seed);
    std::vector<std::size_t> failures(threads, 0);
    auto worker = [&](unsigned w) {
        for (std::size_t t = w; t < trials; t += threads) {
            Rng trial_rng = base.split(t);
            if (jl_trial_fails(trial_rng, d, d_p, d_in, epsilon, identity_r)) ++failures[w];
        }
    };
    if (threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) pool.emplace_back(worker, w);
        for (auto& th : pool) th.join();
    }
    for (std::size_t f : failures) report.failures += f;
    return report;
}

// ---------------------------------------------------------------------------
// Low-rank representability
// ---------------------------------------------------------------------------

struct RepresentabilityReport {
    std::size_t n = 0, d = 0, r = 0;
    std::size_t measured_rank = 0;
    double exact_error = 0.0;   // relative Frobenius error of the rank-r truncation
    double strict_error = 0.0;  // error of the rank-(r-1) truncation (0 when r == 1)
    bool pass = false;

    std::string params_string() const {
        std::ostringstream os;
        os << "n=" << n << " d=" << d << " r=" << r;
        return os.str();
    }
};

/// Constructive check of the rank claim: a score matrix built from rank-r
/// inputs has numeric rank <= r, is recovered exactly by a rank-r truncated
/// SVD, and is *not* recovered at rank r-1.
inline RepresentabilityReport lowrank_representability_check(std::size_t n, std::size_t d, std::size_t r,
                                                             std::uint64_t seed) {
    if (r == 0 || r > std::min(n, d))
        throw ParameterError("lowrank_representability_check: need 1 <= r <= min(n, d)");
    Rng rng(seed);
    Tensor q = matmul(gaussian(rng, n, r, 1.0), gaussian(rng, r, d, 1.0));
    Tensor k = matmul(gaussian(rng, n, r, 1.0), gaussian(rng, r, d, 1.0));
    Tensor scores = matmul(q, transpose(k));

    RepresentabilityReport rep;
    rep.n = n;
    rep.d = d;
    rep.r = r;
    rep.measured_rank = numeric_rank(scores);
    rep.exact_error = lowrank_relative_error(scores, r);
    rep.strict_error = r >= 2 ? lowrank_relative_error(scores, r - 1) : 0.0;
    rep.pass = rep.measured_rank <= r && rep.exact_error < 1e-8 && (r < 2 || rep.strict_error > 1e-4);
    return rep;
}

// ---------------------------------------------------------------------------
// Reduction identity
// ---------------------------------------------------------------------------

/// With both compressions disabled and identity projections, the compressed
/// layer must reproduce baseline attention exactly. Returns the worst
/// max-abs deviation across seeds.
inline double reduction_identity_max_deviation(std::size_t n, std::size_t d, std::size_t seeds) {
    AttentionConfig cfg;
    cfg.seq_len = n;
    cfg.model_dim = d;
    cfg.comp_len = n;
    cfg.comp_dim = d;
    cfg.heads = 1;
    cfg.mechanism = Mechanism::dba;

    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        Rng rng(seed);
        DbaParams p = make_dba_params(cfg, rng);
        p.wq = Tensor::identity(d);
        p.wk = Tensor::identity(d);
        p.wv = Tensor::identity(d);
        p.wo = Tensor::identity(d);
        Tensor x = gaussian(rng, n, d, 1.0);
        EagerContext ctx;
        Tensor reduced = dba_self_attention_flags(ctx, x, p, cfg, false, false);
        Tensor baseline = vanilla_attention(x, x, x);
        worst = std::max(worst, max_abs_diff(reduced, baseline));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Layer-level gradient checks
// ---------------------------------------------------------------------------

struct GradcheckReport {
    std::map<std::string, double> per_tensor;  // max relative discrepancy per tensor
    double max_discrepancy = 0.0;

    void note(const std::string& name, double v) {
        per_tensor[name] = v;
        max_discrepancy = std::max(max_discrepancy, v);
    }
};

namespace detail {

inline double gradcheck_rel(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
    }
    return worst;
}

inline double half_sum_squares(const Tensor& t) {
    double s = 0.0;
    for (double v : t.flat()) s += v * v;
    return 0.5 * s;
}

}  // namespace detail

/// Compares reverse-mode gradients of loss = sum(layer(X)^2)/2 against
/// central finite differences for every parameter tensor and the input.
inline GradcheckReport gradcheck_layer(const AttentionConfig& cfg, std::uint64_t seed, double h = 1e-5) {
    if (cfg.seq_len > 16 || cfg.model_dim > 16)
        throw ParameterError("gradcheck_layer: keep n <= 16 and d <= 16 for tractable finite differences");
    cfg.validate();

    Rng rng(seed);
    DbaParams params = make_dba_params(cfg, rng);
    Tensor x = uniform_tensor(rng, cfg.seq_len, cfg.model_dim, -1.0, 1.0);

    Tape tape;
    TapeContext tctx{&tape};
    DbaParamsT<Var> lifted = lift(tape, params);
    Var xv = tape.parameter(x);
    Var y = dba_self_attention(tctx, xv, lifted, cfg);
    Var loss = tape.scale(sum_all(tape, tape.square(y)), 0.5);
    GradMap grads = tape.backward(loss);

    auto loss_with = [&](const DbaParams& p, const Tensor& xin) {
        EagerContext ctx;
        return detail::half_sum_squares(dba_self_attention(ctx, xin, p, cfg));
    };

    GradcheckReport report;
    auto check_tensor = [&](const std::string& name, Tensor DbaParams::* field, Var var) {
        auto f = [&](const Tensor& probe) {
            DbaParams p = params;
            p.*field = probe;
            return loss_with(p, x);
        };
        Tensor fd = finite_diff_grad(f, params.*field, h);
        report.note(name, detail::gradcheck_rel(grads.at(var.id), fd));
    };
    check_tensor("slots", &DbaParams::slots, lifted.slots);
    check_tensor("dim_proj", &DbaParams::dim_proj, lifted.dim_proj);
    check_tensor("restore_map", &DbaParams::restore_map, lifted.restore_map);
    check_tensor("pool_map", &DbaParams::pool_map, lifted.pool_map);
    check_tensor("wq", &DbaParams::wq, lifted.wq);
    check_tensor("wk", &DbaParams::wk, lifted.wk);
    check_tensor("wv", &DbaParams::wv, lifted.wv);
    check_tensor("wo", &DbaParams::wo, lifted.wo);
    {
        auto f = [&](const Tensor& probe) { return loss_with(params, probe); };
        Tensor fd = finite_diff_grad(f, x, h);
        report.note("x", detail::gradcheck_rel(grads.at(xv.id), fd));
    }
    return report;
}

/// Same check for the cross-attention layer over both hierarchies' bundles.
inline GradcheckReport gradcheck_cross_layer(const AttentionConfig& cfg, std::size_t n1, std::size_t n2,
                                             std::uint64_t seed, double h = 1e-5) {
    if (n1 > 16 || n2 > 16 || cfg.model_dim > 16)
        throw ParameterError("gradcheck_cross_layer: keep lengths and d <= 16");
    cfg.validate();

    Rng rng(seed);
    DbaParams p1 = make_dba_params(cfg, rng, /*with_cross_map=*/true);
    DbaParams p2 = make_dba_params(cfg, rng);
    Tensor x1 = uniform_tensor(rng, n1, cfg.model_dim, -1.0, 1.0);
    Tensor x2 = uniform_tensor(rng, n2, cfg.model_dim, -1.0, 1.0);

    Tape tape;
    TapeContext tctx{&tape};
    DbaParamsT<Var> l1 = lift(tape, p1);
    DbaParamsT<Var> l2 = lift(tape, p2);
    Var x1v = tape.parameter(x1);
    Var x2v = tape.parameter(x2);
    Var y = dba_cross_attention(tctx, x1v, x2v, l1, l2, cfg);
    Var loss = tape.scale(sum_all(tape, tape.square(y)), 0.5);
    GradMap grads = tape.backward(loss);

    auto loss_with = [&](const DbaParams& a, const DbaParams& b, const Tensor& xa, const Tensor& xb) {
        EagerContext ctx;
        return detail::half_sum_squares(dba_cross_attention(ctx, xa, xb, a, b, cfg));
    };

    GradcheckReport report;
    auto check1 = [&](const std::string& name, Tensor DbaParams::* field, Var var) {
        auto f = [&](const Tensor& probe) {
            DbaParams p = p1;
            p.*field = probe;
            return loss_with(p, p2, x1, x2);
        };
        report.note("p1." + name, detail::gradcheck_rel(grads.at(var.id), finite_diff_grad(f, p1.*field, h)));
    };
    auto check2 = [&](const std::string& name, Tensor DbaParams::* field, Var var) {
        auto f = [&](const Tensor& probe) {
            DbaParams p = p2;
            p.*field = probe;
            return loss_with(p1, p, x1, x2);
        };
        report.note("p2." + name, detail::gradcheck_rel(grads.at(var.id), finite_diff_grad(f, p2.*field, h)));
    };
    check1("slots", &DbaParams::slots, l1.slots);
    check1("dim_proj", &DbaParams::dim_proj, l1.dim_proj);
    check1("restore_map", &DbaParams::restore_map, l1.restore_map);
    check1("pool_map", &DbaParams::pool_map, l1.pool_map);
    check1("wq", &DbaParams::wq, l1.wq);
    check1("wk", &DbaParams::wk, l1.wk);
    check1("wv", &DbaParams::wv, l1.wv);
    check1("wo", &DbaParams::wo, l1.wo);
    {
        auto f = [&](const Tensor& probe) {
            DbaParams p = p1;
            p.cross_slot_map = probe;
            return loss_with(p, p2, x1, x2);
        };
        report.note("p1.cross_slot_map",
                    detail::gradcheck_rel(grads.at(l1.cross_slot_map->id),
                                          finite_diff_grad(f, *p1.cross_slot_map, h)));
    }
    check2("slots", &DbaParams::slots, l2.slots);
    check2("dim_proj", &DbaParams::dim_proj, l2.dim_proj);
    check2("restore_map", &DbaParams::restore_map, l2.restore_map);
    check2("pool_map", &DbaParams::pool_map, l2.pool_map);
    check2("wq", &DbaParams::wq, l2.wq);
    check2("wk", &DbaParams::wk, l2.wk);
    check2("wv", &DbaParams::wv, l2.wv);
    check2("wo", &DbaParams::wo, l2.wo);
    {
        auto f = [&](const Tensor& probe) { return loss_with(p1, p2, probe, x2); };
        report.note("x1", detail::gradcheck_rel(grads.at(x1v.id), finite_diff_grad(f, x1, h)));
    }
    {
        auto f = [&](const Tensor& probe) { return loss_with(p1, p2, x1, probe); };
        report.note("x2", detail::gradcheck_rel(grads.at(x2v.id), finite_diff_grad(f, x2, h)));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Result log records
// ---------------------------------------------------------------------------

struct CheckRecord {
    std::string check;
    std::string params;
    std::size_t trials = 0;
    std::size_t failures = 0;
    double bound = 0.0;
    bool pass = false;
};

inline std::string to_json_line(const CheckRecord& r) {
    std::ostringstream os;
    os << "{\"check\":\"" << r.check << "\",\"params\":\"" << r.params << "\",\"trials\":" << r.trials
       << ",\"failures\":" << r.failures << ",\"bound\":" << r.bound
       << ",\"pass\":" << (r.pass ? "true" : "false") << "}";
    return os.str();
}

inline void append_record(const std::string& path, const CheckRecord& r) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw ParameterError("cannot open results log: " + path);
    os << to_json_line(r) << '\n';
}

inline CheckRecord to_record(const JlTrialReport& r) {
    return CheckRecord{"jl_monte_carlo", r.params_string(), r.trials, r.failures, r.bound, r.pass()};
}

inline CheckRecord to_record(const RepresentabilityReport& r) {
    return CheckRecord{"lowrank_representability", r.params_string(), 1, r.pass ? 0u : 1u, 0.0, r.pass};
}

}  // namespace dba
