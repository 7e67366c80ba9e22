#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dba/attention.hpp"
#include "dba/rng.hpp"
#include "dba/tensor.hpp"

namespace dba {

// ---------------------------------------------------------------------------
// Analytic cost accounting
//
// Conventions, pinned so tests can be exact: one multiply plus one add is
// 2 flops; softmax costs 5 ops per entry (max, subtract, exp, sum, divide);
// a matmul [m x k][k x p] costs 2*m*k*p. Every term below sits next to the
// matmul of the forward pass it accounts for.
// ---------------------------------------------------------------------------

inline constexpr double kSoftmaxOpsPerEntry = 5.0;

inline double count_flops(const AttentionConfig& cfg) {
    const double n = static_cast<double>(cfg.seq_len);
    const double d = static_cast<double>(cfg.model_dim);
    const double dp = static_cast<double>(cfg.comp_len);
    const double din = static_cast<double>(cfg.comp_dim);
    const double h = static_cast<double>(cfg.heads);
    const double dh = d / h;

    const double qkvo = 4.0 * 2.0 * n * d * d;  // X*Wq, X*Wk, X*Wv, concat*Wo

    switch (cfg.mechanism) {
        case Mechanism::vanilla:
            // per head: scores Qh*Kh^T (2 n^2 dh), mix P*Vh (2 n^2 dh); summed
            // over heads the head width cancels.
            return 2.0 * n * n * d                  // scores
                   + 2.0 * n * n * d                // value mix
                   + kSoftmaxOpsPerEntry * n * n    // row softmax of the map
                   + qkvo;
        case Mechanism::dba: {
            double f = qkvo;
            f += 2.0 * (2.0 * dp * n * d);                    // compression logits slots*Qh^T, slots*Kh^T
            f += kSoftmaxOpsPerEntry * 2.0 * dp * n * h;      // their row softmax
            f += 2.0 * (2.0 * dp * n * dh * h);               // compress Q and K: comp*Qh, comp*Kh
            f += 2.0 * dp * n * dh * h;                       // pool values: pool^T * Vh
            f += 2.0 * (2.0 * n * d * dp);                    // restore/pool coefficient maps X*Ar, X*Ac
            f += 2.0 * dp * dh * din * 2.0 * h;               // hidden projection Ql*R, Kl*R
            f += 2.0 * dp * dp * din * h;                     // compressed scores
            f += kSoftmaxOpsPerEntry * dp * dp * h;           // their softmax
            f += 2.0 * dp * dp * dh * h;                      // compressed value mix
            f += 2.0 * n * dp * d;                            // restore to length n
            return f;
        }
        case Mechanism::dba_no_seq_compress: {
            // length compression off: scores stay n x n but run at width d_in.
            double f = qkvo;
            f += 2.0 * n * dh * din * 2.0 * h;                // Qh*R, Kh*R
            f += 2.0 * n * n * din * h;                       // scores
            f += kSoftmaxOpsPerEntry * n * n * h;
            f += 2.0 * n * n * dh * h;                        // value mix
            return f;
        }
        case Mechanism::dba_no_dim_compress: {
            double f = qkvo;
            f += 2.0 * (2.0 * dp * n * d);
            f += kSoftmaxOpsPerEntry * 2.0 * dp * n * h;
            f += 2.0 * (2.0 * dp * n * dh * h);
            f += 2.0 * dp * n * dh * h;
            f += 2.0 * (2.0 * n * d * dp);
            f += 2.0 * dp * dp * dh * h;                      // scores at full head width
            f += kSoftmaxOpsPerEntry * dp * dp * h;
            f += 2.0 * dp * dp * dh * h;                      // value mix
            f += 2.0 * n * dp * d;
            return f;
        }
        case Mechanism::fixed_lowrank_baseline: {
            double f = qkvo;
            f += 2.0 * (2.0 * dp * n * dh * h);               // table-compress Q and K
            f += 2.0 * dp * n * dh * h;                       // pool values
            f += 2.0 * dp * dh * din * 2.0 * h;
            f += 2.0 * dp * dp * din * h;
            f += kSoftmaxOpsPerEntry * dp * dp * h;
            f += 2.0 * dp * dp * dh * h;
            f += 2.0 * n * dp * d;                            // restore
            return f;
        }
    }
    return 0.0;
}

/// Peak live intermediate bytes (8 per entry) over the forward op sequence,
/// parameters excluded. Mirrors the eager evaluation order: the baseline
/// holds X, Q, K, V, K^T and the n x n map while mixing values; the
/// compressed path's largest live set is X, Q, K, V, the n x d_p coefficient
/// blocks and the output.
inline double peak_bytes(const AttentionConfig& cfg) {
    const double n = static_cast<double>(cfg.seq_len);
    const double d = static_cast<double>(cfg.model_dim);
    const double dp = static_cast<double>(cfg.comp_len);
    const double din = static_cast<double>(cfg.comp_dim);
    const double h = static_cast<double>(cfg.heads);
    const double dh = d / h;

    double entries = 0.0;
    switch (cfg.mechanism) {
        case Mechanism::vanilla:
            entries = n * n + 6.0 * n * d;
            break;
        case Mechanism::dba:
            // X, Q, K, V, out + restore/pool maps + per-head comp weights +
            // d_p-sided blocks (live one head at a time).
            entries = 6.0 * n * d + (2.0 + 2.0) * n * dp +
                      (2.0 * dp * din + 2.0 * dp * dh + dp * dp + dp * dh);
            break;
        case Mechanism::dba_no_seq_compress:
            entries = n * n + 6.0 * n * d + 2.0 * n * din;
            break;
        case Mechanism::dba_no_dim_compress:
            entries = 6.0 * n * d + 4.0 * n * dp + (2.0 * dp * dh + dp * dp + dp * dh);
            break;
        case Mechanism::fixed_lowrank_baseline:
            entries = 6.0 * n * d + 2.0 * n * dp +
                      (2.0 * dp * din + 2.0 * dp * dh + dp * dp + dp * dh);
            break;
    }
    return entries * 8.0;
}

// ---------------------------------------------------------------------------
// Measured sweeps
// ---------------------------------------------------------------------------

struct BenchRecord {
    std::string mechanism;
    std::size_t n = 0, d = 0, d_p = 0, d_in = 0, heads = 1;
    double flops = 0.0;
    double peak_bytes = 0.0;
    double wall_ms_mean = 0.0;  // median of per-rep times
    double wall_ms_std = 0.0;
    std::size_t reps = 0;
    bool oom = false;
};

struct ScalingFit {
    std::string mechanism;
    double slope = 0.0;
    double r2 = 0.0;
    std::vector<std::size_t> n_values;
};

namespace detail {

struct AttentionInstance {
    AttentionConfig cfg;
    DbaParams dba;
    FixedLowrankParams fixed;

    Tensor forward(const Tensor& x) const {
        EagerContext ctx;
        switch (cfg.mechanism) {
            case Mechanism::vanilla:
                return vanilla_self_attention(ctx, x, dba, cfg);
            case Mechanism::fixed_lowrank_baseline:
                return fixed_lowrank_attention(ctx, x, fixed, cfg);
            default:
                return dba_self_attention(ctx, x, dba, cfg);
        }
    }
};

inline AttentionInstance make_instance(const AttentionConfig& cfg, std::uint64_t seed) {
    AttentionInstance inst;
    inst.cfg = cfg;
    Rng rng(seed);
    if (cfg.mechanism == Mechanism::fixed_lowrank_baseline) {
        inst.fixed = make_fixed_lowrank_params(cfg, rng);
    } else {
        inst.dba = make_dba_params(cfg, rng);
    }
    return inst;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Forward-only wall-clock timing of one configuration. The timed region is
/// single-threaded; warmup runs are discarded; the reported mean is the
/// median of per-rep times (robust to scheduler spikes), std is over reps.
inline BenchRecord bench_config(const AttentionConfig& cfg, std::size_t reps, std::uint64_t seed,
                                std::size_t warmup = 2) {
    BenchRecord rec;
    rec.mechanism = mechanism_name(cfg.mechanism);
    rec.n = cfg.seq_len;
    rec.d = cfg.model_dim;
    rec.d_p = cfg.comp_len;
    rec.d_in = cfg.comp_dim;
    rec.heads = cfg.heads;
    rec.flops = count_flops(cfg);
    rec.peak_bytes = peak_bytes(cfg);
    rec.reps = reps;

    try {
        detail::AttentionInstance inst = detail::make_instance(cfg, seed);
        Rng rng(seed + 1);
        Tensor x = gaussian(rng, cfg.seq_len, cfg.model_dim, 1.0);

        std::vector<double> times;
        times.reserve(reps);
        double sink = 0.0;
        for (std::size_t i = 0; i < warmup + reps; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            Tensor y = inst.forward(x);
            const auto t1 = std::chrono::steady_clock::now();
            sink += y(0, 0);
            if (i >= warmup)
                times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        if (!std::isfinite(sink)) throw ContractError("bench: non-finite output");

        rec.wall_ms_mean = detail::median(times);
        double mean = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size());
        double var = 0.0;
        for (double t : times) var += (t - mean) * (t - mean);
        rec.wall_ms_std = std::sqrt(var / static_cast<double>(times.size()));
    } catch (const std::bad_alloc&) {
        rec.oom = true;
        rec.wall_ms_mean = std::numeric_limits<double>::quiet_NaN();
        rec.wall_ms_std = std::numeric_limits<double>::quiet_NaN();
        rec.reps = 0;
    }
    return rec;
}

inline std::vector<BenchRecord> run_sweep(const std::vector<Mechanism>& mechanisms,
                                          const std::vector<std::size_t>& n_values,
                                          AttentionConfig tmpl, std::size_t reps, std::uint64_t seed) {
    if (reps < 5) throw ParameterError("run_sweep: need reps >= 5");
    std::vector<BenchRecord> records;
    for (Mechanism m : mechanisms) {
        for (std::size_t n : n_values) {
            AttentionConfig cfg = tmpl;
            cfg.mechanism = m;
            cfg.seq_len = n;
            records.push_back(bench_config(cfg, reps, seed));
        }
    }
    return records;
}

/// Least-squares slope of ln(wall) vs ln(n), one fit per mechanism.
inline std::vector<ScalingFit> fit_scaling(const std::vector<BenchRecord>& records) {
    std::vector<std::string> mechs;
    for (const BenchRecord& r : records)
        if (std::find(mechs.begin(), mechs.end(), r.mechanism) == mechs.end()) mechs.push_back(r.mechanism);

    std::vector<ScalingFit> fits;
    for (const std::string& m : mechs) {
        std::vector<double> xs, ys;
        ScalingFit fit;
        fit.mechanism = m;
        for (const BenchRecord& r : records) {
            if (r.mechanism != m || r.oom || !(r.wall_ms_mean > 0.0)) continue;
            xs.push_back(std::log(static_cast<double>(r.n)));
            ys.push_back(std::log(r.wall_ms_mean));
            fit.n_values.push_back(r.n);
        }
        if (xs.size() < 4) throw ParameterError("fit_scaling: need >= 4 points for mechanism " + m);
        const auto [mn, mx] = std::minmax_element(fit.n_values.begin(), fit.n_values.end());
        if (static_cast<double>(*mx) < 8.0 * static_cast<double>(*mn))
            throw ParameterError("fit_scaling: swept lengths must span >= 8x");

        const double n = static_cast<double>(xs.size());
        const double sx = std::accumulate(xs.begin(), xs.end(), 0.0);
        const double sy = std::accumulate(ys.begin(), ys.end(), 0.0);
        double sxx = 0.0, sxy = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            sxx += xs[i] * xs[i];
            sxy += xs[i] * ys[i];
            syy += ys[i] * ys[i];
        }
        fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        const double num = n * sxy - sx * sy;
        const double den = (n * sxx - sx * sx) * (n * syy - sy * sy);
        fit.r2 = den > 0.0 ? num * num / den : 1.0;
        fits.push_back(std::move(fit));
    }
    return fits;
}

/// Fit of ln(analytic flops) vs ln(n); exact, no timing noise.
inline ScalingFit fit_flops_scaling(Mechanism mechanism, const std::vector<std::size_t>& n_values,
                                    AttentionConfig tmpl) {
    std::vector<BenchRecord> pseudo;
    for (std::size_t n : n_values) {
        AttentionConfig cfg = tmpl;
        cfg.mechanism = mechanism;
        cfg.seq_len = n;
        BenchRecord r;
        r.mechanism = mechanism_name(mechanism);
        r.n = n;
        r.wall_ms_mean = count_flops(cfg);
        pseudo.push_back(r);
    }
    return fit_scaling(pseudo)[0];
}

// ---------------------------------------------------------------------------
// Output formats
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "mechanism,n,d,d_p,d_in,heads,flops,peak_bytes,wall_ms_mean,wall_ms_std,reps";

inline std::string to_csv(const std::vector<BenchRecord>& records) {
    std::ostringstream os;
    os << kCsvHeader << '\n';
    os.precision(6);
    for (const BenchRecord& r : records) {
        os << r.mechanism << ',' << r.n << ',' << r.d << ',' << r.d_p << ',' << r.d_in << ',' << r.heads
           << ',' << std::fixed << r.flops << ',' << r.peak_bytes << ',' << r.wall_ms_mean << ','
           << r.wall_ms_std << ',' << r.reps << '\n';
        os.unsetf(std::ios_base::fixed);
    }
    return os.str();
}

inline void write_csv(const std::vector<BenchRecord>& records, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ParameterError("cannot open csv for writing: " + path);
    os << to_csv(records);
}

/// Minimal hand-rolled log-log scatter with fitted lines, one color per
/// mechanism. No plotting dependency.
inline void write_svg(const std::vector<BenchRecord>& records, const std::vector<ScalingFit>& fits,
                      const std::string& path) {
    const double width = 640, height = 480, margin = 60;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const BenchRecord& r : records) {
        if (r.oom || !(r.wall_ms_mean > 0.0)) continue;
        xmin = std::min(xmin, std::log(static_cast<double>(r.n)));
        xmax = std::max(xmax, std::log(static_cast<double>(r.n)));
        ymin = std::min(ymin, std::log(r.wall_ms_mean));
        ymax = std::max(ymax, std::log(r.wall_ms_mean));
    }
    if (!(xmax > xmin)) return;
    const double ypad = 0.05 * (ymax - ymin + 1e-9);
    ymin -= ypad;
    ymax += ypad;
    auto sx = [&](double lx) { return margin + (lx - xmin) / (xmax - xmin) * (width - 2 * margin); };
    auto sy = [&](double ly) { return height - margin - (ly - ymin) / (ymax - ymin) * (height - 2 * margin); };

    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin
       << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
       << height - margin << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"" << height - 15 << "\" text-anchor=\"middle\">ln n</text>\n";
    os << "<text x=\"15\" y=\"" << height / 2 << "\" transform=\"rotate(-90 15 " << height / 2
       << ")\" text-anchor=\"middle\">ln wall ms</text>\n";

    std::size_t ci = 0;
    for (const ScalingFit& fit : fits) {
        const char* color = colors[ci % 5];
        for (const BenchRecord& r : records) {
            if (r.mechanism != fit.mechanism || r.oom || !(r.wall_ms_mean > 0.0)) continue;
            os << "<circle cx=\"" << sx(std::log(static_cast<double>(r.n))) << "\" cy=\""
               << sy(std::log(r.wall_ms_mean)) << "\" r=\"4\" fill=\"" << color << "\"/>\n";
        }
        // fitted line through the mean point with the fitted slope
        double mx = 0, my = 0, count = 0;
        for (const BenchRecord& r : records) {
            if (r.mechanism != fit.mechanism || r.oom || !(r.wall_ms_mean > 0.0)) continue;
            mx += std::log(static_cast<double>(r.n));
            my += std::log(r.wall_ms_mean);
            count += 1;
        }
        mx /= count;
        my /= count;
        const double y0 = my + fit.slope * (xmin - mx);
        const double y1 = my + fit.slope * (xmax - mx);
        os << "<line x1=\"" << sx(xmin) << "\" y1=\"" << sy(y0) << "\" x2=\"" << sx(xmax) << "\" y2=\""
           << sy(y1) << "\" stroke=\"" << color << "\" stroke-dasharray=\"4\"/>\n";
        os << "<text x=\"" << width - margin - 5 << "\" y=\"" << margin + 20 * (ci + 1)
           << "\" text-anchor=\"end\" fill=\"" << color << "\">" << fit.mechanism << " slope "
           << std::fixed << fit.slope << "</text>\n";
        os.unsetf(std::ios_base::fixed);
        ++ci;
    }
    os << "</svg>\n";

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParameterError("cannot open svg for writing: " + path);
    f << os.str();
}

}  // namespace dba
