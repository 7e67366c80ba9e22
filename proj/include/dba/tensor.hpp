#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dba {

// ---------------------------------------------------------------------------
// Error types
// ---------------------------------------------------------------------------

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParameterError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Allocation accounting
//
// When a log is installed on the current thread, every tensor allocation is
// recorded (size in bytes) and live/peak byte counters are maintained. Used
// by tests to verify that no n*n buffer ever materializes inside compressed
// attention, and by the optional instrumented benchmark mode.
// ---------------------------------------------------------------------------

struct AllocationLog {
    std::vector<std::size_t> events;  // one entry per allocation, in bytes
    std::size_t live_bytes = 0;
    std::size_t peak_bytes = 0;

    std::size_t max_event() const {
        std::size_t m = 0;
        for (std::size_t e : events) m = std::max(m, e);
        return m;
    }
    bool saw_allocation_of(std::size_t bytes) const {
        return std::find(events.begin(), events.end(), bytes) != events.end();
    }
};

namespace detail {

inline AllocationLog*& alloc_log_slot() {
    thread_local AllocationLog* slot = nullptr;
    return slot;
}

inline void note_alloc(std::size_t bytes) {
    if (AllocationLog* log = alloc_log_slot(); log != nullptr && bytes > 0) {
        log->events.push_back(bytes);
        log->live_bytes += bytes;
        log->peak_bytes = std::max(log->peak_bytes, log->live_bytes);
    }
}

inline void note_free(std::size_t bytes) {
    if (AllocationLog* log = alloc_log_slot(); log != nullptr && bytes > 0) {
        log->live_bytes -= std::min(log->live_bytes, bytes);
    }
}

}  // namespace detail

/// RAII guard installing an AllocationLog on the current thread.
class ScopedAllocationLog {
public:
    explicit ScopedAllocationLog(AllocationLog& log) {
        previous_ = detail::alloc_log_slot();
        detail::alloc_log_slot() = &log;
    }
    ~ScopedAllocationLog() { detail::alloc_log_slot() = previous_; }
    ScopedAllocationLog(const ScopedAllocationLog&) = delete;
    ScopedAllocationLog& operator=(const ScopedAllocationLog&) = delete;

private:
    AllocationLog* previous_;
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major array of f64 with an explicit shape.
// ---------------------------------------------------------------------------

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        std::size_t n = 1;
        for (std::size_t e : shape_) {
            if (e == 0) throw DimensionError("tensor extent must be >= 1");
            n *= e;
        }
        data_.assign(n, 0.0);
        detail::note_alloc(n * sizeof(double));
    }

    Tensor(std::size_t rows, std::size_t cols) : Tensor(std::vector<std::size_t>{rows, cols}) {}

    Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) {
        detail::note_alloc(data_.size() * sizeof(double));
    }
    Tensor(Tensor&& other) noexcept = default;
    Tensor& operator=(const Tensor& other) {
        if (this != &other) {
            detail::note_free(data_.size() * sizeof(double));
            shape_ = other.shape_;
            data_ = other.data_;
            detail::note_alloc(data_.size() * sizeof(double));
        }
        return *this;
    }
    Tensor& operator=(Tensor&& other) noexcept {
        if (this != &other) {
            detail::note_free(data_.size() * sizeof(double));
            shape_ = std::move(other.shape_);
            data_ = std::move(other.data_);
            other.shape_.clear();
            other.data_.clear();
        }
        return *this;
    }
    ~Tensor() { detail::note_free(data_.size() * sizeof(double)); }

    static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols); }

    static Tensor full(std::size_t rows, std::size_t cols, double value) {
        Tensor t(rows, cols);
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    /// Build a rows x cols tensor from a flat row-major list.
    static Tensor from_rows(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        Tensor t(rows, cols);
        if (values.size() != rows * cols) throw DimensionError("from_rows: value count does not match shape");
        std::copy(values.begin(), values.end(), t.data_.begin());
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const {
        require_rank2("rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return shape_[1];
    }

    double& operator()(std::size_t i, std::size_t j) {
        return data_[i * shape_[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        return data_[i * shape_[1] + j];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& flat() { return data_; }
    const std::vector<double>& flat() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    void require_rank2(const char* what) const {
        if (shape_.size() != 2) throw DimensionError(std::string(what) + ": tensor is not rank 2, shape " + shape_string());
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_rank2(const Tensor& t, const char* where) {
    if (t.rank() != 2) throw DimensionError(std::string(where) + ": expected rank-2 tensor, got shape " + t.shape_string());
}

// ---------------------------------------------------------------------------
// Kernels. All pure unless suffixed _inplace; the in-place forms exist so the
// eager evaluation path can reuse large buffers.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul lhs");
    require_rank2(b, "matmul rhs");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner extents differ, " + a.shape_string() + " * " + b.shape_string());
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    Tensor c(m, p);
    const double* ad = a.data();
    const double* bd = b.data();
    double* cd = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double av = ad[i * k + t];
            if (av == 0.0) continue;
            const double* brow = bd + t * p;
            double* crow = cd + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor t(n, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("add: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    Tensor c = a;
    double* cd = c.data();
    const double* bd = b.data();
    for (std::size_t i = 0; i < c.numel(); ++i) cd[i] += bd[i];
    return c;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("add_inplace: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    double* ad = a.data();
    const double* bd = b.data();
    for (std::size_t i = 0; i < a.numel(); ++i) ad[i] += bd[i];
}

inline void scale_inplace(Tensor& a, double c) {
    for (double& v : a.flat()) v *= c;
}

inline Tensor scale(Tensor a, double c) {
    scale_inplace(a, c);
    return a;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("hadamard: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    Tensor c = a;
    double* cd = c.data();
    const double* bd = b.data();
    for (std::size_t i = 0; i < c.numel(); ++i) cd[i] *= bd[i];
    return c;
}

/// Row-wise softmax with per-row max subtraction.
inline void softmax_rows_inplace(Tensor& x) {
    require_rank2(x, "softmax_rows");
    const std::size_t m = x.rows(), k = x.cols();
    double* d = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = d + i * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < k; ++j) row[j] *= inv;
    }
}

inline Tensor softmax_rows(Tensor x) {
    softmax_rows_inplace(x);
    return x;
}

inline Tensor relu(Tensor x) {
    for (double& v : x.flat()) v = v > 0.0 ? v : 0.0;
    return x;
}

inline Tensor square(Tensor x) {
    for (double& v : x.flat()) v *= v;
    return x;
}

/// Per-row RMS normalization with a per-feature gain: y_ij = g_j * x_ij / rms_i,
/// rms_i = sqrt(mean_j x_ij^2 + eps).
inline constexpr double kRmsNormEps = 1e-8;

inline Tensor rms_norm(const Tensor& x, const Tensor& gain) {
    require_rank2(x, "rms_norm input");
    require_rank2(gain, "rms_norm gain");
    if (gain.rows() != 1 || gain.cols() != x.cols())
        throw DimensionError("rms_norm: gain must be 1x" + std::to_string(x.cols()) + ", got " + gain.shape_string());
    const std::size_t m = x.rows(), k = x.cols();
    Tensor y(m, k);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < k; ++j) ss += x(i, j) * x(i, j);
        const double inv_rms = 1.0 / std::sqrt(ss / static_cast<double>(k) + kRmsNormEps);
        for (std::size_t j = 0; j < k; ++j) y(i, j) = gain(0, j) * x(i, j) * inv_rms;
    }
    return y;
}

/// Mean over rows: [m x k] -> [1 x k].
inline Tensor row_mean(const Tensor& x) {
    require_rank2(x, "row_mean");
    const std::size_t m = x.rows(), k = x.cols();
    Tensor y(1, k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) y(0, j) += x(i, j);
    for (std::size_t j = 0; j < k; ++j) y(0, j) /= static_cast<double>(m);
    return y;
}

/// Fused log-softmax + negative log likelihood, averaged over rows.
/// logits: [b x c], targets: one class index per row. Returns 1x1 loss.
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::size_t>& targets) {
    require_rank2(logits, "cross_entropy_logits");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (targets.size() != b)
        throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " + std::to_string(b) + " rows");
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (targets[i] >= c) throw ParameterError("cross_entropy_logits: target class out of range");
        double mx = logits(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits(i, j) - mx);
        total += (mx + std::log(sum)) - logits(i, targets[i]);
    }
    Tensor loss(1, 1);
    loss(0, 0) = total / static_cast<double>(b);
    return loss;
}

// ---------------------------------------------------------------------------
// Small numeric helpers used across modules and tests.
// ---------------------------------------------------------------------------

inline double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.flat()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.flat()) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("max_abs_diff: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    double m = 0.0;
    const double* ad = a.data();
    const double* bd = b.data();
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
    return m;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("sub: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    Tensor c = a;
    double* cd = c.data();
    const double* bd = b.data();
    for (std::size_t i = 0; i < c.numel(); ++i) cd[i] -= bd[i];
    return c;
}

// ---------------------------------------------------------------------------
// Text dump format: first line is the space-separated shape, each following
// line is one row of 17-significant-digit decimals.
// ---------------------------------------------------------------------------

inline void dump_text(const Tensor& t, std::ostream& os) {
    for (std::size_t i = 0; i < t.rank(); ++i) {
        if (i) os << ' ';
        os << t.shape()[i];
    }
    os << '\n';
    const std::size_t cols = t.rank() >= 1 ? t.shape().back() : 1;
    const std::size_t rows = cols != 0 ? t.numel() / cols : 0;
    os << std::setprecision(17);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            if (j) os << ' ';
            os << t.data()[i * cols + j];
        }
        os << '\n';
    }
}

inline std::string dump_text(const Tensor& t) {
    std::ostringstream os;
    dump_text(t, os);
    return os.str();
}

inline Tensor parse_text(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw ParameterError("tensor parse: empty input");
    std::istringstream hs(header);
    std::vector<std::size_t> shape;
    std::size_t e;
    while (hs >> e) shape.push_back(e);
    if (shape.empty()) throw ParameterError("tensor parse: no shape line");
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (!(is >> t.flat()[i])) throw ParameterError("tensor parse: payload shorter than shape implies");
    }
    return t;
}

inline Tensor parse_text(const std::string& s) {
    std::istringstream is(s);
    return parse_text(is);
}

}  // namespace dba
