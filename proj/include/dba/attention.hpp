#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dba/autodiff.hpp"
#include "dba/rng.hpp"
#include "dba/tensor.hpp"

namespace dba {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Mechanism {
    vanilla,
    dba,
    dba_no_seq_compress,
    dba_no_dim_compress,
    fixed_lowrank_baseline,
};

inline const char* mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::vanilla: return "vanilla";
        case Mechanism::dba: return "dba";
        case Mechanism::dba_no_seq_compress: return "dba_no_seq_compress";
        case Mechanism::dba_no_dim_compress: return "dba_no_dim_compress";
        case Mechanism::fixed_lowrank_baseline: return "fixed_lowrank_baseline";
    }
    return "?";
}

inline Mechanism mechanism_from_name(const std::string& s) {
    if (s == "vanilla") return Mechanism::vanilla;
    if (s == "dba") return Mechanism::dba;
    if (s == "dba_no_seq_compress") return Mechanism::dba_no_seq_compress;
    if (s == "dba_no_dim_compress") return Mechanism::dba_no_dim_compress;
    if (s == "fixed_lowrank_baseline") return Mechanism::fixed_lowrank_baseline;
    throw ParameterError("unknown mechanism: " + s);
}

/// One attention instantiation: sequence length n, model width d, compressed
/// sequence length (summary slot count), compressed hidden width, head count.
struct AttentionConfig {
    std::size_t seq_len = 0;    // n
    std::size_t model_dim = 0;  // d
    std::size_t comp_len = 0;   // d_p
    std::size_t comp_dim = 0;   // d_in
    std::size_t heads = 1;
    Mechanism mechanism = Mechanism::dba;

    std::size_t head_dim() const { return model_dim / heads; }

    /// Hard violations throw; degenerate-but-harmless settings are returned
    /// as warnings (extra summary slots beyond min(n, d) are redundant, not
    /// wrong).
    std::vector<std::string> validate() const {
        if (seq_len == 0 || model_dim == 0 || comp_len == 0 || comp_dim == 0 || heads == 0)
            throw ParameterError("attention config: all extents must be >= 1");
        if (model_dim % heads != 0)
            throw ParameterError("attention config: model_dim " + std::to_string(model_dim) +
                                 " not divisible by heads " + std::to_string(heads));
        std::vector<std::string> warnings;
        if (comp_len > std::min(seq_len, model_dim))
            warnings.push_back("comp_len " + std::to_string(comp_len) + " exceeds min(n, d) = " +
                               std::to_string(std::min(seq_len, model_dim)) + "; extra slots are redundant");
        if (comp_dim > model_dim / heads)
            warnings.push_back("comp_dim " + std::to_string(comp_dim) + " exceeds head width " +
                               std::to_string(model_dim / heads) + "; projection widens instead of compressing");
        return warnings;
    }
};

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

/// Learnable state of one DBA layer.
///   slots        d_p x d   queries the input to produce compression weights
///   dim_proj     d_h x d_in  hidden-dimension projection (shared by heads)
///   restore_map  d x d_p   input -> restore coefficients (n x d_p)
///   pool_map     d x d_p   input -> value-pooling coefficients (n x d_p)
///   wq/wk/wv/wo  d x d     usual projections
///   cross_slot_map d x d   maps the partner's compressed sequence to slots
///                          (cross-attention layers only)
template <class V>
struct DbaParamsT {
    V slots, dim_proj, restore_map, pool_map, wq, wk, wv, wo;
    std::optional<V> cross_slot_map;
};
using DbaParams = DbaParamsT<Tensor>;

/// Input-invariant low-rank baseline: learned compression tables with the
/// sequence length baked in at construction time.
template <class V>
struct FixedLowrankParamsT {
    V comp_q, comp_k;     // d_p x n, applied regardless of input content
    V restore, pool;      // n x d_p
    V dim_proj;           // d_h x d_in
    V wq, wk, wv, wo;
};
using FixedLowrankParams = FixedLowrankParamsT<Tensor>;

inline DbaParams make_dba_params(const AttentionConfig& cfg, Rng& rng, bool with_cross_map = false) {
    const std::size_t d = cfg.model_dim, dp = cfg.comp_len, din = cfg.comp_dim, dh = cfg.head_dim();
    DbaParams p;
    const double wvar = 1.0 / static_cast<double>(d);
    p.slots = gaussian(rng, dp, d, wvar);
    // Gaussian init keeps the random-projection analysis valid at step zero;
    // the map is trained afterwards.
    p.dim_proj = gaussian(rng, dh, din, static_cast<double>(cfg.heads) / static_cast<double>(d));
    p.restore_map = gaussian(rng, d, dp, wvar);
    p.pool_map = gaussian(rng, d, dp, wvar);
    p.wq = gaussian(rng, d, d, wvar);
    p.wk = gaussian(rng, d, d, wvar);
    p.wv = gaussian(rng, d, d, wvar);
    p.wo = gaussian(rng, d, d, wvar);
    if (with_cross_map) p.cross_slot_map = gaussian(rng, d, d, wvar);
    return p;
}

inline FixedLowrankParams make_fixed_lowrank_params(const AttentionConfig& cfg, Rng& rng) {
    const std::size_t n = cfg.seq_len, d = cfg.model_dim, dp = cfg.comp_len, din = cfg.comp_dim, dh = cfg.head_dim();
    FixedLowrankParams p;
    const double wvar = 1.0 / static_cast<double>(d);
    p.comp_q = gaussian(rng, dp, n, 1.0 / static_cast<double>(n));
    p.comp_k = gaussian(rng, dp, n, 1.0 / static_cast<double>(n));
    p.restore = gaussian(rng, n, dp, 1.0 / static_cast<double>(dp));
    p.pool = gaussian(rng, n, dp, 1.0 / static_cast<double>(dp));
    p.dim_proj = gaussian(rng, dh, din, static_cast<double>(cfg.heads) / static_cast<double>(d));
    p.wq = gaussian(rng, d, d, wvar);
    p.wk = gaussian(rng, d, d, wvar);
    p.wv = gaussian(rng, d, d, wvar);
    p.wo = gaussian(rng, d, d, wvar);
    return p;
}

// ---------------------------------------------------------------------------
// Evaluation contexts. The attention math below is written once, over a
// context supplying the primitive ops; the eager context computes tensors
// directly (and reuses buffers through moves), the tape context records
// nodes for reverse-mode differentiation.
// ---------------------------------------------------------------------------

struct EagerContext {
    using Value = Tensor;
    Value constant(Tensor t) const { return t; }
    Value matmul(const Value& a, const Value& b) const { return dba::matmul(a, b); }
    Value transpose(const Value& a) const { return dba::transpose(a); }
    Value add(const Value& a, const Value& b) const { return dba::add(a, b); }
    Value scale(Value a, double c) const { return dba::scale(std::move(a), c); }
    Value softmax_rows(Value a) const { return dba::softmax_rows(std::move(a)); }
    Value relu(Value a) const { return dba::relu(std::move(a)); }
    Value square(Value a) const { return dba::square(std::move(a)); }
    Value rms_norm(const Value& x, const Value& gain) const { return dba::rms_norm(x, gain); }
    Value row_mean(const Value& x) const { return dba::row_mean(x); }
    const Tensor& peek(const Value& v) const { return v; }
};

struct TapeContext {
    Tape* tape = nullptr;
    using Value = Var;
    Value constant(Tensor t) const { return tape->constant(std::move(t)); }
    Value matmul(Value a, Value b) const { return tape->matmul(a, b); }
    Value transpose(Value a) const { return tape->transpose(a); }
    Value add(Value a, Value b) const { return tape->add(a, b); }
    Value scale(Value a, double c) const { return tape->scale(a, c); }
    Value softmax_rows(Value a) const { return tape->softmax_rows(a); }
    Value relu(Value a) const { return tape->relu(a); }
    Value square(Value a) const { return tape->square(a); }
    Value rms_norm(Value x, Value gain) const { return tape->rms_norm(x, gain); }
    Value row_mean(Value x) const { return tape->row_mean(x); }
    const Tensor& peek(Value v) const { return tape->value(v); }
};

/// Register every tensor of a parameter bundle on a tape.
inline DbaParamsT<Var> lift(Tape& tape, const DbaParams& p) {
    DbaParamsT<Var> out;
    out.slots = tape.parameter(p.slots);
    out.dim_proj = tape.parameter(p.dim_proj);
    out.restore_map = tape.parameter(p.restore_map);
    out.pool_map = tape.parameter(p.pool_map);
    out.wq = tape.parameter(p.wq);
    out.wk = tape.parameter(p.wk);
    out.wv = tape.parameter(p.wv);
    out.wo = tape.parameter(p.wo);
    if (p.cross_slot_map) out.cross_slot_map = tape.parameter(*p.cross_slot_map);
    return out;
}

inline FixedLowrankParamsT<Var> lift(Tape& tape, const FixedLowrankParams& p) {
    FixedLowrankParamsT<Var> out;
    out.comp_q = tape.parameter(p.comp_q);
    out.comp_k = tape.parameter(p.comp_k);
    out.restore = tape.parameter(p.restore);
    out.pool = tape.parameter(p.pool);
    out.dim_proj = tape.parameter(p.dim_proj);
    out.wq = tape.parameter(p.wq);
    out.wk = tape.parameter(p.wk);
    out.wv = tape.parameter(p.wv);
    out.wo = tape.parameter(p.wo);
    return out;
}

namespace detail {

/// 0/1 selector picking the columns of head h; slicing and concatenation are
/// expressed as matmuls with these constants so gradients flow through the
/// ordinary matmul adjoint.
inline Tensor head_selector(std::size_t d, std::size_t heads, std::size_t h) {
    const std::size_t dh = d / heads;
    Tensor s(d, dh);
    for (std::size_t j = 0; j < dh; ++j) s(h * dh + j, j) = 1.0;
    return s;
}

template <class Ctx>
std::vector<typename Ctx::Value> head_slices(Ctx& ctx, const typename Ctx::Value& full,
                                             std::size_t d, std::size_t heads) {
    std::vector<typename Ctx::Value> out;
    out.reserve(heads);
    if (heads == 1) {
        out.push_back(full);
        return out;
    }
    for (std::size_t h = 0; h < heads; ++h)
        out.push_back(ctx.matmul(full, ctx.constant(head_selector(d, heads, h))));
    return out;
}

template <class Ctx>
typename Ctx::Value concat_heads(Ctx& ctx, const std::vector<typename Ctx::Value>& parts,
                                 std::size_t d, std::size_t heads) {
    if (heads == 1) return parts[0];
    typename Ctx::Value out =
        ctx.matmul(parts[0], ctx.constant(transpose(head_selector(d, heads, 0))));
    for (std::size_t h = 1; h < heads; ++h)
        out = ctx.add(out, ctx.matmul(parts[h], ctx.constant(transpose(head_selector(d, heads, h)))));
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Baseline attention: softmax(Q K^T / sqrt(d)) V. The n x n map is
/// materialized here on purpose; this is the oracle the compressed path is
/// checked against.
template <class Ctx>
typename Ctx::Value vanilla_attention(Ctx& ctx, const typename Ctx::Value& q,
                                      const typename Ctx::Value& k, const typename Ctx::Value& v) {
    const std::size_t d = ctx.peek(q).cols();
    if (ctx.peek(k).cols() != d || ctx.peek(k).rows() != ctx.peek(v).rows())
        throw DimensionError("vanilla_attention: inconsistent shapes " + ctx.peek(q).shape_string() + ", " +
                             ctx.peek(k).shape_string() + ", " + ctx.peek(v).shape_string());
    auto scores = ctx.matmul(q, ctx.transpose(k));
    auto map = ctx.softmax_rows(ctx.scale(std::move(scores), 1.0 / std::sqrt(static_cast<double>(d))));
    return ctx.matmul(map, v);
}

inline Tensor vanilla_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    EagerContext ctx;
    return vanilla_attention(ctx, q, k, v);
}

/// Input-dependent compression weights: each row of either output is a
/// distribution over the n token positions.
template <class Ctx>
std::pair<typename Ctx::Value, typename Ctx::Value> dynamic_projections(
    Ctx& ctx, const typename Ctx::Value& slots, const typename Ctx::Value& q,
    const typename Ctx::Value& k) {
    if (ctx.peek(slots).cols() != ctx.peek(q).cols() || ctx.peek(q).cols() != ctx.peek(k).cols())
        throw DimensionError("dynamic_projections: hidden dims differ, " + ctx.peek(slots).shape_string() +
                             " vs " + ctx.peek(q).shape_string() + " vs " + ctx.peek(k).shape_string());
    auto comp_q = ctx.softmax_rows(ctx.matmul(slots, ctx.transpose(q)));
    auto comp_k = ctx.softmax_rows(ctx.matmul(slots, ctx.transpose(k)));
    return {std::move(comp_q), std::move(comp_k)};
}

inline std::pair<Tensor, Tensor> dynamic_projections(const Tensor& slots, const Tensor& q, const Tensor& k) {
    EagerContext ctx;
    return dynamic_projections(ctx, slots, q, k);
}

/// Restore / pooling coefficients: row-wise linear images of the input, so
/// their leading extent follows the input length.
template <class Ctx>
std::pair<typename Ctx::Value, typename Ctx::Value> reconstruction_maps(
    Ctx& ctx, const typename Ctx::Value& x, const typename Ctx::Value& restore_map,
    const typename Ctx::Value& pool_map) {
    if (ctx.peek(x).cols() != ctx.peek(restore_map).rows() || ctx.peek(x).cols() != ctx.peek(pool_map).rows())
        throw DimensionError("reconstruction_maps: hidden dims differ, " + ctx.peek(x).shape_string() + " vs " +
                             ctx.peek(restore_map).shape_string() + " / " + ctx.peek(pool_map).shape_string());
    return {ctx.matmul(x, restore_map), ctx.matmul(x, pool_map)};
}

inline std::pair<Tensor, Tensor> reconstruction_maps(const Tensor& x, const Tensor& restore_map,
                                                     const Tensor& pool_map) {
    EagerContext ctx;
    return reconstruction_maps(ctx, x, restore_map, pool_map);
}

/// DBA self-attention with independently switchable compressions. With both
/// compressions off the computation collapses to per-head vanilla attention.
///
/// The compressed path never forms an n x n intermediate: everything it
/// touches is n x d, n x d_p, or d_p-sided.
template <class Ctx>
typename Ctx::Value dba_self_attention_flags(Ctx& ctx, const typename Ctx::Value& x,
                                             const DbaParamsT<typename Ctx::Value>& p,
                                             const AttentionConfig& cfg, bool seq_compress,
                                             bool dim_compress) {
    using V = typename Ctx::Value;
    const std::size_t d = cfg.model_dim, heads = cfg.heads, dh = cfg.head_dim();
    if (ctx.peek(x).cols() != d)
        throw DimensionError("dba_self_attention: input width " + ctx.peek(x).shape_string() +
                             " does not match model_dim " + std::to_string(d));

    V q = ctx.matmul(x, p.wq);
    V k = ctx.matmul(x, p.wk);
    V v = ctx.matmul(x, p.wv);

    std::optional<V> restore, pool_t;
    std::vector<V> slot_heads;
    if (seq_compress) {
        auto [r, c] = reconstruction_maps(ctx, x, p.restore_map, p.pool_map);
        restore = std::move(r);
        pool_t = ctx.transpose(c);
        slot_heads = detail::head_slices(ctx, p.slots, d, heads);
    }
    std::vector<V> q_heads = detail::head_slices(ctx, q, d, heads);
    std::vector<V> k_heads = detail::head_slices(ctx, k, d, heads);
    std::vector<V> v_heads = detail::head_slices(ctx, v, d, heads);

    std::vector<V> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        V ql = q_heads[h], kl = k_heads[h], vl = v_heads[h];
        if (seq_compress) {
            auto [comp_q, comp_k] = dynamic_projections(ctx, slot_heads[h], q_heads[h], k_heads[h]);
            ql = ctx.matmul(comp_q, q_heads[h]);
            kl = ctx.matmul(comp_k, k_heads[h]);
            vl = ctx.matmul(*pool_t, v_heads[h]);
        }
        double temp = std::sqrt(static_cast<double>(dh));
        if (dim_compress) {
            ql = ctx.matmul(ql, p.dim_proj);
            kl = ctx.matmul(kl, p.dim_proj);
            temp = std::sqrt(static_cast<double>(cfg.comp_dim));
        }
        auto map = ctx.softmax_rows(ctx.scale(ctx.matmul(ql, ctx.transpose(kl)), 1.0 / temp));
        V mixed = ctx.matmul(map, vl);
        outputs.push_back(seq_compress ? ctx.matmul(*restore, mixed) : std::move(mixed));
    }
    return ctx.matmul(detail::concat_heads(ctx, outputs, d, heads), p.wo);
}

template <class Ctx>
typename Ctx::Value dba_self_attention(Ctx& ctx, const typename Ctx::Value& x,
                                       const DbaParamsT<typename Ctx::Value>& p,
                                       const AttentionConfig& cfg) {
    switch (cfg.mechanism) {
        case Mechanism::dba:
            return dba_self_attention_flags(ctx, x, p, cfg, true, true);
        case Mechanism::dba_no_seq_compress:
            return dba_self_attention_flags(ctx, x, p, cfg, false, true);
        case Mechanism::dba_no_dim_compress:
            return dba_self_attention_flags(ctx, x, p, cfg, true, false);
        default:
            throw ParameterError(std::string("dba_self_attention: mechanism ") + mechanism_name(cfg.mechanism) +
                                 " is not a dba variant");
    }
}

inline Tensor dba_self_attention(const Tensor& x, const DbaParams& p, const AttentionConfig& cfg) {
    EagerContext ctx;
    return dba_self_attention(ctx, x, p, cfg);
}

/// Multi-head baseline attention over the same projection bundle.
template <class Ctx>
typename Ctx::Value vanilla_self_attention(Ctx& ctx, const typename Ctx::Value& x,
                                           const DbaParamsT<typename Ctx::Value>& p,
                                           const AttentionConfig& cfg) {
    using V = typename Ctx::Value;
    const std::size_t d = cfg.model_dim, heads = cfg.heads;
    V q = ctx.matmul(x, p.wq);
    V k = ctx.matmul(x, p.wk);
    V v = ctx.matmul(x, p.wv);
    std::vector<V> q_heads = detail::head_slices(ctx, q, d, heads);
    std::vector<V> k_heads = detail::head_slices(ctx, k, d, heads);
    std::vector<V> v_heads = detail::head_slices(ctx, v, d, heads);
    std::vector<V> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h)
        outputs.push_back(vanilla_attention(ctx, q_heads[h], k_heads[h], v_heads[h]));
    return ctx.matmul(detail::concat_heads(ctx, outputs, d, heads), p.wo);
}

/// Linformer-style control: the compression tables are learned but do not
/// depend on the input, so the layer only accepts the length it was built
/// for. That restriction is the point of the baseline.
template <class Ctx>
typename Ctx::Value fixed_lowrank_attention(Ctx& ctx, const typename Ctx::Value& x,
                                            const FixedLowrankParamsT<typename Ctx::Value>& p,
                                            const AttentionConfig& cfg) {
    using V = typename Ctx::Value;
    const std::size_t d = cfg.model_dim, heads = cfg.heads;
    const std::size_t table_n = ctx.peek(p.comp_q).cols();
    if (ctx.peek(x).rows() != table_n)
        throw ContractError("fixed_lowrank_attention: input length " + std::to_string(ctx.peek(x).rows()) +
                            " differs from the trained length " + std::to_string(table_n) +
                            "; fixed projection tables cannot handle variable length");
    V q = ctx.matmul(x, p.wq);
    V k = ctx.matmul(x, p.wk);
    V v = ctx.matmul(x, p.wv);
    V pool_t = ctx.transpose(p.pool);
    std::vector<V> q_heads = detail::head_slices(ctx, q, d, heads);
    std::vector<V> k_heads = detail::head_slices(ctx, k, d, heads);
    std::vector<V> v_heads = detail::head_slices(ctx, v, d, heads);
    std::vector<V> outputs;
    outputs.reserve(heads);
    const double temp = std::sqrt(static_cast<double>(cfg.comp_dim));
    for (std::size_t h = 0; h < heads; ++h) {
        V ql = ctx.matmul(ctx.matmul(p.comp_q, q_heads[h]), p.dim_proj);
        V kl = ctx.matmul(ctx.matmul(p.comp_k, k_heads[h]), p.dim_proj);
        V vl = ctx.matmul(pool_t, v_heads[h]);
        auto map = ctx.softmax_rows(ctx.scale(ctx.matmul(ql, ctx.transpose(kl)), 1.0 / temp));
        outputs.push_back(ctx.matmul(p.restore, ctx.matmul(map, vl)));
    }
    return ctx.matmul(detail::concat_heads(ctx, outputs, d, heads), p.wo);
}

inline Tensor fixed_lowrank_attention(const Tensor& x, const FixedLowrankParams& p, const AttentionConfig& cfg) {
    EagerContext ctx;
    return fixed_lowrank_attention(ctx, x, p, cfg);
}

/// Cross-attention between two hierarchies. Two interaction stages happen in
/// one layer: the partner sequence is first compressed into d_p summary rows
/// (stage 1), those summaries both steer the compression of the querying
/// hierarchy and serve as its keys/values (stage 2).
///
/// x2_for_slots / x2_for_kv are normally the same value; tests pass distinct
/// nodes to ablate one gradient path while freezing the other.
template <class Ctx>
typename Ctx::Value dba_cross_attention_paths(Ctx& ctx, const typename Ctx::Value& x1,
                                              const typename Ctx::Value& x2_for_slots,
                                              const typename Ctx::Value& x2_for_kv,
                                              const DbaParamsT<typename Ctx::Value>& p1,
                                              const DbaParamsT<typename Ctx::Value>& p2,
                                              const AttentionConfig& cfg) {
    using V = typename Ctx::Value;
    const std::size_t d = cfg.model_dim, heads = cfg.heads;
    if (ctx.peek(x1).cols() != d || ctx.peek(x2_for_slots).cols() != d || ctx.peek(x2_for_kv).cols() != d)
        throw DimensionError("dba_cross_attention: hidden dims differ from model_dim " + std::to_string(d));
    if (!p1.cross_slot_map)
        throw ParameterError("dba_cross_attention: params1 has no cross_slot_map");

    // Stage 1: compress the partner sequence.
    auto compress2 = [&](const V& x2) {
        V comp = ctx.softmax_rows(ctx.matmul(p2.slots, ctx.transpose(x2)));
        return ctx.matmul(comp, x2);  // d_p x d
    };
    V summary_for_slots = compress2(x2_for_slots);
    V summary_for_kv = compress2(x2_for_kv);

    // Stage 2: the summaries steer hierarchy-1 compression and provide K/V.
    V slots1 = ctx.matmul(summary_for_slots, *p1.cross_slot_map);  // d_p x d
    V q1 = ctx.matmul(x1, p1.wq);
    V k2 = ctx.matmul(summary_for_kv, p2.wk);
    V v2 = ctx.matmul(summary_for_kv, p2.wv);
    V restore = ctx.matmul(x1, p1.restore_map);  // n1 x d_p

    std::vector<V> q_heads = detail::head_slices(ctx, q1, d, heads);
    std::vector<V> k_heads = detail::head_slices(ctx, k2, d, heads);
    std::vector<V> v_heads = detail::head_slices(ctx, v2, d, heads);
    std::vector<V> slot_heads = detail::head_slices(ctx, slots1, d, heads);

    std::vector<V> outputs;
    outputs.reserve(heads);
    const double temp = std::sqrt(static_cast<double>(cfg.comp_dim));
    for (std::size_t h = 0; h < heads; ++h) {
        V comp_q = ctx.softmax_rows(ctx.matmul(slot_heads[h], ctx.transpose(q_heads[h])));
        V ql = ctx.matmul(ctx.matmul(comp_q, q_heads[h]), p1.dim_proj);
        V kl = ctx.matmul(k_heads[h], p1.dim_proj);
        auto map = ctx.softmax_rows(ctx.scale(ctx.matmul(ql, ctx.transpose(kl)), 1.0 / temp));
        outputs.push_back(ctx.matmul(restore, ctx.matmul(map, v_heads[h])));
    }
    return ctx.matmul(detail::concat_heads(ctx, outputs, d, heads), p1.wo);
}

template <class Ctx>
typename Ctx::Value dba_cross_attention(Ctx& ctx, const typename Ctx::Value& x1,
                                        const typename Ctx::Value& x2,
                                        const DbaParamsT<typename Ctx::Value>& p1,
                                        const DbaParamsT<typename Ctx::Value>& p2,
                                        const AttentionConfig& cfg) {
    return dba_cross_attention_paths(ctx, x1, x2, x2, p1, p2, cfg);
}

inline Tensor dba_cross_attention(const Tensor& x1, const Tensor& x2, const DbaParams& p1,
                                  const DbaParams& p2, const AttentionConfig& cfg) {
    EagerContext ctx;
    return dba_cross_attention(ctx, x1, x2, p1, p2, cfg);
}

/// Baseline cross-attention: softmax(Q1 K2^T / sqrt(d_h)) V2 per head.
template <class Ctx>
typename Ctx::Value vanilla_cross_attention(Ctx& ctx, const typename Ctx::Value& x1,
                                            const typename Ctx::Value& x2,
                                            const DbaParamsT<typename Ctx::Value>& p1,
                                            const DbaParamsT<typename Ctx::Value>& p2,
                                            const AttentionConfig& cfg) {
    using V = typename Ctx::Value;
    const std::size_t d = cfg.model_dim, heads = cfg.heads;
    V q = ctx.matmul(x1, p1.wq);
    V k = ctx.matmul(x2, p2.wk);
    V v = ctx.matmul(x2, p2.wv);
    std::vector<V> q_heads = detail::head_slices(ctx, q, d, heads);
    std::vector<V> k_heads = detail::head_slices(ctx, k, d, heads);
    std::vector<V> v_heads = detail::head_slices(ctx, v, d, heads);
    std::vector<V> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h)
        outputs.push_back(vanilla_attention(ctx, q_heads[h], k_heads[h], v_heads[h]));
    return ctx.matmul(detail::concat_heads(ctx, outputs, d, heads), p1.wo);
}

}  // namespace dba
