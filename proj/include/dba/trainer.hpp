#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dba/attention.hpp"
#include "dba/autodiff.hpp"
#include "dba/checkpoint.hpp"
#include "dba/rng.hpp"
#include "dba/tensor.hpp"

namespace dba {

struct TrainingError : std::runtime_error {
    std::size_t epoch;
    TrainingError(const std::string& msg, std::size_t epoch_) : std::runtime_error(msg), epoch(epoch_) {}
};

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class TaskKind { majority_token, sparse_recall, cross_match };

inline const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::majority_token: return "majority";
        case TaskKind::sparse_recall: return "sparse-recall";
        case TaskKind::cross_match: return "cross-match";
    }
    return "?";
}

inline TaskKind task_from_name(const std::string& s) {
    if (s == "majority" || s == "majority-token") return TaskKind::majority_token;
    if (s == "sparse-recall") return TaskKind::sparse_recall;
    if (s == "cross-match") return TaskKind::cross_match;
    throw ParameterError("unknown task: " + s);
}

struct TaskSpec {
    TaskKind kind = TaskKind::majority_token;
    std::size_t n = 48;       // sequence length; query length is 1 for cross_match
    std::size_t n2 = 8;       // partner (key set) length, cross_match only
    std::size_t vocab = 8;    // sparse_recall reserves the top symbol as the marker
    std::size_t train_size = 2000;
    std::size_t val_size = 500;
    std::uint64_t seed = 1;

    std::size_t n_classes() const { return kind == TaskKind::cross_match ? 2 : vocab; }
};

struct Sample {
    std::vector<std::size_t> tokens;    // primary sequence (the query for cross_match)
    std::vector<std::size_t> partner;   // key set, cross_match only
    std::size_t label = 0;
};

struct Dataset {
    std::vector<Sample> train, val;
    std::size_t vocab = 0;
    std::size_t n_classes = 0;
};

namespace detail {

inline Sample gen_sample(TaskKind kind, std::size_t n, std::size_t n2, std::size_t vocab, Rng& rng) {
    Sample s;
    switch (kind) {
        case TaskKind::majority_token: {
            // Resample until the mode is unique.
            for (;;) {
                s.tokens.clear();
                std::vector<std::size_t> counts(vocab, 0);
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t t = rng.uniform_index(vocab);
                    s.tokens.push_back(t);
                    ++counts[t];
                }
                std::size_t best = 0, best_count = 0, ties = 0;
                for (std::size_t v = 0; v < vocab; ++v) {
                    if (counts[v] > best_count) {
                        best = v;
                        best_count = counts[v];
                        ties = 1;
                    } else if (counts[v] == best_count) {
                        ++ties;
                    }
                }
                if (ties == 1) {
                    s.label = best;
                    break;
                }
            }
            break;
        }
        case TaskKind::sparse_recall: {
            const std::size_t marker = vocab - 1;
            s.tokens.resize(n);
            for (std::size_t i = 0; i < n; ++i) s.tokens[i] = rng.uniform_index(vocab - 1);
            const std::size_t pos = rng.uniform_index(n - 1);  // marker never in the last slot
            s.tokens[pos] = marker;
            s.label = s.tokens[pos + 1];
            break;
        }
        case TaskKind::cross_match: {
            s.partner.resize(n2);
            for (std::size_t i = 0; i < n2; ++i) s.partner[i] = rng.uniform_index(vocab);
            const bool present = rng.uniform() < 0.5;
            std::size_t query;
            if (present) {
                query = s.partner[rng.uniform_index(n2)];
            } else {
                std::set<std::size_t> used(s.partner.begin(), s.partner.end());
                do {
                    query = rng.uniform_index(vocab);
                } while (used.count(query));
            }
            s.tokens = {query};
            s.label = present ? 1 : 0;
            break;
        }
    }
    return s;
}

inline std::vector<std::size_t> sample_key(const Sample& s) {
    std::vector<std::size_t> key = s.tokens;
    key.push_back(static_cast<std::size_t>(-1));
    key.insert(key.end(), s.partner.begin(), s.partner.end());
    return key;
}

}  // namespace detail

/// Deterministic under seed; train and val are disjoint by construction
/// (duplicates are dropped before the split).
inline Dataset gen_task(const TaskSpec& spec) {
    if (spec.vocab < 3) throw ParameterError("gen_task: vocab must be >= 3");
    if (spec.kind == TaskKind::sparse_recall && spec.n < 2)
        throw ParameterError("gen_task: sparse recall needs n >= 2");
    if (spec.kind == TaskKind::cross_match && spec.n2 + 1 > spec.vocab)
        throw ParameterError("gen_task: cross match needs vocab > n2 so absent queries exist");

    Rng rng(spec.seed);
    Dataset ds;
    ds.vocab = spec.vocab;
    ds.n_classes = spec.n_classes();
    std::set<std::vector<std::size_t>> seen;
    const std::size_t want = spec.train_size + spec.val_size;
    while (ds.train.size() + ds.val.size() < want) {
        Sample s = detail::gen_sample(spec.kind, spec.n, spec.n2, spec.vocab, rng);
        if (!seen.insert(detail::sample_key(s)).second) continue;
        if (ds.train.size() < spec.train_size)
            ds.train.push_back(std::move(s));
        else
            ds.val.push_back(std::move(s));
    }
    return ds;
}

/// Fresh evaluation set at an arbitrary length, same distribution.
inline std::vector<Sample> gen_eval_samples(const TaskSpec& spec, std::size_t length, std::size_t count,
                                            std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(detail::gen_sample(spec.kind, length, spec.n2, spec.vocab, rng));
    return out;
}

/// Training set spread evenly over several sequence lengths (validation stays
/// at spec.n). Length-adaptive mechanisms can train on this directly; the
/// training loop batches samples of equal length together.
inline Dataset gen_task_mixed_lengths(const TaskSpec& spec, const std::vector<std::size_t>& lengths) {
    if (lengths.empty()) throw ParameterError("gen_task_mixed_lengths: need at least one length");
    Dataset ds = gen_task(spec);  // provides the validation split at spec.n
    ds.train.clear();
    Rng rng(spec.seed ^ 0xa5a5a5a5a5a5a5a5ULL);
    const std::size_t per_length = (spec.train_size + lengths.size() - 1) / lengths.size();
    for (std::size_t len : lengths) {
        for (std::size_t i = 0; i < per_length && ds.train.size() < spec.train_size; ++i)
            ds.train.push_back(detail::gen_sample(spec.kind, len, spec.n2, spec.vocab, rng));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelConfig {
    Mechanism mechanism = Mechanism::dba;
    TaskKind task = TaskKind::majority_token;
    std::size_t layers = 1;
    std::size_t vocab = 8;
    std::size_t n_classes = 8;
    std::size_t seq_len = 48;
    std::size_t model_dim = 32;
    std::size_t comp_len = 8;
    std::size_t comp_dim = 12;
    std::size_t heads = 2;
    std::size_t ffn_dim = 64;
    bool positions = false;     // sinusoidal encodings added at the embedding
    bool share_slots = false;   // one slots tensor shared by every layer

    AttentionConfig attention() const {
        AttentionConfig cfg;
        cfg.seq_len = seq_len;
        cfg.model_dim = model_dim;
        cfg.comp_len = comp_len;
        cfg.comp_dim = comp_dim;
        cfg.heads = heads;
        cfg.mechanism = mechanism;
        return cfg;
    }
};

template <class V>
struct BlockT {
    std::optional<DbaParamsT<V>> attn;
    std::optional<DbaParamsT<V>> attn2;  // partner bundle, cross blocks only
    std::optional<FixedLowrankParamsT<V>> fixed;
    V norm1_gain, norm2_gain, ffn_in, ffn_out;
};

template <class V>
struct ModelT {
    V embed;
    std::vector<BlockT<V>> blocks;
    V readout_query;  // 1 x d; zero-initialized, so pooling starts uniform
    V final_gain;
    V cls;
};

struct ModelParams {
    ModelConfig cfg;
    ModelT<Tensor> t;
    std::optional<Tensor> shared_slots;  // set when cfg.share_slots
};

inline ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.task == TaskKind::cross_match && cfg.mechanism == Mechanism::fixed_lowrank_baseline)
        throw ParameterError("make_model: the fixed baseline has no cross-attention form");
    cfg.attention().validate();

    Rng rng(seed);
    const std::size_t d = cfg.model_dim;
    ModelParams m;
    m.cfg = cfg;
    // Unit-variance embeddings keep token content on the same scale as the
    // sinusoidal position signal. With positions on, content starts in the
    // lower half of the dims, mirroring the position table's upper half.
    m.t.embed = gaussian(rng, cfg.vocab, d, 1.0);
    if (cfg.positions) {
        for (std::size_t v = 0; v < cfg.vocab; ++v)
            for (std::size_t j = d / 2; j < d; ++j) m.t.embed(v, j) = 0.0;
        scale_inplace(m.t.embed, std::sqrt(2.0));  // keep row norms near sqrt(d)
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        BlockT<Tensor> b;
        AttentionConfig acfg = cfg.attention();
        if (cfg.mechanism == Mechanism::fixed_lowrank_baseline) {
            b.fixed = make_fixed_lowrank_params(acfg, rng);
        } else if (cfg.task == TaskKind::cross_match) {
            b.attn = make_dba_params(acfg, rng, /*with_cross_map=*/cfg.mechanism != Mechanism::vanilla);
            b.attn2 = make_dba_params(acfg, rng);
        } else {
            b.attn = make_dba_params(acfg, rng);
        }
        b.norm1_gain = Tensor::full(1, d, 1.0);
        b.norm2_gain = Tensor::full(1, d, 1.0);
        b.ffn_in = gaussian(rng, d, cfg.ffn_dim, 1.0 / static_cast<double>(d));
        b.ffn_out = gaussian(rng, cfg.ffn_dim, d, 1.0 / static_cast<double>(cfg.ffn_dim));
        m.t.blocks.push_back(std::move(b));
    }
    m.t.readout_query = Tensor(1, d);
    m.t.final_gain = Tensor::full(1, d, 1.0);
    m.t.cls = gaussian(rng, d, cfg.n_classes, 1.0 / static_cast<double>(d));
    if (cfg.share_slots && cfg.mechanism != Mechanism::fixed_lowrank_baseline &&
        cfg.mechanism != Mechanism::vanilla) {
        m.shared_slots = m.t.blocks[0].attn->slots;
        for (auto& b : m.t.blocks) b.attn->slots = Tensor();  // owned by shared_slots
    }
    return m;
}

// --- parameter registry -----------------------------------------------------

namespace detail {

template <class F>
void visit_dba(DbaParamsT<Tensor>& p, const std::string& prefix, bool skip_slots, F&& f) {
    if (!skip_slots) f(prefix + ".slots", p.slots);
    f(prefix + ".dim_proj", p.dim_proj);
    f(prefix + ".restore_map", p.restore_map);
    f(prefix + ".pool_map", p.pool_map);
    f(prefix + ".wq", p.wq);
    f(prefix + ".wk", p.wk);
    f(prefix + ".wv", p.wv);
    f(prefix + ".wo", p.wo);
    if (p.cross_slot_map) f(prefix + ".cross_slot_map", *p.cross_slot_map);
}

template <class F>
void visit_fixed(FixedLowrankParamsT<Tensor>& p, const std::string& prefix, F&& f) {
    f(prefix + ".comp_q", p.comp_q);
    f(prefix + ".comp_k", p.comp_k);
    f(prefix + ".restore", p.restore);
    f(prefix + ".pool", p.pool);
    f(prefix + ".dim_proj", p.dim_proj);
    f(prefix + ".wq", p.wq);
    f(prefix + ".wk", p.wk);
    f(prefix + ".wv", p.wv);
    f(prefix + ".wo", p.wo);
}

template <class F>
void visit_params(ModelParams& m, F&& f) {
    f("embed", m.t.embed);
    if (m.shared_slots) f("shared.slots", *m.shared_slots);
    for (std::size_t l = 0; l < m.t.blocks.size(); ++l) {
        BlockT<Tensor>& b = m.t.blocks[l];
        const std::string prefix = "blocks." + std::to_string(l);
        if (b.attn) visit_dba(*b.attn, prefix + ".attn", m.shared_slots.has_value(), f);
        if (b.attn2) visit_dba(*b.attn2, prefix + ".attn2", false, f);
        if (b.fixed) visit_fixed(*b.fixed, prefix + ".fixed", f);
        f(prefix + ".norm1_gain", b.norm1_gain);
        f(prefix + ".norm2_gain", b.norm2_gain);
        f(prefix + ".ffn_in", b.ffn_in);
        f(prefix + ".ffn_out", b.ffn_out);
    }
    f("readout_query", m.t.readout_query);
    f("final_gain", m.t.final_gain);
    f("cls", m.t.cls);
}

}  // namespace detail

inline std::vector<std::pair<std::string, Tensor*>> parameter_entries(ModelParams& m) {
    std::vector<std::pair<std::string, Tensor*>> out;
    detail::visit_params(m, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

inline std::size_t parameter_count(ModelParams& m) {
    std::size_t c = 0;
    for (auto& [name, t] : parameter_entries(m)) c += t->numel();
    return c;
}

/// Attention-layer parameters only (the quantity compared across mechanisms).
inline std::size_t attention_parameter_count(ModelParams& m) {
    std::size_t c = 0;
    for (auto& [name, t] : parameter_entries(m)) {
        if (name.find(".attn") != std::string::npos || name.find(".fixed") != std::string::npos ||
            name.find("shared.slots") != std::string::npos)
            c += t->numel();
    }
    return c;
}

inline NamedTensors to_named_tensors(ModelParams& m) {
    NamedTensors out;
    detail::visit_params(m, [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

/// Rebuilds a model from a checkpoint; names and shapes must match the
/// config-derived skeleton exactly, and every offender is listed.
inline ModelParams model_from_named_tensors(const ModelConfig& cfg, const NamedTensors& tensors) {
    ModelParams m = make_model(cfg, /*seed=*/0);
    auto entries = parameter_entries(m);
    if (entries.size() != tensors.size())
        throw CheckpointError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model needs " +
                              std::to_string(entries.size()));
    std::string bad;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].first != tensors[i].first ||
            entries[i].second->shape() != tensors[i].second.shape()) {
            bad += (bad.empty() ? "" : ", ") + entries[i].first + " (checkpoint has " + tensors[i].first +
                   " " + tensors[i].second.shape_string() + ")";
        }
    }
    if (!bad.empty()) throw CheckpointError("checkpoint mismatch at: " + bad);
    for (std::size_t i = 0; i < entries.size(); ++i) *entries[i].second = tensors[i].second;
    return m;
}

inline void save_model(ModelParams& m, const std::string& path) { save_checkpoint(to_named_tensors(m), path); }

inline ModelParams load_model(const ModelConfig& cfg, const std::string& path) {
    return model_from_named_tensors(cfg, load_checkpoint(path));
}

// --- forward ----------------------------------------------------------------

namespace detail {

inline Tensor one_hot(const std::vector<std::size_t>& tokens, std::size_t vocab) {
    Tensor t(tokens.size(), vocab);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= vocab) throw ParameterError("token id out of vocabulary range");
        t(i, tokens[i]) = 1.0;
    }
    return t;
}

/// Sinusoidal table over the upper half of the feature dims. Token content
/// (lower half at init) and position then start in disjoint subspaces, which
/// keeps content matching and position matching from interfering early in
/// training; the embedding is free to drift into the upper dims later.
inline Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
    Tensor pe(n, d);
    const std::size_t start = d / 2;
    const std::size_t span = d - start;
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t i = 0; i < span; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(span));
            pe(pos, start + i) = std::sin(static_cast<double>(pos) * freq);
            if (start + i + 1 < d) pe(pos, start + i + 1) = std::cos(static_cast<double>(pos) * freq);
        }
    }
    return pe;
}

/// Effective per-layer view with shared slots substituted in.
template <class V>
const DbaParamsT<V>& effective_attn(const BlockT<V>& b) {
    return *b.attn;
}

template <class Ctx, class V = typename Ctx::Value>
V embed_tokens(Ctx& ctx, const ModelConfig& cfg, const V& embed, const std::vector<std::size_t>& tokens) {
    V x = ctx.matmul(ctx.constant(one_hot(tokens, cfg.vocab)), embed);
    if (cfg.positions) x = ctx.add(x, ctx.constant(sinusoidal_positions(tokens.size(), cfg.model_dim)));
    return x;
}

template <class Ctx, class V = typename Ctx::Value>
V ffn_residual(Ctx& ctx, const BlockT<V>& b, const V& x) {
    V h = ctx.rms_norm(x, b.norm2_gain);
    h = ctx.matmul(ctx.relu(ctx.matmul(h, b.ffn_in)), b.ffn_out);
    return ctx.add(x, h);
}

}  // namespace detail

/// Class logits (1 x n_classes) for one sample.
template <class Ctx, class V = typename Ctx::Value>
V model_logits(Ctx& ctx, const ModelConfig& cfg, const ModelT<V>& model, const Sample& sample) {
    AttentionConfig acfg = cfg.attention();
    V x = detail::embed_tokens(ctx, cfg, model.embed, sample.tokens);

    if (cfg.task == TaskKind::cross_match) {
        V x2 = detail::embed_tokens(ctx, cfg, model.embed, sample.partner);
        for (const BlockT<V>& b : model.blocks) {
            V q = ctx.rms_norm(x, b.norm1_gain);
            V kv = ctx.rms_norm(x2, b.norm1_gain);
            V a = cfg.mechanism == Mechanism::vanilla
                      ? vanilla_cross_attention(ctx, q, kv, *b.attn, *b.attn2, acfg)
                      : dba_cross_attention(ctx, q, kv, *b.attn, *b.attn2, acfg);
            x = ctx.add(x, a);
            x = detail::ffn_residual(ctx, b, x);
        }
    } else {
        for (const BlockT<V>& b : model.blocks) {
            V h = ctx.rms_norm(x, b.norm1_gain);
            V a;
            switch (cfg.mechanism) {
                case Mechanism::vanilla:
                    a = vanilla_self_attention(ctx, h, *b.attn, acfg);
                    break;
                case Mechanism::fixed_lowrank_baseline:
                    a = fixed_lowrank_attention(ctx, h, *b.fixed, acfg);
                    break;
                default:
                    a = dba_self_attention(ctx, h, *b.attn, acfg);
                    break;
            }
            x = ctx.add(x, a);
            x = detail::ffn_residual(ctx, b, x);
        }
    }
    // Attention-pooled readout; a zero query makes this exactly the row mean,
    // training can sharpen it onto informative positions.
    V weights = ctx.softmax_rows(ctx.scale(
        ctx.matmul(model.readout_query, ctx.transpose(x)),
        1.0 / std::sqrt(static_cast<double>(cfg.model_dim))));
    V pooled = ctx.matmul(weights, x);
    return ctx.matmul(ctx.rms_norm(pooled, model.final_gain), model.cls);
}

/// Eager view of the stored tensors with shared slots substituted.
inline ModelT<Tensor> eager_view(const ModelParams& m) {
    ModelT<Tensor> v = m.t;
    if (m.shared_slots)
        for (auto& b : v.blocks)
            if (b.attn) b.attn->slots = *m.shared_slots;
    return v;
}

/// Tape registration in the same order as parameter_entries.
inline ModelT<Var> lift_model(Tape& tape, ModelParams& m) {
    ModelT<Var> out;
    out.embed = tape.parameter(m.t.embed);
    std::optional<Var> shared;
    if (m.shared_slots) shared = tape.parameter(*m.shared_slots);
    for (BlockT<Tensor>& b : m.t.blocks) {
        BlockT<Var> lb;
        if (b.attn) {
            DbaParamsT<Var> lp;
            lp.slots = shared ? *shared : tape.parameter(b.attn->slots);
            lp.dim_proj = tape.parameter(b.attn->dim_proj);
            lp.restore_map = tape.parameter(b.attn->restore_map);
            lp.pool_map = tape.parameter(b.attn->pool_map);
            lp.wq = tape.parameter(b.attn->wq);
            lp.wk = tape.parameter(b.attn->wk);
            lp.wv = tape.parameter(b.attn->wv);
            lp.wo = tape.parameter(b.attn->wo);
            if (b.attn->cross_slot_map) lp.cross_slot_map = tape.parameter(*b.attn->cross_slot_map);
            lb.attn = lp;
        }
        if (b.attn2) lb.attn2 = lift(tape, *b.attn2);
        if (b.fixed) lb.fixed = lift(tape, *b.fixed);
        lb.norm1_gain = tape.parameter(b.norm1_gain);
        lb.norm2_gain = tape.parameter(b.norm2_gain);
        lb.ffn_in = tape.parameter(b.ffn_in);
        lb.ffn_out = tape.parameter(b.ffn_out);
        out.blocks.push_back(std::move(lb));
    }
    out.readout_query = tape.parameter(m.t.readout_query);
    out.final_gain = tape.parameter(m.t.final_gain);
    out.cls = tape.parameter(m.t.cls);
    return out;
}

/// Var ids of model parameters in parameter_entries order.
inline std::vector<int> lifted_ids(const ModelT<Var>& lm, const ModelParams& m) {
    std::vector<int> ids;
    ids.push_back(lm.embed.id);
    if (m.shared_slots) ids.push_back(lm.blocks[0].attn->slots.id);
    for (const BlockT<Var>& b : lm.blocks) {
        if (b.attn) {
            if (!m.shared_slots) ids.push_back(b.attn->slots.id);
            ids.push_back(b.attn->dim_proj.id);
            ids.push_back(b.attn->restore_map.id);
            ids.push_back(b.attn->pool_map.id);
            ids.push_back(b.attn->wq.id);
            ids.push_back(b.attn->wk.id);
            ids.push_back(b.attn->wv.id);
            ids.push_back(b.attn->wo.id);
            if (b.attn->cross_slot_map) ids.push_back(b.attn->cross_slot_map->id);
        }
        if (b.attn2) {
            ids.push_back(b.attn2->slots.id);
            ids.push_back(b.attn2->dim_proj.id);
            ids.push_back(b.attn2->restore_map.id);
            ids.push_back(b.attn2->pool_map.id);
            ids.push_back(b.attn2->wq.id);
            ids.push_back(b.attn2->wk.id);
            ids.push_back(b.attn2->wv.id);
            ids.push_back(b.attn2->wo.id);
        }
        if (b.fixed) {
            ids.push_back(b.fixed->comp_q.id);
            ids.push_back(b.fixed->comp_k.id);
            ids.push_back(b.fixed->restore.id);
            ids.push_back(b.fixed->pool.id);
            ids.push_back(b.fixed->dim_proj.id);
            ids.push_back(b.fixed->wq.id);
            ids.push_back(b.fixed->wk.id);
            ids.push_back(b.fixed->wv.id);
            ids.push_back(b.fixed->wo.id);
        }
        ids.push_back(b.norm1_gain.id);
        ids.push_back(b.norm2_gain.id);
        ids.push_back(b.ffn_in.id);
        ids.push_back(b.ffn_out.id);
    }
    ids.push_back(lm.readout_query.id);
    ids.push_back(lm.final_gain.id);
    ids.push_back(lm.cls.id);
    return ids;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
        if (m_.empty()) {
            for (Tensor* p : params) {
                m_.emplace_back(p->shape());
                v_.emplace_back(p->shape());
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double* p = params[i]->data();
            const double* g = grads[i]->data();
            double* m = m_[i].data();
            double* v = v_[i].data();
            for (std::size_t k = 0; k < params[i]->numel(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                p[k] -= cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::string mechanism;
    std::size_t epochs = 0;
    double final_train_loss = 0.0;
    double final_train_acc = 0.0;
    double val_accuracy = 0.0;
    double wall_seconds = 0.0;
    std::size_t param_count = 0;
    std::vector<EpochLog> log;
};

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    AdamConfig adam;
    std::uint64_t seed = 1;
};

inline double eval_accuracy(const ModelParams& m, const std::vector<Sample>& samples) {
    EagerContext ctx;
    ModelT<Tensor> view = eager_view(m);
    std::size_t hits = 0;
    for (const Sample& s : samples) {
        Tensor logits = model_logits(ctx, m.cfg, view, s);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits(0, c) > logits(0, best)) best = c;
        if (best == s.label) ++hits;
    }
    return samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size());
}

/// Adam training with per-epoch logging. Deterministic under seed: data
/// order, initialization, and updates all derive from fixed streams.
inline TrainReport train(ModelParams& model, const Dataset& data, const TrainConfig& tc) {
    const auto wall0 = std::chrono::steady_clock::now();
    Adam opt(tc.adam);
    Rng shuffle_rng(tc.seed ^ 0x5151515151515151ULL);

    TrainReport report;
    report.mechanism = mechanism_name(model.cfg.mechanism);
    report.epochs = tc.epochs;
    report.param_count = parameter_count(model);

    // Batches hold samples of one length each; lengths may differ across
    // batches. Buckets are shuffled per epoch, as is the batch order.
    std::map<std::size_t, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < data.train.size(); ++i)
        buckets[data.train[i].tokens.size()].push_back(i);

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto e0 = std::chrono::steady_clock::now();
        std::vector<std::vector<std::size_t>> batches_idx;
        for (auto& [len, idx] : buckets) {
            for (std::size_t i = idx.size(); i > 1; --i)
                std::swap(idx[i - 1], idx[shuffle_rng.uniform_index(i)]);
            for (std::size_t start = 0; start < idx.size(); start += tc.batch_size) {
                const std::size_t end = std::min(idx.size(), start + tc.batch_size);
                batches_idx.emplace_back(idx.begin() + start, idx.begin() + end);
            }
        }
        for (std::size_t i = batches_idx.size(); i > 1; --i)
            std::swap(batches_idx[i - 1], batches_idx[shuffle_rng.uniform_index(i)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const std::vector<std::size_t>& batch : batches_idx) {
            Tape tape;
            TapeContext ctx{&tape};
            ModelT<Var> lifted = lift_model(tape, model);

            Var loss{-1};
            for (std::size_t i : batch) {
                const Sample& s = data.train[i];
                Var logits = model_logits(ctx, model.cfg, lifted, s);
                Var sample_loss = tape.cross_entropy_logits(logits, {s.label});
                loss = loss.id < 0 ? sample_loss : tape.add(loss, sample_loss);
            }
            loss = tape.scale(loss, 1.0 / static_cast<double>(batch.size()));
            const double loss_value = tape.value(loss)(0, 0);
            if (!std::isfinite(loss_value))
                throw TrainingError("training diverged (non-finite loss) at epoch " + std::to_string(epoch),
                                    epoch);
            loss_sum += loss_value;
            ++batches;

            GradMap grads = tape.backward(loss);
            std::vector<int> ids = lifted_ids(lifted, model);
            auto entries = parameter_entries(model);
            std::vector<Tensor*> params;
            std::vector<const Tensor*> gptrs;
            params.reserve(entries.size());
            gptrs.reserve(entries.size());
            for (std::size_t i = 0; i < entries.size(); ++i) {
                params.push_back(entries[i].second);
                gptrs.push_back(&grads.at(ids[i]));
            }
            opt.step(params, gptrs);
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(batches);
        log.val_acc = eval_accuracy(model, data.val);
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count();
        report.log.push_back(log);
    }

    report.final_train_loss = report.log.empty() ? 0.0 : report.log.back().train_loss;
    report.val_accuracy = report.log.empty() ? 0.0 : report.log.back().val_acc;
    report.final_train_acc = eval_accuracy(model, data.train);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return report;
}

/// Evaluate one trained model at several lengths with no parameter change.
/// Mechanisms with length-dependent state reject by contract inside the layer.
inline std::vector<std::pair<std::size_t, double>> variable_length_eval(
    const ModelParams& model, const TaskSpec& spec, const std::vector<std::size_t>& lengths,
    std::size_t count, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, double>> out;
    for (std::size_t len : lengths) {
        std::vector<Sample> samples = gen_eval_samples(spec, len, count, seed + len);
        out.emplace_back(len, eval_accuracy(model, samples));
    }
    return out;
}

inline std::string train_log_csv(const TrainReport& report) {
    std::ostringstream os;
    os << "epoch,train_loss,val_acc,seconds\n";
    os.precision(10);
    for (const EpochLog& l : report.log)
        os << l.epoch << ',' << l.train_loss << ',' << l.val_acc << ',' << l.seconds << '\n';
    return os.str();
}

inline void write_train_log(const TrainReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ParameterError("cannot open training log for writing: " + path);
    os << train_log_csv(report);
}

}  // namespace dba
