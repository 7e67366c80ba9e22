// Command-line front end: benchmarks, bound validators, gradient checks,
// toy training, and projection dumps, one subcommand each.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dba/attention.hpp"
#include "dba/bench.hpp"
#include "dba/checkpoint.hpp"
#include "dba/oracles.hpp"
#include "dba/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct CommonModelArgs {
    std::string mechanism = "dba";
    std::string task = "majority";
    std::size_t n = 48;
    std::size_t n2 = 8;
    std::size_t d = 32;
    std::size_t dp = 8;
    std::size_t din = 12;
    std::size_t heads = 2;
    std::size_t layers = 1;
    std::size_t ffn = 0;  // 0: use 2*d
    std::size_t vocab = 8;
    bool share_slots = false;
    std::uint64_t seed = 1;

    dba::TaskSpec task_spec(std::size_t train_size, std::size_t val_size) const {
        dba::TaskSpec spec;
        spec.kind = dba::task_from_name(task);
        spec.n = spec.kind == dba::TaskKind::cross_match ? 1 : n;
        spec.n2 = n2;
        spec.vocab = vocab;
        spec.train_size = train_size;
        spec.val_size = val_size;
        spec.seed = seed;
        return spec;
    }

    dba::ModelConfig model_config() const {
        dba::ModelConfig mc;
        mc.mechanism = dba::mechanism_from_name(mechanism);
        mc.task = dba::task_from_name(task);
        mc.layers = layers;
        mc.vocab = vocab;
        mc.n_classes = mc.task == dba::TaskKind::cross_match ? 2 : vocab;
        mc.seq_len = mc.task == dba::TaskKind::cross_match ? 1 : n;
        mc.model_dim = d;
        mc.comp_len = dp;
        mc.comp_dim = din;
        mc.heads = heads;
        mc.ffn_dim = ffn ? ffn : 2 * d;
        mc.positions = mc.task == dba::TaskKind::sparse_recall;
        mc.share_slots = share_slots;
        return mc;
    }
};

void add_model_flags(CLI::App* cmd, CommonModelArgs& args) {
    cmd->add_option("--mechanism", args.mechanism,
                    "vanilla|dba|dba_no_seq_compress|dba_no_dim_compress|fixed_lowrank_baseline");
    cmd->add_option("--task", args.task, "majority|sparse-recall|cross-match");
    cmd->add_option("--n", args.n, "sequence length");
    cmd->add_option("--n2", args.n2, "partner sequence length (cross-match)");
    cmd->add_option("--d", args.d, "model width");
    cmd->add_option("--dp", args.dp, "compressed sequence length");
    cmd->add_option("--din", args.din, "compressed hidden width");
    cmd->add_option("--heads", args.heads, "attention heads");
    cmd->add_option("--layers", args.layers, "transformer blocks");
    cmd->add_option("--ffn", args.ffn, "feedforward width (default 2*d)");
    cmd->add_option("--vocab", args.vocab, "vocabulary size");
    cmd->add_flag("--share-slots", args.share_slots, "share one slots tensor across layers");
    cmd->add_option("--seed", args.seed, "random seed")->envname("DBA_SEED");
}

void print_config_warnings(const dba::AttentionConfig& cfg) {
    for (const std::string& w : cfg.validate()) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
    std::vector<std::string> mechanisms = {"vanilla", "dba"};
    std::vector<std::size_t> lengths = {256, 512, 1024, 2048, 4096};
    std::size_t d = 64, dp = 16, din = 24, heads = 1;
    std::size_t reps = 10;
    std::uint64_t seed = 42;
    std::string out = "sweep.csv";
    std::string svg;
};

int run_bench(const BenchArgs& a) {
    if (a.lengths.size() < 4) {
        std::fprintf(stderr, "bench: need >= 4 lengths for slope fit\n");
        return kExitUsage;
    }
    if (a.reps < 5) {
        std::fprintf(stderr, "bench: need reps >= 5\n");
        return kExitUsage;
    }
    dba::AttentionConfig tmpl;
    tmpl.model_dim = a.d;
    tmpl.comp_len = a.dp;
    tmpl.comp_dim = a.din;
    tmpl.heads = a.heads;
    tmpl.seq_len = a.lengths.front();
    print_config_warnings(tmpl);

    std::vector<dba::Mechanism> mechs;
    for (const std::string& m : a.mechanisms) mechs.push_back(dba::mechanism_from_name(m));

    auto records = dba::run_sweep(mechs, a.lengths, tmpl, a.reps, a.seed);
    dba::write_csv(records, a.out);
    auto fits = dba::fit_scaling(records);
    if (!a.svg.empty()) dba::write_svg(records, fits, a.svg);

    std::printf("%s\n", dba::to_csv(records).c_str());
    bool sane = true;
    for (const auto& fit : fits) {
        std::printf("slope[%s] = %.3f (r2 %.3f) over n in [%zu, %zu]\n", fit.mechanism.c_str(), fit.slope,
                    fit.r2, *std::min_element(fit.n_values.begin(), fit.n_values.end()),
                    *std::max_element(fit.n_values.begin(), fit.n_values.end()));
    }
    // sanity: wall time grows from the smallest to the largest length
    for (const std::string& m : a.mechanisms) {
        const dba::BenchRecord *first = nullptr, *last = nullptr;
        for (const auto& r : records) {
            if (r.mechanism != m || r.oom) continue;
            if (!first || r.n < first->n) first = &r;
            if (!last || r.n > last->n) last = &r;
        }
        if (!first || !last || !(last->wall_ms_mean > first->wall_ms_mean)) {
            std::fprintf(stderr, "bench: timing not monotone for %s\n", m.c_str());
            sane = false;
        }
    }
    std::printf("csv written to %s\n", a.out.c_str());
    return sane ? kExitOk : kExitCheckFailed;
}

// --- validate ----------------------------------------------------------------

struct ValidateArgs {
    double epsilon = 0.0;  // when set with --dp, print the minimum dimension
    std::size_t dp = 0;
    std::size_t d = 16;
    std::size_t trials = 2000;
    std::uint64_t seed = 7;
    unsigned threads = 0;
    std::string out = "validation.log";
};

int run_validate(const ValidateArgs& a) {
    if (a.trials < 100) {
        std::fprintf(stderr, "validate: need at least 100 trials\n");
        return kExitUsage;
    }
    if (a.epsilon != 0.0 && a.dp != 0) {
        std::printf("minimum compressed hidden dimension for d_p=%zu, eps=%g: %zu\n", a.dp, a.epsilon,
                    dba::jl_minimum_dim(a.dp, a.epsilon));
        return kExitOk;
    }

    bool all_pass = true;
    std::printf("minimum compressed hidden dimension for d_p=16, eps=0.5: %zu\n",
                dba::jl_minimum_dim(16, 0.5));

    for (double eps : {0.3, 0.5, 0.7}) {
        for (std::size_t dp : {std::size_t{8}, std::size_t{16}}) {
            const std::size_t dmin = dba::jl_minimum_dim(dp, eps);
            for (std::size_t din : {dmin, 2 * dmin}) {
                dba::JlTrialReport rep =
                    dba::jl_monte_carlo(a.d, dp, din, eps, a.trials, a.seed, a.threads);
                dba::append_record(a.out, dba::to_record(rep));
                std::printf("jl %-38s rate %.4f bound %.4f %s\n", rep.params_string().c_str(),
                            rep.empirical_rate(), rep.bound, rep.pass() ? "pass" : "FAIL");
                all_pass = all_pass && rep.pass();
            }
        }
    }

    for (std::size_t r = 1; r <= 12; ++r) {
        dba::RepresentabilityReport rep = dba::lowrank_representability_check(24, 12, r, a.seed + r);
        dba::append_record(a.out, dba::to_record(rep));
        std::printf("representability %-12s rank %zu err %.2e %s\n", rep.params_string().c_str(),
                    rep.measured_rank, rep.exact_error, rep.pass ? "pass" : "FAIL");
        all_pass = all_pass && rep.pass;
    }

    const double deviation = dba::reduction_identity_max_deviation(16, 16, 20);
    const bool reduction_ok = deviation <= 1e-10;
    dba::append_record(a.out, dba::CheckRecord{"reduction_identity", "n=16 d=16 seeds=20", 20,
                                               reduction_ok ? 0u : 1u, 0.0, reduction_ok});
    std::printf("reduction identity max deviation %.3e %s\n", deviation, reduction_ok ? "pass" : "FAIL");
    all_pass = all_pass && reduction_ok;

    std::printf("records appended to %s\n", a.out.c_str());
    return all_pass ? kExitOk : kExitCheckFailed;
}

// --- gradcheck ----------------------------------------------------------------

struct GradcheckArgs {
    std::size_t n = 6, d = 8, dp = 3, din = 4, heads = 2;
    std::size_t seeds = 10;
    std::uint64_t seed = 3;
};

int run_gradcheck(const GradcheckArgs& a) {
    if (a.n > 16 || a.d > 16) {
        std::fprintf(stderr, "gradcheck: finite differences need n <= 16 and d <= 16\n");
        return kExitUsage;
    }
    dba::AttentionConfig cfg;
    cfg.seq_len = a.n;
    cfg.model_dim = a.d;
    cfg.comp_len = a.dp;
    cfg.comp_dim = a.din;
    cfg.heads = a.heads;
    cfg.mechanism = dba::Mechanism::dba;
    print_config_warnings(cfg);

    bool ok = true;
    for (std::uint64_t s = a.seed; s < a.seed + a.seeds; ++s) {
        dba::GradcheckReport self = dba::gradcheck_layer(cfg, s);
        dba::GradcheckReport cross = dba::gradcheck_cross_layer(cfg, a.n, a.n + 2, s);
        std::printf("seed %llu  self max %.3e  cross max %.3e\n", static_cast<unsigned long long>(s),
                    self.max_discrepancy, cross.max_discrepancy);
        if (s == a.seed) {
            for (const auto& [name, v] : self.per_tensor) std::printf("  self  %-20s %.3e\n", name.c_str(), v);
            for (const auto& [name, v] : cross.per_tensor) std::printf("  cross %-20s %.3e\n", name.c_str(), v);
        }
        ok = ok && self.max_discrepancy <= 1e-5 && cross.max_discrepancy <= 1e-5;
    }
    std::printf("gradcheck %s\n", ok ? "pass" : "FAIL");
    return ok ? kExitOk : kExitCheckFailed;
}

// --- train / eval / dump ------------------------------------------------------

struct TrainArgs {
    CommonModelArgs model;
    std::size_t epochs = 30;
    std::size_t batch = 32;
    std::size_t train_size = 2000;
    std::size_t val_size = 500;
    std::string out = "model.dba";
    std::string log;
};

int run_train(const TrainArgs& a) {
    dba::Dataset data = dba::gen_task(a.model.task_spec(a.train_size, a.val_size));
    dba::ModelConfig mc = a.model.model_config();
    print_config_warnings(mc.attention());
    dba::ModelParams model = dba::make_model(mc, a.model.seed);

    dba::TrainConfig tc;
    tc.epochs = a.epochs;
    tc.batch_size = a.batch;
    tc.seed = a.model.seed;
    dba::TrainReport report = dba::train(model, data, tc);

    dba::save_model(model, a.out);
    const std::string log_path = a.log.empty() ? a.out + ".train.csv" : a.log;
    dba::write_train_log(report, log_path);

    std::printf("mechanism=%s params=%zu epochs=%zu final_loss=%.6f train_acc=%.4f val_acc=%.4f (%.1fs)\n",
                report.mechanism.c_str(), report.param_count, report.epochs, report.final_train_loss,
                report.final_train_acc, report.val_accuracy, report.wall_seconds);
    std::printf("checkpoint %s, log %s\n", a.out.c_str(), log_path.c_str());
    return kExitOk;
}

struct EvalArgs {
    CommonModelArgs model;
    std::string checkpoint = "model.dba";
    std::vector<std::size_t> lengths;  // empty: plain accuracy at the training length
    std::string split = "val";
    std::size_t train_size = 2000;
    std::size_t val_size = 500;
};

int run_eval(const EvalArgs& a) {
    dba::ModelParams model = dba::load_model(a.model.model_config(), a.checkpoint);
    dba::TaskSpec spec = a.model.task_spec(a.train_size, a.val_size);
    if (!a.lengths.empty()) {
        auto per_length = dba::variable_length_eval(model, spec, a.lengths, 400, a.model.seed + 1000);
        for (auto [len, acc] : per_length) std::printf("n=%zu accuracy %.4f\n", len, acc);
        return kExitOk;
    }
    dba::Dataset data = dba::gen_task(spec);
    const double acc = dba::eval_accuracy(model, a.split == "train" ? data.train : data.val);
    std::printf("%s accuracy %.4f\n", a.split.c_str(), acc);
    return kExitOk;
}

struct DumpArgs {
    CommonModelArgs model;
    std::string checkpoint;
    std::string input1, input2;
    std::string out = "projections";
};

dba::Tensor read_tensor_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw dba::ParameterError("cannot open input tensor file: " + path);
    return dba::parse_text(is);
}

int run_dump(const DumpArgs& a) {
    if (a.checkpoint.empty() || a.input1.empty() || a.input2.empty()) {
        std::fprintf(stderr, "dump-projections: --checkpoint, --input and --input2 are required\n");
        return kExitCheckFailed;
    }
    dba::ModelParams model = dba::load_model(a.model.model_config(), a.checkpoint);
    if (!model.t.blocks[0].attn) {
        std::fprintf(stderr, "dump-projections: checkpointed mechanism has no dynamic projections\n");
        return kExitCheckFailed;
    }
    const dba::ModelConfig mc = a.model.model_config();
    const dba::DbaParams p = dba::eager_view(model).blocks[0].attn.value();

    std::filesystem::create_directories(a.out);
    dba::Tensor first_comp_q;
    int idx = 1;
    for (const std::string& path : {a.input1, a.input2}) {
        dba::Tensor x = read_tensor_file(path);
        if (x.cols() != mc.model_dim)
            throw dba::DimensionError("input width " + x.shape_string() + " does not match model width " +
                                      std::to_string(mc.model_dim));
        dba::Tensor q = dba::matmul(x, p.wq);
        dba::Tensor k = dba::matmul(x, p.wk);
        const std::size_t heads = mc.heads, d = mc.model_dim, dp = mc.comp_len;

        // per-head compression weights stacked along rows: (heads*d_p) x n
        dba::Tensor comp_q(heads * dp, x.rows()), comp_k(heads * dp, x.rows());
        for (std::size_t h = 0; h < heads; ++h) {
            dba::Tensor sel = dba::detail::head_selector(d, heads, h);
            auto [wr, wc] = dba::dynamic_projections(dba::matmul(p.slots, sel), dba::matmul(q, sel),
                                                     dba::matmul(k, sel));
            for (std::size_t i = 0; i < dp; ++i)
                for (std::size_t j = 0; j < x.rows(); ++j) {
                    comp_q(h * dp + i, j) = wr(i, j);
                    comp_k(h * dp + i, j) = wc(i, j);
                }
        }
        auto [restore, pool] = dba::reconstruction_maps(x, p.restore_map, p.pool_map);

        auto write = [&](const std::string& name, const dba::Tensor& t) {
            std::ofstream os(a.out + "/input" + std::to_string(idx) + "_" + name + ".txt");
            dba::dump_text(t, os);
        };
        write("comp_q", comp_q);
        write("comp_k", comp_k);
        write("restore", restore);
        write("pool", pool);
        if (idx == 1)
            first_comp_q = comp_q;
        else if (comp_q.same_shape(first_comp_q))
            std::printf("comp_q difference (frobenius): %.6e\n",
                        dba::frobenius_norm(dba::sub(comp_q, first_comp_q)));
        ++idx;
    }
    std::printf("projection dumps written under %s\n", a.out.c_str());
    return kExitOk;
}


/// Flat `key = value` configuration files, `#` comments. The file expands to
/// `--key=value` tokens inserted before the explicit flags, so flags override
/// file values and unknown keys fail option parsing.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::string config_path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (config_path.empty() || args.size() < 2) return args;

    std::ifstream is(config_path);
    if (!is) throw dba::ParameterError("cannot open config file: " + config_path);
    std::vector<std::string> expanded = {args[0], args[1]};
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto strip = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw dba::ParameterError("config line is not key=value: " + line);
        expanded.push_back("--" + strip(line.substr(0, eq)) + "=" + strip(line.substr(eq + 1)));
    }
    expanded.insert(expanded.end(), args.begin() + 2, args.end());
    return expanded;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic bilinear low-rank attention toolkit"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    std::string config_file;

    BenchArgs bench_args;
    CLI::App* bench = app.add_subcommand("bench", "time mechanisms across sequence lengths");
    bench->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    bench->add_option("--config", config_file, "flat key=value configuration file");
    bench->add_option("--mechanisms", bench_args.mechanisms, "comma-separated mechanism list")->delimiter(',');
    bench->add_option("--n", bench_args.lengths, "comma-separated sequence lengths")->delimiter(',');
    bench->add_option("--d", bench_args.d, "model width");
    bench->add_option("--dp", bench_args.dp, "compressed sequence length");
    bench->add_option("--din", bench_args.din, "compressed hidden width");
    bench->add_option("--heads", bench_args.heads, "attention heads");
    bench->add_option("--reps", bench_args.reps, "timed repetitions per point");
    bench->add_option("--seed", bench_args.seed, "random seed")->envname("DBA_SEED");
    bench->add_option("--out", bench_args.out, "csv output path");
    bench->add_option("--svg", bench_args.svg, "optional svg plot path");

    ValidateArgs validate_args;
    CLI::App* validate = app.add_subcommand("validate", "run the bound and representability checks");
    validate->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    validate->add_option("--config", config_file, "flat key=value configuration file");
    validate->add_option("--epsilon", validate_args.epsilon, "with --dp: print the minimum hidden dimension");
    validate->add_option("--dp", validate_args.dp, "compressed length for --epsilon");
    validate->add_option("--d", validate_args.d, "ambient dimension of sampled score blocks");
    validate->add_option("--trials", validate_args.trials, "Monte Carlo trials per grid cell");
    validate->add_option("--seed", validate_args.seed, "random seed")->envname("DBA_SEED");
    validate->add_option("--threads", validate_args.threads, "worker threads (0 = hardware)");
    validate->add_option("--out", validate_args.out, "results log (appended)");

    GradcheckArgs grad_args;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gradcheck->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    gradcheck->add_option("--config", config_file, "flat key=value configuration file");
    gradcheck->add_option("--n", grad_args.n, "sequence length (<= 16)");
    gradcheck->add_option("--d", grad_args.d, "model width (<= 16)");
    gradcheck->add_option("--dp", grad_args.dp, "compressed sequence length");
    gradcheck->add_option("--din", grad_args.din, "compressed hidden width");
    gradcheck->add_option("--heads", grad_args.heads, "attention heads");
    gradcheck->add_option("--seeds", grad_args.seeds, "number of seeds to sweep");
    gradcheck->add_option("--seed", grad_args.seed, "first seed")->envname("DBA_SEED");

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "train a toy model on a synthetic task");
    train->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    train->add_option("--config", config_file, "flat key=value configuration file");
    add_model_flags(train, train_args.model);
    train->add_option("--epochs", train_args.epochs, "training epochs");
    train->add_option("--batch", train_args.batch, "batch size");
    train->add_option("--train-size", train_args.train_size, "training samples");
    train->add_option("--val-size", train_args.val_size, "validation samples");
    train->add_option("--out", train_args.out, "checkpoint path");
    train->add_option("--log", train_args.log, "training log csv (default <out>.train.csv)");

    EvalArgs eval_args;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    eval->add_option("--config", config_file, "flat key=value configuration file");
    add_model_flags(eval, eval_args.model);
    eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint path");
    eval->add_option("--lengths", eval_args.lengths, "evaluate at these lengths instead")->delimiter(',');
    eval->add_option("--split", eval_args.split, "train|val");
    eval->add_option("--train-size", eval_args.train_size, "training samples (must match train run)");
    eval->add_option("--val-size", eval_args.val_size, "validation samples (must match train run)");

    DumpArgs dump_args;
    CLI::App* dump = app.add_subcommand("dump-projections", "write projection matrices for two inputs");
    dump->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    dump->add_option("--config", config_file, "flat key=value configuration file");
    add_model_flags(dump, dump_args.model);
    dump->add_option("--checkpoint", dump_args.checkpoint, "checkpoint path");
    dump->add_option("--input", dump_args.input1, "first input tensor file");
    dump->add_option("--input2", dump_args.input2, "second input tensor file");
    dump->add_option("--out", dump_args.out, "output directory");

    std::vector<std::string> args;
    try {
        args = expand_config(argc, argv);
    } catch (const dba::ParameterError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
    std::vector<const char*> argv2;
    argv2.reserve(args.size());
    for (const std::string& a : args) argv2.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv2.size()), argv2.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (bench->parsed()) return run_bench(bench_args);
        if (validate->parsed()) return run_validate(validate_args);
        if (gradcheck->parsed()) return run_gradcheck(grad_args);
        if (train->parsed()) return run_train(train_args);
        if (eval->parsed()) return run_eval(eval_args);
        if (dump->parsed()) return run_dump(dump_args);
    } catch (const dba::ParameterError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const dba::CheckpointError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitCheckFailed;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitCheckFailed;
    }
    return kExitUsage;
}
