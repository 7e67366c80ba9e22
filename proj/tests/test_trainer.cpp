#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <set>

#include "dba/trainer.hpp"

using namespace dba;

namespace {

TaskSpec tiny_majority(std::size_t train = 64, std::size_t val = 32) {
    TaskSpec spec;
    spec.kind = TaskKind::majority_token;
    spec.n = 16;
    spec.vocab = 5;
    spec.train_size = train;
    spec.val_size = val;
    spec.seed = 9;
    return spec;
}

ModelConfig tiny_model(Mechanism mech = Mechanism::dba, TaskKind task = TaskKind::majority_token) {
    ModelConfig mc;
    mc.mechanism = mech;
    mc.task = task;
    mc.layers = 1;
    mc.vocab = 5;
    mc.n_classes = task == TaskKind::cross_match ? 2 : 5;
    mc.seq_len = task == TaskKind::cross_match ? 1 : 16;
    mc.model_dim = 16;
    mc.comp_len = 4;
    mc.comp_dim = 6;
    mc.heads = 2;
    mc.ffn_dim = 32;
    mc.positions = task == TaskKind::sparse_recall;
    return mc;
}

}  // namespace

TEST_CASE("gen_task is deterministic and splits disjointly") {
    TaskSpec spec = tiny_majority();
    Dataset a = gen_task(spec);
    Dataset b = gen_task(spec);
    REQUIRE(a.train.size() == spec.train_size);
    REQUIRE(a.val.size() == spec.val_size);
    CHECK(a.train[0].tokens == b.train[0].tokens);
    CHECK(a.val[7].tokens == b.val[7].tokens);

    std::set<std::vector<std::size_t>> train_keys;
    for (const Sample& s : a.train) train_keys.insert(s.tokens);
    for (const Sample& s : a.val) CHECK(train_keys.count(s.tokens) == 0);
}

TEST_CASE("majority labels are the modal symbol") {
    TaskSpec spec = tiny_majority();
    Dataset ds = gen_task(spec);
    for (const Sample& s : ds.train) {
        std::vector<std::size_t> counts(spec.vocab, 0);
        for (std::size_t t : s.tokens) ++counts[t];
        const std::size_t top = *std::max_element(counts.begin(), counts.end());
        CHECK(counts[s.label] == top);
        CHECK(std::count(counts.begin(), counts.end(), top) == 1);
    }
}

TEST_CASE("sparse recall labels follow the marker, boundary included") {
    TaskSpec spec;
    spec.kind = TaskKind::sparse_recall;
    spec.n = 8;
    spec.vocab = 5;
    spec.train_size = 300;
    spec.val_size = 50;
    spec.seed = 4;
    Dataset ds = gen_task(spec);
    const std::size_t marker = spec.vocab - 1;
    bool saw_boundary = false;
    for (const Sample& s : ds.train) {
        const auto it = std::find(s.tokens.begin(), s.tokens.end(), marker);
        REQUIRE(it != s.tokens.end());
        const std::size_t pos = static_cast<std::size_t>(it - s.tokens.begin());
        CHECK(pos + 1 < s.tokens.size());
        CHECK(s.tokens[pos + 1] == s.label);
        CHECK(std::count(s.tokens.begin(), s.tokens.end(), marker) == 1);
        if (pos == s.tokens.size() - 2) saw_boundary = true;
    }
    CHECK(saw_boundary);  // marker lands in the last valid slot somewhere
}

TEST_CASE("cross match is balanced and correctly labeled") {
    TaskSpec spec;
    spec.kind = TaskKind::cross_match;
    spec.n2 = 8;
    spec.vocab = 16;
    spec.train_size = 10000;
    spec.val_size = 100;
    spec.seed = 12;
    Dataset ds = gen_task(spec);
    std::size_t positives = 0;
    for (const Sample& s : ds.train) {
        const bool present =
            std::find(s.partner.begin(), s.partner.end(), s.tokens[0]) != s.partner.end();
        CHECK(present == (s.label == 1));
        positives += s.label;
    }
    const double rate = static_cast<double>(positives) / static_cast<double>(ds.train.size());
    CHECK(rate >= 0.45);
    CHECK(rate <= 0.55);
}

TEST_CASE("gen_task rejects tiny vocabularies") {
    TaskSpec spec = tiny_majority();
    spec.vocab = 2;
    CHECK_THROWS_AS(gen_task(spec), ParameterError);
}

TEST_CASE("randomly initialized model scores chance on a balanced binary task") {
    TaskSpec spec;
    spec.kind = TaskKind::cross_match;
    spec.n2 = 8;
    spec.vocab = 16;
    spec.train_size = 4;
    spec.val_size = 10000;
    spec.seed = 3;
    Dataset ds = gen_task(spec);
    ModelConfig mc = tiny_model(Mechanism::dba, TaskKind::cross_match);
    mc.vocab = 16;
    ModelParams model = make_model(mc, 77);
    const double acc = eval_accuracy(model, ds.val);
    CHECK(acc >= 0.4);
    CHECK(acc <= 0.6);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
    TaskSpec spec = tiny_majority();
    Dataset ds = gen_task(spec);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 16;
    tc.seed = 5;

    ModelParams m1 = make_model(tiny_model(), 5);
    ModelParams m2 = make_model(tiny_model(), 5);
    TrainReport r1 = train(m1, ds, tc);
    TrainReport r2 = train(m2, ds, tc);
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
        CHECK(r1.log[i].val_acc == r2.log[i].val_acc);
    }
    auto e1 = parameter_entries(m1);
    auto e2 = parameter_entries(m2);
    for (std::size_t i = 0; i < e1.size(); ++i) CHECK(max_abs_diff(*e1[i].second, *e2[i].second) == 0.0);
}

TEST_CASE("checkpoint round trip reproduces eval exactly and logged train accuracy") {
    TaskSpec spec = tiny_majority();
    Dataset ds = gen_task(spec);
    ModelParams model = make_model(tiny_model(), 3);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 16;
    tc.seed = 3;
    TrainReport report = train(model, ds, tc);

    const std::string path = "test_trainer_ckpt.dba";
    save_model(model, path);
    ModelParams back = load_model(model.cfg, path);
    CHECK(eval_accuracy(back, ds.val) == report.val_accuracy);
    CHECK(eval_accuracy(back, ds.train) == report.final_train_acc);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint shape mismatch names the offending tensor") {
    ModelParams model = make_model(tiny_model(), 3);
    NamedTensors tensors = to_named_tensors(model);
    tensors[2].second = Tensor(2, 2);  // wrong shape
    try {
        model_from_named_tensors(model.cfg, tensors);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find(tensors[2].first) != std::string::npos);
    }
}

TEST_CASE("parameter count equals the sum of checkpoint tensor sizes") {
    ModelParams model = make_model(tiny_model(), 3);
    NamedTensors tensors = to_named_tensors(model);
    std::size_t total = 0;
    for (const auto& [name, t] : tensors) total += t.numel();
    CHECK(parameter_count(model) == total);
}

TEST_CASE("shared slots: one tensor drives every layer and is checkpointed once") {
    ModelConfig mc = tiny_model();
    mc.layers = 2;
    mc.share_slots = true;
    ModelParams model = make_model(mc, 11);
    REQUIRE(model.shared_slots.has_value());
    std::size_t slot_entries = 0;
    for (const auto& [name, t] : to_named_tensors(model))
        if (name.find("slots") != std::string::npos) ++slot_entries;
    CHECK(slot_entries == 1);

    // Gradients flow into the shared tensor from both layers.
    TaskSpec spec = tiny_majority(32, 8);
    Dataset ds = gen_task(spec);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 16;
    tc.seed = 2;
    const Tensor before = *model.shared_slots;
    train(model, ds, tc);
    CHECK(max_abs_diff(before, *model.shared_slots) > 0.0);
}

TEST_CASE("per-layer slots is the default") {
    ModelConfig mc = tiny_model();
    mc.layers = 2;
    ModelParams model = make_model(mc, 11);
    CHECK(!model.shared_slots.has_value());
    std::size_t slot_entries = 0;
    for (const auto& [name, t] : to_named_tensors(model))
        if (name.find("slots") != std::string::npos) ++slot_entries;
    CHECK(slot_entries == 2);
}

TEST_CASE("variable length eval works for dynamic attention and rejects the fixed baseline") {
    TaskSpec spec = tiny_majority(48, 16);
    Dataset ds = gen_task(spec);

    ModelParams dyn = make_model(tiny_model(), 5);
    auto accs = variable_length_eval(dyn, spec, {8, 16, 32}, 50, 7);
    REQUIRE(accs.size() == 3);
    for (auto [len, acc] : accs) {
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
    }

    ModelParams fixed = make_model(tiny_model(Mechanism::fixed_lowrank_baseline), 5);
    CHECK_THROWS_AS(variable_length_eval(fixed, spec, {8}, 20, 7), ContractError);
    // at the trained length the fixed baseline evaluates fine
    auto ok = variable_length_eval(fixed, spec, {16}, 20, 7);
    CHECK(ok.size() == 1);
}

TEST_CASE("training rejects a cross-match fixed baseline") {
    CHECK_THROWS_AS(make_model(tiny_model(Mechanism::fixed_lowrank_baseline, TaskKind::cross_match), 1),
                    ParameterError);
}

TEST_CASE("cross-match training runs end to end and learns at least a little") {
    TaskSpec spec;
    spec.kind = TaskKind::cross_match;
    spec.n2 = 6;
    spec.vocab = 12;
    spec.train_size = 256;
    spec.val_size = 128;
    spec.seed = 21;
    Dataset ds = gen_task(spec);

    ModelConfig mc = tiny_model(Mechanism::dba, TaskKind::cross_match);
    mc.vocab = 12;
    ModelParams model = make_model(mc, 4);
    TrainConfig tc;
    tc.epochs = 6;
    tc.batch_size = 16;
    tc.seed = 4;
    TrainReport rep = train(model, ds, tc);
    CHECK(rep.log.front().train_loss > rep.log.back().train_loss);
    CHECK(rep.final_train_acc > 0.55);
}

TEST_CASE("train log csv format") {
    TrainReport rep;
    rep.log.push_back({0, 1.5, 0.25, 0.9});
    rep.log.push_back({1, 1.2, 0.5, 0.8});
    const std::string csv = train_log_csv(rep);
    CHECK(csv.rfind("epoch,train_loss,val_acc,seconds\n", 0) == 0);
    CHECK(csv.find("\n0,1.5,0.25,0.9\n") != std::string::npos);
}

TEST_CASE("vanilla and fixed mechanisms also train on majority") {
    TaskSpec spec = tiny_majority(64, 16);
    Dataset ds = gen_task(spec);
    for (Mechanism mech : {Mechanism::vanilla, Mechanism::fixed_lowrank_baseline}) {
        CAPTURE(mechanism_name(mech));
        ModelParams model = make_model(tiny_model(mech), 6);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 16;
        tc.seed = 6;
        TrainReport rep = train(model, ds, tc);
        CHECK(rep.log.front().train_loss > rep.log.back().train_loss);
    }
}

TEST_CASE("divergent training raises a training error carrying the epoch") {
    TaskSpec spec = tiny_majority(32, 8);
    Dataset ds = gen_task(spec);
    ModelParams model = make_model(tiny_model(), 8);
    TrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 8;
    tc.seed = 8;
    tc.adam.lr = 1e200;  // step past the f64 overflow edge
    try {
        train(model, ds, tc);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.epoch < 30);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("majority loss decreases monotonically over the first five epochs for all mechanisms") {
    TaskSpec spec = tiny_majority(256, 64);
    Dataset ds = gen_task(spec);
    for (Mechanism mech : {Mechanism::vanilla, Mechanism::dba, Mechanism::fixed_lowrank_baseline}) {
        CAPTURE(mechanism_name(mech));
        ModelParams model = make_model(tiny_model(mech), 9);
        TrainConfig tc;
        tc.epochs = 5;
        tc.batch_size = 16;
        tc.seed = 9;
        TrainReport rep = train(model, ds, tc);
        for (std::size_t i = 1; i < rep.log.size(); ++i)
            CHECK(rep.log[i].train_loss < rep.log[i - 1].train_loss);
    }
}

TEST_CASE("mixed-length datasets batch by length and train cleanly") {
    TaskSpec spec;
    spec.kind = TaskKind::sparse_recall;
    spec.n = 24;
    spec.vocab = 5;
    spec.train_size = 90;
    spec.val_size = 20;
    spec.seed = 31;
    Dataset ds = gen_task_mixed_lengths(spec, {8, 16, 24});
    REQUIRE(ds.train.size() == 90);
    std::set<std::size_t> lengths;
    for (const Sample& s : ds.train) lengths.insert(s.tokens.size());
    CHECK(lengths == std::set<std::size_t>{8, 16, 24});
    // validation stays at the spec length
    for (const Sample& s : ds.val) CHECK(s.tokens.size() == 24);

    ModelConfig mc = tiny_model(Mechanism::dba, TaskKind::sparse_recall);
    mc.seq_len = 24;
    ModelParams model = make_model(mc, 2);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 2;
    TrainReport rep = train(model, ds, tc);  // would throw on any cross-length batch
    CHECK(rep.log.size() == 2);
}
