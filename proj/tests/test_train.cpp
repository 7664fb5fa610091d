#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "lnprune/errors.hpp"
#include "lnprune/train.hpp"
#include "oracles.hpp"

using namespace lnprune;
namespace fs = std::filesystem;

namespace {

fs::path artifact_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / "lnprune-train-tests" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Tensor rand_tensor(Shape s, u64 seed, float lo, float hi) {
    std::mt19937_64 rng(seed);
    return oracle::random_tensor(std::move(s), rng, lo, hi);
}

SynthSpec toy_spec() {
    SynthSpec spec;
    spec.class_count = 4;
    spec.size = 16;
    spec.train_per_class = 64;
    spec.val_per_class = 16;
    spec.test_per_class = 16;
    spec.sigma = 0.05;
    spec.seed = 902;
    return spec;
}

const SynthSplits& toy_data() {
    static SynthSplits s = synth_generate(toy_spec());
    return s;
}

TrainConfig toy_train_cfg() {
    TrainConfig cfg;
    cfg.lr1 = 0.08;
    cfg.lr2 = 0.02;
    cfg.momentum = 0.9;
    cfg.batch_size = 16;
    cfg.max_epochs = 25;
    cfg.patience = 5;
    cfg.seed = 7;
    return cfg;
}

// Two-conv baseline net for the toy task, trained once and reused.
const FinetuneResult& toy_trained() {
    static FinetuneResult r = [] {
        ModelGraph g = make_vgg({1, 16, 16}, {{6}, {12}}, {}, 4, 31);
        return finetune_two_stage(g, toy_data().train, toy_data().val, toy_train_cfg());
    }();
    return r;
}

// Classifier whose logits are a fixed linear readout; class 0 wins whenever
// the first pixel dominates, giving full control over evaluate()'s input.
ModelGraph fixed_readout_net() {
    ModelGraph g;
    g.input_shape = {1, 2, 2};
    LayerSpec flat;
    flat.id = "flatten";
    flat.kind = LayerKind::Flatten;
    g.layers.push_back(flat);
    LayerSpec fc;
    fc.id = "fc";
    fc.kind = LayerKind::Dense;
    fc.units = 2;
    fc.inputs = {"flatten"};
    fc.weights = Tensor({2, 4}, {1.0f, 0.0f, 0.0f, 0.0f,   // logit 0 = pixel 0
                                 0.0f, 1.0f, 0.0f, 0.0f});  // logit 1 = pixel 1
    fc.bias = Tensor({2});
    g.layers.push_back(fc);
    LayerSpec sm;
    sm.id = "softmax";
    sm.kind = LayerKind::Softmax;
    sm.inputs = {"fc"};
    g.layers.push_back(sm);
    return g;
}

}  // namespace

TEST_CASE("sgd_step pinned examples") {
    SUBCASE("momentum 0: w=1, g=0.5, lr=0.1 -> 0.95") {
        Tensor w({1}, {1.0f}), g({1}, {0.5f}), v;
        sgd_step(w, g, 0.1, 0.0, v);
        CHECK(w.at(0) == doctest::Approx(0.95));
        // identical double-then-float arithmetic as the implementation
        const float vel = static_cast<float>(0.0 - 0.1 * 0.5);
        CHECK(w.at(0) == static_cast<float>(1.0 + static_cast<double>(vel)));
        CHECK(v.at(0) == vel);
    }
    SUBCASE("zero gradient leaves params bit-identical") {
        Tensor w = rand_tensor({3, 4}, 1, -1.0f, 1.0f);
        const u64 before = w.content_hash();
        Tensor g({3, 4}), v;
        sgd_step(w, g, 0.3, 0.9, v);
        sgd_step(w, g, 0.3, 0.9, v);
        CHECK(w.content_hash() == before);
    }
    SUBCASE("two steps with momentum 0.9 match the hand-unrolled recurrence") {
        Tensor w = rand_tensor({8}, 2, -1.0f, 1.0f);
        Tensor g1 = rand_tensor({8}, 3, -1.0f, 1.0f);
        Tensor g2 = rand_tensor({8}, 4, -1.0f, 1.0f);
        Tensor expect = w;
        std::vector<float> ev(8);
        for (i64 i = 0; i < 8; ++i) {  // v1 = -lr*g1; w1 = w0+v1; v2 = 0.9*v1 - lr*g2; w2 = w1+v2
            const double lr = 0.05;
            double v1 = 0.9 * 0.0 - lr * static_cast<double>(g1.at(i));
            expect.at(i) = static_cast<float>(static_cast<double>(expect.at(i)) + v1);
            double v2 = 0.9 * static_cast<double>(static_cast<float>(v1)) - lr * static_cast<double>(g2.at(i));
            expect.at(i) = static_cast<float>(static_cast<double>(expect.at(i)) + v2);
            ev[static_cast<std::size_t>(i)] = static_cast<float>(v2);
        }
        Tensor v;
        sgd_step(w, g1, 0.05, 0.9, v);
        sgd_step(w, g2, 0.05, 0.9, v);
        for (i64 i = 0; i < 8; ++i) {
            CHECK(w.at(i) == expect.at(i));
            CHECK(v.at(i) == ev[static_cast<std::size_t>(i)]);
        }
    }
    SUBCASE("shape mismatches rejected") {
        Tensor w({2, 2}), g({4}), v;
        CHECK_THROWS_AS(sgd_step(w, g, 0.1, 0.9, v), ShapeError);
        Tensor v_bad({3});
        Tensor g_ok({2, 2});
        CHECK_THROWS_AS(sgd_step(w, g_ok, 0.1, 0.9, v_bad), ShapeError);
    }
    SUBCASE("GradPair overload") {
        GradPair p;
        p.value = Tensor({2}, {1.0f, 2.0f});
        Tensor v;
        CHECK_THROWS_AS(sgd_step(p, 0.1, 0.0, v), ShapeError);  // no grad yet
        p.grad = Tensor({2}, {0.5f, -0.5f});
        sgd_step(p, 0.1, 0.0, v);
        CHECK(p.value.at(0) == doctest::Approx(0.95));
        CHECK(p.value.at(1) == doctest::Approx(2.05));
    }
}

TEST_CASE("evaluate basics") {
    ModelGraph g = fixed_readout_net();
    Dataset ds;
    ds.images = Tensor({1, 1, 2, 2}, {0.9f, 0.1f, 0.0f, 0.0f});
    ds.labels = {0};
    ds.class_count = 2;
    ds.split = "test";
    SUBCASE("single correctly classified sample gives 1.0") {
        CHECK(evaluate(g, ds) == 1.0);
        ds.labels = {1};
        CHECK(evaluate(g, ds) == 0.0);
    }
    SUBCASE("argmax ties go to the lowest class index") {
        ds.images = Tensor({1, 1, 2, 2}, {0.5f, 0.5f, 0.0f, 0.0f});
        ds.labels = {0};
        CHECK(evaluate(g, ds) == 1.0);
        ds.labels = {1};
        CHECK(evaluate(g, ds) == 0.0);
    }
    SUBCASE("empty dataset rejected") {
        Dataset empty;
        CHECK_THROWS_AS(evaluate(g, empty), DataError);
    }
}

TEST_CASE("untrained net scores chance accuracy on label-independent data") {
    // Labels are balanced but independent of the (noise) images, so each
    // prediction hits with probability exactly 1/4: hits ~ Binomial(N, 1/4).
    const i64 n = 400;
    Dataset ds;
    ds.images = rand_tensor({n, 1, 12, 12}, 55, 0.0f, 1.0f);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) ds.labels[static_cast<std::size_t>(i)] = i % 4;
    ds.class_count = 4;
    ds.split = "test";

    ModelGraph g = make_vgg({1, 12, 12}, {{5}, {7}}, {}, 4, 99);
    const double acc = evaluate(g, ds);
    const double sigma = std::sqrt(static_cast<double>(n) * 0.25 * 0.75) / static_cast<double>(n);
    CHECK(std::fabs(acc - 0.25) <= 3.0 * sigma);
}

TEST_CASE("evaluate survives a save/load round trip exactly") {
    const ModelGraph& g = toy_trained().graph;
    const fs::path path = artifact_dir("eval-roundtrip") / "model.lnpm";
    save_model(g, path.string());
    ModelGraph back = load_model(path.string());
    CHECK(evaluate(back, toy_data().test) == evaluate(g, toy_data().test));
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    SUBCASE("negative lr") {
        cfg.lr2 = -0.1;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("momentum at 1") {
        cfg.momentum = 1.0;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("zero batch") {
        cfg.batch_size = 0;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("zero patience") {
        cfg.patience = 0;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
}

TEST_CASE("lr 0 in both stages leaves the graph unchanged with a flat history") {
    ModelGraph g = make_vgg({1, 8, 8}, {{4}}, {}, 2, 11);
    SynthSpec spec = toy_spec();
    spec.class_count = 2;
    spec.size = 8;
    spec.train_per_class = 8;
    spec.val_per_class = 4;
    spec.test_per_class = 4;
    SynthSplits data = synth_generate(spec);

    TrainConfig cfg = toy_train_cfg();
    cfg.lr1 = 0.0;
    cfg.lr2 = 0.0;
    cfg.max_epochs = 10;
    cfg.patience = 3;
    FinetuneResult r = finetune_two_stage(g, data.train, data.val, cfg);

    CHECK(r.graph.weights_hash() == g.weights_hash());
    // patience epochs per stage, never improving on the baseline accuracy
    REQUIRE(r.history.epochs.size() == 6);
    const double base = evaluate(g, data.val);
    CHECK(r.history.best_val_acc == base);
    for (const EpochStat& e : r.history.epochs) CHECK(e.val_acc == base);
    CHECK(r.history.epochs[2].stage == 1);
    CHECK(r.history.epochs[3].stage == 2);
}

TEST_CASE("max_epochs 0 returns the input graph untouched") {
    ModelGraph g = make_vgg({1, 8, 8}, {{4}}, {}, 2, 12);
    SynthSpec spec = toy_spec();
    spec.class_count = 2;
    spec.size = 8;
    spec.train_per_class = 4;
    spec.val_per_class = 2;
    spec.test_per_class = 2;
    SynthSplits data = synth_generate(spec);
    TrainConfig cfg = toy_train_cfg();
    cfg.max_epochs = 0;
    FinetuneResult r = finetune_two_stage(g, data.train, data.val, cfg);
    CHECK(r.graph.weights_hash() == g.weights_hash());
    CHECK(r.history.epochs.empty());
    CHECK(r.history.conv_hash_input == r.history.conv_hash_stage1);
}

TEST_CASE("toy task trains to high accuracy and fine-tuning never loses validation ground") {
    const FinetuneResult& r = toy_trained();
    // stage 1 froze the convolutions
    CHECK(r.history.conv_hash_input == r.history.conv_hash_stage1);
    // snapshot semantics: returned graph is at least as good as the start
    REQUIRE(!r.history.epochs.empty());
    ModelGraph fresh = make_vgg({1, 16, 16}, {{6}, {12}}, {}, 4, 31);
    CHECK(r.history.best_val_acc >= evaluate(fresh, toy_data().val));
    CHECK(evaluate(r.graph, toy_data().val) == r.history.best_val_acc);
    // the sigma=0.05 task is learnable: a 2-conv baseline reaches 95% test accuracy
    CHECK(evaluate(r.graph, toy_data().test) >= 0.95);
}

TEST_CASE("stage 1 trains the head only, stage 2 moves conv weights") {
    ModelGraph g = toy_trained().graph;  // start from trained weights, prune nothing
    TrainConfig cfg = toy_train_cfg();
    cfg.max_epochs = 2;
    cfg.patience = 5;
    cfg.seed = 40;
    FinetuneResult r = finetune_two_stage(g, toy_data().train, toy_data().val, cfg);
    CHECK(r.history.conv_hash_input == g.conv_weights_hash());
    CHECK(r.history.conv_hash_stage1 == g.conv_weights_hash());
    bool stage2_seen = false;
    for (const EpochStat& e : r.history.epochs) stage2_seen |= e.stage == 2;
    CHECK(stage2_seen);
}

TEST_CASE("divergent training raises a numeric error") {
    ModelGraph g = make_vgg({1, 8, 8}, {{4}, {6}}, {}, 2, 13);
    SynthSpec spec = toy_spec();
    spec.class_count = 2;
    spec.size = 8;
    spec.train_per_class = 16;
    spec.val_per_class = 4;
    spec.test_per_class = 4;
    SynthSplits data = synth_generate(spec);
    TrainConfig cfg = toy_train_cfg();
    cfg.lr1 = 1e38;  // overflow float32 weights into inf, then NaN logits
    cfg.lr2 = 1e38;
    cfg.max_epochs = 10;
    CHECK_THROWS_WITH_AS(finetune_two_stage(g, data.train, data.val, cfg),
                         doctest::Contains("diverged"), NumericError);
}

TEST_CASE("criterion scores") {
    const ModelGraph& g = toy_trained().graph;
    const Tensor& images = toy_data().train.images;
    SUBCASE("kernel-l1 equals the library scores, no samples touched") {
        CriterionResult r = criterion_scores(g, "kernel-l1", images, 100, 5);
        for (const auto& l : g.layers)
            if (is_conv_like(l.kind)) {
                REQUIRE(r.scores.count(l.id) == 1);
                CHECK(r.scores.at(l.id) == kernel_l1(l.weights));
            }
        CHECK(r.csv == stats_csv(r.scores, "kernel-l1", 0, g));
    }
    SUBCASE("fm-layerwise equals collect_stats under the default schedule") {
        CriterionResult r = criterion_scores(g, "fm-layerwise", images, 24, 5);
        NormStats stats = collect_stats(g, images, 24, default_schedule(g), 5);
        CHECK(r.scores == stats.values);
        CHECK(r.csv == stats_csv(stats, g));
    }
    SUBCASE("fm-l1 uses L1 on every layer") {
        CriterionResult r = criterion_scores(g, "fm-l1", images, 24, 5);
        NormSchedule all_l1 = default_schedule(g);
        for (auto& [id, order] : all_l1.orders) order = NormOrder::l1();
        NormStats stats = collect_stats(g, images, 24, all_l1, 5);
        CHECK(r.scores == stats.values);
    }
    SUBCASE("unknown criterion rejected") {
        CHECK_THROWS_AS(criterion_scores(g, "fm-l3", images, 8, 5), ConfigError);
        CHECK(!known_criterion("fm-l3"));
        CHECK(known_criterion("fm-layerwise"));
    }
}

TEST_CASE("round record json round trip") {
    RoundRecord r;
    r.round = 3;
    r.criterion = "kernel-l1";
    r.val_acc = 0.8125;
    r.test_acc = 0.75;
    r.params = 1234;
    r.bytes = 5678;
    r.stats_ref = "round_3/stats.csv";
    r.conv_hash_pre = 0xdeadbeefcafef00dULL;
    r.conv_hash_stage1 = 0x123456789abcdef0ULL;
    RoundRecord back = record_from_json(record_to_json(r));
    CHECK(back.round == r.round);
    CHECK(back.criterion == r.criterion);
    CHECK(back.val_acc == r.val_acc);
    CHECK(back.test_acc == r.test_acc);
    CHECK(back.params == r.params);
    CHECK(back.bytes == r.bytes);
    CHECK(back.stats_ref == r.stats_ref);
    CHECK(back.conv_hash_pre == r.conv_hash_pre);
    CHECK(back.conv_hash_stage1 == r.conv_hash_stage1);
    CHECK_THROWS_AS(record_from_json(nlohmann::json::object()), DataError);
}

TEST_CASE("pipeline config validation") {
    ModelGraph g = make_vgg({1, 8, 8}, {{4}, {6}}, {}, 2, 14);
    PipelineConfig cfg;
    cfg.rounds = {{{"conv1-1", 4}, {"conv2-1", 6}}, {{"conv1-1", 3}}};
    CHECK_NOTHROW(cfg.validate(g));
    SUBCASE("round 0 must match the graph") {
        cfg.rounds[0]["conv1-1"] = 3;
        CHECK_THROWS_WITH_AS(cfg.validate(g), doctest::Contains("round 0"), ConfigError);
    }
    SUBCASE("round 0 must cover every conv layer") {
        cfg.rounds[0].erase("conv2-1");
        CHECK_THROWS_WITH_AS(cfg.validate(g), doctest::Contains("restate"), ConfigError);
    }
    SUBCASE("counts must not increase") {
        cfg.rounds.push_back({{"conv1-1", 4}});
        CHECK_THROWS_WITH_AS(cfg.validate(g), doctest::Contains("non-increasing"), ConfigError);
    }
    SUBCASE("unknown layer") {
        cfg.rounds[1]["conv9-9"] = 1;
        CHECK_THROWS_WITH_AS(cfg.validate(g), doctest::Contains("unknown conv layer"), ConfigError);
    }
    SUBCASE("unknown criterion") {
        cfg.criterion = "fisher";
        CHECK_THROWS_AS(cfg.validate(g), ConfigError);
    }
    SUBCASE("resume needs out_dir") {
        cfg.resume = true;
        CHECK_THROWS_WITH_AS(cfg.validate(g), doctest::Contains("resume"), ConfigError);
    }
}

TEST_CASE("zero-round pipeline returns the graph unchanged") {
    const ModelGraph& g = toy_trained().graph;
    PipelineConfig cfg;
    cfg.rounds = {};
    PipelineResult r = run_pipeline(g, toy_data(), cfg);
    CHECK(r.records.empty());
    CHECK(r.graph.weights_hash() == g.weights_hash());
}

TEST_CASE("round-0-only pipeline records the baseline without touching the model") {
    const ModelGraph& g = toy_trained().graph;
    PipelineConfig cfg;
    cfg.criterion = "kernel-l1";
    std::map<std::string, i64> counts;
    for (const auto& l : g.layers)
        if (is_conv_like(l.kind)) counts[l.id] = l.out_channels;
    cfg.rounds = {counts};
    PipelineResult r = run_pipeline(g, toy_data(), cfg);
    REQUIRE(r.records.size() == 1);
    CHECK(r.graph.weights_hash() == g.weights_hash());
    CHECK(r.records[0].round == 0);
    CHECK(r.records[0].val_acc == evaluate(g, toy_data().val));
    CHECK(r.records[0].test_acc == evaluate(g, toy_data().test));
    CHECK(r.records[0].params == g.param_count());
    CHECK(r.records[0].bytes == serialized_bytes(g));
}

TEST_CASE("pruning planted dead kernels never moves the accuracy needle") {
    ModelGraph g = toy_trained().graph;
    // plant: kernels 1 and 3 of conv1-1 and kernel 0 of conv2-1 go all-zero
    auto kill = [&](const char* id, std::initializer_list<i64> kernels) {
        LayerSpec* l = g.find(id);
        REQUIRE(l != nullptr);
        const i64 plane = l->weights.numel() / l->weights.dim(0);
        for (i64 d : kernels) {
            for (i64 p = 0; p < plane; ++p) l->weights.at(d * plane + p) = 0.0f;
            l->bias.at(d) = 0.0f;
        }
    };
    kill("conv1-1", {1, 3});
    kill("conv2-1", {0});

    const double base_acc = evaluate(g, toy_data().test);
    Tensor probe({4, 1, 16, 16});
    std::memcpy(probe.data.data(), toy_data().test.images.data.data(),
                sizeof(float) * static_cast<std::size_t>(probe.numel()));
    Tensor logits_before = forward(g, probe);

    std::map<std::string, i64> round0;
    for (const auto& l : g.layers)
        if (is_conv_like(l.kind)) round0[l.id] = l.out_channels;
    PipelineConfig cfg;
    cfg.criterion = "kernel-l1";  // dead kernels have exactly zero score
    cfg.rounds = {round0, {{"conv1-1", 4}}, {{"conv2-1", 11}}};
    cfg.train.max_epochs = 0;  // no retraining: surgery must be invisible
    PipelineResult r = run_pipeline(g, toy_data(), cfg);

    REQUIRE(r.records.size() == 3);
    for (const RoundRecord& rec : r.records) CHECK(rec.test_acc == base_acc);
    CHECK(r.graph.find("conv1-1")->out_channels == 4);
    CHECK(r.graph.find("conv2-1")->out_channels == 11);

    Tensor logits_after = forward(r.graph, probe);
    REQUIRE(same_shape(logits_before, logits_after));
    double max_diff = 0.0;
    for (i64 i = 0; i < logits_before.numel(); ++i)
        max_diff = std::max(max_diff,
                            std::fabs(static_cast<double>(logits_before.at(i)) -
                                      static_cast<double>(logits_after.at(i))));
    CHECK(max_diff < 1e-6);
    // params strictly decreased while accuracy held
    CHECK(r.records[2].params < r.records[0].params);
}

TEST_CASE("multi-round pipeline hits its keep counts with shrinking artifacts") {
    ModelGraph g = make_vgg({1, 16, 16}, {{8}, {10}}, {}, 4, 77);
    PipelineConfig cfg;
    cfg.criterion = "fm-layerwise";
    cfg.stats_samples = 16;
    cfg.rounds = {{{"conv1-1", 8}, {"conv2-1", 10}},
                  {{"conv1-1", 6}, {"conv2-1", 8}},
                  {{"conv1-1", 5}, {"conv2-1", 6}},
                  {{"conv1-1", 4}, {"conv2-1", 5}}};
    cfg.train = toy_train_cfg();
    cfg.train.max_epochs = 1;
    cfg.train.patience = 1;
    cfg.seed = 3;
    const fs::path dir = artifact_dir("bookkeeping");
    cfg.out_dir = dir.string();
    PipelineResult r = run_pipeline(g, toy_data(), cfg);

    REQUIRE(r.records.size() == 4);
    for (i64 round = 0; round < 4; ++round) {
        ModelGraph m = load_model((dir / ("round_" + std::to_string(round)) / "model.lnpm").string());
        for (const auto& [id, keep] : cfg.rounds[static_cast<std::size_t>(round)])
            CHECK(m.find(id)->out_channels == keep);
        CHECK(fs::exists(dir / ("round_" + std::to_string(round)) / "stats.csv"));
        CHECK(fs::exists(dir / ("round_" + std::to_string(round)) / "plan.json"));
        CHECK(fs::exists(dir / ("round_" + std::to_string(round)) / "record.json"));
        if (round > 0) {
            CHECK(r.records[static_cast<std::size_t>(round)].params <=
                  r.records[static_cast<std::size_t>(round - 1)].params);
            CHECK(r.records[static_cast<std::size_t>(round)].bytes <=
                  r.records[static_cast<std::size_t>(round - 1)].bytes);
        }
        // on-disk byte count matches the recorded size
        CHECK(static_cast<i64>(fs::file_size(dir / ("round_" + std::to_string(round)) / "model.lnpm")) ==
              r.records[static_cast<std::size_t>(round)].bytes);
    }
    CHECK(r.graph.find("conv1-1")->out_channels == 4);
    CHECK(slurp(dir / "results.csv") == results_csv(r.records));
}

TEST_CASE("pipeline determinism: same seeds, same bytes") {
    ModelGraph g = make_vgg({1, 16, 16}, {{6}, {8}}, {}, 4, 21);
    PipelineConfig cfg;
    cfg.criterion = "fm-layerwise";
    cfg.stats_samples = 12;
    cfg.rounds = {{{"conv1-1", 6}, {"conv2-1", 8}}, {{"conv1-1", 4}, {"conv2-1", 6}}};
    cfg.train = toy_train_cfg();
    cfg.train.max_epochs = 2;
    cfg.train.patience = 2;
    cfg.seed = 17;

    const fs::path a = artifact_dir("det-a"), b = artifact_dir("det-b");
    cfg.out_dir = a.string();
    PipelineResult ra = run_pipeline(g, toy_data(), cfg);
    cfg.out_dir = b.string();
    PipelineResult rb = run_pipeline(g, toy_data(), cfg);

    CHECK(slurp(a / "results.csv") == slurp(b / "results.csv"));
    CHECK(slurp(a / "round_1" / "model.lnpm") == slurp(b / "round_1" / "model.lnpm"));
    CHECK(slurp(a / "round_1" / "stats.csv") == slurp(b / "round_1" / "stats.csv"));
    CHECK(ra.graph.weights_hash() == rb.graph.weights_hash());

    // in-memory run agrees on everything that does not involve paths
    cfg.out_dir.clear();
    PipelineResult rm = run_pipeline(g, toy_data(), cfg);
    REQUIRE(rm.records.size() == ra.records.size());
    for (std::size_t i = 0; i < rm.records.size(); ++i) {
        CHECK(rm.records[i].val_acc == ra.records[i].val_acc);
        CHECK(rm.records[i].test_acc == ra.records[i].test_acc);
        CHECK(rm.records[i].params == ra.records[i].params);
        CHECK(rm.records[i].bytes == ra.records[i].bytes);  // serialized size == file size
        CHECK(rm.records[i].stats_ref.empty());
    }
}

TEST_CASE("resume reproduces the uninterrupted run byte for byte") {
    ModelGraph g = make_vgg({1, 16, 16}, {{6}, {8}}, {}, 4, 22);
    PipelineConfig cfg;
    cfg.criterion = "kernel-l1";
    cfg.rounds = {{{"conv1-1", 6}, {"conv2-1", 8}},
                  {{"conv1-1", 5}, {"conv2-1", 7}},
                  {{"conv1-1", 4}, {"conv2-1", 6}},
                  {{"conv1-1", 3}, {"conv2-1", 5}}};
    cfg.train = toy_train_cfg();
    cfg.train.max_epochs = 2;
    cfg.train.patience = 2;
    cfg.seed = 29;

    const fs::path full = artifact_dir("resume-full"), part = artifact_dir("resume-part");
    cfg.out_dir = full.string();
    run_pipeline(g, toy_data(), cfg);

    // crash simulation: rounds 2 and 3 never made it to disk
    cfg.out_dir = part.string();
    run_pipeline(g, toy_data(), cfg);
    fs::remove_all(part / "round_2");
    fs::remove_all(part / "round_3");
    fs::remove(part / "results.csv");

    cfg.resume = true;
    PipelineResult r = run_pipeline(g, toy_data(), cfg);
    REQUIRE(r.records.size() == 4);
    CHECK(slurp(part / "results.csv") == slurp(full / "results.csv"));
    CHECK(slurp(part / "round_3" / "model.lnpm") == slurp(full / "round_3" / "model.lnpm"));

    SUBCASE("criterion mismatch on resume is rejected") {
        cfg.criterion = "fm-layerwise";
        CHECK_THROWS_WITH_AS(run_pipeline(g, toy_data(), cfg), doctest::Contains("criterion"),
                             ConfigError);
    }
}

TEST_CASE("an aborted round leaves the previous round usable") {
    ModelGraph g = toy_trained().graph;
    std::map<std::string, i64> round0;
    for (const auto& l : g.layers)
        if (is_conv_like(l.kind)) round0[l.id] = l.out_channels;
    PipelineConfig cfg;
    cfg.criterion = "kernel-l1";
    cfg.rounds = {round0, {{"conv1-1", 3}}};
    cfg.train = toy_train_cfg();
    cfg.train.lr1 = 1e38;  // round 1's fine-tune diverges
    cfg.train.lr2 = 1e38;
    cfg.train.max_epochs = 5;
    const fs::path dir = artifact_dir("abort");
    cfg.out_dir = dir.string();

    CHECK_THROWS_WITH_AS(run_pipeline(g, toy_data(), cfg), doctest::Contains("round 1"),
                         NumericError);
    CHECK(!fs::exists(dir / "round_1" / "record.json"));
    ModelGraph survivor = load_model((dir / "round_0" / "model.lnpm").string());
    CHECK(evaluate(survivor, toy_data().test) == evaluate(g, toy_data().test));
}
