#include "lnprune/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "lnprune/errors.hpp"

namespace fs = std::filesystem;

namespace lnprune {

void TrainConfig::validate() const {
    // lr 0 is allowed as an explicit no-op (diagnostics); negative is not.
    if (!(lr1 >= 0.0) || !(lr2 >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (!(momentum >= 0.0) || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (crop < 0) throw ConfigError("crop must be >= 0");
}

void sgd_step(Tensor& params, const Tensor& grad, double lr, double momentum, Tensor& velocity) {
    if (!same_shape(params, grad))
        throw ShapeError("sgd shapes differ: params " + shape_str(params.shape) + " vs grad " +
                         shape_str(grad.shape));
    if (velocity.empty()) velocity = Tensor(params.shape);
    if (!same_shape(params, velocity))
        throw ShapeError("sgd velocity shape " + shape_str(velocity.shape) +
                         " does not match params " + shape_str(params.shape));
    for (i64 i = 0; i < params.numel(); ++i) {
        const double v = momentum * static_cast<double>(velocity.at(i)) -
                         lr * static_cast<double>(grad.at(i));
        velocity.at(i) = static_cast<float>(v);
        params.at(i) = static_cast<float>(static_cast<double>(params.at(i)) + v);
    }
}

void sgd_step(GradPair& p, double lr, double momentum, Tensor& velocity) {
    p.check();
    if (!p.has_grad()) throw ShapeError("sgd_step on a GradPair without a gradient");
    sgd_step(p.value, p.grad, lr, momentum, velocity);
}

double evaluate(const ModelGraph& graph, const Dataset& ds) {
    ds.validate();
    const i64 n = ds.size();
    const i64 plane = ds.images.numel() / n;
    constexpr i64 kEvalBatch = 64;
    i64 hits = 0;
    for (i64 lo = 0; lo < n; lo += kEvalBatch) {
        const i64 hi = std::min(n, lo + kEvalBatch);
        Tensor batch({hi - lo, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
        std::memcpy(batch.data.data(), ds.images.data.data() + lo * plane,
                    static_cast<std::size_t>((hi - lo) * plane) * sizeof(float));
        Tensor logits = forward(graph, batch);
        const i64 classes = logits.dim(1);
        for (i64 i = 0; i < hi - lo; ++i) {
            i64 best = 0;
            for (i64 c = 1; c < classes; ++c)
                if (logits.at(i, c) > logits.at(i, best)) best = c;
            if (best == ds.labels[static_cast<std::size_t>(lo + i)]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

Tensor gather_rows(const Tensor& images, const std::vector<i64>& order, i64 lo, i64 hi) {
    const i64 plane = images.numel() / images.dim(0);
    Tensor out({hi - lo, images.dim(1), images.dim(2), images.dim(3)});
    for (i64 i = lo; i < hi; ++i)
        std::memcpy(out.data.data() + (i - lo) * plane,
                    images.data.data() + order[static_cast<std::size_t>(i)] * plane,
                    static_cast<std::size_t>(plane) * sizeof(float));
    return out;
}

double run_epoch(ModelGraph& g, const Dataset& train, const TrainConfig& cfg, double lr,
                 const std::function<bool(const LayerSpec&)>& trainable,
                 std::map<std::string, LayerGrads>& velocity, std::mt19937_64& rng, int stage,
                 i64 epoch) {
    std::vector<i64> order(static_cast<std::size_t>(train.size()));
    std::iota(order.begin(), order.end(), i64{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    i64 batches = 0;
    for (i64 lo = 0; lo < train.size(); lo += cfg.batch_size) {
        const i64 hi = std::min(train.size(), lo + cfg.batch_size);
        Tensor batch = gather_rows(train.images, order, lo, hi);
        if (cfg.crop > 0) batch = augment(batch, cfg.crop, cfg.mirror, rng());
        std::vector<i64> labels(static_cast<std::size_t>(hi - lo));
        for (i64 i = lo; i < hi; ++i)
            labels[static_cast<std::size_t>(i - lo)] =
                train.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];

        ActivationRecord rec;
        Tensor logits = forward(g, batch, &rec);
        XentOut xo = softmax_xent(logits, labels);
        if (!std::isfinite(xo.loss))
            throw NumericError("loss diverged (stage " + std::to_string(stage) + ", epoch " +
                               std::to_string(epoch) + ")");
        auto grads = backward(g, batch, rec, xo.grad_logits, trainable);
        for (auto& [id, lg] : grads) {
            LayerSpec* l = g.find(id);
            LayerGrads& v = velocity[id];
            if (lr > 0.0) {
                sgd_step(l->weights, lg.weights, lr, cfg.momentum, v.weights);
                if (!l->bias.empty()) sgd_step(l->bias, lg.bias, lr, cfg.momentum, v.bias);
            }
        }
        loss_sum += xo.loss;
        ++batches;
    }
    return batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
}

struct Best {
    ModelGraph graph;
    double val_acc = -1.0;
};

void run_stage(int stage, ModelGraph& g, const Dataset& train, const Dataset& val_eval,
               const TrainConfig& cfg, const std::function<bool(const LayerSpec&)>& trainable,
               Best& best, TrainHistory& history, u64 stage_seed) {
    const double lr = stage == 1 ? cfg.lr1 : cfg.lr2;
    std::mt19937_64 rng(stage_seed);
    std::map<std::string, LayerGrads> velocity;
    i64 stall = 0;
    for (i64 epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double loss = run_epoch(g, train, cfg, lr, trainable, velocity, rng, stage, epoch);
        const double acc = evaluate(g, val_eval);
        history.epochs.push_back({stage, epoch, loss, acc});
        if (acc > best.val_acc) {
            best.graph = g;
            best.val_acc = acc;
            stall = 0;
        } else if (++stall >= cfg.patience) {
            break;
        }
    }
}

}  // namespace

FinetuneResult finetune_two_stage(const ModelGraph& graph, const Dataset& train,
                                  const Dataset& val, const TrainConfig& cfg) {
    cfg.validate();
    train.validate();
    val.validate();

    Dataset val_eval = val;
    if (cfg.crop > 0) val_eval.images = center_crop(val.images, cfg.crop);

    FinetuneResult out;
    out.history.conv_hash_input = graph.conv_weights_hash();

    Best best{graph, evaluate(graph, val_eval)};
    if (cfg.max_epochs == 0) {
        out.history.conv_hash_stage1 = best.graph.conv_weights_hash();
        out.history.best_val_acc = best.val_acc;
        out.graph = std::move(best.graph);
        return out;
    }

    auto head_only = [](const LayerSpec& l) { return l.has_params() && !is_conv_like(l.kind); };
    auto everything = [](const LayerSpec& l) { return l.has_params(); };

    ModelGraph working = graph;
    run_stage(1, working, train, val_eval, cfg, head_only, best, out.history,
              mix_seed(cfg.seed, 1));
    out.history.conv_hash_stage1 = best.graph.conv_weights_hash();

    working = best.graph;  // stage 2 resumes from the best head
    run_stage(2, working, train, val_eval, cfg, everything, best, out.history,
              mix_seed(cfg.seed, 2));

    out.history.best_val_acc = best.val_acc;
    out.graph = std::move(best.graph);
    return out;
}

bool known_criterion(const std::string& name) {
    for (const char* c : kCriteria)
        if (name == c) return true;
    return false;
}

CriterionResult criterion_scores(const ModelGraph& graph, const std::string& criterion,
                                 const Tensor& train_images, i64 samples, u64 seed) {
    CriterionResult out;
    if (criterion == "kernel-l1") {
        for (const auto& l : graph.layers)
            if (is_conv_like(l.kind)) out.scores[l.id] = kernel_l1(l.weights);
        out.csv = stats_csv(out.scores, "kernel-l1", 0, graph);
        return out;
    }
    NormSchedule sched;
    if (criterion == "fm-layerwise") {
        sched = default_schedule(graph);
    } else if (criterion == "fm-l1") {
        sched = default_schedule(graph);
        for (auto& [id, order] : sched.orders) order = NormOrder::l1();
    } else {
        throw ConfigError("unknown criterion '" + criterion + "'");
    }
    NormStats stats = collect_stats(graph, train_images, samples, sched, seed);
    out.scores = stats.values;
    out.csv = stats_csv(stats, graph);
    return out;
}

void PipelineConfig::validate(const ModelGraph& initial) const {
    if (!known_criterion(criterion)) throw ConfigError("unknown criterion '" + criterion + "'");
    if (stats_samples < 1) throw ConfigError("stats_samples must be positive");
    if (resume && out_dir.empty()) throw ConfigError("resume requires an output directory");
    train.validate();

    std::map<std::string, i64> current;
    for (const auto& l : initial.layers)
        if (is_conv_like(l.kind)) current[l.id] = l.out_channels;

    for (std::size_t r = 0; r < rounds.size(); ++r) {
        for (const auto& [id, keep] : rounds[r]) {
            auto it = current.find(id);
            if (it == current.end())
                throw ConfigError("round " + std::to_string(r) + " names unknown conv layer '" +
                                  id + "'");
            if (keep < 1)
                throw ConfigError("round " + std::to_string(r) + " keep count for '" + id +
                                  "' must be positive");
            if (r == 0 && keep != it->second)
                throw ConfigError("round 0 keep count for '" + id + "' is " +
                                  std::to_string(keep) + " but the graph has " +
                                  std::to_string(it->second) +
                                  "; round 0 is the baseline and must restate current counts");
            if (keep > it->second)
                throw ConfigError("round " + std::to_string(r) + " raises '" + id + "' from " +
                                  std::to_string(it->second) + " to " + std::to_string(keep) +
                                  "; keep counts must be non-increasing");
            it->second = keep;
        }
        if (r == 0)
            for (const auto& [id, count] : current)
                if (rounds[0].find(id) == rounds[0].end())
                    throw ConfigError("round 0 must restate every conv layer; missing '" + id +
                                      "'");
    }
}

nlohmann::json record_to_json(const RoundRecord& r) {
    return {{"round", r.round},         {"criterion", r.criterion},
            {"val_acc", r.val_acc},     {"test_acc", r.test_acc},
            {"params", r.params},       {"bytes", r.bytes},
            {"stats_ref", r.stats_ref}, {"conv_hash_pre", r.conv_hash_pre},
            {"conv_hash_stage1", r.conv_hash_stage1}};
}

RoundRecord record_from_json(const nlohmann::json& j) {
    try {
        RoundRecord r;
        r.round = j.at("round").get<i64>();
        r.criterion = j.at("criterion").get<std::string>();
        r.val_acc = j.at("val_acc").get<double>();
        r.test_acc = j.at("test_acc").get<double>();
        r.params = j.at("params").get<i64>();
        r.bytes = j.at("bytes").get<i64>();
        r.stats_ref = j.at("stats_ref").get<std::string>();
        r.conv_hash_pre = j.at("conv_hash_pre").get<u64>();
        r.conv_hash_stage1 = j.at("conv_hash_stage1").get<u64>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad round record: ") + e.what());
    }
}

std::string results_csv(const std::vector<RoundRecord>& records) {
    std::string out = "round,criterion,val_acc,test_acc,params,bytes\n";
    for (const auto& r : records)
        out += std::to_string(r.round) + "," + r.criterion + "," + format_float(r.val_acc) + "," +
               format_float(r.test_acc) + "," + std::to_string(r.params) + "," +
               std::to_string(r.bytes) + "\n";
    return out;
}

PipelineResult run_pipeline(const ModelGraph& initial, const SynthSplits& data,
                            const PipelineConfig& cfg) {
    cfg.validate(initial);
    data.train.validate();
    data.val.validate();
    data.test.validate();

    const bool persist = !cfg.out_dir.empty();
    const fs::path root(cfg.out_dir);
    if (persist) fs::create_directories(root);

    Dataset val_eval = data.val, test_eval = data.test;
    if (cfg.train.crop > 0) {
        val_eval.images = center_crop(val_eval.images, cfg.train.crop);
        test_eval.images = center_crop(test_eval.images, cfg.train.crop);
    }

    PipelineResult result;
    result.graph = initial;
    i64 start_round = 0;

    if (cfg.resume && persist) {
        for (i64 r = 0; r < static_cast<i64>(cfg.rounds.size()); ++r) {
            const fs::path rd = root / ("round_" + std::to_string(r));
            std::ifstream in(rd / "record.json");
            if (!in) break;
            RoundRecord rec;
            try {
                nlohmann::json j = nlohmann::json::parse(in);
                rec = record_from_json(j);
            } catch (const Error&) {
                break;  // half-written round: redo it
            } catch (const nlohmann::json::exception&) {
                break;
            }
            if (rec.round != r) break;
            if (rec.criterion != cfg.criterion)
                throw ConfigError("resume: round " + std::to_string(r) + " was run with criterion '" +
                                  rec.criterion + "', not '" + cfg.criterion + "'");
            result.records.push_back(rec);
            start_round = r + 1;
        }
        if (start_round > 0)
            result.graph = load_model(
                (root / ("round_" + std::to_string(start_round - 1)) / "model.lnpm").string());
    }

    for (i64 r = start_round; r < static_cast<i64>(cfg.rounds.size()); ++r) {
        const u64 stats_seed = mix_seed(cfg.seed, static_cast<u64>(2 * r));
        const u64 train_seed = mix_seed(cfg.seed, static_cast<u64>(2 * r + 1));

        CriterionResult scores =
            criterion_scores(result.graph, cfg.criterion, data.train.images, cfg.stats_samples,
                             stats_seed);
        PrunePlan plan = build_plan(result.graph, scores.scores, cfg.rounds[static_cast<std::size_t>(r)]);

        ModelGraph pruned = plan.empty() ? result.graph : apply_plan(result.graph, plan);

        FinetuneResult tuned;
        if (plan.empty() || cfg.train.max_epochs == 0) {
            // nothing removed (or training disabled): keep the weights as they are
            tuned.graph = std::move(pruned);
            tuned.history.conv_hash_input = tuned.graph.conv_weights_hash();
            tuned.history.conv_hash_stage1 = tuned.history.conv_hash_input;
        } else {
            TrainConfig tc = cfg.train;
            tc.seed = train_seed;
            try {
                tuned = finetune_two_stage(pruned, data.train, data.val, tc);
            } catch (const NumericError& e) {
                throw NumericError("round " + std::to_string(r) + ": " + e.what());
            }
        }
        result.graph = std::move(tuned.graph);

        RoundRecord rec;
        rec.round = r;
        rec.criterion = cfg.criterion;
        rec.val_acc = evaluate(result.graph, val_eval);
        rec.test_acc = evaluate(result.graph, test_eval);
        rec.params = result.graph.param_count();
        rec.conv_hash_pre = tuned.history.conv_hash_input;
        rec.conv_hash_stage1 = tuned.history.conv_hash_stage1;

        if (persist) {
            const fs::path rd = root / ("round_" + std::to_string(r));
            fs::create_directories(rd);
            save_model(result.graph, (rd / "model.lnpm").string());
            rec.bytes = static_cast<i64>(fs::file_size(rd / "model.lnpm"));
            rec.stats_ref = "round_" + std::to_string(r) + "/stats.csv";
            write_text_atomic((rd / "stats.csv").string(), scores.csv);
            write_text_atomic((rd / "plan.json").string(), plan_to_json(plan).dump(2) + "\n");
            // record.json lands last: its presence marks the round complete
            write_text_atomic((rd / "record.json").string(), record_to_json(rec).dump(2) + "\n");
        } else {
            rec.bytes = serialized_bytes(result.graph);
        }
        result.records.push_back(rec);
        if (persist) write_text_atomic((root / "results.csv").string(), results_csv(result.records));
    }
    return result;
}

}  // namespace lnprune
