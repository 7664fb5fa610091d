#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lnprune/data.hpp"
#include "lnprune/errors.hpp"
#include "lnprune/graph.hpp"
#include "lnprune/norms.hpp"
#include "lnprune/prune.hpp"
#include "lnprune/train.hpp"

using namespace lnprune;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct IdxPaths {
    std::string train_images, train_labels;
    std::string val_images, val_labels;
    std::string test_images, test_labels;
};

struct RunConfig {
    PipelineConfig pipe;
    std::optional<SynthSpec> synth;
    std::optional<IdxPaths> idx;
};

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& ctx) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (allowed.find(it.key()) == allowed.end())
            throw ConfigError("unknown key '" + it.key() + "' in " + ctx);
}

const json& object_field(const json& obj, const char* key) {
    const json& v = obj.at(key);
    if (!v.is_object()) throw ConfigError(std::string("'") + key + "' must be a JSON object");
    return v;
}

template <typename T>
T field(const json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("bad value for '") + key + "'");
    }
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    check_keys(j, {"schema_version", "out_dir", "seed", "criterion", "stats_samples", "rounds",
                   "train", "data"},
               "config");
    if (!j.contains("schema_version")) throw ConfigError("config is missing schema_version");
    if (field<i64>(j, "schema_version", 0) != 1)
        throw ConfigError("unsupported schema_version " +
                          std::to_string(field<i64>(j, "schema_version", 0)) + ", expected 1");

    RunConfig rc;
    rc.pipe.out_dir = field<std::string>(j, "out_dir", "");
    rc.pipe.seed = field<u64>(j, "seed", 0);
    rc.pipe.criterion = field<std::string>(j, "criterion", "fm-layerwise");
    rc.pipe.stats_samples = field<i64>(j, "stats_samples", 100);

    if (j.contains("rounds")) {
        const json& ra = j.at("rounds");
        if (!ra.is_array()) throw ConfigError("'rounds' must be an array of keep-count maps");
        for (const json& r : ra) {
            if (!r.is_object()) throw ConfigError("each round must be a layer -> keep-count map");
            std::map<std::string, i64> m;
            for (auto it = r.begin(); it != r.end(); ++it) {
                if (!it.value().is_number_integer())
                    throw ConfigError("keep count for '" + it.key() + "' must be an integer");
                m[it.key()] = it.value().get<i64>();
            }
            rc.pipe.rounds.push_back(std::move(m));
        }
    }

    if (j.contains("train")) {
        const json& t = object_field(j, "train");
        check_keys(t, {"lr1", "lr2", "momentum", "batch_size", "max_epochs", "patience", "crop",
                       "mirror"},
                   "train");
        TrainConfig& tc = rc.pipe.train;
        tc.lr1 = field<double>(t, "lr1", tc.lr1);
        tc.lr2 = field<double>(t, "lr2", tc.lr2);
        tc.momentum = field<double>(t, "momentum", tc.momentum);
        tc.batch_size = field<i64>(t, "batch_size", tc.batch_size);
        tc.max_epochs = field<i64>(t, "max_epochs", tc.max_epochs);
        tc.patience = field<i64>(t, "patience", tc.patience);
        tc.crop = field<i64>(t, "crop", tc.crop);
        tc.mirror = field<bool>(t, "mirror", tc.mirror);
    }

    if (j.contains("data")) {
        const json& d = object_field(j, "data");
        check_keys(d, {"synth", "idx"}, "data");
        if (d.contains("synth") == d.contains("idx"))
            throw ConfigError("data must have exactly one of 'synth' or 'idx'");
        if (d.contains("synth")) {
            const json& s = object_field(d, "synth");
            check_keys(s, {"class_count", "size", "train_per_class", "val_per_class",
                           "test_per_class", "sigma", "seed"},
                       "data.synth");
            SynthSpec spec;
            spec.class_count = field<i64>(s, "class_count", spec.class_count);
            spec.size = field<i64>(s, "size", spec.size);
            spec.train_per_class = field<i64>(s, "train_per_class", spec.train_per_class);
            spec.val_per_class = field<i64>(s, "val_per_class", spec.val_per_class);
            spec.test_per_class = field<i64>(s, "test_per_class", spec.test_per_class);
            spec.sigma = field<double>(s, "sigma", spec.sigma);
            spec.seed = field<u64>(s, "seed", spec.seed);
            rc.synth = spec;
        } else {
            const json& p = object_field(d, "idx");
            check_keys(p, {"train_images", "train_labels", "val_images", "val_labels",
                           "test_images", "test_labels"},
                       "data.idx");
            IdxPaths ip;
            auto need = [&](const char* key) {
                if (!p.contains(key)) throw ConfigError(std::string("data.idx is missing '") + key + "'");
                return field<std::string>(p, key, "");
            };
            ip.train_images = need("train_images");
            ip.train_labels = need("train_labels");
            ip.val_images = need("val_images");
            ip.val_labels = need("val_labels");
            ip.test_images = need("test_images");
            ip.test_labels = need("test_labels");
            rc.idx = ip;
        }
    }
    return rc;
}

SynthSplits resolve_data(const RunConfig& rc) {
    if (rc.synth) return synth_generate(*rc.synth);
    if (rc.idx) {
        SynthSplits s;
        s.train = load_idx(rc.idx->train_images, rc.idx->train_labels, "train");
        s.val = load_idx(rc.idx->val_images, rc.idx->val_labels, "val");
        s.test = load_idx(rc.idx->test_images, rc.idx->test_labels, "test");
        return s;
    }
    throw ConfigError("config has no data section");
}

// One invocation owns its output directory; a leftover .lock means another
// run is active (or died hard and needs manual cleanup).
struct DirLock {
    fs::path file;
    bool held = false;

    void acquire(const fs::path& dir) {
        fs::create_directories(dir);
        file = dir / ".lock";
        FILE* f = std::fopen(file.string().c_str(), "wx");
        if (!f)
            throw ConfigError("output directory '" + dir.string() +
                              "' is locked by another run; remove '" + file.string() +
                              "' if that run is gone");
        std::fputs("lnprune\n", f);
        std::fclose(f);
        held = true;
    }
    ~DirLock() {
        if (held) {
            std::error_code ec;
            fs::remove(file, ec);
        }
    }
};

std::string require_out_dir(const RunConfig& rc) {
    if (rc.pipe.out_dir.empty()) throw ConfigError("this command needs an output directory");
    return rc.pipe.out_dir;
}

int cmd_synth(const RunConfig& rc) {
    if (!rc.synth) throw ConfigError("synth command needs a data.synth section");
    const fs::path dir = require_out_dir(rc);
    DirLock lock;
    lock.acquire(dir);
    SynthSplits s = synth_generate(*rc.synth);
    for (const Dataset* ds : {&s.train, &s.val, &s.test}) {
        const std::string img = (dir / (ds->split + "-images.idx")).string();
        const std::string lab = (dir / (ds->split + "-labels.idx")).string();
        save_idx(*ds, img, lab);
        std::cout << "wrote " << img << " (" << ds->size() << " images)\n";
        std::cout << "wrote " << lab << "\n";
    }
    return 0;
}

int cmd_stats(const RunConfig& rc, const std::string& model_path) {
    if (rc.pipe.criterion == "kernel-l1")
        throw ConfigError("stats command needs a feature-map criterion (fm-layerwise or fm-l1)");
    if (!known_criterion(rc.pipe.criterion))
        throw ConfigError("unknown criterion '" + rc.pipe.criterion + "'");
    const fs::path dir = require_out_dir(rc);
    DirLock lock;
    lock.acquire(dir);

    ModelGraph graph = load_model(model_path);
    SynthSplits data = resolve_data(rc);

    NormSchedule sched = default_schedule(graph);
    if (rc.pipe.criterion == "fm-l1")
        for (auto& [id, order] : sched.orders) order = NormOrder::l1();
    NormStats stats =
        collect_stats(graph, data.train.images, rc.pipe.stats_samples, sched, rc.pipe.seed);

    write_text_atomic((dir / "stats.csv").string(), stats_csv(stats, graph));
    std::cout << "wrote " << (dir / "stats.csv").string() << "\n";

    std::string corr = "layer_id,spearman\n";
    auto report = correlation_report(stats, graph);
    for (const auto& l : graph.layers) {
        auto it = report.find(l.id);
        if (it == report.end()) continue;
        corr += l.id + ",";
        if (it->second) corr += format_float(*it->second);
        corr += "\n";
    }
    write_text_atomic((dir / "correlation.csv").string(), corr);
    std::cout << "wrote " << (dir / "correlation.csv").string() << "\n";
    return 0;
}

int cmd_prune(const RunConfig& rc, const std::string& model_path, i64 round,
              std::string out_path, bool verify) {
    if (round < 0 || round >= static_cast<i64>(rc.pipe.rounds.size()))
        throw ConfigError("round " + std::to_string(round) + " outside the configured rounds");
    ModelGraph graph = load_model(model_path);

    fs::path out = out_path.empty() ? fs::path(require_out_dir(rc)) / "pruned.lnpm"
                                    : fs::path(out_path);
    if (fs::exists(out) && fs::equivalent(out, fs::path(model_path)))
        throw ConfigError("refusing to overwrite the input model; pick a different --out");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    DirLock lock;
    lock.acquire(out.has_parent_path() ? out.parent_path() : fs::path("."));

    const bool needs_data = rc.pipe.criterion != "kernel-l1" || verify;
    SynthSplits data;
    if (needs_data) data = resolve_data(rc);

    CriterionResult scores = criterion_scores(graph, rc.pipe.criterion, data.train.images,
                                              rc.pipe.stats_samples, rc.pipe.seed);
    PrunePlan plan = build_plan(graph, scores.scores, rc.pipe.rounds[static_cast<std::size_t>(round)]);
    ModelGraph pruned = plan.empty() ? graph : apply_plan(graph, plan);

    if (verify) {
        // Zeroing a removed kernel (weights and bias) silences its channel, so
        // the zeroed original and the pruned net must produce the same logits.
        ModelGraph zeroed = graph;
        for (const auto& [id, kernels] : plan.remove) {
            LayerSpec* l = zeroed.find(id);
            const i64 plane = l->weights.numel() / l->weights.dim(0);
            for (i64 d : kernels) {
                for (i64 p = 0; p < plane; ++p) l->weights.at(d * plane + p) = 0.0f;
                l->bias.at(d) = 0.0f;
            }
        }
        const i64 n = std::min<i64>(16, data.train.size());
        Dataset probe = sample_subset(data.train, n, mix_seed(rc.pipe.seed, 0xbeef));
        Tensor a = forward(pruned, probe.images);
        Tensor b = forward(zeroed, probe.images);
        double max_diff = 0.0;
        for (i64 i = 0; i < a.numel(); ++i)
            max_diff = std::max(max_diff, std::fabs(static_cast<double>(a.at(i)) -
                                                    static_cast<double>(b.at(i))));
        if (max_diff > 1e-5)
            throw NumericError("prune verification failed: logits differ by " +
                               format_float(max_diff));
        std::cout << "verify=ok max_diff=" << format_float(max_diff) << "\n";
    }

    save_model(pruned, out.string());
    write_text_atomic((out.parent_path() / "plan.json").string(),
                      plan_to_json(plan).dump(2) + "\n");
    std::cout << "wrote " << out.string() << "\n";
    std::cout << "wrote " << (out.parent_path() / "plan.json").string() << "\n";
    return 0;
}

void write_plot_data(const fs::path& dir, const std::string& criterion,
                     const std::vector<RoundRecord>& records) {
    std::string text = "# round test_acc (" + criterion + ")\n";
    for (const RoundRecord& r : records)
        text += std::to_string(r.round) + " " + format_float(r.test_acc) + "\n";
    write_text_atomic((dir / ("plot_" + criterion + ".dat")).string(), text);
}

int cmd_pipeline(RunConfig rc, const std::string& model_path, bool resume, i64 max_round,
                 bool compare) {
    if (rc.pipe.rounds.empty()) throw ConfigError("pipeline needs a non-empty rounds list");
    if (max_round >= 0) {
        if (max_round + 1 > static_cast<i64>(rc.pipe.rounds.size()))
            throw ConfigError("--rounds " + std::to_string(max_round) + " exceeds the " +
                              std::to_string(rc.pipe.rounds.size()) + " configured rounds");
        rc.pipe.rounds.resize(static_cast<std::size_t>(max_round + 1));
    }
    const fs::path dir = require_out_dir(rc);
    DirLock lock;
    lock.acquire(dir);

    ModelGraph graph = load_model(model_path);
    SynthSplits data = resolve_data(rc);

    if (!compare) {
        rc.pipe.resume = resume;
        PipelineResult r = run_pipeline(graph, data, rc.pipe);
        write_plot_data(dir, rc.pipe.criterion, r.records);
        std::cout << "wrote " << (dir / "results.csv").string() << "\n";
        std::cout << "final val_acc=" << format_float(r.records.back().val_acc)
                  << " test_acc=" << format_float(r.records.back().test_acc) << "\n";
        return 0;
    }

    // comparison mode: identical seeds and rounds per criterion, merged table
    const std::vector<std::string> criteria = {"kernel-l1", "fm-l1", "fm-layerwise"};
    std::map<std::string, std::vector<RoundRecord>> runs;
    for (const std::string& c : criteria) {
        PipelineConfig sub = rc.pipe;
        sub.criterion = c;
        sub.out_dir = (dir / c).string();
        sub.resume = resume;
        PipelineResult r = run_pipeline(graph, data, sub);
        write_plot_data(dir, c, r.records);
        runs[c] = std::move(r.records);
    }
    std::string table = "round";
    for (const std::string& c : criteria) table += "," + c;
    table += "\n";
    for (std::size_t i = 0; i < runs[criteria[0]].size(); ++i) {
        table += std::to_string(runs[criteria[0]][i].round);
        for (const std::string& c : criteria) table += "," + format_float(runs[c][i].test_acc);
        table += "\n";
    }
    write_text_atomic((dir / "comparison.csv").string(), table);
    std::cout << "wrote " << (dir / "comparison.csv").string() << "\n";
    return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& model_path, const std::string& split) {
    ModelGraph graph = load_model(model_path);
    SynthSplits data = resolve_data(rc);
    const Dataset* ds = nullptr;
    if (split == "train") ds = &data.train;
    else if (split == "val") ds = &data.val;
    else if (split == "test") ds = &data.test;
    else throw ConfigError("unknown split '" + split + "'");
    const double acc = evaluate(graph, *ds);
    std::cout << "accuracy=" << format_float(acc) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ln-norm feature-map pruning toolkit"};
    app.require_subcommand(1);

    std::string config_path, model_path, out_path, out_dir, criterion, split = "test";
    u64 seed = 0;
    i64 samples = 0, round = 0, max_round = -1;
    bool verify = false, resume = false, compare = false;

    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* opt = sub->add_option("--config", config_path, "JSON run config");
        if (need_config) opt->required();
        sub->add_option("--out-dir", out_dir, "output directory (overrides config)");
        sub->add_option("--seed", seed, "seed (overrides config)");
        return sub;
    };

    CLI::App* synth = add_common(app.add_subcommand("synth", "generate a synthetic IDX dataset"), true);

    CLI::App* stats = add_common(app.add_subcommand("stats", "collect feature-map norm stats"), true);
    stats->add_option("--model", model_path, "model file")->required();
    stats->add_option("--samples", samples, "stats sample count (overrides config)");
    stats->add_option("--criterion", criterion, "fm-layerwise or fm-l1");

    CLI::App* prune = add_common(app.add_subcommand("prune", "one round of kernel surgery"), true);
    prune->add_option("--model", model_path, "model file")->required();
    prune->add_option("--round", round, "round index into the configured rounds")->required();
    prune->add_option("--out", out_path, "output model path (default <out_dir>/pruned.lnpm)");
    prune->add_option("--criterion", criterion, "ranking criterion");
    prune->add_flag("--verify", verify, "check pruned logits against the zeroed-kernel original");

    CLI::App* pipeline = add_common(app.add_subcommand("pipeline", "recursive prune -> retrain"), true);
    pipeline->add_option("--model", model_path, "initial model file")->required();
    pipeline->add_option("--rounds", max_round, "run rounds 0..N only");
    pipeline->add_option("--criterion", criterion, "ranking criterion");
    pipeline->add_flag("--resume", resume, "continue after the last completed round");
    pipeline->add_flag("--compare", compare, "run kernel-l1, fm-l1 and fm-layerwise side by side");

    CLI::App* eval = add_common(app.add_subcommand("eval", "print model accuracy"), true);
    eval->add_option("--model", model_path, "model file")->required();
    eval->add_option("--split", split, "train, val or test (default test)");

    try {
        app.parse(argc, argv);
        CLI::App* active = app.get_subcommands().front();

        RunConfig rc = parse_run_config(config_path);
        if (active->count("--out-dir")) rc.pipe.out_dir = out_dir;
        if (active->count("--seed")) rc.pipe.seed = seed;
        if (active->get_option_no_throw("--criterion") && active->count("--criterion"))
            rc.pipe.criterion = criterion;
        if (active->get_option_no_throw("--samples") && active->count("--samples"))
            rc.pipe.stats_samples = samples;

        if (synth->parsed()) return cmd_synth(rc);
        if (stats->parsed()) return cmd_stats(rc, model_path);
        if (prune->parsed()) return cmd_prune(rc, model_path, round, out_path, verify);
        if (pipeline->parsed()) return cmd_pipeline(std::move(rc), model_path, resume, max_round, compare);
        if (eval->parsed()) return cmd_eval(rc, model_path, split);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
