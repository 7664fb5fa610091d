#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnprune/data.hpp"
#include "lnprune/graph.hpp"
#include "lnprune/norms.hpp"
#include "lnprune/prune.hpp"

namespace lnprune {

struct TrainConfig {
    double lr1 = 0.05;   // stage 1, classifier head only; default 10x stage 2
    double lr2 = 0.005;  // stage 2, whole network
    double momentum = 0.9;
    i64 batch_size = 16;
    i64 max_epochs = 30;  // per stage; 0 skips training entirely
    i64 patience = 5;     // epochs without val-accuracy improvement
    i64 crop = 0;         // train-time random crop (0 = off); eval center-crops
    bool mirror = false;
    u64 seed = 0;

    void validate() const;  // throws ConfigError
};

// v <- momentum*v - lr*g; w <- w + v. An empty velocity is treated as zeros
// and allocated in place.
void sgd_step(Tensor& params, const Tensor& grad, double lr, double momentum, Tensor& velocity);
void sgd_step(GradPair& p, double lr, double momentum, Tensor& velocity);

struct EpochStat {
    int stage = 0;  // 1 = head only, 2 = whole network
    i64 epoch = 0;  // 1-based within its stage
    double train_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainHistory {
    std::vector<EpochStat> epochs;
    double best_val_acc = 0.0;
    // Conv-parameter hashes at the stage boundaries; the first two must be
    // equal (stage 1 never touches conv kernels).
    u64 conv_hash_input = 0;
    u64 conv_hash_stage1 = 0;
};

struct FinetuneResult {
    ModelGraph graph;  // best-validation snapshot over both stages
    TrainHistory history;
};

// Stage 1 trains only non-conv parameters (the classifier head) until val
// accuracy stops improving; stage 2 then trains everything the same way.
// Returns the best-validation snapshot, which may be the input graph itself.
FinetuneResult finetune_two_stage(const ModelGraph& graph, const Dataset& train,
                                  const Dataset& val, const TrainConfig& cfg);

// Top-1 accuracy in [0,1]. Argmax ties go to the lowest class index.
double evaluate(const ModelGraph& graph, const Dataset& ds);

inline constexpr const char* kCriteria[] = {"fm-layerwise", "fm-l1", "kernel-l1"};
bool known_criterion(const std::string& name);

struct CriterionResult {
    std::map<std::string, std::vector<double>> scores;  // conv id -> per-kernel score
    std::string csv;                                    // stats.csv content
};

// Per-kernel scores for one pruning round. Feature-map criteria sample
// `samples` training images; kernel-l1 reads the weights only.
CriterionResult criterion_scores(const ModelGraph& graph, const std::string& criterion,
                                 const Tensor& train_images, i64 samples, u64 seed);

struct PipelineConfig {
    // Per-round keep counts. Round 0 must restate the incoming graph's kernel
    // counts exactly; later rounds may omit layers that stay unchanged.
    std::vector<std::map<std::string, i64>> rounds;
    std::string criterion = "fm-layerwise";
    i64 stats_samples = 100;
    TrainConfig train;
    u64 seed = 0;
    std::string out_dir;  // empty: no artifacts, run in memory
    bool resume = false;

    void validate(const ModelGraph& initial) const;
};

struct RoundRecord {
    i64 round = 0;
    std::string criterion;
    double val_acc = 0.0;
    double test_acc = 0.0;
    i64 params = 0;
    i64 bytes = 0;          // model file size
    std::string stats_ref;  // stats.csv path when persisted
    u64 conv_hash_pre = 0;  // conv hashes around stage 1 of this round's tuning
    u64 conv_hash_stage1 = 0;
};

nlohmann::json record_to_json(const RoundRecord& r);
RoundRecord record_from_json(const nlohmann::json& j);
std::string results_csv(const std::vector<RoundRecord>& records);

struct PipelineResult {
    ModelGraph graph;
    std::vector<RoundRecord> records;
};

// One round per entry of cfg.rounds: score -> plan -> surgery -> two-stage
// fine-tune -> evaluate -> persist. A round whose plan removes nothing skips
// the surgery and training and just records the evaluation. Artifacts land in
// out_dir/round_<i>/ (model.lnpm, stats.csv, plan.json, record.json) plus a
// run-level results.csv; an aborted round leaves the previous round intact,
// and resume = true picks up after the last completed round.
PipelineResult run_pipeline(const ModelGraph& initial, const SynthSplits& data,
                            const PipelineConfig& cfg);

}  // namespace lnprune
