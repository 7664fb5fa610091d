#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnprune/graph.hpp"

namespace lnprune {

// Which kernels leave which conv layers, plus the derived input-channel
// slices every downstream weighted layer loses. Coupled layers carry
// identical removal lists.
struct PrunePlan {
    std::map<std::string, std::vector<i64>> remove;            // conv id -> sorted kernel indices
    std::map<std::string, std::vector<i64>> successor_inputs;  // layer id -> sorted input slices

    bool empty() const { return remove.empty(); }
};

// Stable ascending argsort; ties keep the lower kernel index first.
std::vector<i64> rank_kernels(const std::vector<double>& scores);

// Chooses the lowest-scored kernels so each targeted layer ends at its keep
// count. A keep target under any coupling-group member applies to the whole
// group, whose per-channel score is the element-wise sum over members.
PrunePlan build_plan(const ModelGraph& graph,
                     const std::map<std::string, std::vector<double>>& scores,
                     const std::map<std::string, i64>& keep);

// Structural surgery: kernels and biases leave the pruned layer, matching
// input slices leave every downstream conv/dense, coupled layers shrink in
// lockstep. Pure: errors leave the input graph untouched.
ModelGraph apply_plan(const ModelGraph& graph, const PrunePlan& plan);

struct LayerPruneInfo {
    i64 kept = 0;
    i64 removed = 0;
    i64 params_before = 0;
    i64 params_after = 0;
};

struct PruneReport {
    std::map<std::string, LayerPruneInfo> layers;  // conv-like layers only
    i64 params_before = 0;
    i64 params_after = 0;
    i64 blob_bytes_before = 0;  // serialized parameter-blob sizes (4 bytes per value)
    i64 blob_bytes_after = 0;
    double ratio = 1.0;  // params_after / params_before
};

PruneReport plan_report(const PrunePlan& plan, const ModelGraph& before, const ModelGraph& after);

nlohmann::json plan_to_json(const PrunePlan& plan);
PrunePlan plan_from_json(const nlohmann::json& j);
nlohmann::json report_to_json(const PruneReport& r);

}  // namespace lnprune
