#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lnprune/graph.hpp"
#include "lnprune/tensor.hpp"

namespace lnprune {

// p-norm order: n >= 1, with +infinity standing for the max norm.
struct NormOrder {
    double n = 2.0;

    NormOrder() = default;
    explicit NormOrder(double v);  // throws ConfigError unless v >= 1 or inf

    static NormOrder l1() { return NormOrder(1.0); }
    static NormOrder l2() { return NormOrder(2.0); }
    static NormOrder linf();

    bool is_inf() const;
    std::string str() const;                       // "L1", "L2", "Linf", "L2.5"
    static NormOrder parse(const std::string& s);  // accepts the str() forms, case-insensitive

    bool operator==(const NormOrder& o) const { return n == o.n; }
};

// Per-conv-layer norm assignment. Every prunable layer must be covered.
struct NormSchedule {
    std::map<std::string, NormOrder> orders;
};

// L1 on the leading conv block (everything before the first pool or residual
// add), Linf on the topologically last conv layer, L2 elsewhere.
NormSchedule default_schedule(const ModelGraph& graph);

// Mean per-kernel feature-map norms over the sampled inputs.
struct NormStats {
    std::map<std::string, std::vector<double>> values;  // conv id -> one value per kernel
    std::map<std::string, NormOrder> orders;            // effective order per conv id
    i64 sample_count = 0;
    u64 seed = 0;
    u64 weights_hash = 0;  // hash of the graph the stats were taken from
};

// Entry-wise p-norm of a flattened map: L1 sum|a|, L2 sqrt(sum a^2),
// Ln (sum |a|^n)^(1/n), Linf max|a|. 64-bit accumulation.
double feature_norm(const Tensor& map, NormOrder order);
double feature_norm(const float* data, i64 count, NormOrder order);

// Where each conv layer's post-activation map is read: coupling-group members
// observe the group's stage output, a lone conv observes its following ReLU,
// and a conv with no ReLU consumer falls back to its own raw output.
std::map<std::string, std::string> observation_points(const ModelGraph& graph);

// Mean feature-map norm per kernel over `count` samples drawn from
// images [M,C,H,W]. Coupling-group members share the order assigned to the
// group's last member and the per-channel stats of the stage output.
NormStats collect_stats(const ModelGraph& graph, const Tensor& images, i64 count,
                        const NormSchedule& schedule, u64 seed);

// Per-kernel L1 norm of a [D,C,k,k] weight bank, bias excluded.
std::vector<double> kernel_l1(const Tensor& weights);

// Spearman rank correlation between the feature-map stats ordering and the
// kernel-L1 ordering, per layer; absent when fewer than two kernels or when
// either side has no variance.
std::map<std::string, std::optional<double>> correlation_report(const NormStats& stats,
                                                                const ModelGraph& graph);

// Rows: layer_id,kernel_index,norm_order,value,sample_count in graph layer
// order. The raw-score overload serves non-norm criteria (kernel-L1 rounds).
std::string stats_csv(const NormStats& stats, const ModelGraph& graph);
std::string stats_csv(const std::map<std::string, std::vector<double>>& values,
                      const std::string& label, i64 sample_count, const ModelGraph& graph);

}  // namespace lnprune
