#include "lnprune/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "lnprune/errors.hpp"

namespace lnprune {

using nlohmann::json;

std::vector<i64> rank_kernels(const std::vector<double>& scores) {
    for (double s : scores)
        if (std::isnan(s)) throw NumericError("kernel score is NaN");
    std::vector<i64> order(scores.size());
    std::iota(order.begin(), order.end(), i64{0});
    std::stable_sort(order.begin(), order.end(), [&](i64 a, i64 b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });
    return order;
}

namespace {

struct ChannelFlow {
    std::map<std::string, std::vector<i64>> out_removed;
    std::map<std::string, std::vector<i64>> input_removed;
};

// Walks the graph once, turning per-conv kernel removals into the removed
// output channels of every layer and the removed input slices of every
// weighted layer. Indices refer to pre-surgery channel numbering.
ChannelFlow propagate_removals(const ModelGraph& graph,
                               const std::map<std::string, std::vector<i64>>& remove) {
    Shape probe{1};
    probe.insert(probe.end(), graph.input_shape.begin(), graph.input_shape.end());
    const ShapeTable shapes = infer_shapes(graph, probe);

    static const std::vector<i64> kNone;
    ChannelFlow flow;
    auto incoming = [&](const LayerSpec& l, std::size_t which) -> const std::vector<i64>& {
        if (l.inputs.empty()) return kNone;
        auto it = flow.out_removed.find(l.inputs[which]);
        return it == flow.out_removed.end() ? kNone : it->second;
    };

    for (const auto& l : graph.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::ProjectionShortcut: {
                const auto& in = incoming(l, 0);
                if (!in.empty()) flow.input_removed[l.id] = in;
                auto it = remove.find(l.id);
                if (it != remove.end() && !it->second.empty()) flow.out_removed[l.id] = it->second;
                break;
            }
            case LayerKind::Dense: {
                const auto& in = incoming(l, 0);
                if (!in.empty()) flow.input_removed[l.id] = in;
                break;
            }
            case LayerKind::ReLU:
            case LayerKind::MaxPool:
            case LayerKind::GAP:
            case LayerKind::Softmax: {
                const auto& in = incoming(l, 0);
                if (!in.empty()) flow.out_removed[l.id] = in;
                break;
            }
            case LayerKind::Flatten: {
                const auto& in = incoming(l, 0);
                if (in.empty()) break;
                const Shape& s = shapes.at(l.inputs[0]);
                const i64 plane = s[2] * s[3];
                std::vector<i64> cols;
                cols.reserve(in.size() * static_cast<std::size_t>(plane));
                for (i64 c : in)
                    for (i64 p = 0; p < plane; ++p) cols.push_back(c * plane + p);
                flow.out_removed[l.id] = std::move(cols);
                break;
            }
            case LayerKind::ResidualAdd: {
                const auto& a = incoming(l, 0);
                const auto& b = incoming(l, 1);
                if (a != b)
                    throw ShapeError("residual add '" + l.id +
                                     "' receives mismatched channel removals from '" +
                                     l.inputs[0] + "' and '" + l.inputs[1] + "'");
                if (!a.empty()) flow.out_removed[l.id] = a;
                break;
            }
        }
    }
    return flow;
}

void check_removal_list(const std::string& id, const std::vector<i64>& rm, i64 count) {
    if (rm.empty()) throw ConfigError("plan lists layer '" + id + "' with nothing to remove");
    for (std::size_t i = 0; i < rm.size(); ++i) {
        if (rm[i] < 0 || rm[i] >= count)
            throw ConfigError("plan removes kernel " + std::to_string(rm[i]) + " of layer '" + id +
                              "' which has " + std::to_string(count) + " kernels");
        if (i > 0 && rm[i] <= rm[i - 1])
            throw ConfigError("plan removal list for '" + id + "' is not strictly ascending");
    }
    if (static_cast<i64>(rm.size()) >= count)
        throw ConfigError("plan would leave layer '" + id + "' with no kernels");
}

std::vector<bool> keep_mask(i64 n, const std::vector<i64>& drop) {
    std::vector<bool> keep(static_cast<std::size_t>(n), true);
    for (i64 d : drop) keep[static_cast<std::size_t>(d)] = false;
    return keep;
}

Tensor drop_outer(const Tensor& t, const std::vector<i64>& drop) {
    const i64 n = t.dim(0);
    const i64 stride = t.numel() / n;
    const auto keep = keep_mask(n, drop);
    Shape s = t.shape;
    s[0] = n - static_cast<i64>(drop.size());
    Tensor out(s);
    float* dst = out.data.data();
    for (i64 i = 0; i < n; ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        std::copy_n(t.data.data() + i * stride, stride, dst);
        dst += stride;
    }
    return out;
}

Tensor drop_conv_in(const Tensor& w, const std::vector<i64>& drop) {
    const i64 D = w.dim(0), C = w.dim(1);
    const i64 plane = w.dim(2) * w.dim(3);
    const auto keep = keep_mask(C, drop);
    Shape s = w.shape;
    s[1] = C - static_cast<i64>(drop.size());
    Tensor out(s);
    float* dst = out.data.data();
    for (i64 d = 0; d < D; ++d)
        for (i64 c = 0; c < C; ++c) {
            if (!keep[static_cast<std::size_t>(c)]) continue;
            std::copy_n(w.data.data() + (d * C + c) * plane, plane, dst);
            dst += plane;
        }
    return out;
}

Tensor drop_cols(const Tensor& w, const std::vector<i64>& drop) {
    const i64 O = w.dim(0), F = w.dim(1);
    const auto keep = keep_mask(F, drop);
    Tensor out(Shape{O, F - static_cast<i64>(drop.size())});
    float* dst = out.data.data();
    for (i64 o = 0; o < O; ++o)
        for (i64 f = 0; f < F; ++f)
            if (keep[static_cast<std::size_t>(f)]) *dst++ = w.at(o, f);
    return out;
}

// Group members must shrink identically; a keep target on any member is the
// group's shared target.
struct GroupView {
    const CouplingGroup* group = nullptr;
    i64 index = -1;
};

std::map<std::string, GroupView> group_of_member(const ModelGraph& graph) {
    std::map<std::string, GroupView> out;
    for (std::size_t gi = 0; gi < graph.coupling_groups.size(); ++gi)
        for (const auto& m : graph.coupling_groups[gi].members)
            out[m] = {&graph.coupling_groups[gi], static_cast<i64>(gi)};
    return out;
}

}  // namespace

PrunePlan build_plan(const ModelGraph& graph,
                     const std::map<std::string, std::vector<double>>& scores,
                     const std::map<std::string, i64>& keep) {
    const auto member_groups = group_of_member(graph);

    auto layer_scores = [&](const std::string& id, i64 count) -> const std::vector<double>& {
        auto it = scores.find(id);
        if (it == scores.end())
            throw ConfigError("no scores for layer '" + id + "'");
        if (static_cast<i64>(it->second.size()) != count)
            throw ConfigError("stale scores for layer '" + id + "': " +
                              std::to_string(it->second.size()) + " values for " +
                              std::to_string(count) + " kernels");
        return it->second;
    };

    // Validate targets and resolve the shared target per coupling group.
    std::map<i64, i64> group_keep;
    std::map<std::string, i64> solo_keep;
    for (const auto& [id, target] : keep) {
        const LayerSpec* l = graph.find(id);
        if (!l || !is_conv_like(l->kind))
            throw ConfigError("keep target for unknown conv layer '" + id + "'");
        if (target < 1)
            throw ConfigError("keep target for '" + id + "' must leave at least one kernel");
        if (target > l->out_channels)
            throw ConfigError("keep target " + std::to_string(target) + " for '" + id +
                              "' exceeds its " + std::to_string(l->out_channels) + " kernels");
        auto gv = member_groups.find(id);
        if (gv == member_groups.end()) {
            solo_keep[id] = target;
            continue;
        }
        auto [it, fresh] = group_keep.emplace(gv->second.index, target);
        if (!fresh && it->second != target)
            throw ConfigError("coupling group of '" + id + "' received conflicting keep targets " +
                              std::to_string(it->second) + " and " + std::to_string(target));
    }

    PrunePlan plan;
    for (const auto& [id, target] : solo_keep) {
        const LayerSpec* l = graph.find(id);
        const i64 r = l->out_channels - target;
        if (r == 0) continue;
        const auto order = rank_kernels(layer_scores(id, l->out_channels));
        std::vector<i64> rm(order.begin(), order.begin() + r);
        std::sort(rm.begin(), rm.end());
        plan.remove[id] = std::move(rm);
    }
    for (const auto& [gi, target] : group_keep) {
        const CouplingGroup& g = graph.coupling_groups[static_cast<std::size_t>(gi)];
        const i64 channels = graph.find(g.members.front())->out_channels;
        const i64 r = channels - target;
        if (r == 0) continue;
        std::vector<double> combined(static_cast<std::size_t>(channels), 0.0);
        for (const auto& m : g.members) {
            const auto& s = layer_scores(m, channels);
            for (std::size_t i = 0; i < combined.size(); ++i) combined[i] += s[i];
        }
        const auto order = rank_kernels(combined);
        std::vector<i64> rm(order.begin(), order.begin() + r);
        std::sort(rm.begin(), rm.end());
        for (const auto& m : g.members) plan.remove[m] = rm;
    }

    if (!plan.remove.empty())
        plan.successor_inputs = propagate_removals(graph, plan.remove).input_removed;
    return plan;
}

ModelGraph apply_plan(const ModelGraph& graph, const PrunePlan& plan) {
    for (const auto& [id, rm] : plan.remove) {
        const LayerSpec* l = graph.find(id);
        if (!l) throw ConfigError("plan prunes unknown layer '" + id + "'");
        if (!is_conv_like(l->kind))
            throw ConfigError("plan prunes non-conv layer '" + id + "'");
        check_removal_list(id, rm, l->out_channels);
    }
    for (const auto& g : graph.coupling_groups) {
        const std::vector<i64>* first = nullptr;
        for (const auto& m : g.members) {
            auto it = plan.remove.find(m);
            const std::vector<i64>* rm = it == plan.remove.end() ? nullptr : &it->second;
            if (&m == &g.members.front()) {
                first = rm;
                continue;
            }
            const bool same = (first == nullptr && rm == nullptr) ||
                              (first != nullptr && rm != nullptr && *first == *rm);
            if (!same)
                throw ConfigError("coupling group containing '" + m +
                                  "' is not pruned in lockstep");
        }
    }

    const ChannelFlow flow = propagate_removals(graph, plan.remove);
    if (!plan.successor_inputs.empty() && plan.successor_inputs != flow.input_removed)
        throw ConfigError("plan's successor input slices disagree with the graph topology");

    ModelGraph out = graph;
    for (auto& l : out.layers) {
        auto in_it = flow.input_removed.find(l.id);
        if (in_it != flow.input_removed.end()) {
            if (is_conv_like(l.kind))
                l.weights = drop_conv_in(l.weights, in_it->second);
            else
                l.weights = drop_cols(l.weights, in_it->second);
        }
        auto rm_it = plan.remove.find(l.id);
        if (rm_it != plan.remove.end()) {
            l.weights = drop_outer(l.weights, rm_it->second);
            l.bias = drop_outer(l.bias, rm_it->second);
            l.out_channels -= static_cast<i64>(rm_it->second.size());
        }
    }

    Shape probe{1};
    probe.insert(probe.end(), out.input_shape.begin(), out.input_shape.end());
    infer_shapes(out, probe);
    return out;
}

PruneReport plan_report(const PrunePlan& plan, const ModelGraph& before, const ModelGraph& after) {
    PruneReport rep;
    for (const auto& l : before.layers) {
        if (!is_conv_like(l.kind)) continue;
        const LayerSpec* a = after.find(l.id);
        if (!a) throw ConfigError("pruned graph lost layer '" + l.id + "'");
        LayerPruneInfo info;
        auto it = plan.remove.find(l.id);
        info.removed = it == plan.remove.end() ? 0 : static_cast<i64>(it->second.size());
        info.kept = l.out_channels - info.removed;
        info.params_before = l.weights.numel() + l.bias.numel();
        info.params_after = a->weights.numel() + a->bias.numel();
        rep.layers[l.id] = info;
    }
    rep.params_before = before.param_count();
    rep.params_after = after.param_count();
    rep.blob_bytes_before = rep.params_before * static_cast<i64>(sizeof(float));
    rep.blob_bytes_after = rep.params_after * static_cast<i64>(sizeof(float));
    rep.ratio = rep.params_before == 0
                    ? 1.0
                    : static_cast<double>(rep.params_after) / static_cast<double>(rep.params_before);
    return rep;
}

json plan_to_json(const PrunePlan& plan) {
    json j;
    j["remove"] = json::object();
    for (const auto& [id, rm] : plan.remove) j["remove"][id] = rm;
    j["successor_inputs"] = json::object();
    for (const auto& [id, rm] : plan.successor_inputs) j["successor_inputs"][id] = rm;
    return j;
}

PrunePlan plan_from_json(const json& j) {
    PrunePlan plan;
    try {
        for (const auto& [id, rm] : j.at("remove").items())
            plan.remove[id] = rm.get<std::vector<i64>>();
        if (j.contains("successor_inputs"))
            for (const auto& [id, rm] : j.at("successor_inputs").items())
                plan.successor_inputs[id] = rm.get<std::vector<i64>>();
    } catch (const json::exception& e) {
        throw DataError("malformed prune plan: " + std::string(e.what()));
    }
    for (const auto& [id, rm] : plan.remove)
        for (std::size_t i = 1; i < rm.size(); ++i)
            if (rm[i] <= rm[i - 1])
                throw DataError("prune plan list for '" + id + "' is not strictly ascending");
    return plan;
}

json report_to_json(const PruneReport& r) {
    json j;
    j["params_before"] = r.params_before;
    j["params_after"] = r.params_after;
    j["blob_bytes_before"] = r.blob_bytes_before;
    j["blob_bytes_after"] = r.blob_bytes_after;
    j["ratio"] = r.ratio;
    j["layers"] = json::object();
    for (const auto& [id, info] : r.layers)
        j["layers"][id] = {{"kept", info.kept},
                           {"removed", info.removed},
                           {"params_before", info.params_before},
                           {"params_after", info.params_after}};
    return j;
}

}  // namespace lnprune
