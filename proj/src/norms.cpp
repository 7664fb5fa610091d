#include "lnprune/norms.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "lnprune/errors.hpp"

namespace lnprune {

NormOrder::NormOrder(double v) : n(v) {
    if (std::isnan(v) || v < 1.0)
        throw ConfigError("norm order must be >= 1, got " + format_float(v));
}

NormOrder NormOrder::linf() { return NormOrder(std::numeric_limits<double>::infinity()); }

bool NormOrder::is_inf() const { return std::isinf(n); }

std::string NormOrder::str() const {
    if (is_inf()) return "Linf";
    return "L" + format_float(n);
}

NormOrder NormOrder::parse(const std::string& s) {
    std::string t;
    for (char c : s) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!t.empty() && t[0] == 'l') t.erase(0, 1);
    if (t == "inf" || t == "infinity") return linf();
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size())
        throw ConfigError("cannot parse norm order '" + s + "'");
    return NormOrder(v);
}

NormSchedule default_schedule(const ModelGraph& graph) {
    // The head block ends at the first pool or at the first fork (a layer
    // feeding two consumers starts a residual stage).
    auto succ = graph.successors();
    std::size_t block_end = graph.layers.size();
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        if (l.kind == LayerKind::MaxPool || succ.at(l.id).size() > 1) {
            block_end = i;
            break;
        }
    }

    std::string last_conv;
    NormSchedule sched;
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        if (!is_conv_like(l.kind)) continue;
        sched.orders[l.id] = i < block_end ? NormOrder::l1() : NormOrder::l2();
        last_conv = l.id;
    }
    if (!last_conv.empty()) sched.orders[last_conv] = NormOrder::linf();
    return sched;
}

double feature_norm(const float* data, i64 count, NormOrder order) {
    if (order.is_inf()) {
        double best = 0.0;
        for (i64 i = 0; i < count; ++i) best = std::max(best, std::fabs(static_cast<double>(data[i])));
        return best;
    }
    if (order.n == 1.0) {
        double s = 0.0;
        for (i64 i = 0; i < count; ++i) s += std::fabs(static_cast<double>(data[i]));
        return s;
    }
    if (order.n == 2.0) {
        double s = 0.0;
        for (i64 i = 0; i < count; ++i) {
            const double v = static_cast<double>(data[i]);
            s += v * v;
        }
        return std::sqrt(s);
    }
    double s = 0.0;
    for (i64 i = 0; i < count; ++i)
        s += std::pow(std::fabs(static_cast<double>(data[i])), order.n);
    return std::pow(s, 1.0 / order.n);
}

double feature_norm(const Tensor& map, NormOrder order) {
    return feature_norm(map.data.data(), map.numel(), order);
}

std::map<std::string, std::string> observation_points(const ModelGraph& graph) {
    std::map<std::string, std::string> member_observe;
    for (const auto& g : graph.coupling_groups) {
        if (g.observe.empty())
            throw ConfigError("coupling group lacks an observe layer for stats collection");
        for (const auto& m : g.members) {
            auto [it, fresh] = member_observe.emplace(m, g.observe);
            if (!fresh && it->second != g.observe)
                throw ConfigError("layer '" + m + "' belongs to two coupling groups");
        }
    }

    auto succ = graph.successors();
    std::map<std::string, std::string> points;
    for (const auto& l : graph.layers) {
        if (!is_conv_like(l.kind)) continue;
        auto grouped = member_observe.find(l.id);
        if (grouped != member_observe.end()) {
            points[l.id] = grouped->second;
            continue;
        }
        std::string obs = l.id;  // raw output fallback
        for (const auto& s : succ.at(l.id)) {
            if (graph.find(s)->kind == LayerKind::ReLU) {
                obs = s;
                break;
            }
        }
        points[l.id] = obs;
    }
    return points;
}

namespace {

constexpr i64 kStatsBatch = 8;

// A coupling group is ranked with one order: the one the schedule assigns to
// the group's last member in layer order.
std::map<std::string, NormOrder> effective_orders(const ModelGraph& graph,
                                                  const NormSchedule& schedule) {
    std::map<std::string, NormOrder> out;
    for (const auto& l : graph.layers) {
        if (!is_conv_like(l.kind)) continue;
        auto it = schedule.orders.find(l.id);
        if (it == schedule.orders.end())
            throw ConfigError("norm schedule does not cover conv layer '" + l.id + "'");
        out[l.id] = it->second;
    }
    for (const auto& g : graph.coupling_groups) {
        const std::string* last = nullptr;
        i64 best = -1;
        for (const auto& m : g.members) {
            const i64 at = graph.index_of(m);
            if (at > best) {
                best = at;
                last = &m;
            }
        }
        if (!last) continue;
        const NormOrder group_order = out.at(*last);
        for (const auto& m : g.members) out[m] = group_order;
    }
    return out;
}

}  // namespace

NormStats collect_stats(const ModelGraph& graph, const Tensor& images, i64 count,
                        const NormSchedule& schedule, u64 seed) {
    if (images.rank() != 4)
        throw DataError("stats dataset must be [M,C,H,W], got " + shape_str(images.shape));
    const auto orders = effective_orders(graph, schedule);
    const auto points = observation_points(graph);
    const std::vector<i64> picked = sample_indices(images.dim(0), count, seed);

    NormStats stats;
    stats.sample_count = count;
    stats.seed = seed;
    stats.weights_hash = graph.weights_hash();
    stats.orders = orders;
    for (const auto& l : graph.layers)
        if (is_conv_like(l.kind)) stats.values[l.id].assign(static_cast<std::size_t>(l.out_channels), 0.0);

    const i64 C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const i64 sample_len = C * H * W;
    for (i64 start = 0; start < count; start += kStatsBatch) {
        const i64 n = std::min(kStatsBatch, count - start);
        Tensor batch(Shape{n, C, H, W});
        for (i64 b = 0; b < n; ++b)
            std::copy_n(images.data.begin() + (picked[static_cast<std::size_t>(start + b)] * sample_len),
                        sample_len, batch.data.begin() + b * sample_len);

        ActivationRecord rec;
        forward(graph, batch, &rec);
        for (auto& [conv_id, acc] : stats.values) {
            const Tensor& obs = rec.out.at(points.at(conv_id));
            const NormOrder order = orders.at(conv_id);
            const i64 channels = obs.dim(1), plane = obs.dim(2) * obs.dim(3);
            if (channels != static_cast<i64>(acc.size()))
                throw ShapeError("observed map of '" + conv_id + "' has " +
                                 std::to_string(channels) + " channels, layer has " +
                                 std::to_string(acc.size()) + " kernels");
            for (i64 b = 0; b < n; ++b)
                for (i64 d = 0; d < channels; ++d)
                    acc[static_cast<std::size_t>(d)] +=
                        feature_norm(obs.data.data() + (b * channels + d) * plane, plane, order);
        }
    }
    for (auto& [id, acc] : stats.values)
        for (double& v : acc) v /= static_cast<double>(count);
    return stats;
}

std::vector<double> kernel_l1(const Tensor& weights) {
    if (weights.rank() != 4)
        throw ShapeError("kernel_l1 expects [D,C,k,k] weights, got " + shape_str(weights.shape));
    const i64 D = weights.dim(0);
    const i64 per = weights.numel() / D;
    std::vector<double> out(static_cast<std::size_t>(D), 0.0);
    for (i64 d = 0; d < D; ++d) {
        double s = 0.0;
        const float* p = weights.data.data() + d * per;
        for (i64 i = 0; i < per; ++i) s += std::fabs(static_cast<double>(p[i]));
        out[static_cast<std::size_t>(d)] = s;
    }
    return out;
}

namespace {

// Ranks with ties sharing the average rank.
std::vector<double> tied_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || a.size() != b.size()) return std::nullopt;
    const std::vector<double> ra = tied_ranks(a), rb = tied_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return std::nullopt;
    return cov / std::sqrt(va * vb);
}

}  // namespace

std::map<std::string, std::optional<double>> correlation_report(const NormStats& stats,
                                                                const ModelGraph& graph) {
    std::map<std::string, std::optional<double>> out;
    for (const auto& [id, values] : stats.values) {
        const LayerSpec* l = graph.find(id);
        if (!l) throw ConfigError("stats cover unknown layer '" + id + "'");
        out[id] = spearman(values, kernel_l1(l->weights));
    }
    return out;
}

std::string stats_csv(const std::map<std::string, std::vector<double>>& values,
                      const std::string& label, i64 sample_count, const ModelGraph& graph) {
    std::ostringstream os;
    os << "layer_id,kernel_index,norm_order,value,sample_count\n";
    for (const auto& l : graph.layers) {
        auto it = values.find(l.id);
        if (it == values.end()) continue;
        for (std::size_t k = 0; k < it->second.size(); ++k)
            os << l.id << ',' << k << ',' << label << ',' << format_float(it->second[k]) << ','
               << sample_count << '\n';
    }
    return os.str();
}

std::string stats_csv(const NormStats& stats, const ModelGraph& graph) {
    std::ostringstream os;
    os << "layer_id,kernel_index,norm_order,value,sample_count\n";
    for (const auto& l : graph.layers) {
        auto it = stats.values.find(l.id);
        if (it == stats.values.end()) continue;
        const std::string order = stats.orders.at(l.id).str();
        for (std::size_t k = 0; k < it->second.size(); ++k)
            os << l.id << ',' << k << ',' << order << ',' << format_float(it->second[k]) << ','
               << stats.sample_count << '\n';
    }
    return os.str();
}

}  // namespace lnprune
