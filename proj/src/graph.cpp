#include "lnprune/graph.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lnprune/errors.hpp"

namespace lnprune {

using nlohmann::json;

namespace {

constexpr std::pair<LayerKind, const char*> kKindNames[] = {
    {LayerKind::Conv, "conv"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::MaxPool, "maxpool"},
    {LayerKind::GAP, "gap"},
    {LayerKind::Dense, "dense"},
    {LayerKind::Softmax, "softmax"},
    {LayerKind::ResidualAdd, "residual_add"},
    {LayerKind::ProjectionShortcut, "projection_shortcut"},
    {LayerKind::Flatten, "flatten"},
};

i64 conv_out_extent(i64 in, i64 k, i64 stride, i64 pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

const char* kind_name(LayerKind k) {
    for (const auto& [kind, nm] : kKindNames)
        if (kind == k) return nm;
    throw Error("unknown layer kind value");
}

LayerKind kind_from_name(const std::string& name) {
    for (const auto& [kind, nm] : kKindNames)
        if (name == nm) return kind;
    throw DataError("unknown layer kind '" + name + "'");
}

bool is_conv_like(LayerKind k) {
    return k == LayerKind::Conv || k == LayerKind::ProjectionShortcut;
}

const LayerSpec* ModelGraph::find(const std::string& id) const {
    for (const auto& l : layers)
        if (l.id == id) return &l;
    return nullptr;
}

LayerSpec* ModelGraph::find(const std::string& id) {
    for (auto& l : layers)
        if (l.id == id) return &l;
    return nullptr;
}

i64 ModelGraph::index_of(const std::string& id) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].id == id) return static_cast<i64>(i);
    return -1;
}

std::map<std::string, std::vector<std::string>> ModelGraph::successors() const {
    std::map<std::string, std::vector<std::string>> succ;
    for (const auto& l : layers) succ[l.id];
    for (const auto& l : layers)
        for (const auto& in : l.inputs) {
            auto it = succ.find(in);
            if (it == succ.end()) throw ShapeError("layer '" + l.id + "' reads unknown layer '" + in + "'");
            it->second.push_back(l.id);
        }
    return succ;
}

i64 ModelGraph::param_count() const {
    i64 n = 0;
    for (const auto& l : layers) n += l.weights.numel() + l.bias.numel();
    return n;
}

u64 ModelGraph::weights_hash() const {
    u64 h = fnv1a(nullptr, 0);
    for (const auto& l : layers) {
        if (!l.has_params()) continue;
        h = fnv1a_extend(h, l.id.data(), l.id.size());
        h = fnv1a_extend(h, l.weights.data.data(), l.weights.data.size() * sizeof(float));
        h = fnv1a_extend(h, l.bias.data.data(), l.bias.data.size() * sizeof(float));
    }
    return h;
}

u64 ModelGraph::conv_weights_hash() const {
    u64 h = fnv1a(nullptr, 0);
    for (const auto& l : layers) {
        if (!is_conv_like(l.kind) || !l.has_params()) continue;
        h = fnv1a_extend(h, l.id.data(), l.id.size());
        h = fnv1a_extend(h, l.weights.data.data(), l.weights.data.size() * sizeof(float));
        h = fnv1a_extend(h, l.bias.data.data(), l.bias.data.size() * sizeof(float));
    }
    return h;
}

ShapeTable infer_shapes(const ModelGraph& graph, const Shape& input_shape) {
    if (input_shape.size() != 4)
        throw ShapeError("graph input must be rank 4 [N,C,H,W], got " + shape_str(input_shape));
    for (i64 e : input_shape)
        if (e <= 0) throw ShapeError("graph input has non-positive extent: " + shape_str(input_shape));
    if (graph.layers.empty()) throw ShapeError("graph has no layers");

    ShapeTable table;
    std::map<std::string, i64> index;

    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const LayerSpec& l = graph.layers[i];
        if (l.id.empty()) throw ShapeError("layer #" + std::to_string(i) + " has an empty id");
        if (index.count(l.id)) throw ShapeError("duplicate layer id '" + l.id + "'");

        // Resolve predecessor shapes; only the first layer reads the graph input.
        std::vector<Shape> in_shapes;
        if (l.inputs.empty()) {
            if (i != 0)
                throw ShapeError("layer '" + l.id + "' has no inputs but is not the first layer");
            in_shapes.push_back(input_shape);
        } else {
            for (const auto& in : l.inputs) {
                auto it = index.find(in);
                if (it == index.end())
                    throw ShapeError("layer '" + l.id + "' reads '" + in +
                                     "' which is not an earlier layer");
                in_shapes.push_back(table.at(in));
            }
        }

        const std::size_t arity = l.kind == LayerKind::ResidualAdd ? 2 : 1;
        if (in_shapes.size() != arity)
            throw ShapeError("layer '" + l.id + "' (" + kind_name(l.kind) + ") expects " +
                             std::to_string(arity) + " input(s), has " +
                             std::to_string(in_shapes.size()));

        const bool parameterized = is_conv_like(l.kind) || l.kind == LayerKind::Dense;
        if (!parameterized && (!l.weights.empty() || !l.bias.empty()))
            throw ShapeError("layer '" + l.id + "' (" + kind_name(l.kind) +
                             ") must not carry parameters");

        const Shape& in = in_shapes[0];
        Shape out;
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::ProjectionShortcut: {
                if (in.size() != 4)
                    throw ShapeError("layer '" + l.id + "': conv input must be rank 4, got " +
                                     shape_str(in));
                if (l.kernel < 1 || l.stride < 1 || l.pad < 0)
                    throw ShapeError("layer '" + l.id + "': invalid kernel/stride/pad");
                if (l.kind == LayerKind::ProjectionShortcut && l.kernel != 1)
                    throw ShapeError("layer '" + l.id + "': projection shortcut must use a 1x1 kernel");
                Shape want{l.out_channels, in[1], l.kernel, l.kernel};
                if (l.weights.shape != want)
                    throw ShapeError("layer '" + l.id + "': weights are " +
                                     shape_str(l.weights.shape) + ", expected " + shape_str(want));
                if (l.bias.shape != Shape{l.out_channels})
                    throw ShapeError("layer '" + l.id + "': bias is " + shape_str(l.bias.shape) +
                                     ", expected [" + std::to_string(l.out_channels) + "]");
                i64 oh = conv_out_extent(in[2], l.kernel, l.stride, l.pad);
                i64 ow = conv_out_extent(in[3], l.kernel, l.stride, l.pad);
                if (oh < 1 || ow < 1)
                    throw ShapeError("layer '" + l.id + "': kernel " + std::to_string(l.kernel) +
                                     " does not fit input " + shape_str(in));
                out = {in[0], l.out_channels, oh, ow};
                break;
            }
            case LayerKind::ReLU:
                out = in;
                break;
            case LayerKind::MaxPool: {
                if (in.size() != 4)
                    throw ShapeError("layer '" + l.id + "': maxpool input must be rank 4, got " +
                                     shape_str(in));
                if (l.window < 1 || l.stride < 1)
                    throw ShapeError("layer '" + l.id + "': invalid pool window/stride");
                if (l.window > in[2] || l.window > in[3])
                    throw ShapeError("layer '" + l.id + "': pool window " +
                                     std::to_string(l.window) + " exceeds input " + shape_str(in));
                out = {in[0], in[1], (in[2] - l.window) / l.stride + 1,
                       (in[3] - l.window) / l.stride + 1};
                break;
            }
            case LayerKind::GAP:
                if (in.size() != 4)
                    throw ShapeError("layer '" + l.id + "': gap input must be rank 4, got " +
                                     shape_str(in));
                out = {in[0], in[1]};
                break;
            case LayerKind::Flatten:
                if (in.size() != 4)
                    throw ShapeError("layer '" + l.id + "': flatten input must be rank 4, got " +
                                     shape_str(in));
                out = {in[0], in[1] * in[2] * in[3]};
                break;
            case LayerKind::Dense: {
                if (in.size() != 2)
                    throw ShapeError("layer '" + l.id + "': dense input must be rank 2, got " +
                                     shape_str(in));
                Shape want{l.units, in[1]};
                if (l.weights.shape != want)
                    throw ShapeError("layer '" + l.id + "': weights are " +
                                     shape_str(l.weights.shape) + ", expected " + shape_str(want));
                if (l.bias.shape != Shape{l.units})
                    throw ShapeError("layer '" + l.id + "': bias is " + shape_str(l.bias.shape) +
                                     ", expected [" + std::to_string(l.units) + "]");
                out = {in[0], l.units};
                break;
            }
            case LayerKind::Softmax:
                if (in.size() != 2)
                    throw ShapeError("layer '" + l.id + "': softmax input must be rank 2, got " +
                                     shape_str(in));
                out = in;
                break;
            case LayerKind::ResidualAdd: {
                if (in_shapes[0] != in_shapes[1])
                    throw ShapeError("layer '" + l.id + "': residual add of mismatched shapes " +
                                     shape_str(in_shapes[0]) + " vs " + shape_str(in_shapes[1]));
                if (in.size() != 4)
                    throw ShapeError("layer '" + l.id + "': residual add input must be rank 4, got " +
                                     shape_str(in));
                out = in;
                break;
            }
        }
        index[l.id] = static_cast<i64>(i);
        table[l.id] = std::move(out);
    }

    for (const auto& g : graph.coupling_groups) {
        if (g.members.empty()) throw ShapeError("coupling group has no members");
        std::set<std::string> seen;
        i64 channels = -1;
        for (const auto& m : g.members) {
            const LayerSpec* l = graph.find(m);
            if (!l) throw ShapeError("coupling group names unknown layer '" + m + "'");
            if (!is_conv_like(l->kind))
                throw ShapeError("coupling group member '" + m + "' is not a conv layer");
            if (!seen.insert(m).second)
                throw ShapeError("coupling group lists '" + m + "' twice");
            if (channels < 0) channels = l->out_channels;
            if (l->out_channels != channels)
                throw ShapeError("coupling group channel mismatch: '" + m + "' has " +
                                 std::to_string(l->out_channels) + ", expected " +
                                 std::to_string(channels));
        }
        if (!g.observe.empty() && !graph.find(g.observe))
            throw ShapeError("coupling group observes unknown layer '" + g.observe + "'");
    }

    return table;
}

Tensor forward(const ModelGraph& graph, const Tensor& batch, ActivationRecord* record) {
    infer_shapes(graph, batch.shape);

    // Without a record, outputs are freed as soon as every consumer has run.
    std::map<std::string, i64> pending;
    if (!record)
        for (const auto& [id, succ] : graph.successors())
            pending[id] = static_cast<i64>(succ.size());

    std::unordered_map<std::string, Tensor> live;
    auto input_of = [&](const LayerSpec& l, std::size_t which) -> const Tensor& {
        if (l.inputs.empty()) return batch;
        return record ? record->out.at(l.inputs[which]) : live.at(l.inputs[which]);
    };

    std::string logits_id = graph.layers.back().id;
    if (graph.layers.back().kind == LayerKind::Softmax) logits_id = graph.layers.back().inputs[0];

    Tensor logits;
    for (const auto& l : graph.layers) {
        Tensor out;
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::ProjectionShortcut:
                out = conv2d_forward(input_of(l, 0), l.weights, l.bias, l.stride, l.pad);
                break;
            case LayerKind::ReLU:
                out = relu_forward(input_of(l, 0));
                break;
            case LayerKind::MaxPool: {
                MaxPoolOut p = maxpool2d_forward(input_of(l, 0), l.window, l.stride);
                if (record) record->pool_argmax[l.id] = std::move(p.argmax);
                out = std::move(p.out);
                break;
            }
            case LayerKind::GAP:
                out = gap_forward(input_of(l, 0));
                break;
            case LayerKind::Flatten: {
                const Tensor& x = input_of(l, 0);
                out = Tensor(Shape{x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)}, x.data);
                break;
            }
            case LayerKind::Dense:
                out = dense_forward(input_of(l, 0), l.weights, l.bias);
                break;
            case LayerKind::Softmax:
                out = softmax_forward(input_of(l, 0));
                break;
            case LayerKind::ResidualAdd: {
                const Tensor& a = input_of(l, 0);
                const Tensor& b = input_of(l, 1);
                out = Tensor(a.shape);
                for (i64 i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + b.at(i);
                break;
            }
        }
        if (l.id == logits_id) logits = out;
        if (record) record->out[l.id] = std::move(out);
        else {
            live[l.id] = std::move(out);
            for (const auto& in : l.inputs)
                if (--pending[in] == 0) live.erase(in);
        }
    }
    return logits;
}

std::map<std::string, LayerGrads> backward(const ModelGraph& graph, const Tensor& batch,
                                           const ActivationRecord& record, const Tensor& grad_logits,
                                           const std::function<bool(const LayerSpec&)>& trainable) {
    auto is_trainable = [&](const LayerSpec& l) {
        return l.has_params() && (!trainable || trainable(l));
    };

    const std::size_t n = graph.layers.size();
    if (n == 0) throw ShapeError("backward on an empty graph");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[graph.layers[i].id] = i;

    // requires_grad[i]: the gradient of layer i's output is needed, either for
    // its own parameters or to reach a trainable layer further upstream.
    std::vector<bool> requires_grad(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = graph.layers[i];
        bool need = is_trainable(l);
        for (const auto& in : l.inputs) need = need || requires_grad[index.at(in)];
        requires_grad[i] = need;
    }

    std::size_t logits_idx = n - 1;
    if (graph.layers.back().kind == LayerKind::Softmax)
        logits_idx = index.at(graph.layers.back().inputs[0]);
    const std::string& logits_id = graph.layers[logits_idx].id;

    const Tensor& logits_out = record.out.at(logits_id);
    if (!same_shape(grad_logits, logits_out))
        throw ShapeError("grad_logits is " + shape_str(grad_logits.shape) + ", logits are " +
                         shape_str(logits_out.shape));

    std::map<std::string, LayerGrads> grads;
    if (!requires_grad[logits_idx]) return grads;

    std::unordered_map<std::string, Tensor> gmap;
    gmap[logits_id] = grad_logits;

    auto accumulate = [&](const std::string& id, Tensor g) {
        auto it = gmap.find(id);
        if (it == gmap.end()) {
            gmap.emplace(id, std::move(g));
            return;
        }
        Tensor& acc = it->second;
        for (i64 i = 0; i < acc.numel(); ++i) acc.at(i) += g.at(i);
    };
    auto want = [&](const LayerSpec& l, std::size_t which) {
        return !l.inputs.empty() && requires_grad[index.at(l.inputs[which])];
    };
    auto input_of = [&](const LayerSpec& l) -> const Tensor& {
        return l.inputs.empty() ? batch : record.out.at(l.inputs[0]);
    };

    for (std::size_t ii = logits_idx + 1; ii-- > 0;) {
        const LayerSpec& l = graph.layers[ii];
        auto git = gmap.find(l.id);
        if (git == gmap.end() || !requires_grad[ii]) continue;
        Tensor g = std::move(git->second);
        gmap.erase(git);

        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::ProjectionShortcut: {
                ConvGrads cg = conv2d_backward(g, input_of(l), l.weights, l.stride, l.pad);
                if (is_trainable(l))
                    grads[l.id] = {std::move(cg.weights), std::move(cg.bias)};
                if (want(l, 0)) accumulate(l.inputs[0], std::move(cg.input));
                break;
            }
            case LayerKind::ReLU:
                if (want(l, 0)) accumulate(l.inputs[0], relu_backward(g, input_of(l)));
                break;
            case LayerKind::MaxPool:
                if (want(l, 0))
                    accumulate(l.inputs[0],
                               maxpool2d_backward(g, record.pool_argmax.at(l.id), input_of(l).shape));
                break;
            case LayerKind::GAP: {
                const Tensor& x = input_of(l);
                if (want(l, 0)) accumulate(l.inputs[0], gap_backward(g, x.dim(2), x.dim(3)));
                break;
            }
            case LayerKind::Flatten:
                if (want(l, 0)) accumulate(l.inputs[0], Tensor(input_of(l).shape, std::move(g.data)));
                break;
            case LayerKind::Dense: {
                DenseGrads dg = dense_backward(g, input_of(l), l.weights);
                if (is_trainable(l))
                    grads[l.id] = {std::move(dg.weights), std::move(dg.bias)};
                if (want(l, 0)) accumulate(l.inputs[0], std::move(dg.input));
                break;
            }
            case LayerKind::Softmax:
                throw Error("backward through an interior softmax is not supported");
            case LayerKind::ResidualAdd:
                if (want(l, 1)) accumulate(l.inputs[1], g);
                if (want(l, 0)) accumulate(l.inputs[0], std::move(g));
                break;
        }
    }
    return grads;
}

ModelGraph replace_head_with_gap(const ModelGraph& graph, u64 init_seed) {
    Shape probe{1};
    probe.insert(probe.end(), graph.input_shape.begin(), graph.input_shape.end());
    ShapeTable shapes = infer_shapes(graph, probe);

    if (graph.layers.back().kind != LayerKind::Softmax)
        throw ShapeError("head replacement expects the graph to end in softmax");
    const LayerSpec& softmax = graph.layers.back();

    // Walk the head chain backwards through dense/relu layers.
    std::vector<const LayerSpec*> head;
    const LayerSpec* cur = graph.find(softmax.inputs[0]);
    while (cur && (cur->kind == LayerKind::Dense || cur->kind == LayerKind::ReLU)) {
        head.push_back(cur);
        cur = cur->inputs.empty() ? nullptr : graph.find(cur->inputs[0]);
    }
    if (head.empty() || head.front()->kind != LayerKind::Dense)
        throw ShapeError("head replacement expects a dense classifier before the softmax");
    const LayerSpec& classifier = *head.front();

    if (cur && cur->kind == LayerKind::GAP && head.size() == 1) return graph;
    if (!cur || cur->kind != LayerKind::Flatten)
        throw ShapeError("head replacement expects a flatten layer below the dense head");

    const std::string trunk_id = cur->inputs[0];
    const Shape& trunk_shape = shapes.at(trunk_id);
    const i64 channels = trunk_shape[1];

    ModelGraph out;
    out.input_shape = graph.input_shape;
    out.coupling_groups = graph.coupling_groups;
    const i64 cut = graph.index_of(cur->id);
    for (i64 i = 0; i < cut; ++i) out.layers.push_back(graph.layers[static_cast<std::size_t>(i)]);

    std::string gap_id = "gap";
    while (out.index_of(gap_id) >= 0) gap_id += "-head";

    LayerSpec gap;
    gap.id = gap_id;
    gap.kind = LayerKind::GAP;
    gap.inputs = {trunk_id};
    out.layers.push_back(std::move(gap));

    LayerSpec fc;
    fc.id = classifier.id;
    fc.kind = LayerKind::Dense;
    fc.units = classifier.units;
    fc.weights = Tensor(Shape{classifier.units, channels});
    std::mt19937_64 rng(init_seed);
    fill_kaiming_uniform(fc.weights, channels, rng);
    fc.bias = Tensor(Shape{classifier.units});
    fc.inputs = {gap_id};
    out.layers.push_back(std::move(fc));

    LayerSpec sm;
    sm.id = softmax.id;
    sm.kind = LayerKind::Softmax;
    sm.inputs = {classifier.id};
    out.layers.push_back(std::move(sm));

    infer_shapes(out, probe);
    return out;
}

// ---- serialization --------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "model serialization assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'N', 'P', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

json layer_to_json(const LayerSpec& l) {
    json j;
    j["id"] = l.id;
    j["kind"] = kind_name(l.kind);
    j["inputs"] = l.inputs;
    switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::ProjectionShortcut:
            j["out_channels"] = l.out_channels;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["pad"] = l.pad;
            break;
        case LayerKind::MaxPool:
            j["window"] = l.window;
            j["stride"] = l.stride;
            break;
        case LayerKind::Dense:
            j["units"] = l.units;
            break;
        default:
            break;
    }
    if (l.has_params()) {
        j["wshape"] = l.weights.shape;
        j["bshape"] = l.bias.shape;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    l.id = j.at("id").get<std::string>();
    l.kind = kind_from_name(j.at("kind").get<std::string>());
    l.inputs = j.at("inputs").get<std::vector<std::string>>();
    l.out_channels = j.value("out_channels", i64{0});
    l.kernel = j.value("kernel", i64{0});
    l.stride = j.value("stride", i64{1});
    l.pad = j.value("pad", i64{0});
    l.units = j.value("units", i64{0});
    l.window = j.value("window", i64{0});
    if (j.contains("wshape")) {
        l.weights = Tensor(j.at("wshape").get<Shape>());
        l.bias = Tensor(j.at("bshape").get<Shape>());
    }
    return l;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw DataError("model file truncated while reading " + what);
    return v;
}

}  // namespace

namespace {

std::string manifest_text(const ModelGraph& graph) {
    json manifest;
    manifest["input_shape"] = graph.input_shape;
    manifest["layers"] = json::array();
    for (const auto& l : graph.layers) manifest["layers"].push_back(layer_to_json(l));
    manifest["coupling_groups"] = json::array();
    for (const auto& g : graph.coupling_groups)
        manifest["coupling_groups"].push_back({{"members", g.members}, {"observe", g.observe}});
    return manifest.dump();
}

}  // namespace

i64 serialized_bytes(const ModelGraph& graph) {
    // magic + version + manifest length field + manifest + float count field + blob
    return 4 + 4 + 8 + static_cast<i64>(manifest_text(graph).size()) + 8 +
           graph.param_count() * static_cast<i64>(sizeof(float));
}

void save_model(const ModelGraph& graph, const std::string& path) {
    const std::string text = manifest_text(graph);

    u64 floats = 0;
    for (const auto& l : graph.layers)
        floats += static_cast<u64>(l.weights.numel() + l.bias.numel());

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open '" + tmp + "' for writing");
        os.write(kMagic, 4);
        write_pod(os, kFormatVersion);
        write_pod(os, static_cast<u64>(text.size()));
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        write_pod(os, floats);
        for (const auto& l : graph.layers) {
            if (!l.weights.empty())
                os.write(reinterpret_cast<const char*>(l.weights.data.data()),
                         static_cast<std::streamsize>(l.weights.data.size() * sizeof(float)));
            if (!l.bias.empty())
                os.write(reinterpret_cast<const char*>(l.bias.data.data()),
                         static_cast<std::streamsize>(l.bias.data.size() * sizeof(float)));
        }
        if (!os) throw DataError("write to '" + tmp + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

ModelGraph load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open model file '" + path + "'");

    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("'" + path + "' is not a model file (bad magic)");
    const auto version = read_pod<std::uint32_t>(is, "version");
    if (version != kFormatVersion)
        throw DataError("'" + path + "' has unsupported model format version " +
                        std::to_string(version));

    const u64 manifest_len = read_pod<u64>(is, "manifest length");
    if (manifest_len > (1u << 30)) throw DataError("'" + path + "' manifest length is implausible");
    std::string text(manifest_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(manifest_len)))
        throw DataError("model file truncated while reading manifest");

    json manifest;
    try {
        manifest = json::parse(text);
        ModelGraph g;
        g.input_shape = manifest.at("input_shape").get<Shape>();
        for (const auto& jl : manifest.at("layers")) g.layers.push_back(layer_from_json(jl));
        for (const auto& jg : manifest.at("coupling_groups")) {
            CouplingGroup cg;
            cg.members = jg.at("members").get<std::vector<std::string>>();
            cg.observe = jg.value("observe", std::string{});
            g.coupling_groups.push_back(std::move(cg));
        }

        u64 expect = 0;
        for (const auto& l : g.layers)
            expect += static_cast<u64>(l.weights.numel() + l.bias.numel());
        const u64 floats = read_pod<u64>(is, "parameter count");
        if (floats != expect)
            throw DataError("'" + path + "' holds " + std::to_string(floats) +
                            " parameters, manifest expects " + std::to_string(expect));
        for (auto& l : g.layers) {
            if (l.weights.empty()) continue;
            if (!is.read(reinterpret_cast<char*>(l.weights.data.data()),
                         static_cast<std::streamsize>(l.weights.data.size() * sizeof(float))) ||
                !is.read(reinterpret_cast<char*>(l.bias.data.data()),
                         static_cast<std::streamsize>(l.bias.data.size() * sizeof(float))))
                throw DataError("model file truncated while reading parameters");
        }
        if (is.peek() != std::char_traits<char>::eof())
            throw DataError("'" + path + "' has trailing bytes after the parameter blob");

        if (g.input_shape.size() != 3)
            throw DataError("'" + path + "' input_shape must be [C,H,W]");
        Shape probe{1};
        probe.insert(probe.end(), g.input_shape.begin(), g.input_shape.end());
        infer_shapes(g, probe);
        return g;
    } catch (const json::exception& e) {
        throw DataError("'" + path + "' manifest is invalid: " + std::string(e.what()));
    } catch (const ShapeError& e) {
        throw DataError("'" + path + "' describes an inconsistent graph: " + std::string(e.what()));
    }
}

// ---- builders --------------------------------------------------------------

namespace {

LayerSpec make_conv(const std::string& id, LayerKind kind, i64 in_ch, i64 out_ch, i64 kernel,
                    i64 pad, const std::string& input, std::mt19937_64& rng) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.out_channels = out_ch;
    l.kernel = kernel;
    l.stride = 1;
    l.pad = pad;
    l.weights = Tensor(Shape{out_ch, in_ch, kernel, kernel});
    fill_kaiming_uniform(l.weights, in_ch * kernel * kernel, rng);
    l.bias = Tensor(Shape{out_ch});
    if (!input.empty()) l.inputs = {input};
    return l;
}

LayerSpec make_dense(const std::string& id, i64 in_features, i64 units, const std::string& input,
                     std::mt19937_64& rng) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::Dense;
    l.units = units;
    l.weights = Tensor(Shape{units, in_features});
    fill_kaiming_uniform(l.weights, in_features, rng);
    l.bias = Tensor(Shape{units});
    l.inputs = {input};
    return l;
}

LayerSpec make_plain(const std::string& id, LayerKind kind, const std::string& input) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.inputs = {input};
    return l;
}

}  // namespace

ModelGraph make_vgg(const Shape& input_chw, const std::vector<std::vector<i64>>& conv_blocks,
                    const std::vector<i64>& hidden_dense, i64 classes, u64 seed) {
    if (input_chw.size() != 3) throw ShapeError("make_vgg input must be [C,H,W]");
    if (conv_blocks.empty()) throw ShapeError("make_vgg needs at least one conv block");
    if (classes < 2) throw ShapeError("make_vgg needs at least two classes");

    std::mt19937_64 rng(seed);
    ModelGraph g;
    g.input_shape = input_chw;

    i64 ch = input_chw[0], h = input_chw[1], w = input_chw[2];
    std::string prev;
    for (std::size_t b = 0; b < conv_blocks.size(); ++b) {
        if (conv_blocks[b].empty()) throw ShapeError("make_vgg block " + std::to_string(b + 1) + " is empty");
        for (std::size_t j = 0; j < conv_blocks[b].size(); ++j) {
            const std::string tag = std::to_string(b + 1) + "-" + std::to_string(j + 1);
            const i64 out_ch = conv_blocks[b][j];
            g.layers.push_back(make_conv("conv" + tag, LayerKind::Conv, ch, out_ch, 3, 1, prev, rng));
            g.layers.push_back(make_plain("relu" + tag, LayerKind::ReLU, "conv" + tag));
            prev = "relu" + tag;
            ch = out_ch;
        }
        if (h < 2 || w < 2)
            throw ShapeError("make_vgg: input too small for pool " + std::to_string(b + 1));
        LayerSpec pool = make_plain("pool" + std::to_string(b + 1), LayerKind::MaxPool, prev);
        pool.window = 2;
        pool.stride = 2;
        prev = pool.id;
        g.layers.push_back(std::move(pool));
        h /= 2;
        w /= 2;
    }

    g.layers.push_back(make_plain("flatten", LayerKind::Flatten, prev));
    i64 features = ch * h * w;
    prev = "flatten";
    for (std::size_t i = 0; i < hidden_dense.size(); ++i) {
        const std::string fid = "fc" + std::to_string(i + 1);
        g.layers.push_back(make_dense(fid, features, hidden_dense[i], prev, rng));
        g.layers.push_back(make_plain(fid + "-relu", LayerKind::ReLU, fid));
        prev = fid + "-relu";
        features = hidden_dense[i];
    }
    g.layers.push_back(make_dense("fc-final", features, classes, prev, rng));
    g.layers.push_back(make_plain("softmax", LayerKind::Softmax, "fc-final"));

    infer_shapes(g, Shape{1, input_chw[0], input_chw[1], input_chw[2]});
    return g;
}

ModelGraph make_residual_net(const Shape& input_chw, i64 stem_channels,
                             const std::vector<ResidualStageSpec>& stages, i64 classes, u64 seed) {
    if (input_chw.size() != 3) throw ShapeError("make_residual_net input must be [C,H,W]");
    if (stages.empty()) throw ShapeError("make_residual_net needs at least one stage");
    if (classes < 2) throw ShapeError("make_residual_net needs at least two classes");

    std::mt19937_64 rng(seed);
    ModelGraph g;
    g.input_shape = input_chw;

    g.layers.push_back(make_conv("conv-stem", LayerKind::Conv, input_chw[0], stem_channels, 3, 1, "", rng));
    g.layers.push_back(make_plain("relu-stem", LayerKind::ReLU, "conv-stem"));

    std::string prev = "relu-stem";
    i64 ch = stem_channels;
    for (std::size_t si = 0; si < stages.size(); ++si) {
        const ResidualStageSpec& st = stages[si];
        if (st.blocks < 1 || st.mid_channels < 1 || st.out_channels < 1)
            throw ShapeError("make_residual_net stage " + std::to_string(si + 1) + " is malformed");
        const std::string stag = "s" + std::to_string(si + 1);

        CouplingGroup group;
        for (i64 bi = 0; bi < st.blocks; ++bi) {
            const std::string btag = stag + "b" + std::to_string(bi + 1);
            const std::string block_in = prev;

            g.layers.push_back(make_conv(btag + "-conv1", LayerKind::Conv, ch, st.mid_channels, 1, 0,
                                         block_in, rng));
            g.layers.push_back(make_plain(btag + "-relu1", LayerKind::ReLU, btag + "-conv1"));
            g.layers.push_back(make_conv(btag + "-conv2", LayerKind::Conv, st.mid_channels,
                                         st.mid_channels, 3, 1, btag + "-relu1", rng));
            g.layers.push_back(make_plain(btag + "-relu2", LayerKind::ReLU, btag + "-conv2"));
            g.layers.push_back(make_conv(btag + "-conv3", LayerKind::Conv, st.mid_channels,
                                         st.out_channels, 1, 0, btag + "-relu2", rng));
            group.members.push_back(btag + "-conv3");

            std::string skip = block_in;
            if (bi == 0) {
                g.layers.push_back(make_conv(stag + "-proj", LayerKind::ProjectionShortcut, ch,
                                             st.out_channels, 1, 0, block_in, rng));
                skip = stag + "-proj";
            }
            LayerSpec add;
            add.id = btag + "-add";
            add.kind = LayerKind::ResidualAdd;
            add.inputs = {btag + "-conv3", skip};
            g.layers.push_back(std::move(add));
            g.layers.push_back(make_plain(btag + "-out", LayerKind::ReLU, btag + "-add"));

            prev = btag + "-out";
            ch = st.out_channels;
        }
        group.members.push_back(stag + "-proj");
        group.observe = prev;
        g.coupling_groups.push_back(std::move(group));
    }

    g.layers.push_back(make_plain("gap", LayerKind::GAP, prev));
    g.layers.push_back(make_dense("fc-final", ch, classes, "gap", rng));
    g.layers.push_back(make_plain("softmax", LayerKind::Softmax, "fc-final"));

    infer_shapes(g, Shape{1, input_chw[0], input_chw[1], input_chw[2]});
    return g;
}

}  // namespace lnprune
