#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lnprune/ops.hpp"
#include "lnprune/tensor.hpp"

namespace lnprune {

enum class LayerKind {
    Conv,
    ReLU,
    MaxPool,
    GAP,
    Dense,
    Softmax,
    ResidualAdd,
    ProjectionShortcut,
    Flatten,
};

const char* kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& name);

// Returns true for layers that own a [D,C,k,k] kernel bank (the prunable ones).
bool is_conv_like(LayerKind k);

struct LayerSpec {
    std::string id;
    LayerKind kind{};

    // Conv / ProjectionShortcut
    i64 out_channels = 0;
    i64 kernel = 0;
    i64 stride = 1;
    i64 pad = 0;
    // Dense
    i64 units = 0;
    // MaxPool
    i64 window = 0;

    Tensor weights;  // empty when the kind has no parameters
    Tensor bias;

    // Predecessor layer ids. Empty means the layer reads the graph input;
    // ResidualAdd takes exactly two, everything else exactly one.
    std::vector<std::string> inputs;

    bool has_params() const { return !weights.empty(); }
};

// Layer outputs whose channel dimensions must stay equal (residual stages):
// pruning channel c in one member removes channel c from all of them.
// `observe` names the layer whose post-activation output supplies the shared
// feature-map statistics (the stage output).
struct CouplingGroup {
    std::vector<std::string> members;
    std::string observe;
};

struct ModelGraph {
    Shape input_shape;  // [C,H,W], batch dimension implied
    std::vector<LayerSpec> layers;  // topological order
    std::vector<CouplingGroup> coupling_groups;

    const LayerSpec* find(const std::string& id) const;
    LayerSpec* find(const std::string& id);
    i64 index_of(const std::string& id) const;  // -1 if absent

    // id -> ids of layers consuming its output, in topological order.
    std::map<std::string, std::vector<std::string>> successors() const;

    i64 param_count() const;
    u64 weights_hash() const;  // content hash over all parameter tensors
    // Hash over conv-like parameter tensors only; used for freeze checks.
    u64 conv_weights_hash() const;
};

using ShapeTable = std::map<std::string, Shape>;

// Validates the whole graph (topological order, arities, kernel/weight
// consistency, coupling-group channel equality) and returns every layer's
// output shape for a [N,C,H,W] input. Throws ShapeError naming the layer.
ShapeTable infer_shapes(const ModelGraph& graph, const Shape& input_shape);

struct ActivationRecord {
    std::unordered_map<std::string, Tensor> out;
    std::unordered_map<std::string, std::vector<i64>> pool_argmax;
};

// Runs the graph on a batch. Returns the classifier logits: the input of the
// final Softmax layer, or the last layer's output when no Softmax is present.
// When `record` is given every layer output is retained for stats collection
// and backprop.
Tensor forward(const ModelGraph& graph, const Tensor& batch, ActivationRecord* record = nullptr);

struct LayerGrads {
    Tensor weights;
    Tensor bias;
};

// Gradients of a scalar loss with respect to every trainable layer's
// parameters, given d(loss)/d(logits). `trainable` limits both the returned
// set and how far gradients propagate upstream; by default every
// parameterized layer is trainable.
std::map<std::string, LayerGrads> backward(
    const ModelGraph& graph, const Tensor& batch, const ActivationRecord& record,
    const Tensor& grad_logits,
    const std::function<bool(const LayerSpec&)>& trainable = {});

// Replaces a flatten -> dense... -> dense(classifier) -> softmax tail with
// GAP -> dense(classifier) -> softmax. The new classifier keeps the old id
// and class count, takes the last conv stage's channel count as input width,
// and is reinitialized (Kaiming-uniform, seeded). Conv layers are untouched.
// A graph already ending GAP -> dense -> softmax is returned unchanged.
ModelGraph replace_head_with_gap(const ModelGraph& graph, u64 init_seed = 0);

// On-disk model format: magic "LNPM", u32 version, JSON manifest, then one
// little-endian float32 blob of all parameters in manifest order.
void save_model(const ModelGraph& graph, const std::string& path);
ModelGraph load_model(const std::string& path);
// Exact size in bytes of save_model's output, without touching the disk.
i64 serialized_bytes(const ModelGraph& graph);

// ---- construction helpers ----------------------------------------------

// VGG-style chain: per block, 3x3 pad-1 convs (given out-channel counts) each
// followed by ReLU, then a 2x2/2 max pool; head is
// flatten -> [dense+relu]* -> dense(classes) -> softmax.
ModelGraph make_vgg(const Shape& input_chw, const std::vector<std::vector<i64>>& conv_blocks,
                    const std::vector<i64>& hidden_dense, i64 classes, u64 seed);

struct ResidualStageSpec {
    i64 mid_channels = 0;   // first two convs of each bottleneck
    i64 out_channels = 0;   // block-final convs and the projection shortcut
    i64 blocks = 1;
};

// Bottleneck residual net: conv stem, then stages of
// conv1x1 -> relu -> conv3x3 -> relu -> conv1x1 (+skip) -> relu blocks.
// The first block of each stage takes a 1x1 projection shortcut; later blocks
// use identity skips. Each stage's block-final convs plus its projection form
// one coupling group observed at the stage output. Head: gap -> dense -> softmax.
ModelGraph make_residual_net(const Shape& input_chw, i64 stem_channels,
                             const std::vector<ResidualStageSpec>& stages, i64 classes, u64 seed);

}  // namespace lnprune
