#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlfd/autograd.hpp"
#include "mlfd/ops.hpp"

namespace mlfd::models {

enum class LayerKind { Dense, Conv, BatchNorm, Gelu, Relu, Dropout, AvgPool, GlobalAvgPool, Flatten, SqueezeExcite };

struct LayerSpec {
    LayerKind kind = LayerKind::Gelu;
    std::size_t units = 0;  // dense width or conv output channels
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    std::size_t window = 2;     // avgpool
    double p = 0.0;             // dropout probability
    std::size_t reduction = 4;  // squeeze-excite bottleneck ratio

    static LayerSpec dense(std::size_t units);
    static LayerSpec conv(std::size_t out, std::size_t kernel = 3, std::size_t stride = 1, std::size_t padding = 1);
    static LayerSpec batchnorm();
    static LayerSpec gelu();
    static LayerSpec relu();
    static LayerSpec dropout(double p);
    static LayerSpec avgpool(std::size_t window);
    static LayerSpec global_avgpool();
    static LayerSpec flatten();
    static LayerSpec squeeze_excite(std::size_t reduction);

    std::string describe() const;
    bool operator==(const LayerSpec&) const = default;
};

nlohmann::json to_json(const LayerSpec& layer);
LayerSpec layer_from_json(const nlohmann::json& j);

/// Named representation levels bound to layer boundaries, in depth order.
/// Boundary b is the activation after the first b layers (0 = raw input).
struct TapSet {
    std::vector<std::string> names;
    std::vector<std::size_t> boundaries;

    void add(std::string name, std::size_t boundary);
    bool contains(const std::string& name) const;
    std::size_t boundary(const std::string& name) const;  // QueryError if absent
    std::size_t size() const { return names.size(); }
    bool operator==(const TapSet&) const = default;
};

struct ModelSpec {
    std::string name;
    Shape input_shape;  // per sample, without the batch axis
    std::vector<LayerSpec> layers;
    std::size_t classes = 0;
    TapSet taps;

    /// Per-sample activation shape at every boundary (layers.size() + 1 entries).
    /// Throws ConfigError naming both layers when consecutive layers are incompatible.
    std::vector<Shape> boundary_shapes() const;
    void validate() const;
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
    std::string hash() const;
    bool operator==(const ModelSpec&) const = default;
};

/// Shape of a layer's output for a given per-sample input shape.
Shape layer_output_shape(const LayerSpec& layer, const Shape& in, std::size_t index);

struct RunContext {
    Mode mode = Mode::Eval;
    std::uint64_t seed = 0;  // dropout stream root
    std::uint64_t step = 0;
};

/// A sequence of layers with its parameters and batchnorm buffers.
class LayerStack {
public:
    LayerStack() = default;
    LayerStack(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed, std::string prefix);

    using Observer = std::function<void(std::size_t boundary, Var value)>;

    /// Runs layers [begin, end); `observe` sees every boundary in [begin, end].
    Var run(Tape& tape, Var x, std::size_t begin, std::size_t end, const RunContext& ctx,
            const Observer& observe = {});
    Var run(Tape& tape, Var x, const RunContext& ctx) { return run(tape, x, 0, layers_.size(), ctx); }

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<Shape>& shapes() const { return shapes_; }
    const Shape& output_shape() const { return shapes_.back(); }
    const std::string& prefix() const { return prefix_; }

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    /// Named non-trainable tensors (batchnorm running statistics).
    std::vector<std::pair<std::string, Tensor*>> buffers();

private:
    struct LayerState {
        std::vector<Parameter> params;
        std::optional<BatchNormStats> stats;
    };

    Shape input_shape_;
    std::vector<LayerSpec> layers_;
    std::vector<Shape> shapes_;
    std::vector<LayerState> state_;
    std::string prefix_;
    std::uint64_t stream_ = 0;
};

/// A classifier: layer stack plus a linear head, with named taps.
class Model {
public:
    Model() = default;
    Model(ModelSpec spec, std::uint64_t seed);

    struct Output {
        Var logits;
        std::map<std::string, Var> embeddings;
    };

    const ModelSpec& spec() const { return spec_; }
    LayerStack& body() { return body_; }
    Parameter& head_weight() { return head_w_; }
    Parameter& head_bias() { return head_b_; }

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<std::pair<std::string, Tensor*>> buffers() { return body_.buffers(); }
    void freeze();

    Output forward(Tape& tape, Var x, std::span<const std::string> levels, const RunContext& ctx);
    /// Applies the head to a pre-head embedding.
    Var head(Tape& tape, Var embedding);

    /// Eval-mode logits for a whole tensor of samples, processed in chunks.
    Tensor predict(const Tensor& inputs, std::size_t chunk = 250);
    /// Eval-mode embeddings at one tap for a whole tensor of samples.
    Tensor embed(const Tensor& inputs, const std::string& level, std::size_t chunk = 250);

    /// Hash over the spec and every parameter and buffer value.
    std::string fingerprint();

private:
    ModelSpec spec_;
    LayerStack body_;
    Parameter head_w_;
    Parameter head_b_;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

/// Logits plus embeddings at the requested levels (QueryError for unknown levels).
Model::Output forward_with_taps(Model& model, Tape& tape, Var inputs, std::span<const std::string> levels,
                                const RunContext& ctx);

std::size_t count_params(const Model& model, bool exclude_frozen = false);
std::size_t count_params(std::span<const Parameter* const> params, bool exclude_frozen = false);

/// Number of weighted layers (dense, conv) including the head.
std::size_t weighted_depth(const ModelSpec& spec);

// Built-in architectures: "mlp-small", "cnn-small", "cnn-se".
std::vector<std::string> library_names();
ModelSpec library_spec(const std::string& arch, const Shape& input_shape, std::size_t classes);

/// Checkpoint directory: spec.json, checkpoint (text manifest), one .tnsr per tensor.
void save_checkpoint(Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);
/// Spec hash recorded in a checkpoint without loading its tensors.
std::string checkpoint_spec_hash(const std::filesystem::path& dir);
std::string checkpoint_fingerprint(const std::filesystem::path& dir);

void save_parameters(std::span<Parameter* const> params, std::span<const std::pair<std::string, Tensor*>> buffers,
                     const std::filesystem::path& dir);
void load_parameters(std::span<Parameter* const> params, std::span<const std::pair<std::string, Tensor*>> buffers,
                     const std::filesystem::path& dir);

}  // namespace mlfd::models
