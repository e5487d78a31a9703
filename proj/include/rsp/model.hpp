#pragma once

#include "rsp/tensor.hpp"
#include "rsp/weights_io.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace rsp {

inline constexpr std::string_view kModelFormat = "rsp-model/1";
// Pseudo-layer name that refers to the network input.
inline constexpr std::string_view kInputName = "input";

enum class LayerKind {
    conv,
    linear,
    relu,
    maxpool,
    avgpool,
    global_avg_pool,
    flatten,
    residual_add,
    batchnorm,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view text);

struct LinearGeometry {
    std::size_t in_features = 1;
    std::size_t out_features = 1;
};

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::relu;
    // Predecessor layer names ("input" for the network input). Two entries for
    // residual_add, exactly one otherwise.
    std::vector<std::string> inputs;
    ConvGeometry conv;
    LinearGeometry fc;
    PoolGeometry pool;
    double bn_eps = 1e-5;
    // role ("weight", "bias", "gamma", "beta", "mean", "var") -> archive name
    std::map<std::string, std::string> weight_refs;

    bool has_weights() const noexcept { return kind == LayerKind::conv || kind == LayerKind::linear; }
    const std::string* weight_ref(const std::string& role) const;
};

struct Normalization {
    std::vector<float> mean;
    std::vector<float> std;
};

struct ModelDescriptor {
    std::vector<LayerSpec> layers; // topological order, last layer is the output
    Shape input_shape;             // [C,H,W]
    std::vector<std::string> class_names;
    Normalization normalization;
    std::string feature_end;

    std::optional<std::size_t> find(std::string_view name) const;
    std::size_t index_of(std::string_view name) const;
    std::size_t feature_end_index() const { return index_of(feature_end); }
    std::size_t class_count() const noexcept { return class_names.size(); }
    Shape batched_input_shape() const;

    // Layer indices feeding layer `idx`; -1 encodes the network input.
    std::vector<std::ptrdiff_t> input_indices(std::size_t idx) const;
    // Output shapes (batch 1) for every layer. Throws on inconsistent geometry.
    std::vector<Shape> infer_shapes() const;
    bool has_batchnorm() const;

    // Structural checks: unique names, DAG in topological order, single sink,
    // feature_end placement, class count. Throws InputError.
    void validate() const;
};

ModelDescriptor model_from_json(const nlohmann::json& doc);
nlohmann::json model_to_json(const ModelDescriptor& model);
ModelDescriptor load_model(const std::filesystem::path& path);
void save_model(const ModelDescriptor& model, const std::filesystem::path& path);

struct WeightRequirement {
    std::string layer;
    std::string role;
    std::string archive_name;
    Shape shape;
};

std::vector<WeightRequirement> required_weights(const ModelDescriptor& model);

struct ActivationTrace {
    Tensor input;                                // normalized network input [1,C,H,W]
    std::vector<Tensor> outputs;                 // one per layer, post-activation
    std::vector<std::optional<ArgmaxTrace>> argmax;

    // Pre-activation network outputs y, [1, classes].
    const Tensor& logits() const { return outputs.back(); }
};

// Tensor consumed by layer `idx` at input slot `slot`.
const Tensor& layer_input(const ModelDescriptor& model, const ActivationTrace& trace, std::size_t idx,
                          std::size_t slot = 0);

// Maps a [0,1] image ([C,H,W] or [1,C,H,W]) through the per-channel normalization.
Tensor normalize_image(const ModelDescriptor& model, const Tensor& raw);

ActivationTrace forward_trace(const ModelDescriptor& model, const WeightArchive& weights, const Tensor& input);

// Reverse-mode gradient of <seed, output(from_layer)> w.r.t. the output of
// every layer with index in [stop_layer, from_layer], and w.r.t. the input when
// stop_layer is absent.
struct GradientTrace {
    std::vector<std::optional<Tensor>> layer_grads;
    std::optional<Tensor> input_grad;
};

GradientTrace backprop(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                       std::size_t from_layer, const Tensor& seed,
                       std::optional<std::size_t> stop_layer = std::nullopt);

// d y_cls / d output(layer_idx).
Tensor class_gradient_at(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                         std::size_t cls, std::size_t layer_idx);
// d y_cls / d input.
Tensor class_input_gradient(const ModelDescriptor& model, const WeightArchive& weights,
                            const ActivationTrace& trace, std::size_t cls);

struct FoldedModel {
    ModelDescriptor model;
    WeightArchive weights;
};

// Folds every batchnorm into the conv that feeds it. The batchnorm tensors are
// dropped from the returned archive.
FoldedModel fold_batchnorm(const ModelDescriptor& model, const WeightArchive& weights);

// Names of layers owning learnable tensors, output layer first.
std::vector<std::string> learnable_layers_from_end(const ModelDescriptor& model);

// Replaces every learnable tensor of the layers from the output back through
// `from_layer` with N(0, 1/fan_in) draws. Each tensor gets its own stream
// derived from (seed, tensor name), so deeper cascades extend shallower ones.
WeightArchive randomize_cascading(const ModelDescriptor& model, const WeightArchive& weights,
                                  const std::string& from_layer, std::uint64_t seed);

} // namespace rsp
