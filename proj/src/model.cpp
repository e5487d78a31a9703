#include "rsp/model.hpp"

#include "rsp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>
#include <unordered_set>

namespace rsp {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::conv, "conv"},
    {LayerKind::linear, "linear"},
    {LayerKind::relu, "relu"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::avgpool, "avgpool"},
    {LayerKind::global_avg_pool, "global_avg_pool"},
    {LayerKind::flatten, "flatten"},
    {LayerKind::residual_add, "residual_add"},
    {LayerKind::batchnorm, "batchnorm"},
};

std::vector<std::string> roles_for(LayerKind kind, bool& bias_optional) {
    bias_optional = false;
    switch (kind) {
    case LayerKind::conv:
    case LayerKind::linear:
        bias_optional = true;
        return {"weight", "bias"};
    case LayerKind::batchnorm:
        return {"gamma", "beta", "mean", "var"};
    default:
        return {};
    }
}

std::string layer_context(const LayerSpec& layer) {
    return "layer '" + layer.name + "' (" + std::string(to_string(layer.kind)) + ")";
}

// Re-raises an engine error with the layer name prepended, keeping its type.
template <typename F>
auto with_layer_context(const LayerSpec& layer, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const FormatError&) {
        throw;
    } catch (const ShapeError& e) {
        throw ShapeError(layer_context(layer) + ": " + e.what());
    } catch (const InputError& e) {
        throw InputError(layer_context(layer) + ": " + e.what());
    } catch (const AttributionError& e) {
        throw AttributionError(layer_context(layer) + ": " + e.what());
    }
}

std::size_t json_size(const nlohmann::json& v, const char* key, const std::string& where) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw InputError(where + ": field '" + key + "' must be a nonnegative integer");
    return v.get<std::size_t>();
}

std::size_t get_size(const nlohmann::json& obj, const char* key, const std::string& where,
                     std::optional<std::size_t> fallback = std::nullopt) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        if (fallback) return *fallback;
        throw InputError(where + ": missing field '" + key + "'");
    }
    return json_size(*it, key, where);
}

} // namespace

std::string_view to_string(LayerKind kind) {
    for (const auto& [k, name] : kKindNames)
        if (k == kind) return name;
    return "unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view text) {
    for (const auto& [k, name] : kKindNames)
        if (name == text) return k;
    return std::nullopt;
}

const std::string* LayerSpec::weight_ref(const std::string& role) const {
    auto it = weight_refs.find(role);
    return it == weight_refs.end() ? nullptr : &it->second;
}

std::optional<std::size_t> ModelDescriptor::find(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].name == name) return i;
    return std::nullopt;
}

std::size_t ModelDescriptor::index_of(std::string_view name) const {
    auto idx = find(name);
    if (!idx) throw InputError("model has no layer named '" + std::string(name) + "'");
    return *idx;
}

Shape ModelDescriptor::batched_input_shape() const {
    Shape s{1};
    s.insert(s.end(), input_shape.begin(), input_shape.end());
    return s;
}

std::vector<std::ptrdiff_t> ModelDescriptor::input_indices(std::size_t idx) const {
    std::vector<std::ptrdiff_t> out;
    for (const auto& in : layers[idx].inputs) {
        if (in == kInputName) {
            out.push_back(-1);
            continue;
        }
        auto j = find(in);
        if (!j || *j >= idx)
            throw InputError("layer '" + layers[idx].name + "' consumes '" + in +
                             "', which is not an earlier layer");
        out.push_back(static_cast<std::ptrdiff_t>(*j));
    }
    return out;
}

bool ModelDescriptor::has_batchnorm() const {
    return std::any_of(layers.begin(), layers.end(),
                       [](const LayerSpec& l) { return l.kind == LayerKind::batchnorm; });
}

std::vector<Shape> ModelDescriptor::infer_shapes() const {
    std::vector<Shape> shapes;
    shapes.reserve(layers.size());
    const Shape in_shape = batched_input_shape();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& layer = layers[i];
        std::vector<Shape> ins;
        for (auto j : input_indices(i)) ins.push_back(j < 0 ? in_shape : shapes[static_cast<std::size_t>(j)]);
        shapes.push_back(with_layer_context(layer, [&]() -> Shape {
            const Shape& x = ins.at(0);
            switch (layer.kind) {
            case LayerKind::conv:
                return layer.conv.output_shape(x);
            case LayerKind::linear:
                if (x.size() != 2) throw ShapeError("linear input must be rank 2, got " + shape_str(x));
                if (x[1] != layer.fc.in_features)
                    throw ShapeError("input features " + std::to_string(x[1]) + " != in_features " +
                                     std::to_string(layer.fc.in_features));
                return {x[0], layer.fc.out_features};
            case LayerKind::relu:
                return x;
            case LayerKind::batchnorm:
                if (x.size() != 4) throw ShapeError("batchnorm input must be rank 4, got " + shape_str(x));
                return x;
            case LayerKind::maxpool:
            case LayerKind::avgpool:
                return layer.pool.output_shape(x);
            case LayerKind::global_avg_pool:
                if (x.size() != 4) throw ShapeError("global_avg_pool input must be rank 4, got " + shape_str(x));
                return {x[0], x[1]};
            case LayerKind::flatten:
                return {x[0], shape_size(x) / x[0]};
            case LayerKind::residual_add:
                if (ins.size() != 2 || ins[0] != ins[1])
                    throw ShapeError("residual_add branches " + shape_str(ins[0]) + " and " +
                                     shape_str(ins.size() > 1 ? ins[1] : Shape{}) + " differ");
                return x;
            }
            throw InputError("unsupported layer kind");
        }));
    }
    return shapes;
}

void ModelDescriptor::validate() const {
    if (input_shape.size() != 3 || shape_size(input_shape) == 0)
        throw InputError("input_shape must be [C,H,W] with extents >= 1, got " + shape_str(input_shape));
    if (layers.empty()) throw InputError("model has no layers");
    if (class_names.empty()) throw InputError("model has no class names");

    std::unordered_set<std::string> names;
    for (const auto& layer : layers) {
        if (layer.name.empty()) throw InputError("layer with empty name");
        if (layer.name == kInputName) throw InputError("layer name 'input' is reserved");
        if (!names.insert(layer.name).second) throw InputError("duplicate layer name '" + layer.name + "'");
        const std::size_t want = layer.kind == LayerKind::residual_add ? 2 : 1;
        if (layer.inputs.size() != want)
            throw InputError(layer_context(layer) + ": expects " + std::to_string(want) + " input(s), got " +
                             std::to_string(layer.inputs.size()));
        bool bias_optional = false;
        const auto roles = roles_for(layer.kind, bias_optional);
        for (const auto& [role, ref] : layer.weight_refs) {
            if (std::find(roles.begin(), roles.end(), role) == roles.end())
                throw InputError(layer_context(layer) + ": unexpected weight role '" + role + "'");
            if (ref.empty()) throw InputError(layer_context(layer) + ": empty weight reference for '" + role + "'");
        }
        for (const auto& role : roles) {
            if (bias_optional && role == "bias") continue;
            if (!layer.weight_ref(role))
                throw InputError(layer_context(layer) + ": missing weight reference '" + role + "'");
        }
    }

    std::vector<std::size_t> consumers(layers.size(), 0);
    for (std::size_t i = 0; i < layers.size(); ++i)
        for (auto j : input_indices(i))
            if (j >= 0) ++consumers[static_cast<std::size_t>(j)];
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
        if (consumers[i] == 0)
            throw InputError("layer '" + layers[i].name + "' is never consumed; the model must have a single output");

    const auto shapes = infer_shapes();
    if (shapes.back() != Shape{1, class_names.size()})
        throw InputError("output layer '" + layers.back().name + "' produces " + shape_str(shapes.back()) +
                         ", expected [1," + std::to_string(class_names.size()) + "] to match class_names");

    auto fe = find(feature_end);
    if (!fe) throw InputError("feature_end '" + feature_end + "' names no layer");
    const auto& fe_layer = layers[*fe];
    if (fe_layer.kind != LayerKind::conv && fe_layer.kind != LayerKind::relu)
        throw InputError("feature_end '" + feature_end + "' must be a conv or relu layer");
    if (shapes[*fe].size() != 4) throw InputError("feature_end '" + feature_end + "' output is not 4-D");

    const std::size_t C = input_shape[0];
    if (normalization.mean.size() != C || normalization.std.size() != C)
        throw InputError("normalization mean/std must have one entry per input channel (" + std::to_string(C) + ")");
    for (float s : normalization.std)
        if (!(s > 0.0f)) throw InputError("normalization std must be positive");
}

ModelDescriptor model_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw InputError("model descriptor must be a JSON object");
    auto fmt = doc.find("format");
    if (fmt == doc.end() || !fmt->is_string() || fmt->get<std::string>() != kModelFormat)
        throw InputError("model descriptor: \"format\" must be \"" + std::string(kModelFormat) + "\"");

    ModelDescriptor model;
    try {
        model.input_shape = doc.at("input_shape").get<Shape>();
        if (model.input_shape.size() == 4 && model.input_shape[0] == 1)
            model.input_shape.erase(model.input_shape.begin());
        model.class_names = doc.at("class_names").get<std::vector<std::string>>();
        model.feature_end = doc.at("feature_end").get<std::string>();
        if (auto norm = doc.find("normalization"); norm != doc.end()) {
            model.normalization.mean = norm->at("mean").get<std::vector<float>>();
            model.normalization.std = norm->at("std").get<std::vector<float>>();
        } else if (!model.input_shape.empty()) {
            model.normalization.mean.assign(model.input_shape[0], 0.0f);
            model.normalization.std.assign(model.input_shape[0], 1.0f);
        }

        const auto& layers = doc.at("layers");
        if (!layers.is_array()) throw InputError("model descriptor: \"layers\" must be an array");
        std::string previous(kInputName);
        for (const auto& obj : layers) {
            LayerSpec layer;
            layer.name = obj.at("name").get<std::string>();
            const std::string where = "layer '" + layer.name + "'";
            const auto kind_text = obj.at("kind").get<std::string>();
            auto kind = parse_layer_kind(kind_text);
            if (!kind) throw InputError(where + ": unknown layer kind '" + kind_text + "'");
            layer.kind = *kind;
            if (auto in = obj.find("inputs"); in != obj.end())
                layer.inputs = in->get<std::vector<std::string>>();
            else
                layer.inputs = {previous};
            if (auto w = obj.find("weights"); w != obj.end())
                layer.weight_refs = w->get<std::map<std::string, std::string>>();

            switch (layer.kind) {
            case LayerKind::conv: {
                layer.conv.in_channels = get_size(obj, "in_channels", where);
                layer.conv.out_channels = get_size(obj, "out_channels", where);
                const auto& k = obj.at("kernel");
                if (k.is_array()) {
                    if (k.size() != 2) throw InputError(where + ": kernel must be an integer or [kh,kw]");
                    layer.conv.kernel_h = json_size(k[0], "kernel", where);
                    layer.conv.kernel_w = json_size(k[1], "kernel", where);
                } else {
                    layer.conv.kernel_h = layer.conv.kernel_w = json_size(k, "kernel", where);
                }
                layer.conv.stride = get_size(obj, "stride", where, 1);
                layer.conv.padding = get_size(obj, "padding", where, 0);
                if (obj.contains("groups") && obj.at("groups").get<int>() != 1)
                    throw InputError(where + ": grouped convolution is not supported");
                if (obj.contains("dilation") && obj.at("dilation").get<int>() != 1)
                    throw InputError(where + ": dilated convolution is not supported");
                layer.conv.validate();
                break;
            }
            case LayerKind::linear:
                layer.fc.in_features = get_size(obj, "in_features", where);
                layer.fc.out_features = get_size(obj, "out_features", where);
                break;
            case LayerKind::maxpool:
            case LayerKind::avgpool:
                layer.pool.kernel = get_size(obj, "kernel", where);
                layer.pool.stride = get_size(obj, "stride", where, layer.pool.kernel);
                layer.pool.validate();
                break;
            case LayerKind::batchnorm:
                layer.bn_eps = obj.value("eps", 1e-5);
                break;
            default:
                break;
            }
            previous = layer.name;
            model.layers.push_back(std::move(layer));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("model descriptor: ") + e.what());
    } catch (const ShapeError& e) {
        throw InputError(std::string("model descriptor: ") + e.what());
    }
    try {
        model.validate();
    } catch (const ShapeError& e) {
        throw InputError(std::string("model descriptor: ") + e.what());
    }
    return model;
}

nlohmann::json model_to_json(const ModelDescriptor& model) {
    nlohmann::json doc;
    doc["format"] = kModelFormat;
    doc["input_shape"] = model.input_shape;
    doc["class_names"] = model.class_names;
    doc["normalization"] = {{"mean", model.normalization.mean}, {"std", model.normalization.std}};
    doc["feature_end"] = model.feature_end;
    auto& layers = doc["layers"] = nlohmann::json::array();
    for (const auto& layer : model.layers) {
        nlohmann::json obj;
        obj["name"] = layer.name;
        obj["kind"] = to_string(layer.kind);
        obj["inputs"] = layer.inputs;
        switch (layer.kind) {
        case LayerKind::conv:
            obj["in_channels"] = layer.conv.in_channels;
            obj["out_channels"] = layer.conv.out_channels;
            obj["kernel"] = {layer.conv.kernel_h, layer.conv.kernel_w};
            obj["stride"] = layer.conv.stride;
            obj["padding"] = layer.conv.padding;
            break;
        case LayerKind::linear:
            obj["in_features"] = layer.fc.in_features;
            obj["out_features"] = layer.fc.out_features;
            break;
        case LayerKind::maxpool:
        case LayerKind::avgpool:
            obj["kernel"] = layer.pool.kernel;
            obj["stride"] = layer.pool.stride;
            break;
        case LayerKind::batchnorm:
            obj["eps"] = layer.bn_eps;
            break;
        default:
            break;
        }
        if (!layer.weight_refs.empty()) obj["weights"] = layer.weight_refs;
        layers.push_back(std::move(obj));
    }
    return doc;
}

ModelDescriptor load_model(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open model descriptor " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("model descriptor " + path.string() + ": " + e.what());
    }
    return model_from_json(doc);
}

void save_model(const ModelDescriptor& model, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot write model descriptor " + path.string());
    f << model_to_json(model).dump(2) << "\n";
}

std::vector<WeightRequirement> required_weights(const ModelDescriptor& model) {
    std::vector<WeightRequirement> reqs;
    const auto shapes = model.infer_shapes();
    const Shape in_shape = model.batched_input_shape();
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& layer = model.layers[i];
        for (const auto& [role, ref] : layer.weight_refs) {
            Shape shape;
            switch (layer.kind) {
            case LayerKind::conv:
                shape = role == "weight" ? layer.conv.weight_shape() : Shape{layer.conv.out_channels};
                break;
            case LayerKind::linear:
                shape = role == "weight" ? Shape{layer.fc.out_features, layer.fc.in_features}
                                         : Shape{layer.fc.out_features};
                break;
            case LayerKind::batchnorm:
                shape = {shapes[i][1]};
                break;
            default:
                continue;
            }
            reqs.push_back({layer.name, role, ref, std::move(shape)});
        }
    }
    return reqs;
}

const Tensor& layer_input(const ModelDescriptor& model, const ActivationTrace& trace, std::size_t idx,
                          std::size_t slot) {
    const auto ins = model.input_indices(idx);
    const auto j = ins.at(slot);
    return j < 0 ? trace.input : trace.outputs[static_cast<std::size_t>(j)];
}

Tensor normalize_image(const ModelDescriptor& model, const Tensor& raw) {
    const Shape want = model.batched_input_shape();
    Tensor x = raw.rank() == 3 ? raw.reshaped(want) : raw;
    if (x.shape() != want)
        throw ShapeError("image shape " + shape_str(raw.shape()) + " does not match model input " + shape_str(want));
    const std::size_t C = want[1], HW = want[2] * want[3];
    for (std::size_t c = 0; c < C; ++c) {
        const double m = model.normalization.mean[c], s = model.normalization.std[c];
        float* p = x.data() + c * HW;
        for (std::size_t i = 0; i < HW; ++i) p[i] = static_cast<float>((p[i] - m) / s);
    }
    return x;
}

namespace {

const Tensor& weight_for(const WeightArchive& weights, const LayerSpec& layer, const std::string& role) {
    const std::string* ref = layer.weight_ref(role);
    if (!ref) throw InputError("no weight reference for role '" + role + "'");
    const Tensor* t = weights.find(*ref);
    if (!t) throw InputError("unresolved weight reference '" + *ref + "'");
    return *t;
}

const Tensor* optional_weight(const WeightArchive& weights, const LayerSpec& layer, const std::string& role) {
    return layer.weight_ref(role) ? &weight_for(weights, layer, role) : nullptr;
}

// Per-channel affine form of an inference-mode batchnorm: y = a*x + b.
void batchnorm_affine(const WeightArchive& weights, const LayerSpec& layer, std::size_t channels,
                      std::vector<double>& a, std::vector<double>& b) {
    const Tensor& gamma = weight_for(weights, layer, "gamma");
    const Tensor& beta = weight_for(weights, layer, "beta");
    const Tensor& mean = weight_for(weights, layer, "mean");
    const Tensor& var = weight_for(weights, layer, "var");
    for (const Tensor* t : {&gamma, &beta, &mean, &var})
        if (t->shape() != Shape{channels})
            throw ShapeError("batchnorm parameter shape " + shape_str(t->shape()) + " != [" +
                             std::to_string(channels) + "]");
    a.resize(channels);
    b.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        a[c] = gamma[c] / std::sqrt(static_cast<double>(var[c]) + layer.bn_eps);
        b[c] = beta[c] - mean[c] * a[c];
    }
}

} // namespace

ActivationTrace forward_trace(const ModelDescriptor& model, const WeightArchive& weights, const Tensor& input) {
    ActivationTrace trace;
    const Shape want = model.batched_input_shape();
    trace.input = input.rank() == 3 ? input.reshaped(want) : input;
    if (trace.input.shape() != want)
        throw ShapeError("input shape " + shape_str(input.shape()) + " does not match model input " +
                         shape_str(want));
    trace.outputs.reserve(model.layers.size());
    trace.argmax.resize(model.layers.size());

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& layer = model.layers[i];
        trace.outputs.push_back(with_layer_context(layer, [&]() -> Tensor {
            const Tensor& x = layer_input(model, trace, i);
            switch (layer.kind) {
            case LayerKind::conv:
                return conv2d(x, weight_for(weights, layer, "weight"), optional_weight(weights, layer, "bias"),
                              layer.conv);
            case LayerKind::linear:
                return linear(x, weight_for(weights, layer, "weight"), optional_weight(weights, layer, "bias"));
            case LayerKind::relu:
                return relu(x);
            case LayerKind::maxpool: {
                auto pooled = maxpool2d(x, layer.pool);
                trace.argmax[i] = std::move(pooled.trace);
                return std::move(pooled.output);
            }
            case LayerKind::avgpool:
                return avgpool2d(x, layer.pool);
            case LayerKind::global_avg_pool:
                return global_avg_pool(x);
            case LayerKind::flatten:
                return x.reshaped({x.dim(0), x.size() / x.dim(0)});
            case LayerKind::residual_add:
                return add(x, layer_input(model, trace, i, 1));
            case LayerKind::batchnorm: {
                if (x.rank() != 4) throw ShapeError("batchnorm input must be rank 4");
                std::vector<double> a, b;
                batchnorm_affine(weights, layer, x.dim(1), a, b);
                Tensor y(x.shape());
                const std::size_t HW = x.dim(2) * x.dim(3);
                for (std::size_t n = 0; n < x.dim(0); ++n)
                    for (std::size_t c = 0; c < x.dim(1); ++c) {
                        const std::size_t base = (n * x.dim(1) + c) * HW;
                        for (std::size_t p = 0; p < HW; ++p)
                            y[base + p] = static_cast<float>(a[c] * x[base + p] + b[c]);
                    }
                return y;
            }
            }
            throw InputError("unsupported layer kind");
        }));
    }
    if (trace.logits().shape() != Shape{1, model.class_count()})
        throw ShapeError("logits shape " + shape_str(trace.logits().shape()) + " does not match " +
                         std::to_string(model.class_count()) + " classes");
    return trace;
}

GradientTrace backprop(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                       std::size_t from_layer, const Tensor& seed, std::optional<std::size_t> stop_layer) {
    if (from_layer >= model.layers.size()) throw InputError("backprop: layer index out of range");
    require_same_shape(seed, trace.outputs[from_layer], "backprop seed");
    GradientTrace g;
    g.layer_grads.resize(model.layers.size());
    g.layer_grads[from_layer] = seed;

    auto accumulate = [&](std::ptrdiff_t target, Tensor grad) {
        std::optional<Tensor>& slot =
            target < 0 ? g.input_grad : g.layer_grads[static_cast<std::size_t>(target)];
        if (slot)
            *slot = add(*slot, grad);
        else
            slot = std::move(grad);
    };

    const std::size_t lowest = stop_layer ? *stop_layer + 1 : 0;
    for (std::size_t i = from_layer + 1; i-- > lowest;) {
        if (!g.layer_grads[i]) continue;
        const auto& layer = model.layers[i];
        const Tensor& gy = *g.layer_grads[i];
        const auto ins = model.input_indices(i);
        with_layer_context(layer, [&] {
            const Tensor& x = layer_input(model, trace, i);
            switch (layer.kind) {
            case LayerKind::conv:
                accumulate(ins[0], conv2d_input_vjp(gy, weight_for(weights, layer, "weight"), layer.conv, x.shape()));
                break;
            case LayerKind::linear:
                accumulate(ins[0], linear_input_vjp(gy, weight_for(weights, layer, "weight")));
                break;
            case LayerKind::relu: {
                Tensor gx(x.shape());
                for (std::size_t k = 0; k < x.size(); ++k) gx[k] = x[k] > 0.0f ? gy[k] : 0.0f;
                accumulate(ins[0], std::move(gx));
                break;
            }
            case LayerKind::maxpool:
                accumulate(ins[0], maxpool2d_vjp(gy, *trace.argmax[i]));
                break;
            case LayerKind::avgpool:
                accumulate(ins[0], avgpool2d_vjp(gy, layer.pool, x.shape()));
                break;
            case LayerKind::global_avg_pool:
                accumulate(ins[0], global_avg_pool_vjp(gy, x.shape()));
                break;
            case LayerKind::flatten:
                accumulate(ins[0], gy.reshaped(x.shape()));
                break;
            case LayerKind::residual_add:
                accumulate(ins[0], gy);
                accumulate(ins[1], gy);
                break;
            case LayerKind::batchnorm: {
                std::vector<double> a, b;
                batchnorm_affine(weights, layer, x.dim(1), a, b);
                Tensor gx(x.shape());
                const std::size_t HW = x.dim(2) * x.dim(3);
                for (std::size_t n = 0; n < x.dim(0); ++n)
                    for (std::size_t c = 0; c < x.dim(1); ++c) {
                        const std::size_t base = (n * x.dim(1) + c) * HW;
                        for (std::size_t p = 0; p < HW; ++p) gx[base + p] = static_cast<float>(a[c] * gy[base + p]);
                    }
                accumulate(ins[0], std::move(gx));
                break;
            }
            }
        });
    }
    return g;
}

Tensor class_gradient_at(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                         std::size_t cls, std::size_t layer_idx) {
    if (cls >= model.class_count()) throw InputError("class index " + std::to_string(cls) + " out of range");
    Tensor seed(trace.logits().shape());
    seed[cls] = 1.0f;
    auto g = backprop(model, weights, trace, model.layers.size() - 1, seed, layer_idx);
    if (!g.layer_grads[layer_idx]) return Tensor::zeros_like(trace.outputs[layer_idx]);
    return std::move(*g.layer_grads[layer_idx]);
}

Tensor class_input_gradient(const ModelDescriptor& model, const WeightArchive& weights,
                            const ActivationTrace& trace, std::size_t cls) {
    if (cls >= model.class_count()) throw InputError("class index " + std::to_string(cls) + " out of range");
    Tensor seed(trace.logits().shape());
    seed[cls] = 1.0f;
    auto g = backprop(model, weights, trace, model.layers.size() - 1, seed);
    if (!g.input_grad) return Tensor::zeros_like(trace.input);
    return std::move(*g.input_grad);
}

FoldedModel fold_batchnorm(const ModelDescriptor& model, const WeightArchive& weights) {
    FoldedModel out{model, weights};
    auto& layers = out.model.layers;
    for (std::size_t i = 0; i < layers.size();) {
        if (layers[i].kind != LayerKind::batchnorm) {
            ++i;
            continue;
        }
        const LayerSpec bn = layers[i];
        auto prev = bn.inputs.front() == kInputName ? std::nullopt : out.model.find(bn.inputs.front());
        if (!prev || layers[*prev].kind != LayerKind::conv)
            throw InputError("batchnorm '" + bn.name + "' is not preceded by a conv layer");
        LayerSpec& conv = layers[*prev];
        for (std::size_t j = 0; j < layers.size(); ++j)
            if (j != i && std::count(layers[j].inputs.begin(), layers[j].inputs.end(), conv.name))
                throw InputError("conv '" + conv.name + "' feeds layers other than batchnorm '" + bn.name +
                                 "'; cannot fold");

        std::vector<double> a, b;
        with_layer_context(bn, [&] { batchnorm_affine(out.weights, bn, conv.conv.out_channels, a, b); });
        Tensor w = out.weights.at(*conv.weight_ref("weight"));
        const std::size_t per_k = w.size() / conv.conv.out_channels;
        for (std::size_t k = 0; k < conv.conv.out_channels; ++k)
            for (std::size_t p = 0; p < per_k; ++p)
                w[k * per_k + p] = static_cast<float>(w[k * per_k + p] * a[k]);
        Tensor bias({conv.conv.out_channels});
        const Tensor* old_bias = conv.weight_ref("bias") ? &out.weights.at(*conv.weight_ref("bias")) : nullptr;
        for (std::size_t k = 0; k < conv.conv.out_channels; ++k)
            bias[k] = static_cast<float>((old_bias ? (*old_bias)[k] : 0.0) * a[k] + b[k]);

        out.weights.set(*conv.weight_ref("weight"), std::move(w));
        if (!conv.weight_ref("bias")) {
            std::string name = conv.name + ".bias";
            while (out.weights.contains(name)) name += "_folded";
            conv.weight_refs["bias"] = name;
        }
        out.weights.set(*conv.weight_ref("bias"), std::move(bias));

        const std::string conv_name = conv.name;
        for (auto& layer : layers)
            for (auto& in : layer.inputs)
                if (in == bn.name) in = conv_name;
        if (out.model.feature_end == bn.name) out.model.feature_end = conv_name;
        layers.erase(layers.begin() + static_cast<std::ptrdiff_t>(i));

        for (const auto& [role, ref] : bn.weight_refs) {
            const bool still_used = std::any_of(layers.begin(), layers.end(), [&](const LayerSpec& l) {
                return std::any_of(l.weight_refs.begin(), l.weight_refs.end(),
                                   [&](const auto& kv) { return kv.second == ref; });
            });
            if (!still_used) out.weights.erase(ref);
        }
    }
    out.model.validate();
    return out;
}

std::vector<std::string> learnable_layers_from_end(const ModelDescriptor& model) {
    std::vector<std::string> names;
    for (std::size_t i = model.layers.size(); i-- > 0;)
        if (!model.layers[i].weight_refs.empty()) names.push_back(model.layers[i].name);
    return names;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

WeightArchive randomize_cascading(const ModelDescriptor& model, const WeightArchive& weights,
                                  const std::string& from_layer, std::uint64_t seed) {
    const std::size_t from = model.index_of(from_layer);
    WeightArchive out = weights;
    for (std::size_t i = from; i < model.layers.size(); ++i) {
        const auto& layer = model.layers[i];
        std::size_t fan_in = 1;
        if (layer.kind == LayerKind::conv)
            fan_in = layer.conv.in_channels * layer.conv.kernel_h * layer.conv.kernel_w;
        else if (layer.kind == LayerKind::linear)
            fan_in = layer.fc.in_features;
        for (const auto& [role, ref] : layer.weight_refs) {
            if (role == "mean" || role == "var") continue; // running statistics, not learnable
            Tensor t = with_layer_context(layer, [&]() -> Tensor { return weight_for(weights, layer, role); });
            std::mt19937_64 rng(splitmix64(seed ^ fnv1a(ref)));
            std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
            for (auto& v : t.values()) v = static_cast<float>(normal(rng));
            out.set(ref, std::move(t));
        }
    }
    return out;
}

} // namespace rsp
