#include "rsp/relmap.hpp"

#include "rsp/errors.hpp"

#include <algorithm>
#include <cmath>

namespace rsp {

void ClassSpec::validate(std::size_t class_count) const {
    if (target >= class_count)
        throw InputError("target class " + std::to_string(target) + " out of range (" +
                         std::to_string(class_count) + " classes)");
    for (std::size_t h : hostiles) {
        if (h >= class_count)
            throw InputError("hostile class " + std::to_string(h) + " out of range");
        if (h == target) throw InputError("target class " + std::to_string(target) + " is listed as hostile");
    }
}

SectionedRelevanceMap SectionedRelevanceMap::from_values(Tensor values) {
    SectionedRelevanceMap r{std::move(values), Mask{}, Mask{}};
    r.positive = Mask(r.values.shape());
    r.negative = Mask(r.values.shape());
    for (std::size_t i = 0; i < r.values.size(); ++i) {
        r.positive.on[i] = r.values[i] > 0.0f;
        r.negative.on[i] = r.values[i] < 0.0f;
    }
    return r;
}

bool SectionedRelevanceMap::well_formed() const {
    if (positive.shape != values.shape() || negative.shape != values.shape()) return false;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (positive.on[i] && negative.on[i]) return false;
        if (values[i] > 0.0f && !positive.on[i]) return false;
        if (values[i] < 0.0f && !negative.on[i]) return false;
    }
    return true;
}

std::vector<double> average_channel_gradient(const ModelDescriptor& model, const WeightArchive& weights,
                                             const ActivationTrace& trace, std::size_t cls) {
    const std::size_t fe = model.feature_end_index();
    const Tensor grad = class_gradient_at(model, weights, trace, cls, fe);
    if (grad.rank() != 4) throw ShapeError("feature_end gradient is not 4-D");
    const std::size_t K = grad.dim(1), HW = grad.dim(2) * grad.dim(3);
    std::vector<double> avg(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t p = 0; p < HW; ++p) acc += grad[k * HW + p];
        avg[k] = acc / static_cast<double>(HW);
    }
    return avg;
}

Tensor activation_map_from(const Tensor& x, std::span<const double> avg_grad, bool rectify) {
    if (x.rank() != 4 || x.dim(0) != 1)
        throw ShapeError("activation map needs a [1,K,H,W] tensor, got " + shape_str(x.shape()));
    if (avg_grad.size() != x.dim(1))
        throw ShapeError("average gradient has " + std::to_string(avg_grad.size()) + " channels, map has " +
                         std::to_string(x.dim(1)));
    const std::size_t K = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> raw(x.size());
    double peak = 0.0;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t p = 0; p < HW; ++p) {
            double v = x[k * HW + p] * avg_grad[k];
            if (rectify && v < 0.0) v = 0.0;
            raw[k * HW + p] = v;
            peak = std::max(peak, std::fabs(v));
        }
    // Divide rather than multiply by 1/peak so the peak maps to exactly 1.
    const double denom = peak > 0.0 ? peak : 1.0;
    Tensor g(x.shape());
    for (std::size_t i = 0; i < raw.size(); ++i) g[i] = static_cast<float>(raw[i] / denom);
    return g;
}

Tensor grad_activation_map(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                           std::size_t cls) {
    const auto avg = average_channel_gradient(model, weights, trace, cls);
    return activation_map_from(trace.outputs[model.feature_end_index()], avg, true);
}

Tensor relative_map_from(const Tensor& target_map, std::span<const Tensor> hostile_maps) {
    if (hostile_maps.empty()) return target_map;
    const double n = static_cast<double>(hostile_maps.size());
    std::vector<double> acc(target_map.size());
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = n * target_map[i];
    for (const auto& h : hostile_maps) {
        require_same_shape(target_map, h, "relative_map");
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= h[i];
    }
    Tensor f(target_map.shape());
    for (std::size_t i = 0; i < acc.size(); ++i) f[i] = static_cast<float>(acc[i]);
    return f;
}

Tensor relative_map(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                    const ClassSpec& spec) {
    spec.validate(model.class_count());
    if (spec.mode != HostileMode::predicted)
        throw InputError("relative_map requires predicted hostile mode; use contrastive_relative_map");
    const Tensor target = grad_activation_map(model, weights, trace, spec.target);
    std::vector<Tensor> hostile;
    hostile.reserve(spec.hostiles.size());
    for (std::size_t h : spec.hostiles) hostile.push_back(grad_activation_map(model, weights, trace, h));
    return relative_map_from(target, hostile);
}

Tensor contrastive_relative_map(const ModelDescriptor& model, const WeightArchive& weights,
                                const ActivationTrace& trace, std::size_t target) {
    const std::size_t C = model.class_count();
    if (C < 2) throw InputError("contrastive map needs at least two classes");
    if (target >= C) throw InputError("target class " + std::to_string(target) + " out of range");
    const Tensor& x = trace.outputs[model.feature_end_index()];
    Tensor target_map;
    std::vector<Tensor> others;
    for (std::size_t c = 0; c < C; ++c) {
        auto g = activation_map_from(x, average_channel_gradient(model, weights, trace, c), false);
        if (c == target)
            target_map = std::move(g);
        else
            others.push_back(std::move(g));
    }
    return relative_map_from(target_map, others);
}

Tensor purge(const Tensor& relative) {
    if (relative.rank() != 4)
        throw ShapeError("purge needs a 4-D [N,K,H,W] map, got " + shape_str(relative.shape()));
    const std::size_t N = relative.dim(0), K = relative.dim(1), HW = relative.dim(2) * relative.dim(3);
    Tensor out(relative.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const float* f = relative.data() + n * K * HW;
        float* o = out.data() + n * K * HW;
        for (std::size_t p = 0; p < HW; ++p) {
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += f[k * HW + p];
            if (s == 0.0) continue;
            for (std::size_t k = 0; k < K; ++k) {
                const float v = f[k * HW + p];
                if ((s > 0.0 && v > 0.0f) || (s < 0.0 && v < 0.0f)) o[k * HW + p] = v;
            }
        }
    }
    return out;
}

SectionedRelevanceMap normalize_sections(const Tensor& purged, double total) {
    double pos = 0.0, neg = 0.0;
    for (float v : purged.values()) {
        if (v > 0.0f) pos += v;
        else if (v < 0.0f) neg += v;
    }
    if (pos <= 0.0) throw AttributionError("target class has no supporting evidence at feature_end");
    const double pos_scale = neg < 0.0 ? 2.0 * total / pos : total / pos;
    const double neg_scale = neg < 0.0 ? total / -neg : 0.0;
    Tensor scaled(purged.shape());
    for (std::size_t i = 0; i < purged.size(); ++i) {
        const float v = purged[i];
        if (v > 0.0f) scaled[i] = static_cast<float>(v * pos_scale);
        else if (v < 0.0f) scaled[i] = static_cast<float>(v * neg_scale);
    }
    return SectionedRelevanceMap::from_values(std::move(scaled));
}

Tensor gradcam_from(const Tensor& x, std::span<const double> avg_grad) {
    if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("gradcam needs a [1,K,H,W] tensor");
    if (avg_grad.size() != x.dim(1)) throw ShapeError("gradcam: channel count mismatch");
    const std::size_t K = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor cam({H, W});
    for (std::size_t p = 0; p < H * W; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += x[k * H * W + p] * avg_grad[k];
        cam[p] = acc > 0.0 ? static_cast<float>(acc) : 0.0f;
    }
    return cam;
}

Tensor gradcam_heatmap(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                       std::size_t cls) {
    const auto avg = average_channel_gradient(model, weights, trace, cls);
    const Tensor cam = gradcam_from(trace.outputs[model.feature_end_index()], avg);
    return bilinear_resize(cam, model.input_shape[1], model.input_shape[2]);
}

Tensor bilinear_resize(const Tensor& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 2) throw ShapeError("bilinear_resize needs a [H,W] map");
    const std::size_t H = map.dim(0), W = map.dim(1);
    if (H == out_h && W == out_w) return map;
    Tensor out({out_h, out_w});
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, W - 1);
            const double tx = fx - static_cast<double>(x0);
            const double top = map[y0 * W + x0] * (1.0 - tx) + map[y0 * W + x1] * tx;
            const double bot = map[y1 * W + x0] * (1.0 - tx) + map[y1 * W + x1] * tx;
            out[y * out_w + x] = static_cast<float>(top * (1.0 - ty) + bot * ty);
        }
    }
    return out;
}

} // namespace rsp
