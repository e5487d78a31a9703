#include "rsp/evalkit.hpp"

#include "rsp/errors.hpp"
#include "rsp/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace rsp {

void BBoxAnnotation::validate(std::size_t class_count) const {
    if (width == 0 || height == 0) throw InputError("annotation '" + id + "': width and height must be >= 1");
    for (const auto& [cls, list] : boxes) {
        if (cls >= class_count) throw InputError("annotation '" + id + "': class index out of range");
        for (const auto& b : list)
            if (b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= width || b.y1 >= height)
                throw InputError(fmt::format("annotation '{}': box ({},{})-({},{}) outside {}x{} image", id, b.x0,
                                             b.y0, b.x1, b.y1, width, height));
    }
    for (std::size_t l : labels)
        if (l >= class_count) throw InputError("annotation '" + id + "': label out of range");
}

namespace {

std::size_t resolve_class(const nlohmann::json& v, std::span<const std::string> names, const std::string& where) {
    if (v.is_number_integer()) {
        const auto idx = v.get<long long>();
        if (idx < 0 || static_cast<std::size_t>(idx) >= names.size())
            throw InputError(where + ": class index " + std::to_string(idx) + " out of range");
        return static_cast<std::size_t>(idx);
    }
    if (v.is_string()) {
        const auto name = v.get<std::string>();
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw InputError(where + ": unknown class '" + name + "'");
        return static_cast<std::size_t>(it - names.begin());
    }
    throw InputError(where + ": class must be a name or an index");
}

} // namespace

std::vector<BBoxAnnotation> parse_annotations(std::string_view jsonl, std::span<const std::string> class_names) {
    std::vector<BBoxAnnotation> out;
    std::istringstream in{std::string(jsonl)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "annotations line " + std::to_string(line_no);
        try {
            const auto obj = nlohmann::json::parse(line);
            BBoxAnnotation ann;
            ann.id = obj.at("id").is_string() ? obj.at("id").get<std::string>() : obj.at("id").dump();
            ann.width = obj.at("width").get<std::size_t>();
            ann.height = obj.at("height").get<std::size_t>();
            for (const auto& b : obj.value("boxes", nlohmann::json::array())) {
                const std::size_t cls = resolve_class(b.at("class"), class_names, where);
                ann.boxes[cls].push_back(
                    {b.at("x0").get<std::size_t>(), b.at("y0").get<std::size_t>(), b.at("x1").get<std::size_t>(),
                     b.at("y1").get<std::size_t>()});
            }
            for (const auto& l : obj.value("labels", nlohmann::json::array()))
                ann.labels.push_back(resolve_class(l, class_names, where));
            // Boxed classes count as labels even when "labels" omits them.
            for (const auto& [cls, list] : ann.boxes)
                if (std::find(ann.labels.begin(), ann.labels.end(), cls) == ann.labels.end()) ann.labels.push_back(cls);
            std::sort(ann.labels.begin(), ann.labels.end());
            ann.validate(class_names.size());
            out.push_back(std::move(ann));
        } catch (const nlohmann::json::exception& e) {
            throw InputError(where + ": " + e.what());
        }
    }
    return out;
}

Point argmax2d(const Tensor& map) {
    if (map.rank() != 2) throw ShapeError("argmax2d needs a [H,W] map");
    std::size_t best = 0;
    for (std::size_t i = 1; i < map.size(); ++i)
        if (map[i] > map[best]) best = i;
    return {best % map.dim(1), best / map.dim(1)};
}

PointingResult pointing_game(const Tensor& map, const BBoxAnnotation& annotation, std::size_t cls,
                             std::size_t tolerance_px) {
    auto it = annotation.boxes.find(cls);
    if (it == annotation.boxes.end() || it->second.empty())
        throw InputError("annotation '" + annotation.id + "' has no box for class " + std::to_string(cls));
    PointingResult r;
    r.argmax = argmax2d(map);
    const auto px = static_cast<long long>(r.argmax.x), py = static_cast<long long>(r.argmax.y);
    const auto tol = static_cast<long long>(tolerance_px);
    for (const auto& b : it->second) {
        if (px >= static_cast<long long>(b.x0) - tol && px <= static_cast<long long>(b.x1) + tol &&
            py >= static_cast<long long>(b.y0) - tol && py <= static_cast<long long>(b.y1) + tol) {
            r.hit = true;
            break;
        }
    }
    return r;
}

Mask positive_mask(const Tensor& map, bool thresholded) {
    Mask m(map.shape());
    double threshold = 0.0;
    if (thresholded) {
        double acc = 0.0;
        std::size_t n = 0;
        for (float v : map.values())
            if (v > 0.0f) {
                acc += v;
                ++n;
            }
        if (n == 0) return m;
        threshold = acc / static_cast<double>(n);
    }
    for (std::size_t i = 0; i < map.size(); ++i) m.on[i] = static_cast<double>(map[i]) > threshold;
    return m;
}

Mask rasterize_boxes(const BBoxAnnotation& annotation, std::size_t cls) {
    Mask m({annotation.height, annotation.width});
    auto it = annotation.boxes.find(cls);
    if (it == annotation.boxes.end()) return m;
    for (const auto& b : it->second)
        for (std::size_t y = b.y0; y <= b.y1; ++y)
            for (std::size_t x = b.x0; x <= b.x1; ++x) m.on[y * annotation.width + x] = 1;
    return m;
}

double mask_iou(const Mask& a, const Mask& b) {
    if (a.shape != b.shape)
        throw ShapeError("mask_iou: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a.on[i] && b.on[i];
        uni += a.on[i] || b.on[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double miou_bbox(const Mask& mask, const BBoxAnnotation& annotation, std::size_t cls) {
    return mask_iou(mask, rasterize_boxes(annotation, cls));
}

char to_char(EvalMode mode) { return mode == EvalMode::predicted ? 'P' : 'L'; }

std::string to_csv_row(const EvalRecord& r) {
    return fmt::format("{},{},{},{},{:.6f},{:.6f},{},{}", r.image_id, r.class_name, to_char(r.mode),
                       r.hit ? 1 : 0, r.iou_raw, r.iou_thresholded, r.argmax.x, r.argmax.y);
}

namespace {

std::vector<double> average_ranks(std::span<const float> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

} // namespace

double spearman(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw ShapeError("spearman: inputs differ in length");
    if (a.empty()) throw ShapeError("spearman: empty input");
    if (std::equal(a.begin(), a.end(), b.begin())) {
        const bool constant = std::all_of(a.begin(), a.end(), [&](float v) { return v == a[0]; });
        return constant ? 0.0 : 1.0;
    }
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double mean = 0.5 * static_cast<double>(a.size() - 1);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = ra[i] - mean, db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

SanityPoint sanity_reference(const ModelDescriptor& model, const WeightArchive& weights, const Tensor& input,
                             const ClassSpec& spec, const PropagationConfig& config) {
    return {"none", 1.0, run_rsp(model, weights, input, spec, config).pixel_map, false};
}

std::vector<SanityPoint> sanity_curve(const ModelDescriptor& model_in, const WeightArchive& weights_in,
                                      const Tensor& input, const ClassSpec& spec, const PropagationConfig& config,
                                      std::span<const std::string> layer_order, std::uint64_t seed) {
    std::optional<FoldedModel> folded;
    if (model_in.has_batchnorm()) folded = fold_batchnorm(model_in, weights_in);
    const ModelDescriptor& model = folded ? folded->model : model_in;
    const WeightArchive& weights = folded ? folded->weights : weights_in;

    std::vector<SanityPoint> curve;
    curve.push_back(sanity_reference(model, weights, input, spec, config));
    const Tensor reference = curve.front().pixel_map;
    for (const auto& layer : layer_order) {
        const WeightArchive randomized = randomize_cascading(model, weights, layer, seed);
        SanityPoint p{layer, 0.0, Tensor::zeros_like(reference), false};
        try {
            p.pixel_map = run_rsp(model, randomized, input, spec, config).pixel_map;
            p.rho = spearman(reference.values(), p.pixel_map.values());
        } catch (const AttributionError&) {
            p.degenerate = true;
        }
        curve.push_back(std::move(p));
    }
    return curve;
}

std::array<std::uint8_t, 3> seismic(double value) {
    // Same anchors as the matplotlib "seismic" map.
    static constexpr double kAnchors[5][3] = {
        {0.0, 0.0, 0.3}, {0.0, 0.0, 1.0}, {1.0, 1.0, 1.0}, {1.0, 0.0, 0.0}, {0.5, 0.0, 0.0}};
    const double t = (std::clamp(value, -1.0, 1.0) + 1.0) * 2.0; // 0..4
    const std::size_t seg = std::min<std::size_t>(static_cast<std::size_t>(t), 3);
    const double f = t - static_cast<double>(seg);
    std::array<std::uint8_t, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
        const double v = kAnchors[seg][c] * (1.0 - f) + kAnchors[seg + 1][c] * f;
        rgb[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    return rgb;
}

std::vector<std::uint8_t> render_heatmap(const Tensor& map, const Tensor* underlay) {
    if (map.rank() != 2) throw ShapeError("render_heatmap needs a [H,W] map");
    const std::size_t H = map.dim(0), W = map.dim(1);
    if (underlay && (underlay->rank() != 3 || underlay->dim(1) != H || underlay->dim(2) != W))
        throw ShapeError("render_heatmap: underlay " + shape_str(underlay->shape()) + " does not match map " +
                         shape_str(map.shape()));
    const double peak = map.max_abs();
    std::vector<std::uint8_t> rgb(H * W * 3);
    for (std::size_t p = 0; p < H * W; ++p) {
        auto color = seismic(peak > 0.0 ? map[p] / peak : 0.0);
        for (std::size_t c = 0; c < 3; ++c) {
            if (underlay) {
                const std::size_t uc = underlay->dim(0) == 3 ? c : 0;
                const double base = std::clamp(static_cast<double>((*underlay)[uc * H * W + p]), 0.0, 1.0) * 255.0;
                rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(0.5 * color[c] + 0.5 * base));
            } else {
                rgb[p * 3 + c] = color[c];
            }
        }
    }
    return encode_png_rgb(W, H, rgb);
}

} // namespace rsp
