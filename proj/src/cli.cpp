#include "rsp/cli.hpp"

#include "rsp/errors.hpp"
#include "rsp/png_io.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <mutex>
#include <ostream>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace rsp {

std::string_view to_string(AttributionMode mode) {
    switch (mode) {
    case AttributionMode::rsp: return "rsp";
    case AttributionMode::c_rsp: return "c-rsp";
    case AttributionMode::gradcam: return "gradcam";
    case AttributionMode::gradient: return "gradient";
    }
    return "?";
}

AttributionMode parse_attribution_mode(std::string_view text) {
    for (auto m : {AttributionMode::rsp, AttributionMode::c_rsp, AttributionMode::gradcam, AttributionMode::gradient})
        if (to_string(m) == text) return m;
    throw InputError("unknown mode '" + std::string(text) + "' (expected rsp, c-rsp, gradcam or gradient)");
}

PredictionPolicy PredictionPolicy::parse(std::string_view text) {
    PredictionPolicy p;
    if (text == "top1") {
        p.kind = Kind::top1;
        return p;
    }
    constexpr std::string_view prefix = "multilabel";
    if (text.substr(0, prefix.size()) != prefix) throw InputError("unknown policy '" + std::string(text) + "'");
    text.remove_prefix(prefix.size());
    if (text.empty()) return p;
    if (text.front() != ':') throw InputError("policy must look like multilabel:<theta> or top1");
    text.remove_prefix(1);
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), p.theta);
    if (ec != std::errc{} || end != text.data() + text.size() || !(p.theta >= 0.0 && p.theta <= 1.0))
        throw InputError("policy threshold must be a number in [0,1], got '" + std::string(text) + "'");
    return p;
}

std::string PredictionPolicy::describe() const {
    return kind == Kind::top1 ? "top1" : fmt::format("multilabel:{}", theta);
}

std::vector<std::size_t> predict_classes(const Tensor& logits, const PredictionPolicy& policy) {
    std::vector<std::size_t> out;
    const auto y = logits.values();
    if (y.empty()) return out;
    if (policy.kind == PredictionPolicy::Kind::top1) {
        out.push_back(static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin()));
        return out;
    }
    for (std::size_t c = 0; c < y.size(); ++c)
        if (1.0 / (1.0 + std::exp(-static_cast<double>(y[c]))) > policy.theta) out.push_back(c);
    return out;
}

Tensor gradient_saliency(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                         std::size_t cls) {
    const Tensor g = class_input_gradient(model, weights, trace, cls);
    const std::size_t C = g.dim(1), H = g.dim(2), W = g.dim(3);
    Tensor map({H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < H * W; ++p) map[p] = std::max(map[p], std::fabs(g[c * H * W + p]));
    return map;
}

Attribution attribute(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                      std::size_t target, const std::vector<std::size_t>& predicted, AttributionMode mode,
                      const PropagationConfig& config) {
    switch (mode) {
    case AttributionMode::gradcam:
        return {gradcam_heatmap(model, weights, trace, target), std::nullopt};
    case AttributionMode::gradient:
        return {gradient_saliency(model, weights, trace, target), std::nullopt};
    case AttributionMode::rsp:
    case AttributionMode::c_rsp: {
        ClassSpec spec;
        spec.target = target;
        if (mode == AttributionMode::c_rsp) {
            spec.mode = HostileMode::contrastive;
            for (std::size_t c = 0; c < model.class_count(); ++c)
                if (c != target) spec.hostiles.push_back(c);
        } else {
            for (std::size_t c : predicted)
                if (c != target) spec.hostiles.push_back(c);
        }
        RspResult r = run_rsp(model, weights, trace.input, spec, config);
        Tensor map = r.pixel_map;
        return {std::move(map), std::move(r)};
    }
    }
    throw Error("unhandled attribution mode");
}

LoadedModel load_checked(const RunManifest& manifest) {
    LoadedModel lm{load_model(manifest.model_path), load_archive(manifest.weights_path)};
    const ValidationReport report = validate_against_descriptor(lm.weights, lm.model);
    if (!report.ok()) throw InputError(manifest.weights_path.string() + ": " + report.describe());
    manifest.config.validate();
    return lm;
}

std::size_t class_index(const ModelDescriptor& model, const std::string& name) {
    auto it = std::find(model.class_names.begin(), model.class_names.end(), name);
    if (it == model.class_names.end()) throw InputError("unknown class '" + name + "'");
    return static_cast<std::size_t>(it - model.class_names.begin());
}

std::string audit_json(const std::string& image_id, const std::string& class_name, AttributionMode mode,
                       const RspResult& result, double tolerance) {
    using ordered = nlohmann::ordered_json;
    const auto failure = result.conservation_failure(tolerance);
    ordered doc;
    doc["image"] = image_id;
    doc["class"] = class_name;
    doc["mode"] = to_string(mode);
    doc["initial_relevance"] = result.initial_sum;
    doc["tolerance"] = tolerance;
    doc["passed"] = !failure.has_value();
    doc["failed_layer"] = failure ? ordered(*failure) : ordered(nullptr);
    auto& layers = doc["layers"] = ordered::array();
    for (const auto& a : result.audit) {
        layers.push_back({{"layer", a.layer},
                          {"local_sum", a.local_sum},
                          {"frontier_sum", a.frontier_sum},
                          {"positive_sum", a.relevance.positive_part().sum()},
                          {"negative_sum", a.relevance.negative_part().sum()}});
    }
    return doc.dump(2) + "\n";
}

namespace {

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

// Runs job(i) for i in [0, n) on up to `workers` threads; the first exception wins.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& job) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                job(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next = n;
            }
        }
    };
    if (workers == 1) {
        run();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
    }
    if (error) std::rethrow_exception(error);
}

struct PreparedImage {
    std::string id;
    Tensor raw; // [C,H,W] in [0,1]
    ActivationTrace trace;
};

PreparedImage prepare(const LoadedModel& lm, const std::filesystem::path& path) {
    PreparedImage p;
    p.id = path.stem().string();
    p.raw = load_image(path, lm.model.input_shape.at(0));
    if (p.raw.shape() != lm.model.input_shape)
        throw InputError(fmt::format("{}: image is {}, model expects {}", path.string(), shape_str(p.raw.shape()),
                                     shape_str(lm.model.input_shape)));
    p.trace = forward_trace(lm.model, lm.weights, normalize_image(lm.model, p.raw));
    return p;
}

std::string file_stem(const std::string& id, const std::string& cls, AttributionMode mode) {
    return fmt::format("{}_{}_{}", id, cls, to_string(mode));
}

} // namespace

int cmd_attribute(const RunManifest& manifest) {
    if (manifest.images.empty()) throw InputError("no input images");
    const LoadedModel lm = load_checked(manifest);
    std::filesystem::create_directories(manifest.out_dir);
    const std::optional<std::size_t> forced =
        manifest.target ? std::optional(class_index(lm.model, *manifest.target)) : std::nullopt;

    std::atomic<std::size_t> failures{0};
    parallel_for(manifest.images.size(), manifest.workers, [&](std::size_t i) {
        const PreparedImage img = prepare(lm, manifest.images[i]);
        const auto predicted = predict_classes(img.trace.logits(), manifest.policy);
        const std::vector<std::size_t> targets = forced ? std::vector{*forced} : predicted;
        if (targets.empty()) spdlog::warn("{}: no class selected by policy {}", img.id, manifest.policy.describe());
        for (std::size_t t : targets) {
            const std::string& cls = lm.model.class_names[t];
            const std::string stem = file_stem(img.id, cls, manifest.mode);
            Attribution a;
            try {
                a = attribute(lm.model, lm.weights, img.trace, t, predicted, manifest.mode, manifest.config);
            } catch (const AttributionError& e) {
                spdlog::error("{} / {}: {}", img.id, cls, e.what());
                ++failures;
                continue;
            }
            write_file_atomic(manifest.out_dir / (stem + ".png"), render_heatmap(a.pixel_map, &img.raw));
            if (a.rsp) {
                const double tol = manifest.config.conservation_tolerance;
                write_file_atomic(manifest.out_dir / (stem + ".audit.json"),
                                  as_bytes(audit_json(img.id, cls, manifest.mode, *a.rsp, tol)));
                if (auto bad = a.rsp->conservation_failure(tol)) {
                    spdlog::error("{} / {}: conservation violated at layer '{}'", img.id, cls, *bad);
                    ++failures;
                }
            }
            spdlog::info("{} / {}: wrote {}", img.id, cls, stem);
        }
    });
    return failures == 0 ? 0 : 1;
}

double EvalSummary::pointing_accuracy() const {
    if (records.empty()) return 0.0;
    const auto hits = std::count_if(records.begin(), records.end(), [](const EvalRecord& r) { return r.hit; });
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

double EvalSummary::mean_iou(bool thresholded) const {
    if (records.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& r : records) acc += thresholded ? r.iou_thresholded : r.iou_raw;
    return acc / static_cast<double>(records.size());
}

EvalSummary evaluate(const RunManifest& manifest, const EvaluateOptions& options) {
    const LoadedModel lm = load_checked(manifest);
    const auto annotations = parse_annotations(
        [&] {
            const auto bytes = read_file(options.annotations);
            return std::string(bytes.begin(), bytes.end());
        }(),
        lm.model.class_names);

    // Pair annotations with images; any id without a partner is an error.
    std::set<std::string> image_ids;
    std::map<std::string, std::filesystem::path> image_paths;
    if (!std::filesystem::is_directory(options.image_dir))
        throw InputError("image directory " + options.image_dir.string() + " does not exist");
    for (const auto& entry : std::filesystem::directory_iterator(options.image_dir)) {
        const auto ext = entry.path().extension();
        if (ext != ".png" && ext != ".rspw") continue;
        const std::string id = entry.path().stem().string();
        if (!image_paths.emplace(id, entry.path()).second)
            throw InputError("image id '" + id + "' appears with more than one extension");
        image_ids.insert(id);
    }
    std::set<std::string> ann_ids;
    for (const auto& a : annotations)
        if (!ann_ids.insert(a.id).second) throw InputError("duplicate annotation id '" + a.id + "'");
    std::vector<std::string> missing_images, missing_annotations;
    std::set_difference(ann_ids.begin(), ann_ids.end(), image_ids.begin(), image_ids.end(),
                        std::back_inserter(missing_images));
    std::set_difference(image_ids.begin(), image_ids.end(), ann_ids.begin(), ann_ids.end(),
                        std::back_inserter(missing_annotations));
    if (!missing_images.empty() || !missing_annotations.empty())
        throw InputError(fmt::format("annotation/image id mismatch: no image for [{}]; no annotation for [{}]",
                                     fmt::join(missing_images, ", "), fmt::join(missing_annotations, ", ")));

    const std::optional<std::size_t> forced =
        manifest.target ? std::optional(class_index(lm.model, *manifest.target)) : std::nullopt;

    struct PerImage {
        std::vector<EvalRecord> records;
        bool skipped = false;
        std::size_t failures = 0;
    };
    std::vector<PerImage> results(annotations.size());
    parallel_for(annotations.size(), manifest.workers, [&](std::size_t i) {
        const BBoxAnnotation& ann = annotations[i];
        const PreparedImage img = prepare(lm, image_paths.at(ann.id));
        if (ann.width != img.raw.dim(2) || ann.height != img.raw.dim(1))
            throw InputError(fmt::format("annotation '{}' is {}x{}, image is {}x{}", ann.id, ann.width, ann.height,
                                         img.raw.dim(2), img.raw.dim(1)));
        const auto predicted = predict_classes(img.trace.logits(), manifest.policy);

        std::vector<std::size_t> classes;
        for (std::size_t c : ann.labels) {
            if (forced && c != *forced) continue;
            if (options.eval_mode == EvalMode::predicted &&
                std::find(predicted.begin(), predicted.end(), c) == predicted.end())
                continue;
            if (!ann.boxes.count(c)) {
                spdlog::warn("{}: label '{}' has no box, not scored", ann.id, lm.model.class_names[c]);
                continue;
            }
            classes.push_back(c);
        }
        PerImage& out = results[i];
        out.skipped = classes.empty();
        for (std::size_t c : classes) {
            EvalRecord rec;
            rec.image_id = ann.id;
            rec.class_name = lm.model.class_names[c];
            rec.mode = options.eval_mode;
            Tensor map;
            bool attributed = true;
            try {
                Attribution a = attribute(lm.model, lm.weights, img.trace, c, predicted, manifest.mode,
                                          manifest.config);
                if (a.rsp && a.rsp->conservation_failure(manifest.config.conservation_tolerance)) {
                    spdlog::error("{} / {}: conservation violated", ann.id, rec.class_name);
                    ++out.failures;
                }
                map = std::move(a.pixel_map);
            } catch (const AttributionError& e) {
                // Scored as a miss with an empty map.
                spdlog::error("{} / {}: {}", ann.id, rec.class_name, e.what());
                ++out.failures;
                map = Tensor({ann.height, ann.width});
                attributed = false;
            }
            const PointingResult pg = pointing_game(map, ann, c, options.tolerance_px);
            rec.hit = attributed && pg.hit;
            rec.argmax = pg.argmax;
            rec.iou_raw = miou_bbox(positive_mask(map, false), ann, c);
            rec.iou_thresholded = miou_bbox(positive_mask(map, true), ann, c);
            out.records.push_back(std::move(rec));
        }
    });

    EvalSummary summary;
    summary.images = annotations.size();
    for (auto& r : results) {
        summary.skipped += r.skipped;
        summary.failures += r.failures;
        for (auto& rec : r.records) summary.records.push_back(std::move(rec));
    }
    return summary;
}

int cmd_evaluate(const RunManifest& manifest, const EvaluateOptions& options, std::ostream& out) {
    const EvalSummary s = evaluate(manifest, options);
    std::filesystem::create_directories(manifest.out_dir);
    std::string csv(kEvalCsvHeader);
    csv += '\n';
    for (const auto& r : s.records) csv += to_csv_row(r) + "\n";
    write_file_atomic(manifest.out_dir / "results.csv", as_bytes(csv));

    out << fmt::format("mode: {} ({})\n", to_string(manifest.mode), to_char(options.eval_mode));
    out << fmt::format("images: {} (skipped {})\n", s.images, s.skipped);
    out << fmt::format("records: {}\n", s.records.size());
    out << fmt::format("pointing_game: {:.4f} (tolerance {} px)\n", s.pointing_accuracy(), options.tolerance_px);
    out << fmt::format("miou_raw: {:.4f}\n", s.mean_iou(false));
    out << fmt::format("miou_thr: {:.4f}\n", s.mean_iou(true));
    out << fmt::format("miou: {:.4f} (threshold {})\n", s.mean_iou(options.thresholded),
                       options.thresholded ? "mean" : "none");
    if (s.failures) out << fmt::format("failures: {}\n", s.failures);
    return s.failures == 0 ? 0 : 1;
}

int cmd_sanity(const RunManifest& manifest, std::uint64_t seed, std::ostream& out) {
    if (manifest.images.empty()) throw InputError("no input images");
    if (manifest.mode != AttributionMode::rsp && manifest.mode != AttributionMode::c_rsp)
        throw InputError("sanity runs the rsp or c-rsp attribution");
    LoadedModel lm = load_checked(manifest);
    if (lm.model.has_batchnorm()) {
        FoldedModel f = fold_batchnorm(lm.model, lm.weights);
        lm = {std::move(f.model), std::move(f.weights)};
    }
    std::filesystem::create_directories(manifest.out_dir);
    const auto order = learnable_layers_from_end(lm.model);

    std::vector<std::string> rows(manifest.images.size());
    parallel_for(manifest.images.size(), manifest.workers, [&](std::size_t i) {
        const PreparedImage img = prepare(lm, manifest.images[i]);
        const auto predicted = predict_classes(img.trace.logits(), manifest.policy);
        std::size_t target;
        if (manifest.target) {
            target = class_index(lm.model, *manifest.target);
        } else {
            const auto y = img.trace.logits().values();
            target = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
        }
        ClassSpec spec;
        spec.target = target;
        for (std::size_t c = 0; c < lm.model.class_count(); ++c)
            if (c != target && (manifest.mode == AttributionMode::c_rsp ||
                                std::find(predicted.begin(), predicted.end(), c) != predicted.end()))
                spec.hostiles.push_back(c);
        if (manifest.mode == AttributionMode::c_rsp) spec.mode = HostileMode::contrastive;

        const auto curve = sanity_curve(lm.model, lm.weights, img.trace.input, spec, manifest.config, order, seed);
        for (std::size_t k = 0; k < curve.size(); ++k) {
            const auto& p = curve[k];
            rows[i] += fmt::format("{},{},{},{:.6f},{}\n", img.id, k, p.layer, p.rho, p.degenerate ? 1 : 0);
            write_file_atomic(manifest.out_dir / fmt::format("{}_sanity_{}_{}.png", img.id, k, p.layer),
                              render_heatmap(p.pixel_map, &img.raw));
        }
    });
    std::string csv = "id,stage,layer,rho,degenerate\n";
    for (const auto& r : rows) csv += r;
    write_file_atomic(manifest.out_dir / "sanity.csv", as_bytes(csv));
    out << csv;
    return 0;
}

} // namespace rsp
