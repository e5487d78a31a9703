#pragma once

#include "rsp/evalkit.hpp"
#include "rsp/model.hpp"
#include "rsp/rsp_prop.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace rsp {

enum class AttributionMode { rsp, c_rsp, gradcam, gradient };

std::string_view to_string(AttributionMode mode);
AttributionMode parse_attribution_mode(std::string_view text);

// "multilabel" / "multilabel:<theta>" selects {c : sigmoid(y_c) > theta};
// "top1" selects the largest logit.
struct PredictionPolicy {
    enum class Kind { multilabel, top1 };
    Kind kind = Kind::multilabel;
    double theta = 0.5;

    static PredictionPolicy parse(std::string_view text);
    std::string describe() const;
};

std::vector<std::size_t> predict_classes(const Tensor& logits, const PredictionPolicy& policy);

// Plain gradient saliency: max over channels of |dy_cls / dx|, shape [H,W].
Tensor gradient_saliency(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                         std::size_t cls);

struct Attribution {
    Tensor pixel_map;          // [H,W]
    std::optional<RspResult> rsp; // set for rsp / c-rsp
};

// `predicted` supplies the hostiles in rsp mode.
Attribution attribute(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                      std::size_t target, const std::vector<std::size_t>& predicted, AttributionMode mode,
                      const PropagationConfig& config);

struct RunManifest {
    std::filesystem::path model_path;
    std::filesystem::path weights_path;
    std::vector<std::filesystem::path> images;
    PredictionPolicy policy;
    AttributionMode mode = AttributionMode::rsp;
    PropagationConfig config;
    std::optional<std::string> target;
    std::filesystem::path out_dir = ".";
    std::size_t workers = 1;
};

// Loaded and cross-checked model + weights. Throws InputError / FormatError.
struct LoadedModel {
    ModelDescriptor model;
    WeightArchive weights;
};
LoadedModel load_checked(const RunManifest& manifest);

std::size_t class_index(const ModelDescriptor& model, const std::string& name);

// Conservation audit as JSON text (stable key order, trailing newline).
std::string audit_json(const std::string& image_id, const std::string& class_name, AttributionMode mode,
                       const RspResult& result, double tolerance);

// Exit codes: 0 success, 1 audit or attribution failure, 2 bad input.
// Input problems surface as exceptions; the caller maps them to 2.
int cmd_attribute(const RunManifest& manifest);

struct EvaluateOptions {
    std::filesystem::path annotations;
    std::filesystem::path image_dir;
    EvalMode eval_mode = EvalMode::predicted;
    std::size_t tolerance_px = 15;
    bool thresholded = true; // IoU reported in the summary headline
};

struct EvalSummary {
    std::size_t images = 0;
    std::size_t skipped = 0;
    std::size_t failures = 0; // audit or attribution failures
    std::vector<EvalRecord> records;

    double pointing_accuracy() const;
    double mean_iou(bool thresholded) const;
};

EvalSummary evaluate(const RunManifest& manifest, const EvaluateOptions& options);
int cmd_evaluate(const RunManifest& manifest, const EvaluateOptions& options, std::ostream& out);

int cmd_sanity(const RunManifest& manifest, std::uint64_t seed, std::ostream& out);

} // namespace rsp
