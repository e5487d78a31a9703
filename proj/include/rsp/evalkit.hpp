#pragma once

#include "rsp/model.hpp"
#include "rsp/relmap.hpp"
#include "rsp/rsp_prop.hpp"
#include "rsp/tensor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rsp {

// Inclusive pixel coordinates.
struct Box {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct BBoxAnnotation {
    std::string id;
    std::size_t width = 0;
    std::size_t height = 0;
    std::map<std::size_t, std::vector<Box>> boxes; // class index -> boxes
    std::vector<std::size_t> labels;

    void validate(std::size_t class_count) const;
};

// One JSON object per line: {"id","width","height","boxes":[{"class","x0","y0","x1","y1"}],"labels":[...]}.
// Classes may be given by name or index.
std::vector<BBoxAnnotation> parse_annotations(std::string_view jsonl, std::span<const std::string> class_names);

struct Point {
    std::size_t x = 0;
    std::size_t y = 0;
};

// Row-major first maximum of a [H,W] map.
Point argmax2d(const Tensor& map);

struct PointingResult {
    bool hit = false;
    Point argmax;
};

// Hit iff the global maximum lies in a box of `cls` grown by tolerance_px on every side.
PointingResult pointing_game(const Tensor& map, const BBoxAnnotation& annotation, std::size_t cls,
                             std::size_t tolerance_px);

// value > 0, or value > mean of the strictly positive values when thresholded.
Mask positive_mask(const Tensor& map, bool thresholded);

// Union of the class boxes as a [height,width] mask.
Mask rasterize_boxes(const BBoxAnnotation& annotation, std::size_t cls);

double mask_iou(const Mask& a, const Mask& b);
double miou_bbox(const Mask& mask, const BBoxAnnotation& annotation, std::size_t cls);

enum class EvalMode { predicted, labels };
char to_char(EvalMode mode);

struct EvalRecord {
    std::string image_id;
    std::string class_name;
    EvalMode mode = EvalMode::predicted;
    bool hit = false;
    double iou_raw = 0.0;
    double iou_thresholded = 0.0;
    Point argmax;
};

inline constexpr std::string_view kEvalCsvHeader = "id,class,mode,hit,iou_raw,iou_thr,argmax_x,argmax_y";
std::string to_csv_row(const EvalRecord& record);

// Spearman rank correlation with average ranks for ties. Identical inputs give
// exactly 1; a constant input gives 0.
double spearman(std::span<const float> a, std::span<const float> b);

struct SanityPoint {
    std::string layer; // last layer randomized; "none" for the original model
    double rho = 1.0;
    Tensor pixel_map;
    bool degenerate = false; // attribution failed on the randomized model
};

// Reruns the attribution while randomizing layer_order[0..k) for k = 0..n,
// reporting the rank correlation with the unrandomized map. layer_order runs
// from the output toward the input.
SanityPoint sanity_reference(const ModelDescriptor& model, const WeightArchive& weights, const Tensor& input,
                             const ClassSpec& spec, const PropagationConfig& config);
std::vector<SanityPoint> sanity_curve(const ModelDescriptor& model, const WeightArchive& weights, const Tensor& input,
                                      const ClassSpec& spec, const PropagationConfig& config,
                                      std::span<const std::string> layer_order, std::uint64_t seed);

// Seismic colormap: dark blue (-1) -> blue -> white (0) -> red -> dark red (+1).
std::array<std::uint8_t, 3> seismic(double value);

// Symmetrically normalized seismic heatmap as PNG. `underlay` ([C,H,W] in [0,1])
// is blended at alpha 0.5 when given.
std::vector<std::uint8_t> render_heatmap(const Tensor& map, const Tensor* underlay = nullptr);

} // namespace rsp
