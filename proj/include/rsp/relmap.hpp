#pragma once

#include "rsp/model.hpp"
#include "rsp/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace rsp {

enum class HostileMode {
    predicted,   // hostiles are the other predicted classes
    contrastive, // every non-target class is hostile (approximate c* variant)
};

struct ClassSpec {
    std::size_t target = 0;
    std::vector<std::size_t> hostiles;
    HostileMode mode = HostileMode::predicted;

    // target not in hostiles, all indices < class_count. Throws InputError.
    void validate(std::size_t class_count) const;
};

// Relevance R with disjoint positive (B+) and negative (B-) section masks.
struct SectionedRelevanceMap {
    Tensor values;
    Mask positive;
    Mask negative;

    // Masks taken from the strict sign of each value.
    static SectionedRelevanceMap from_values(Tensor values);

    Tensor positive_part() const { return masked(values, positive); }
    Tensor negative_part() const { return masked(values, negative); }
    // Masks disjoint and every nonzero value inside its own mask.
    bool well_formed() const;
};

// Spatially averaged gradient dy_cls/dx at feature_end, one entry per channel.
std::vector<double> average_channel_gradient(const ModelDescriptor& model, const WeightArchive& weights,
                                             const ActivationTrace& trace, std::size_t cls);

// lambda * x (.) avg_grad, optionally rectified. lambda scales max |value| to 1;
// an all-zero map is returned unscaled.
Tensor activation_map_from(const Tensor& x, std::span<const double> avg_grad, bool rectify);

// G for one class at feature_end.
Tensor grad_activation_map(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                           std::size_t cls);

// F = n * G(target) - sum over hostiles of G(h). Falls back to G(target) with no hostiles.
Tensor relative_map(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                    const ClassSpec& spec);
Tensor relative_map_from(const Tensor& target_map, std::span<const Tensor> hostile_maps);

// Approximation of the contrastive variant: unrectified maps, every other class
// hostile. F = (C-1) G~(t) - sum_{c != t} G~(c).
Tensor contrastive_relative_map(const ModelDescriptor& model, const WeightArchive& weights,
                                const ActivationTrace& trace, std::size_t target);

// Zeroes every unit whose sign differs from the sign of its channel sum at the
// same spatial position. A zero channel sum clears the whole column.
Tensor purge(const Tensor& relative);

// Scales positives to sum 2*total and negatives to -total. With no negatives
// the positives sum to total. Throws AttributionError when no positive entry exists.
SectionedRelevanceMap normalize_sections(const Tensor& purged, double total = 1.0);

// Grad-CAM: relu(sum_k x_k * avg_grad_k), bilinearly resized to the input resolution. Shape [H,W].
Tensor gradcam_heatmap(const ModelDescriptor& model, const WeightArchive& weights, const ActivationTrace& trace,
                       std::size_t cls);
Tensor gradcam_from(const Tensor& x, std::span<const double> avg_grad);

// Half-pixel-centred bilinear resize of a [H,W] map.
Tensor bilinear_resize(const Tensor& map, std::size_t out_h, std::size_t out_w);

} // namespace rsp
