#pragma once

#include "rsp/model.hpp"
#include "rsp/relmap.hpp"
#include "rsp/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rsp {

struct PropagationConfig {
    // Sign-preserving stabilizer for every relevance/activation ratio.
    double epsilon = 1e-9;
    // Per-channel box bounds for the input rule, in normalized input units.
    // Empty means "derive from the model normalization" ((0-mean)/std, (1-mean)/std).
    std::vector<float> zbeta_low;
    std::vector<float> zbeta_high;
    // Purge and re-section after every shifted 4-D layer, not only at feature_end.
    bool per_layer_purge = true;
    // Relative bound on |sum R_l - S| for the audit.
    double conservation_tolerance = 1e-4;
    // Total relevance S handed to the first sectioned map.
    double initial_relevance = 1.0;

    void validate() const;
};

// Weight-space vector-Jacobian products of the sectional outputs f(x,w)*B+-
// against the positive / negative relevance. Same shape as the layer weight.
struct SectionalNu {
    Tensor positive;
    Tensor negative;
};

struct LayerRelevance {
    std::string layer;              // layer whose output holds `relevance`; "input" for pixels
    SectionedRelevanceMap relevance;
    double local_sum = 0.0;         // sum of `relevance`
    double frontier_sum = 0.0;      // relevance held by every pending tensor at this point
};

// x is the layer's recorded input. Throws for weightless layers.
SectionalNu sectional_nu(const Tensor& x, const LayerSpec& layer, const SectionedRelevanceMap& relevance);

// Influence-weighted redistribution of R onto the layer input:
//   x (.) f*(nu+, P / f(x,nu+)) + x (.) f*(nu-, N / f(x,nu-)).
// The share absorbed by the epsilon stabilizer goes back to the same output's
// inputs in proportion to |contribution|. Output units whose sectional response
// is zero cannot be attributed through x; their relevance is spread evenly over
// the active (x > 0) inputs so the sum is preserved.
Tensor propagate_layer(const Tensor& x, const LayerSpec& layer, const SectionalNu& nu,
                       const SectionedRelevanceMap& relevance, double epsilon);

// relu: pass-through on active units; maxpool: route to the recorded winner;
// avgpool / global_avg_pool: split in proportion to the window inputs (even
// split when the window has no positive mass); flatten: reshape;
// residual_add: split by |x_a| / (|x_a| + |x_b|). One tensor per layer input.
std::vector<Tensor> propagate_weightless(const LayerSpec& layer, std::span<const Tensor* const> inputs,
                                         const Tensor& relevance, const ArgmaxTrace* argmax);

// 2R - total/Gamma on the Gamma active units (x > 0), 2R elsewhere.
// Throws AttributionError when no unit is active.
Tensor uniform_shift(const Tensor& r_hat, const Tensor& x, double total);

// Box-constrained input rule for the first convolution. Positive and negative
// sections are decomposed separately and each keeps its sum.
Tensor zbeta_input(const Tensor& x, const LayerSpec& first, const WeightArchive& weights,
                   const SectionedRelevanceMap& relevance, std::span<const float> low, std::span<const float> high,
                   double epsilon);

struct RspResult {
    Tensor pixel_relevance; // [1,C,H,W]
    Tensor pixel_map;       // [H,W], channel sum of pixel_relevance
    std::vector<LayerRelevance> audit;
    double initial_sum = 0.0;

    // Name of the first audited layer breaking conservation, if any.
    std::optional<std::string> conservation_failure(double tolerance) const;
};

// Full backward pass from the logits to the pixels. `input` is the normalized
// network input. Models with batchnorm are folded first.
RspResult run_rsp(const ModelDescriptor& model, const WeightArchive& weights, const Tensor& input,
                  const ClassSpec& spec, const PropagationConfig& config);

// Channel sum of a [1,C,H,W] tensor as a [H,W] map.
Tensor channel_sum(const Tensor& t);

} // namespace rsp
