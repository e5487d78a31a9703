#pragma once

#include "rsp/evalkit.hpp"
#include "rsp/model.hpp"
#include "rsp/weights_io.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

// Small built-in networks and data used by the tests, the acceptance suite
// and `rsp toy`.
namespace rsp::toy {

struct ToyNet {
    ModelDescriptor model;
    WeightArchive weights;
};

// Random feature stage of 2-6 blocks (conv+relu, max/avg pooling, residual
// conv blocks) followed by a linear classifier. Identity normalization.
ToyNet random_net(std::uint64_t seed);

// Uniform [0,1] image matching the model input, [C,H,W].
Tensor random_image(const ModelDescriptor& model, std::uint64_t seed);

// Two classes on a single-channel image: "bright" lives in the top-left
// quadrant, "dark" in the bottom-right. The classifier is hand-set so each
// logit rewards its own detector and penalizes the other one.
ToyNet two_quadrant_net(std::size_t size = 32);

// Wider variant for the randomization sanity check: a bank of `width`
// thresholded bright/dark detectors, max pooling and a 1x1 mixing layer.
ToyNet sanity_net(std::size_t size = 32, std::size_t width = 64);

struct QuadrantSample {
    std::string id;
    Tensor image; // [1,H,W] in [0,1]
    BBoxAnnotation annotation;
};

// Grey noisy background with one bright and one dark square.
QuadrantSample two_quadrant_sample(std::size_t size, std::uint64_t seed, std::size_t index);

// Writes model.json, weights.rspw, images/<id>.png and annotations.jsonl.
void write_two_quadrant_suite(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed,
                              std::size_t size = 32);

} // namespace rsp::toy
