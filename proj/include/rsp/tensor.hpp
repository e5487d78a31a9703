#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rsp {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major float32 array of rank 1..4. Feature maps use NCHW.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::span<float> values() noexcept { return values_; }
    std::span<const float> values() const noexcept { return values_; }
    float* data() noexcept { return values_.data(); }
    const float* data() const noexcept { return values_.data(); }

    float& operator[](std::size_t i) noexcept { return values_[i]; }
    float operator[](std::size_t i) const noexcept { return values_[i]; }

    // Rank-4 element access (n, c, h, w).
    float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    Tensor reshaped(Shape shape) const;

    // Sum with 64-bit accumulation.
    double sum() const noexcept;
    double abs_sum() const noexcept;
    float max_abs() const noexcept;

    // Bitwise comparison of shape and payload.
    bool bitwise_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<float> values_;
};

// Boolean tensor (section masks, thresholded maps).
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> on;

    Mask() = default;
    explicit Mask(Shape s) : shape(std::move(s)), on(shape_size(shape), 0) {}

    std::size_t size() const noexcept { return on.size(); }
    std::size_t count() const noexcept;
    bool operator==(const Mask&) const = default;
};

// Symmetric zero padding, no dilation, groups == 1.
struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    void validate() const;
    Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
    std::size_t out_h(std::size_t in_h) const;
    std::size_t out_w(std::size_t in_w) const;
    Shape output_shape(const Shape& input_shape) const;
};

struct PoolGeometry {
    std::size_t kernel = 2;
    std::size_t stride = 2;

    void validate() const;
    Shape output_shape(const Shape& input_shape) const;
};

// Flat input index of the winning element for every pooled output element.
struct ArgmaxTrace {
    Shape input_shape;
    Shape output_shape;
    std::vector<std::size_t> winners;
};

struct PoolResult {
    Tensor output;
    ArgmaxTrace trace;
};

// Convolution (cross-correlation). Products are accumulated in double and
// rounded once to float.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias,
              const ConvGeometry& geom);
Tensor conv2d_input_vjp(const Tensor& cotangent, const Tensor& weight,
                        const ConvGeometry& geom, const Shape& input_shape);
Tensor conv2d_weight_grad(const Tensor& cotangent, const Tensor& input,
                          const ConvGeometry& geom);

// y = x W^T + b with x [N,D], W [M,D].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias);
Tensor linear_input_vjp(const Tensor& cotangent, const Tensor& weight);
Tensor linear_weight_grad(const Tensor& cotangent, const Tensor& input);

// Ties go to the first element in row-major scan order of the window.
PoolResult maxpool2d(const Tensor& input, const PoolGeometry& geom);
Tensor maxpool2d_vjp(const Tensor& cotangent, const ArgmaxTrace& trace);

Tensor avgpool2d(const Tensor& input, const PoolGeometry& geom);
Tensor avgpool2d_vjp(const Tensor& cotangent, const PoolGeometry& geom,
                     const Shape& input_shape);

// [N,K,H,W] -> [N,K], mean over H*W.
Tensor global_avg_pool(const Tensor& input);
Tensor global_avg_pool_vjp(const Tensor& cotangent, const Shape& input_shape);

Tensor relu(const Tensor& input);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor clamp_positive(const Tensor& a);
Tensor clamp_negative(const Tensor& a);
Tensor masked(const Tensor& a, const Mask& mask);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

} // namespace rsp
