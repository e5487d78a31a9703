#include "rsp/tensor.hpp"

#include "rsp/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

namespace rsp {

std::string shape_str(const Shape& shape) {
    std::ostringstream oss;
    oss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) oss << ",";
        oss << shape[i];
    }
    oss << "]";
    return oss.str();
}

std::size_t shape_size(const Shape& shape) {
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4)
        throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (shape[i] == 0)
            throw ShapeError("tensor extent " + std::to_string(i) + " is zero in " + shape_str(shape));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
}

void require_dim(std::size_t got, std::size_t want, const char* what, const char* dim_name) {
    if (got != want)
        throw ShapeError(std::string(what) + ": " + dim_name + " is " + std::to_string(got) +
                         ", expected " + std::to_string(want));
}

} // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape(shape_);
    if (values_.size() != shape_size(shape_))
        throw ShapeError("tensor payload has " + std::to_string(values_.size()) +
                         " elements, shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_size(shape_)));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[axis];
}

float& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

float Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != values_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), values_);
}

double Tensor::sum() const noexcept {
    double acc = 0.0;
    for (float v : values_) acc += v;
    return acc;
}

double Tensor::abs_sum() const noexcept {
    double acc = 0.0;
    for (float v : values_) acc += std::fabs(v);
    return acc;
}

float Tensor::max_abs() const noexcept {
    float m = 0.0f;
    for (float v : values_) m = std::max(m, std::fabs(v));
    return m;
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && values_.size() == other.values_.size() &&
           (values_.empty() ||
            std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(float)) == 0);
}

std::size_t Mask::count() const noexcept {
    return static_cast<std::size_t>(std::count(on.begin(), on.end(), std::uint8_t{1}));
}

void ConvGeometry::validate() const {
    if (in_channels == 0 || out_channels == 0) throw ShapeError("conv: channel counts must be >= 1");
    if (kernel_h == 0 || kernel_w == 0) throw ShapeError("conv: kernel extents must be >= 1");
    if (stride == 0) throw ShapeError("conv: stride must be >= 1");
}

std::size_t ConvGeometry::out_h(std::size_t in_h) const {
    if (in_h + 2 * padding < kernel_h)
        throw ShapeError("conv: input height " + std::to_string(in_h) + " too small for kernel " +
                         std::to_string(kernel_h) + " with padding " + std::to_string(padding));
    return (in_h + 2 * padding - kernel_h) / stride + 1;
}

std::size_t ConvGeometry::out_w(std::size_t in_w) const {
    if (in_w + 2 * padding < kernel_w)
        throw ShapeError("conv: input width " + std::to_string(in_w) + " too small for kernel " +
                         std::to_string(kernel_w) + " with padding " + std::to_string(padding));
    return (in_w + 2 * padding - kernel_w) / stride + 1;
}

Shape ConvGeometry::output_shape(const Shape& input_shape) const {
    validate();
    if (input_shape.size() != 4) throw ShapeError("conv: input must be rank 4, got " + shape_str(input_shape));
    require_dim(input_shape[1], in_channels, "conv", "input channels");
    return {input_shape[0], out_channels, out_h(input_shape[2]), out_w(input_shape[3])};
}

void PoolGeometry::validate() const {
    if (kernel == 0) throw ShapeError("pool: kernel must be >= 1");
    if (stride == 0) throw ShapeError("pool: stride must be >= 1");
}

Shape PoolGeometry::output_shape(const Shape& input_shape) const {
    validate();
    if (input_shape.size() != 4) throw ShapeError("pool: input must be rank 4, got " + shape_str(input_shape));
    if (input_shape[2] < kernel || input_shape[3] < kernel)
        throw ShapeError("pool: input " + shape_str(input_shape) + " smaller than kernel " +
                         std::to_string(kernel));
    return {input_shape[0], input_shape[1], (input_shape[2] - kernel) / stride + 1,
            (input_shape[3] - kernel) / stride + 1};
}

// Valid output range [lo, hi) along one axis for kernel tap `tap`: the input
// coordinate o*stride - pad + tap must lie inside [0, in).
static void tap_range(std::size_t tap, std::size_t stride, std::size_t pad, std::size_t in,
                      std::size_t out, std::size_t& lo, std::size_t& hi) {
    // smallest o with o*stride + tap >= pad
    lo = tap >= pad ? 0 : (pad - tap + stride - 1) / stride;
    // largest o with o*stride + tap - pad <= in - 1
    const std::size_t limit = in - 1 + pad;
    if (tap > limit) {
        lo = hi = 0;
        return;
    }
    hi = std::min(out, (limit - tap) / stride + 1);
    if (lo > hi) lo = hi;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const ConvGeometry& geom) {
    require_rank(input, 4, "conv2d input");
    require_rank(weight, 4, "conv2d weight");
    geom.validate();
    require_dim(weight.dim(0), geom.out_channels, "conv2d weight", "out channels");
    require_dim(weight.dim(1), geom.in_channels, "conv2d weight", "in channels");
    require_dim(weight.dim(2), geom.kernel_h, "conv2d weight", "kernel height");
    require_dim(weight.dim(3), geom.kernel_w, "conv2d weight", "kernel width");
    if (bias) {
        require_rank(*bias, 1, "conv2d bias");
        require_dim(bias->dim(0), geom.out_channels, "conv2d bias", "length");
    }
    const Shape out_shape = geom.output_shape(input.shape());
    const std::size_t N = out_shape[0], K = out_shape[1], OH = out_shape[2], OW = out_shape[3];
    const std::size_t C = geom.in_channels, H = input.dim(2), W = input.dim(3);
    const std::size_t KH = geom.kernel_h, KW = geom.kernel_w, S = geom.stride, P = geom.padding;

    Tensor out(out_shape);
    std::vector<double> plane(OH * OW);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
            std::fill(plane.begin(), plane.end(), bias ? static_cast<double>((*bias)[k]) : 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                const float* x = input.data() + (n * C + c) * H * W;
                const float* wk = weight.data() + (k * C + c) * KH * KW;
                for (std::size_t i = 0; i < KH; ++i) {
                    std::size_t oh_lo, oh_hi;
                    tap_range(i, S, P, H, OH, oh_lo, oh_hi);
                    for (std::size_t j = 0; j < KW; ++j) {
                        std::size_t ow_lo, ow_hi;
                        tap_range(j, S, P, W, OW, ow_lo, ow_hi);
                        const double wv = wk[i * KW + j];
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const float* xr = x + (oh * S + i - P) * W;
                            double* pr = plane.data() + oh * OW;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                pr[ow] += wv * xr[ow * S + j - P];
                        }
                    }
                }
            }
            float* o = out.data() + (n * K + k) * OH * OW;
            for (std::size_t p = 0; p < OH * OW; ++p) o[p] = static_cast<float>(plane[p]);
        }
    }
    return out;
}

Tensor conv2d_input_vjp(const Tensor& cotangent, const Tensor& weight, const ConvGeometry& geom,
                        const Shape& input_shape) {
    require_rank(cotangent, 4, "conv2d_input_vjp cotangent");
    require_rank(weight, 4, "conv2d_input_vjp weight");
    const Shape out_shape = geom.output_shape(input_shape);
    if (cotangent.shape() != out_shape)
        throw ShapeError("conv2d_input_vjp: cotangent shape " + shape_str(cotangent.shape()) +
                         " does not match conv output shape " + shape_str(out_shape));
    if (weight.shape() != geom.weight_shape())
        throw ShapeError("conv2d_input_vjp: weight shape " + shape_str(weight.shape()) +
                         " does not match " + shape_str(geom.weight_shape()));
    const std::size_t N = out_shape[0], K = out_shape[1], OH = out_shape[2], OW = out_shape[3];
    const std::size_t C = geom.in_channels, H = input_shape[2], W = input_shape[3];
    const std::size_t KH = geom.kernel_h, KW = geom.kernel_w, S = geom.stride, P = geom.padding;

    Tensor grad(input_shape);
    std::vector<double> plane(H * W);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            std::fill(plane.begin(), plane.end(), 0.0);
            for (std::size_t k = 0; k < K; ++k) {
                const float* g = cotangent.data() + (n * K + k) * OH * OW;
                const float* wk = weight.data() + (k * C + c) * KH * KW;
                for (std::size_t i = 0; i < KH; ++i) {
                    std::size_t oh_lo, oh_hi;
                    tap_range(i, S, P, H, OH, oh_lo, oh_hi);
                    for (std::size_t j = 0; j < KW; ++j) {
                        std::size_t ow_lo, ow_hi;
                        tap_range(j, S, P, W, OW, ow_lo, ow_hi);
                        const double wv = wk[i * KW + j];
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            double* pr = plane.data() + (oh * S + i - P) * W;
                            const float* gr = g + oh * OW;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                pr[ow * S + j - P] += wv * gr[ow];
                        }
                    }
                }
            }
            float* o = grad.data() + (n * C + c) * H * W;
            for (std::size_t p = 0; p < H * W; ++p) o[p] = static_cast<float>(plane[p]);
        }
    }
    return grad;
}

Tensor conv2d_weight_grad(const Tensor& cotangent, const Tensor& input, const ConvGeometry& geom) {
    require_rank(cotangent, 4, "conv2d_weight_grad cotangent");
    require_rank(input, 4, "conv2d_weight_grad input");
    const Shape out_shape = geom.output_shape(input.shape());
    if (cotangent.shape() != out_shape)
        throw ShapeError("conv2d_weight_grad: cotangent shape " + shape_str(cotangent.shape()) +
                         " does not match conv output shape " + shape_str(out_shape));
    const std::size_t N = out_shape[0], K = out_shape[1], OH = out_shape[2], OW = out_shape[3];
    const std::size_t C = geom.in_channels, H = input.dim(2), W = input.dim(3);
    const std::size_t KH = geom.kernel_h, KW = geom.kernel_w, S = geom.stride, P = geom.padding;

    Tensor grad(geom.weight_shape());
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < KH; ++i) {
                std::size_t oh_lo, oh_hi;
                tap_range(i, S, P, H, OH, oh_lo, oh_hi);
                for (std::size_t j = 0; j < KW; ++j) {
                    std::size_t ow_lo, ow_hi;
                    tap_range(j, S, P, W, OW, ow_lo, ow_hi);
                    double acc = 0.0;
                    for (std::size_t n = 0; n < N; ++n) {
                        const float* g = cotangent.data() + (n * K + k) * OH * OW;
                        const float* x = input.data() + (n * C + c) * H * W;
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const float* xr = x + (oh * S + i - P) * W;
                            const float* gr = g + oh * OW;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                acc += static_cast<double>(gr[ow]) * xr[ow * S + j - P];
                        }
                    }
                    grad[((k * C + c) * KH + i) * KW + j] = static_cast<float>(acc);
                }
            }
        }
    }
    return grad;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias) {
    require_rank(input, 2, "linear input");
    require_rank(weight, 2, "linear weight");
    const std::size_t N = input.dim(0), D = input.dim(1), M = weight.dim(0);
    require_dim(weight.dim(1), D, "linear weight", "in features");
    if (bias) {
        require_rank(*bias, 1, "linear bias");
        require_dim(bias->dim(0), M, "linear bias", "length");
    }
    Tensor out({N, M});
    for (std::size_t n = 0; n < N; ++n) {
        const float* x = input.data() + n * D;
        for (std::size_t m = 0; m < M; ++m) {
            const float* w = weight.data() + m * D;
            double acc = bias ? static_cast<double>((*bias)[m]) : 0.0;
            for (std::size_t d = 0; d < D; ++d) acc += static_cast<double>(w[d]) * x[d];
            out[n * M + m] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor linear_input_vjp(const Tensor& cotangent, const Tensor& weight) {
    require_rank(cotangent, 2, "linear_input_vjp cotangent");
    require_rank(weight, 2, "linear_input_vjp weight");
    const std::size_t N = cotangent.dim(0), M = weight.dim(0), D = weight.dim(1);
    require_dim(cotangent.dim(1), M, "linear_input_vjp cotangent", "out features");
    Tensor grad({N, D});
    std::vector<double> acc(D);
    for (std::size_t n = 0; n < N; ++n) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t m = 0; m < M; ++m) {
            const double g = cotangent[n * M + m];
            const float* w = weight.data() + m * D;
            for (std::size_t d = 0; d < D; ++d) acc[d] += g * w[d];
        }
        for (std::size_t d = 0; d < D; ++d) grad[n * D + d] = static_cast<float>(acc[d]);
    }
    return grad;
}

Tensor linear_weight_grad(const Tensor& cotangent, const Tensor& input) {
    require_rank(cotangent, 2, "linear_weight_grad cotangent");
    require_rank(input, 2, "linear_weight_grad input");
    const std::size_t N = input.dim(0), D = input.dim(1), M = cotangent.dim(1);
    require_dim(cotangent.dim(0), N, "linear_weight_grad cotangent", "batch");
    Tensor grad({M, D});
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t d = 0; d < D; ++d) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                acc += static_cast<double>(cotangent[n * M + m]) * input[n * D + d];
            grad[m * D + d] = static_cast<float>(acc);
        }
    }
    return grad;
}

PoolResult maxpool2d(const Tensor& input, const PoolGeometry& geom) {
    require_rank(input, 4, "maxpool2d input");
    const Shape out_shape = geom.output_shape(input.shape());
    const std::size_t N = out_shape[0], C = out_shape[1], OH = out_shape[2], OW = out_shape[3];
    const std::size_t H = input.dim(2), W = input.dim(3);
    PoolResult result{Tensor(out_shape), ArgmaxTrace{input.shape(), out_shape, {}}};
    result.trace.winners.resize(result.output.size());
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t base = nc * H * W;
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
                std::size_t best = base + oh * geom.stride * W + ow * geom.stride;
                float best_v = input[best];
                for (std::size_t i = 0; i < geom.kernel; ++i) {
                    for (std::size_t j = 0; j < geom.kernel; ++j) {
                        const std::size_t idx = base + (oh * geom.stride + i) * W + ow * geom.stride + j;
                        if (input[idx] > best_v) {
                            best_v = input[idx];
                            best = idx;
                        }
                    }
                }
                result.output[o] = best_v;
                result.trace.winners[o] = best;
            }
        }
    }
    return result;
}

Tensor maxpool2d_vjp(const Tensor& cotangent, const ArgmaxTrace& trace) {
    if (cotangent.shape() != trace.output_shape)
        throw ShapeError("maxpool2d_vjp: cotangent shape " + shape_str(cotangent.shape()) +
                         " does not match pooled shape " + shape_str(trace.output_shape));
    Tensor grad(trace.input_shape);
    for (std::size_t o = 0; o < cotangent.size(); ++o) grad[trace.winners[o]] += cotangent[o];
    return grad;
}

Tensor avgpool2d(const Tensor& input, const PoolGeometry& geom) {
    require_rank(input, 4, "avgpool2d input");
    const Shape out_shape = geom.output_shape(input.shape());
    const std::size_t N = out_shape[0], C = out_shape[1], OH = out_shape[2], OW = out_shape[3];
    const std::size_t H = input.dim(2), W = input.dim(3);
    const double inv = 1.0 / static_cast<double>(geom.kernel * geom.kernel);
    Tensor out(out_shape);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const float* x = input.data() + nc * H * W;
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
                double acc = 0.0;
                for (std::size_t i = 0; i < geom.kernel; ++i)
                    for (std::size_t j = 0; j < geom.kernel; ++j)
                        acc += x[(oh * geom.stride + i) * W + ow * geom.stride + j];
                out[o] = static_cast<float>(acc * inv);
            }
        }
    }
    return out;
}

Tensor avgpool2d_vjp(const Tensor& cotangent, const PoolGeometry& geom, const Shape& input_shape) {
    const Shape out_shape = geom.output_shape(input_shape);
    if (cotangent.shape() != out_shape)
        throw ShapeError("avgpool2d_vjp: cotangent shape " + shape_str(cotangent.shape()) +
                         " does not match pooled shape " + shape_str(out_shape));
    const std::size_t N = out_shape[0], C = out_shape[1], OH = out_shape[2], OW = out_shape[3];
    const std::size_t H = input_shape[2], W = input_shape[3];
    const double inv = 1.0 / static_cast<double>(geom.kernel * geom.kernel);
    std::vector<double> acc(shape_size(input_shape), 0.0);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        double* g = acc.data() + nc * H * W;
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow, ++o)
                for (std::size_t i = 0; i < geom.kernel; ++i)
                    for (std::size_t j = 0; j < geom.kernel; ++j)
                        g[(oh * geom.stride + i) * W + ow * geom.stride + j] += cotangent[o] * inv;
    }
    Tensor grad(input_shape);
    for (std::size_t i = 0; i < acc.size(); ++i) grad[i] = static_cast<float>(acc[i]);
    return grad;
}

Tensor global_avg_pool(const Tensor& input) {
    require_rank(input, 4, "global_avg_pool input");
    const std::size_t N = input.dim(0), K = input.dim(1), HW = input.dim(2) * input.dim(3);
    Tensor out({N, K});
    for (std::size_t nk = 0; nk < N * K; ++nk) {
        const float* x = input.data() + nk * HW;
        double acc = 0.0;
        for (std::size_t p = 0; p < HW; ++p) acc += x[p];
        out[nk] = static_cast<float>(acc / static_cast<double>(HW));
    }
    return out;
}

Tensor global_avg_pool_vjp(const Tensor& cotangent, const Shape& input_shape) {
    if (input_shape.size() != 4) throw ShapeError("global_avg_pool_vjp: input shape must be rank 4");
    const std::size_t N = input_shape[0], K = input_shape[1], HW = input_shape[2] * input_shape[3];
    if (cotangent.shape() != Shape{N, K})
        throw ShapeError("global_avg_pool_vjp: cotangent shape " + shape_str(cotangent.shape()) +
                         " does not match " + shape_str({N, K}));
    Tensor grad(input_shape);
    for (std::size_t nk = 0; nk < N * K; ++nk) {
        const float g = static_cast<float>(static_cast<double>(cotangent[nk]) / static_cast<double>(HW));
        std::fill(grad.data() + nk * HW, grad.data() + (nk + 1) * HW, g);
    }
    return grad;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

namespace {

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, F f) {
    require_same_shape(a, b, what);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

} // namespace

Tensor relu(const Tensor& input) {
    return map(input, [](float v) { return v > 0.0f ? v : 0.0f; });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return zip(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return zip(a, b, "sub", [](float x, float y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return zip(a, b, "mul", [](float x, float y) { return x * y; });
}

Tensor scale(const Tensor& a, double factor) {
    return map(a, [factor](float v) { return static_cast<float>(v * factor); });
}

Tensor clamp_positive(const Tensor& a) {
    return map(a, [](float v) { return v > 0.0f ? v : 0.0f; });
}

Tensor clamp_negative(const Tensor& a) {
    return map(a, [](float v) { return v < 0.0f ? v : 0.0f; });
}

Tensor masked(const Tensor& a, const Mask& mask) {
    if (mask.shape != a.shape())
        throw ShapeError("masked: mask shape " + shape_str(mask.shape) + " differs from tensor shape " +
                         shape_str(a.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = mask.on[i] ? a[i] : 0.0f;
    return out;
}

} // namespace rsp
