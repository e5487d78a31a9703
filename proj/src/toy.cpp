#include "rsp/toy.hpp"

#include "rsp/errors.hpp"
#include "rsp/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace rsp::toy {

namespace {

class NetBuilder {
public:
    explicit NetBuilder(std::uint64_t seed) : rng_(seed) {}

    std::string conv(const std::string& from, std::size_t in_c, std::size_t out_c, std::size_t k, double gain) {
        LayerSpec l = base(LayerKind::conv, from);
        l.conv = {in_c, out_c, k, k, 1, k / 2};
        add_weights(l, l.conv.weight_shape(), Shape{out_c}, in_c * k * k, gain);
        return push(std::move(l));
    }

    std::string linear(const std::string& from, std::size_t in_f, std::size_t out_f, double gain) {
        LayerSpec l = base(LayerKind::linear, from);
        l.fc = {in_f, out_f};
        add_weights(l, Shape{out_f, in_f}, Shape{out_f}, in_f, gain);
        return push(std::move(l));
    }

    std::string pool(LayerKind kind, const std::string& from) {
        LayerSpec l = base(kind, from);
        l.pool = {2, 2};
        return push(std::move(l));
    }

    std::string unary(LayerKind kind, const std::string& from) { return push(base(kind, from)); }

    std::string add(const std::string& a, const std::string& b) {
        LayerSpec l = base(LayerKind::residual_add, a);
        l.inputs = {a, b};
        return push(std::move(l));
    }

    std::mt19937_64& rng() { return rng_; }
    ModelDescriptor model;
    WeightArchive weights;

private:
    LayerSpec base(LayerKind kind, const std::string& from) {
        LayerSpec l;
        l.kind = kind;
        l.name = fmt::format("{}{}", to_string(kind), model.layers.size());
        l.inputs = {from};
        return l;
    }

    void add_weights(LayerSpec& l, const Shape& w, const Shape& b, std::size_t fan_in, double gain) {
        std::normal_distribution<double> normal(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
        std::uniform_real_distribution<double> bias(-0.05, 0.1);
        Tensor wt(w), bt(b);
        for (auto& v : wt.values()) v = static_cast<float>(normal(rng_));
        for (auto& v : bt.values()) v = static_cast<float>(bias(rng_));
        l.weight_refs = {{"weight", l.name + ".weight"}, {"bias", l.name + ".bias"}};
        weights.insert(l.name + ".weight", std::move(wt));
        weights.insert(l.name + ".bias", std::move(bt));
    }

    std::string push(LayerSpec l) {
        std::string name = l.name;
        model.layers.push_back(std::move(l));
        return name;
    }

    std::mt19937_64 rng_;
};

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

} // namespace

ToyNet random_net(std::uint64_t seed) {
    NetBuilder b(seed);
    auto& rng = b.rng();
    const std::size_t in_c = pick(rng, 1, 3);
    const std::size_t side = 2 * pick(rng, 4, 6);
    std::size_t c = in_c, h = side;
    const std::size_t blocks = pick(rng, 1, 5);

    std::string cur(kInputName), last_relu;
    for (std::size_t i = 0; i < blocks; ++i) {
        // The input must feed a convolution.
        const std::size_t choice = i == 0 ? 0 : pick(rng, 0, 3);
        if (choice == 1 && h >= 4) {
            cur = b.pool(pick(rng, 0, 1) ? LayerKind::maxpool : LayerKind::avgpool, cur);
            h /= 2;
        } else if (choice == 2) {
            const std::string skip = cur;
            std::string r = b.unary(LayerKind::relu, b.conv(cur, c, c, 3, 1.2));
            r = b.conv(r, c, c, 3, 0.8);
            cur = last_relu = b.unary(LayerKind::relu, b.add(skip, r));
        } else {
            const std::size_t out_c = pick(rng, 2, 6);
            cur = last_relu = b.unary(LayerKind::relu, b.conv(cur, c, out_c, pick(rng, 0, 1) ? 3 : 1, 1.4));
            c = out_c;
        }
    }
    // Trailing pools stay in the feature stage but after feature_end.
    b.model.feature_end = last_relu;

    const std::size_t classes = pick(rng, 2, 4);
    std::size_t features = c;
    if (pick(rng, 0, 1)) {
        cur = b.unary(LayerKind::global_avg_pool, cur);
    } else {
        cur = b.unary(LayerKind::flatten, cur);
        features = c * h * h;
    }
    if (pick(rng, 0, 1)) {
        const std::size_t hidden = pick(rng, 3, 8);
        cur = b.unary(LayerKind::relu, b.linear(cur, features, hidden, 1.4));
        features = hidden;
    }
    b.linear(cur, features, classes, 1.0);

    b.model.input_shape = {in_c, side, side};
    for (std::size_t k = 0; k < classes; ++k) b.model.class_names.push_back(fmt::format("class{}", k));
    b.model.normalization.mean.assign(in_c, 0.0f);
    b.model.normalization.std.assign(in_c, 1.0f);
    b.model.validate();
    return {std::move(b.model), std::move(b.weights)};
}

Tensor random_image(const ModelDescriptor& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor img(model.input_shape);
    for (auto& v : img.values()) v = u(rng);
    return img;
}

ToyNet two_quadrant_net(std::size_t size) {
    ToyNet net;
    auto& m = net.model;
    m.input_shape = {1, size, size};
    m.class_names = {"bright", "dark"};
    m.normalization = {{0.5f}, {0.25f}};

    auto layer = [&](std::string name, LayerKind kind) -> LayerSpec& {
        LayerSpec l;
        l.name = std::move(name);
        l.kind = kind;
        l.inputs = {m.layers.empty() ? std::string(kInputName) : m.layers.back().name};
        if (l.has_weights()) l.weight_refs = {{"weight", l.name + ".weight"}, {"bias", l.name + ".bias"}};
        m.layers.push_back(std::move(l));
        return m.layers.back();
    };

    // conv1: channel 0 averages the 3x3 window, channel 1 its negation. The
    // bias keeps background noise below the relu threshold.
    layer("conv1", LayerKind::conv).conv = {1, 2, 3, 3, 1, 1};
    Tensor w1({2, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) {
        w1[i] = 1.0f / 9.0f;
        w1[9 + i] = -1.0f / 9.0f;
    }
    net.weights.insert("conv1.weight", std::move(w1));
    net.weights.insert("conv1.bias", Tensor({2}, -0.5f));
    layer("relu1", LayerKind::relu);

    layer("conv2", LayerKind::conv).conv = {2, 2, 1, 1, 1, 0};
    net.weights.insert("conv2.weight", Tensor({2, 2, 1, 1}, {1.0f, 0.0f, 0.0f, 1.0f}));
    net.weights.insert("conv2.bias", Tensor({2}, 0.0f));
    layer("relu2", LayerKind::relu);
    m.feature_end = "relu2";

    layer("gap", LayerKind::global_avg_pool);
    layer("fc", LayerKind::linear).fc = {2, 2};
    net.weights.insert("fc.weight", Tensor({2, 2}, {10.0f, -10.0f, -10.0f, 10.0f}));
    net.weights.insert("fc.bias", Tensor({2}, 2.0f));
    m.validate();
    return net;
}

ToyNet sanity_net(std::size_t size, std::size_t width) {
    if (width < 2 || width % 2) throw InputError("sanity_net width must be even and >= 2");
    ToyNet net;
    auto& m = net.model;
    m.input_shape = {1, size, size};
    m.class_names = {"bright", "dark"};
    m.normalization = {{0.5f}, {0.25f}};
    const std::size_t half = width / 2;

    auto layer = [&](std::string name, LayerKind kind) -> LayerSpec& {
        LayerSpec l;
        l.name = std::move(name);
        l.kind = kind;
        l.inputs = {m.layers.empty() ? std::string(kInputName) : m.layers.back().name};
        if (l.has_weights()) l.weight_refs = {{"weight", l.name + ".weight"}, {"bias", l.name + ".bias"}};
        m.layers.push_back(std::move(l));
        return m.layers.back();
    };

    // A bank of bright (first half) and dark (second half) 3x3 detectors with
    // staggered thresholds.
    layer("conv1", LayerKind::conv).conv = {1, width, 3, 3, 1, 1};
    Tensor w1({width, 1, 3, 3}), b1({width});
    for (std::size_t c = 0; c < width; ++c) {
        const float sign = c < half ? 1.0f : -1.0f;
        for (std::size_t i = 0; i < 9; ++i) w1[c * 9 + i] = sign / 9.0f;
        b1[c] = -0.3f - static_cast<float>(c % half) / static_cast<float>(half);
    }
    net.weights.insert("conv1.weight", std::move(w1));
    net.weights.insert("conv1.bias", std::move(b1));
    layer("relu1", LayerKind::relu);
    layer("pool1", LayerKind::maxpool).pool = {2, 2};

    layer("conv2", LayerKind::conv).conv = {width, width, 1, 1, 1, 0};
    Tensor w2({width, width, 1, 1});
    for (std::size_t c = 0; c < width; ++c) w2[c * width + c] = 1.0f;
    net.weights.insert("conv2.weight", std::move(w2));
    net.weights.insert("conv2.bias", Tensor({width}, 0.0f));
    layer("relu2", LayerKind::relu);
    m.feature_end = "relu2";

    layer("gap", LayerKind::global_avg_pool);
    layer("fc", LayerKind::linear).fc = {width, 2};
    Tensor wf({2, width});
    for (std::size_t c = 0; c < width; ++c) {
        const float v = (c < half ? 10.0f : -10.0f) / static_cast<float>(half);
        wf[c] = v;
        wf[width + c] = -v;
    }
    net.weights.insert("fc.weight", std::move(wf));
    net.weights.insert("fc.bias", Tensor({2}, 2.0f));
    m.validate();
    return net;
}

QuadrantSample two_quadrant_sample(std::size_t size, std::uint64_t seed, std::size_t index) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + index);
    std::uniform_real_distribution<float> noise(-0.04f, 0.04f);
    QuadrantSample s;
    s.id = fmt::format("quad{:04d}", index);
    s.image = Tensor({1, size, size});
    for (auto& v : s.image.values()) v = 0.5f + noise(rng);

    const std::size_t half = size / 2;
    const std::size_t lo = std::max<std::size_t>(size / 4, 3), hi = std::max(lo, half - 3);
    auto place = [&](std::size_t origin, float value, std::size_t cls) {
        const std::size_t side = pick(rng, lo, hi);
        // Keep a 1-pixel margin inside the quadrant.
        const std::size_t x0 = origin + pick(rng, 1, half - side - 1 > 1 ? half - side - 1 : 1);
        const std::size_t y0 = origin + pick(rng, 1, half - side - 1 > 1 ? half - side - 1 : 1);
        for (std::size_t y = y0; y < y0 + side; ++y)
            for (std::size_t x = x0; x < x0 + side; ++x) s.image[y * size + x] = value;
        s.annotation.boxes[cls].push_back({x0, y0, x0 + side - 1, y0 + side - 1});
    };
    place(0, 1.0f, 0);
    place(half, 0.0f, 1);
    s.annotation.id = s.id;
    s.annotation.width = s.annotation.height = size;
    s.annotation.labels = {0, 1};
    return s;
}

void write_two_quadrant_suite(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed,
                              std::size_t size) {
    std::filesystem::create_directories(dir / "images");
    const ToyNet net = two_quadrant_net(size);
    save_model(net.model, dir / "model.json");
    save_archive(net.weights, dir / "weights.rspw");

    std::string jsonl;
    for (std::size_t i = 0; i < count; ++i) {
        const QuadrantSample s = two_quadrant_sample(size, seed, i);
        std::vector<std::uint8_t> gray(size * size);
        for (std::size_t p = 0; p < gray.size(); ++p)
            gray[p] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[p], 0.0f, 1.0f) * 255.0f));
        write_file_atomic(dir / "images" / (s.id + ".png"), encode_png_gray(size, size, gray));

        nlohmann::json line{{"id", s.id}, {"width", size}, {"height", size}, {"labels", net.model.class_names}};
        auto& boxes = line["boxes"] = nlohmann::json::array();
        for (const auto& [cls, list] : s.annotation.boxes)
            for (const auto& bx : list)
                boxes.push_back({{"class", net.model.class_names[cls]},
                                 {"x0", bx.x0}, {"y0", bx.y0}, {"x1", bx.x1}, {"y1", bx.y1}});
        jsonl += line.dump() + "\n";
    }
    write_file_atomic(dir / "annotations.jsonl", std::span(reinterpret_cast<const std::uint8_t*>(jsonl.data()),
                                                            jsonl.size()));
}

} // namespace rsp::toy
