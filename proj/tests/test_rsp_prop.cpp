#include "oracles.hpp"

#include "rsp/errors.hpp"
#include "rsp/evalkit.hpp"
#include "rsp/rsp_prop.hpp"
#include "rsp/toy.hpp"

#include <doctest.h>

#include <cmath>

using namespace rsp;

namespace {

LayerSpec linear_layer(std::size_t in, std::size_t out) {
    LayerSpec l;
    l.name = "fc";
    l.kind = LayerKind::linear;
    l.fc = {in, out};
    return l;
}

LayerSpec conv_layer(ConvGeometry g) {
    LayerSpec l;
    l.name = "conv";
    l.kind = LayerKind::conv;
    l.conv = g;
    l.weight_refs = {{"weight", "conv.w"}};
    return l;
}

SectionedRelevanceMap sectioned(Tensor t) { return SectionedRelevanceMap::from_values(std::move(t)); }

double region_sum(const Tensor& map, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    const std::size_t W = map.dim(1);
    double s = 0.0;
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) s += map[y * W + x];
    return s;
}

ClassSpec top_spec(const ActivationTrace& trace, std::size_t classes) {
    const auto y = trace.logits().values();
    ClassSpec spec;
    spec.target = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
    for (std::size_t c = 0; c < classes; ++c)
        if (c != spec.target && y[c] > 0.0f) spec.hostiles.push_back(c);
    return spec;
}

} // namespace

TEST_SUITE("rsp_prop") {

TEST_CASE("linear hand example") {
    const Tensor x({1, 2}, {1.0f, 2.0f});
    const LayerSpec fc = linear_layer(2, 1);
    const auto r = sectioned(Tensor({1, 1}, 3.0f));
    const SectionalNu nu = sectional_nu(x, fc, r);
    CHECK(nu.positive.bitwise_equal(Tensor({1, 2}, {3.0f, 6.0f})));
    CHECK(nu.negative.abs_sum() == 0.0);
    const Tensor r_hat = propagate_layer(x, fc, nu, r, 1e-9);
    CHECK(r_hat[0] == 0.6f);
    CHECK(r_hat[1] == 2.4f);
    CHECK(r_hat.sum() == doctest::Approx(3.0).epsilon(1e-7));

    const auto zero = sectioned(Tensor({1, 1}));
    const SectionalNu z = sectional_nu(x, fc, zero);
    CHECK(z.positive.abs_sum() == 0.0);
    CHECK(z.negative.abs_sum() == 0.0);
}

TEST_CASE("sectional nu matches finite differences on a conv") {
    std::mt19937_64 rng(12);
    ConvGeometry g{2, 3, 3, 3, 1, 1};
    const LayerSpec conv = conv_layer(g);
    const Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng, 0.0, 1.0);
    const Tensor w = oracle::random_tensor(g.weight_shape(), rng);
    const auto r = sectioned(oracle::random_tensor({1, 3, 5, 5}, rng));
    const SectionalNu nu = sectional_nu(x, conv, r);
    for (int sign : {1, -1}) {
        const Mask& mask = sign > 0 ? r.positive : r.negative;
        auto f = [&](const std::vector<double>& wv) {
            const auto y = oracle::conv_d(oracle::from(x), oracle::to_float({w.shape(), wv}), nullptr, g);
            double s = 0.0;
            for (std::size_t i = 0; i < y.v.size(); ++i)
                if (mask.on[i]) s += y.v[i] * r.values[i];
            return s;
        };
        const auto fd = oracle::central_diff(f, oracle::as_double(w), 1e-3);
        CHECK(oracle::rel_err(sign > 0 ? nu.positive : nu.negative, fd) <= 1e-2);
    }
    LayerSpec relu;
    relu.kind = LayerKind::relu;
    CHECK_THROWS_AS(sectional_nu(x, relu, r), InputError);
}

TEST_CASE("propagate_layer conserves and is positively homogeneous") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        ConvGeometry g{3, 4, 3, 3, 1 + static_cast<std::size_t>(trial % 2), 1};
        const LayerSpec conv = conv_layer(g);
        Tensor x = oracle::random_tensor({1, 3, 7, 7}, rng, -0.5, 1.0);
        x = relu(x);
        const auto r = sectioned(oracle::random_tensor(g.output_shape(x.shape()), rng));
        const Tensor r_hat = propagate_layer(x, conv, sectional_nu(x, conv, r), r, 1e-9);
        CHECK(std::fabs(r_hat.sum() - r.values.sum()) <= 1e-6 * r.values.abs_sum());
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x[i] == 0.0f) CHECK(r_hat[i] == 0.0f);

        const double c = 3.7;
        const auto rc = sectioned(scale(r.values, c));
        const Tensor scaled = propagate_layer(x, conv, sectional_nu(x, conv, rc), rc, 1e-9);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            num += std::pow(scaled[i] - c * r_hat[i], 2);
            den += std::pow(c * r_hat[i], 2);
        }
        CHECK(std::sqrt(num / den) <= 1e-5);
    }
}

TEST_CASE("propagate_layer with a dead input") {
    const LayerSpec fc = linear_layer(3, 2);
    const Tensor x({1, 3});
    const auto r = sectioned(Tensor({1, 2}, {1.0f, -0.5f}));
    CHECK(propagate_layer(x, fc, sectional_nu(x, fc, r), r, 1e-9).abs_sum() == 0.0);
}

TEST_CASE("weightless rules") {
    SUBCASE("maxpool routes to the winner") {
        LayerSpec l;
        l.kind = LayerKind::maxpool;
        l.pool = {2, 2};
        const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
        const auto pooled = maxpool2d(x, l.pool);
        const Tensor* in[] = {&x};
        const auto out = propagate_weightless(l, in, Tensor({1, 1, 1, 1}, 5.0f), &pooled.trace);
        REQUIRE(out.size() == 1);
        CHECK(out[0].bitwise_equal(Tensor({1, 1, 2, 2}, {0, 0, 0, 5})));
    }
    SUBCASE("avgpool splits a uniform window evenly") {
        LayerSpec l;
        l.kind = LayerKind::avgpool;
        l.pool = {2, 2};
        const Tensor x({1, 1, 2, 2}, 0.5f);
        const Tensor* in[] = {&x};
        const auto out = propagate_weightless(l, in, Tensor({1, 1, 1, 1}, 4.0f), nullptr);
        CHECK(out[0].bitwise_equal(Tensor({1, 1, 2, 2}, 1.0f)));
        const Tensor y({1, 1, 2, 2}, {1, 3, 0, 0});
        const Tensor* in2[] = {&y};
        const auto prop = propagate_weightless(l, in2, Tensor({1, 1, 1, 1}, 4.0f), nullptr);
        CHECK(prop[0].bitwise_equal(Tensor({1, 1, 2, 2}, {1, 3, 0, 0})));
    }
    SUBCASE("global average pool") {
        LayerSpec l;
        l.kind = LayerKind::global_avg_pool;
        const Tensor x({1, 2, 1, 2}, {1, 1, 2, 6});
        const Tensor* in[] = {&x};
        const auto out = propagate_weightless(l, in, Tensor({1, 2}, {2.0f, 8.0f}), nullptr);
        CHECK(out[0].bitwise_equal(Tensor({1, 2, 1, 2}, {1, 1, 2, 6})));
    }
    SUBCASE("residual branches") {
        LayerSpec l;
        l.kind = LayerKind::residual_add;
        const Tensor a({1, 1, 1, 2}, {2.0f, 1.0f});
        const Tensor b({1, 1, 1, 2}, {2.0f, -3.0f});
        const Tensor* in[] = {&a, &b};
        const auto out = propagate_weightless(l, in, Tensor({1, 1, 1, 2}, {4.0f, 8.0f}), nullptr);
        REQUIRE(out.size() == 2);
        CHECK(out[0].bitwise_equal(Tensor({1, 1, 1, 2}, {2.0f, 2.0f})));
        CHECK(out[1].bitwise_equal(Tensor({1, 1, 1, 2}, {2.0f, 6.0f})));
    }
    SUBCASE("relu and flatten") {
        LayerSpec l;
        l.kind = LayerKind::relu;
        const Tensor x({1, 3}, {1.0f, 0.0f, 2.0f});
        const Tensor* in[] = {&x};
        CHECK(propagate_weightless(l, in, Tensor({1, 3}, {0.5f, 0.0f, -1.0f}), nullptr)[0].bitwise_equal(
            Tensor({1, 3}, {0.5f, 0.0f, -1.0f})));
        l.kind = LayerKind::flatten;
        const Tensor y({1, 1, 1, 3});
        const Tensor* in2[] = {&y};
        CHECK(propagate_weightless(l, in2, Tensor({1, 3}, 1.0f), nullptr)[0].shape() == y.shape());
    }
    SUBCASE("weighted and batchnorm layers are rejected") {
        const Tensor x({1, 2});
        const Tensor* in[] = {&x};
        CHECK_THROWS_AS(propagate_weightless(linear_layer(2, 1), in, Tensor({1, 1}), nullptr), InputError);
        LayerSpec bn;
        bn.kind = LayerKind::batchnorm;
        CHECK_THROWS_AS(propagate_weightless(bn, in, x, nullptr), InputError);
    }
}

TEST_CASE("uniform shift") {
    const Tensor r_hat({3}, {1.0f, 0.5f, 0.0f});
    const Tensor x({3}, {0.3f, 2.0f, 0.0f});
    const Tensor shifted = uniform_shift(r_hat, x, 1.5);
    CHECK(shifted.bitwise_equal(Tensor({3}, {1.25f, 0.25f, 0.0f})));

    const Tensor flat({4}, 0.75f);
    CHECK(uniform_shift(flat, Tensor({4}, 1.0f), 3.0).bitwise_equal(flat));

    CHECK_THROWS_AS(uniform_shift(r_hat, Tensor({3}), 1.5), AttributionError);

    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor xs = relu(oracle::random_tensor({1, 4, 5, 5}, rng));
        Tensor r = oracle::random_tensor(xs.shape(), rng);
        for (std::size_t i = 0; i < r.size(); ++i)
            if (xs[i] == 0.0f) r[i] = 0.0f;
        const double S = r.sum();
        const Tensor out = uniform_shift(r, xs, S);
        CHECK(std::fabs(out.sum() - S) <= 1e-6 * std::max(1.0, r.abs_sum()));
        for (std::size_t i = 0; i < r.size(); ++i)
            if (xs[i] == 0.0f) CHECK(out[i] == 0.0f);
    }
}

TEST_CASE("input rule") {
    const LayerSpec conv = conv_layer({1, 1, 1, 1, 1, 0});
    WeightArchive w;
    w.insert("conv.w", Tensor({1, 1, 1, 1}, 1.0f));
    const std::vector<float> lo{0.0f}, hi{1.0f};
    const Tensor x({1, 1, 1, 1}, 0.5f);
    const Tensor px = zbeta_input(x, conv, w, sectioned(Tensor({1, 1, 1, 1}, 0.7f)), lo, hi, 1e-9);
    CHECK(px[0] == doctest::Approx(0.7).epsilon(1e-7));
    CHECK(zbeta_input(x, conv, w, sectioned(Tensor({1, 1, 1, 1})), lo, hi, 1e-9).abs_sum() == 0.0);

    std::mt19937_64 rng(8);
    ConvGeometry g{3, 4, 3, 3, 1, 1};
    const LayerSpec big = conv_layer(g);
    WeightArchive wb;
    wb.insert("conv.w", oracle::random_tensor(g.weight_shape(), rng));
    const std::vector<float> l3(3, -2.0f), h3(3, 2.0f);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor xi = oracle::random_tensor({1, 3, 6, 6}, rng, -2.0, 2.0);
        const auto r = sectioned(oracle::random_tensor({1, 4, 6, 6}, rng));
        const Tensor pix = zbeta_input(xi, big, wb, r, l3, h3, 1e-9);
        CHECK(std::fabs(pix.sum() - r.values.sum()) <= 1e-4 * r.values.abs_sum());
    }

    LayerSpec fc = linear_layer(1, 1);
    CHECK_THROWS_AS(zbeta_input(x, fc, w, sectioned(Tensor({1, 1}, 1.0f)), lo, hi, 1e-9), InputError);
}

TEST_CASE("configuration validation") {
    PropagationConfig c;
    CHECK_NOTHROW(c.validate());
    c.epsilon = 0.0;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = {};
    c.zbeta_low = {1.0f};
    c.zbeta_high = {0.0f};
    CHECK_THROWS_AS(c.validate(), InputError);
}

TEST_CASE("end-to-end conservation, sections and inactive neurons") {
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; checked < 15; ++seed) {
        auto net = toy::random_net(seed);
        const Tensor x = normalize_image(net.model, toy::random_image(net.model, seed));
        const auto trace = forward_trace(net.model, net.weights, x);
        const ClassSpec spec = top_spec(trace, net.model.class_count());
        for (bool per_layer : {true, false}) {
            PropagationConfig cfg;
            cfg.per_layer_purge = per_layer;
            RspResult res;
            try {
                res = run_rsp(net.model, net.weights, x, spec, cfg);
            } catch (const AttributionError&) {
                continue;
            }
            ++checked;
            CHECK(res.initial_sum == doctest::Approx(1.0).epsilon(1e-6));
            CHECK_FALSE(res.conservation_failure(1e-4).has_value());
            for (const auto& entry : res.audit) {
                CHECK(std::fabs(entry.frontier_sum - 1.0) <= 1e-4);
                CHECK(entry.relevance.well_formed());
                if (entry.layer == kInputName) continue;
                // Only rectified units can be inactive; residual branches carry signed outputs.
                const std::size_t idx = net.model.index_of(entry.layer);
                const bool gated = net.model.layers[idx].kind == LayerKind::relu ||
                                   (idx + 1 < net.model.layers.size() &&
                                    net.model.layers[idx + 1].kind == LayerKind::relu &&
                                    net.model.layers[idx + 1].inputs == std::vector<std::string>{entry.layer});
                if (!gated) continue;
                const Tensor& out = trace.outputs[idx];
                for (std::size_t i = 0; i < out.size(); ++i)
                    if (!(out[i] > 0.0f)) CHECK(entry.relevance.values[i] == 0.0f);
            }
            CHECK(res.pixel_map.shape() == Shape{net.model.input_shape[1], net.model.input_shape[2]});
        }
    }
}

TEST_CASE("initial relevance scaling") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto net = toy::random_net(seed);
        const Tensor x = normalize_image(net.model, toy::random_image(net.model, seed));
        const ClassSpec spec = top_spec(forward_trace(net.model, net.weights, x), net.model.class_count());
        PropagationConfig a, b;
        b.initial_relevance = 2.5;
        try {
            const Tensor ma = run_rsp(net.model, net.weights, x, spec, a).pixel_map;
            const Tensor mb = run_rsp(net.model, net.weights, x, spec, b).pixel_map;
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < ma.size(); ++i) {
                num += std::pow(mb[i] - 2.5 * ma[i], 2);
                den += std::pow(2.5 * ma[i], 2);
            }
            CHECK(std::sqrt(num / den) <= 1e-5);
            CHECK(argmax2d(ma).x == argmax2d(mb).x);
            CHECK(argmax2d(ma).y == argmax2d(mb).y);
        } catch (const AttributionError&) {
        }
    }
}

TEST_CASE("two-quadrant construction") {
    auto net = toy::two_quadrant_net(32);
    for (std::size_t s = 0; s < 10; ++s) {
        const auto sample = toy::two_quadrant_sample(32, 5, s);
        const Tensor x = normalize_image(net.model, sample.image);
        const Tensor bright = run_rsp(net.model, net.weights, x, {0, {1}, HostileMode::predicted}, {}).pixel_map;
        const Tensor dark = run_rsp(net.model, net.weights, x, {1, {0}, HostileMode::predicted}, {}).pixel_map;
        CHECK(region_sum(bright, 0, 16, 0, 16) > 0.0);
        CHECK(region_sum(bright, 16, 32, 16, 32) < 0.0);
        CHECK(region_sum(dark, 16, 32, 16, 32) > 0.0);
        CHECK(region_sum(dark, 0, 16, 0, 16) < 0.0);
    }
}

TEST_CASE("single object without hostiles") {
    auto net = toy::two_quadrant_net(32);
    for (std::size_t s = 0; s < 10; ++s) {
        auto sample = toy::two_quadrant_sample(32, 8, s);
        // Erase the dark square so only the bright one remains.
        const Box& dark = sample.annotation.boxes.at(1).front();
        for (std::size_t y = dark.y0; y <= dark.y1; ++y)
            for (std::size_t x = dark.x0; x <= dark.x1; ++x) sample.image[y * 32 + x] = 0.5f;
        const Tensor map =
            run_rsp(net.model, net.weights, normalize_image(net.model, sample.image), {0, {}, HostileMode::predicted}, {})
                .pixel_map;
        const Box& box = sample.annotation.boxes.at(0).front();
        const Point p = argmax2d(map);
        CHECK((p.x + 1 >= box.x0 && p.x <= box.x1 + 1 && p.y + 1 >= box.y0 && p.y <= box.y1 + 1));
    }
}

TEST_CASE("input feeding a weightless layer is rejected") {
    auto net = toy::random_net(0);
    // Insert a relu between the input and the first conv.
    LayerSpec pre;
    pre.name = "pre";
    pre.kind = LayerKind::relu;
    pre.inputs = {"input"};
    net.model.layers.front().inputs = {"pre"};
    net.model.layers.insert(net.model.layers.begin(), pre);
    const Tensor x = normalize_image(net.model, toy::random_image(net.model, 0));
    const ClassSpec spec = top_spec(forward_trace(net.model, net.weights, x), net.model.class_count());
    CHECK_THROWS_AS(run_rsp(net.model, net.weights, x, spec, {}), InputError);
}

} // TEST_SUITE
