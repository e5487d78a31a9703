#include "oracles.hpp"

#include "rsp/errors.hpp"
#include "rsp/model.hpp"
#include "rsp/toy.hpp"

#include <doctest.h>

#include <cmath>

using namespace rsp;
using nlohmann::json;

namespace {

ModelDescriptor identity_model() {
    return model_from_json(json::parse(R"({
        "format": "rsp-model/1",
        "input_shape": [1, 5, 4],
        "class_names": ["only"],
        "feature_end": "c",
        "layers": [
            {"name": "c", "kind": "conv", "in_channels": 1, "out_channels": 1, "kernel": 1,
             "weights": {"weight": "c.w"}},
            {"name": "gap", "kind": "global_avg_pool"}
        ]
    })"));
}

// conv -> batchnorm -> relu -> conv -> batchnorm -> relu -> gap -> linear
json bn_descriptor(double eps) {
    json doc = json::parse(R"({
        "format": "rsp-model/1",
        "input_shape": [2, 6, 6],
        "class_names": ["p", "q"],
        "feature_end": "r2",
        "layers": [
            {"name": "c1", "kind": "conv", "in_channels": 2, "out_channels": 3, "kernel": 3, "padding": 1,
             "weights": {"weight": "c1.w", "bias": "c1.b"}},
            {"name": "bn1", "kind": "batchnorm",
             "weights": {"gamma": "bn1.g", "beta": "bn1.b", "mean": "bn1.m", "var": "bn1.v"}},
            {"name": "r1", "kind": "relu"},
            {"name": "c2", "kind": "conv", "in_channels": 3, "out_channels": 3, "kernel": 3, "stride": 2,
             "weights": {"weight": "c2.w"}},
            {"name": "bn2", "kind": "batchnorm",
             "weights": {"gamma": "bn2.g", "beta": "bn2.b", "mean": "bn2.m", "var": "bn2.v"}},
            {"name": "r2", "kind": "relu"},
            {"name": "gap", "kind": "global_avg_pool"},
            {"name": "fc", "kind": "linear", "in_features": 3, "out_features": 2,
             "weights": {"weight": "fc.w", "bias": "fc.b"}}
        ]
    })");
    for (auto& l : doc["layers"])
        if (l["kind"] == "batchnorm") l["eps"] = eps;
    return doc;
}

void expect_input_error(json doc, const std::string& fragment) {
    try {
        model_from_json(doc);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
}

double max_rel(const Tensor& a, const oracle::DTensor& b) {
    double worst = 0.0, scale = 1e-6;
    for (double v : b.v) scale = std::max(scale, std::fabs(v));
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b.v[i]) / scale);
    return worst;
}

} // namespace

TEST_SUITE("model") {

TEST_CASE("descriptor JSON round-trip") {
    const ModelDescriptor m = model_from_json(oracle::tiny_descriptor());
    CHECK(m.layers.size() == 4);
    CHECK(m.input_shape == Shape{1, 6, 6});
    CHECK(m.layers[1].inputs == std::vector<std::string>{"c1"});
    CHECK(m.layers[0].inputs == std::vector<std::string>{"input"});
    CHECK(m.normalization.mean == std::vector<float>{0.0f});
    const json once = model_to_json(m);
    CHECK(model_to_json(model_from_json(once)) == once);
    const json bn = model_to_json(model_from_json(bn_descriptor(1e-3)));
    CHECK(model_to_json(model_from_json(bn)) == bn);
}

TEST_CASE("descriptor save and load") {
    const auto path = std::filesystem::temp_directory_path() / "rsp_model_test.json";
    const ModelDescriptor m = model_from_json(bn_descriptor(1e-5));
    save_model(m, path);
    CHECK(model_to_json(load_model(path)) == model_to_json(m));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_model(path), InputError);
}

TEST_CASE("descriptor errors") {
    json doc = oracle::tiny_descriptor();
    SUBCASE("format") {
        doc["format"] = "rsp-model/2";
        expect_input_error(doc, "format");
    }
    SUBCASE("unknown kind is rejected") {
        doc["layers"][1]["kind"] = "softmax";
        expect_input_error(doc, "unknown layer kind 'softmax'");
    }
    SUBCASE("groups") {
        doc["layers"][0]["groups"] = 2;
        expect_input_error(doc, "grouped");
    }
    SUBCASE("dilation") {
        doc["layers"][0]["dilation"] = 2;
        expect_input_error(doc, "dilated");
    }
    SUBCASE("duplicate names") {
        doc["layers"][1]["name"] = "c1";
        expect_input_error(doc, "duplicate layer name");
    }
    SUBCASE("feature_end kind") {
        doc["feature_end"] = "gap";
        expect_input_error(doc, "feature_end");
    }
    SUBCASE("class count") {
        doc["class_names"] = {"a", "b"};
        expect_input_error(doc, "output layer");
    }
    SUBCASE("missing field") {
        doc["layers"][3].erase("in_features");
        expect_input_error(doc, "in_features");
    }
    SUBCASE("dangling input") {
        doc["layers"][2]["inputs"] = {"nowhere"};
        expect_input_error(doc, "nowhere");
    }
    SUBCASE("missing weight role") {
        doc["layers"][0]["weights"].erase("weight");
        expect_input_error(doc, "weight");
    }
}

TEST_CASE("identity net logits equal the global average") {
    const ModelDescriptor m = identity_model();
    WeightArchive w;
    w.insert("c.w", Tensor({1, 1, 1, 1}, 1.0f));
    std::mt19937_64 rng(2);
    Tensor v = oracle::random_tensor({1, 1, 5, 4}, rng);
    const auto trace = forward_trace(m, w, v);
    CHECK(trace.logits().bitwise_equal(global_avg_pool(v)));
}

TEST_CASE("zero input and zero biases give zero logits") {
    auto net = toy::random_net(4);
    for (const auto& [name, t] : net.weights.entries())
        if (name.ends_with(".bias")) net.weights.set(name, Tensor(t.shape()));
    const auto trace = forward_trace(net.model, net.weights, Tensor(net.model.batched_input_shape()));
    CHECK(trace.logits().abs_sum() == 0.0);
}

TEST_CASE("forward matches the double-precision reference") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto net = toy::random_net(seed);
        const Tensor x = normalize_image(net.model, toy::random_image(net.model, seed));
        const auto trace = forward_trace(net.model, net.weights, x);
        const auto ref = oracle::forward(net.model, net.weights, oracle::from(x));
        REQUIRE(trace.outputs.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(trace.outputs[i].shape() == ref[i].shape);
            CHECK_MESSAGE(max_rel(trace.outputs[i], ref[i]) <= 1e-5, net.model.layers[i].name);
        }
        // Determinism and residual bookkeeping.
        const auto again = forward_trace(net.model, net.weights, x);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(trace.outputs[i].bitwise_equal(again.outputs[i]));
            if (net.model.layers[i].kind == LayerKind::residual_add)
                CHECK(trace.outputs[i].bitwise_equal(
                    add(layer_input(net.model, trace, i, 0), layer_input(net.model, trace, i, 1))));
        }
        const auto shapes = net.model.infer_shapes();
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(shapes[i] == trace.outputs[i].shape());
    }
}

TEST_CASE("input gradient matches finite differences") {
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        auto net = toy::random_net(seed);
        const Tensor x = normalize_image(net.model, toy::random_image(net.model, seed));
        const auto trace = forward_trace(net.model, net.weights, x);
        for (std::size_t cls = 0; cls < net.model.class_count(); ++cls) {
            const Tensor g = class_input_gradient(net.model, net.weights, trace, cls);
            auto f = [&](const std::vector<double>& xv) {
                return oracle::forward(net.model, net.weights, {x.shape(), xv}).back().v[cls];
            };
            const auto fd = oracle::central_diff(f, oracle::as_double(x), 1e-5);
            CHECK_MESSAGE(oracle::rel_err(g, fd, 1e-6) <= 1e-2, "seed " << seed << " class " << cls);
        }
    }
}

TEST_CASE("normalize_image") {
    auto net = toy::two_quadrant_net(16);
    Tensor raw({1, 16, 16}, 1.0f);
    raw[0] = 0.0f;
    const Tensor x = normalize_image(net.model, raw);
    CHECK(x.shape() == Shape{1, 1, 16, 16});
    CHECK(x[0] == -2.0f);
    CHECK(x[1] == 2.0f);
    CHECK_THROWS_AS(normalize_image(net.model, Tensor({1, 8, 8})), ShapeError);
}

TEST_CASE("batchnorm folding") {
    SUBCASE("identity batchnorm leaves the conv unchanged") {
        const ModelDescriptor m = model_from_json(bn_descriptor(0.0));
        WeightArchive w = oracle::random_weights(m, 5);
        for (const char* bn : {"bn1", "bn2"}) {
            const std::string p(bn);
            w.set(p + ".g", Tensor({3}, 1.0f));
            w.set(p + ".b", Tensor({3}, 0.0f));
            w.set(p + ".m", Tensor({3}, 0.0f));
            w.set(p + ".v", Tensor({3}, 1.0f));
        }
        const auto folded = fold_batchnorm(m, w);
        CHECK_FALSE(folded.model.has_batchnorm());
        CHECK(folded.weights.at("c1.w").bitwise_equal(w.at("c1.w")));
        CHECK(folded.weights.at("c1.b").bitwise_equal(w.at("c1.b")));
        CHECK(folded.weights.at("c2.w").bitwise_equal(w.at("c2.w")));
        CHECK_FALSE(folded.weights.contains("bn1.g"));
    }
    SUBCASE("gamma 2 doubles a 1x1 conv") {
        const ModelDescriptor m = model_from_json(json::parse(R"({
            "format": "rsp-model/1", "input_shape": [1, 2, 2], "class_names": ["x"], "feature_end": "c",
            "layers": [
                {"name": "c", "kind": "conv", "in_channels": 1, "out_channels": 1, "kernel": 1,
                 "weights": {"weight": "c.w"}},
                {"name": "bn", "kind": "batchnorm", "eps": 0,
                 "weights": {"gamma": "g", "beta": "b", "mean": "m", "var": "v"}},
                {"name": "gap", "kind": "global_avg_pool"}
            ]})"));
        WeightArchive w;
        w.insert("c.w", Tensor({1, 1, 1, 1}, 0.75f));
        w.insert("g", Tensor({1}, 2.0f));
        w.insert("b", Tensor({1}, 0.0f));
        w.insert("m", Tensor({1}, 0.0f));
        w.insert("v", Tensor({1}, 1.0f));
        const auto folded = fold_batchnorm(m, w);
        CHECK(folded.weights.at("c.w")[0] == 1.5f);
        CHECK(folded.model.feature_end == "c");
    }
    SUBCASE("random batchnorm preserves the forward pass") {
        const ModelDescriptor m = model_from_json(bn_descriptor(1e-5));
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const WeightArchive w = oracle::random_weights(m, seed);
            const auto folded = fold_batchnorm(m, w);
            std::mt19937_64 rng(seed);
            const Tensor x = oracle::random_tensor(m.batched_input_shape(), rng);
            const Tensor a = forward_trace(m, w, x).logits();
            const Tensor b = forward_trace(folded.model, folded.weights, x).logits();
            for (std::size_t i = 0; i < a.size(); ++i)
                CHECK(std::fabs(a[i] - b[i]) <= 1e-5 * std::max(1.0f, std::fabs(a[i])));
        }
    }
    SUBCASE("batchnorm without a conv is rejected") {
        const ModelDescriptor m = model_from_json(json::parse(R"({
            "format": "rsp-model/1", "input_shape": [1, 2, 2], "class_names": ["x"], "feature_end": "c",
            "layers": [
                {"name": "bn", "kind": "batchnorm",
                 "weights": {"gamma": "g", "beta": "b", "mean": "m", "var": "v"}},
                {"name": "c", "kind": "conv", "in_channels": 1, "out_channels": 1, "kernel": 1,
                 "weights": {"weight": "c.w"}},
                {"name": "gap", "kind": "global_avg_pool"}
            ]})"));
        CHECK_THROWS_AS(fold_batchnorm(m, oracle::random_weights(m, 1)), InputError);
    }
}

TEST_CASE("cascading randomization scope and determinism") {
    const ModelDescriptor m = model_from_json(oracle::tiny_descriptor());
    const WeightArchive w = oracle::random_weights(m, 9);
    const auto order = learnable_layers_from_end(m);
    CHECK(order == std::vector<std::string>{"fc", "c1"});

    const WeightArchive head = randomize_cascading(m, w, "fc", 42);
    CHECK(head.at("c1.w").bitwise_equal(w.at("c1.w")));
    CHECK(head.at("c1.b").bitwise_equal(w.at("c1.b")));
    CHECK_FALSE(head.at("fc.w").bitwise_equal(w.at("fc.w")));
    CHECK_FALSE(head.at("fc.b").bitwise_equal(w.at("fc.b")));

    const WeightArchive all = randomize_cascading(m, w, "c1", 42);
    for (const auto& [name, t] : w.entries()) CHECK_FALSE(all.at(name).bitwise_equal(t));
    // Deeper cascades extend shallower ones.
    CHECK(all.at("fc.w").bitwise_equal(head.at("fc.w")));

    CHECK(write_archive(randomize_cascading(m, w, "c1", 42)) == write_archive(all));
    CHECK_FALSE(randomize_cascading(m, w, "c1", 43).bitwise_equal(all));
    CHECK_THROWS_AS(randomize_cascading(m, w, "nope", 1), InputError);
}

TEST_CASE("randomized weights have the fan-in scale") {
    auto net = toy::sanity_net(32, 64);
    const WeightArchive r = randomize_cascading(net.model, net.weights, "conv1", 3);
    const Tensor& w = r.at("conv1.weight");
    double sq = 0.0, mean = 0.0;
    for (float v : w.values()) {
        mean += v;
        sq += static_cast<double>(v) * v;
    }
    mean /= static_cast<double>(w.size());
    const double sd = std::sqrt(sq / static_cast<double>(w.size()) - mean * mean);
    CHECK(std::fabs(mean) < 0.05);
    CHECK(sd == doctest::Approx(1.0 / 3.0).epsilon(0.1));
}

} // TEST_SUITE
