#include "oracles.hpp"

#include "rsp/errors.hpp"
#include "rsp/evalkit.hpp"
#include "rsp/png_io.hpp"
#include "rsp/toy.hpp"

#include <doctest.h>

#include <cmath>

using namespace rsp;

namespace {

BBoxAnnotation one_box(std::size_t w, std::size_t h, Box b, std::size_t cls = 0) {
    BBoxAnnotation a;
    a.id = "img";
    a.width = w;
    a.height = h;
    a.boxes[cls] = {b};
    a.labels = {cls};
    return a;
}

Tensor peak_at(std::size_t w, std::size_t h, std::size_t x, std::size_t y) {
    Tensor m({h, w});
    m[y * w + x] = 1.0f;
    return m;
}

Mask mask_of(Shape shape, std::vector<std::uint8_t> on) {
    Mask m(std::move(shape));
    m.on = std::move(on);
    return m;
}

std::array<int, 3> pixel(const Tensor& img, std::size_t p) {
    const std::size_t HW = img.dim(1) * img.dim(2);
    return {static_cast<int>(std::lround(img[p] * 255)), static_cast<int>(std::lround(img[HW + p] * 255)),
            static_cast<int>(std::lround(img[2 * HW + p] * 255))};
}

} // namespace

TEST_SUITE("evalkit") {

TEST_CASE("pointing game examples") {
    CHECK(pointing_game(peak_at(10, 10, 5, 5), one_box(10, 10, {3, 3, 8, 8}), 0, 0).hit);
    CHECK_FALSE(pointing_game(peak_at(100, 100, 0, 0), one_box(100, 100, {50, 50, 60, 60}), 0, 15).hit);
    // Exactly tolerance pixels outside the box edge still counts.
    CHECK(pointing_game(peak_at(100, 100, 35, 55), one_box(100, 100, {50, 50, 60, 60}), 0, 15).hit);
    CHECK(pointing_game(peak_at(100, 100, 75, 75), one_box(100, 100, {50, 50, 60, 60}), 0, 15).hit);
    CHECK_FALSE(pointing_game(peak_at(100, 100, 34, 55), one_box(100, 100, {50, 50, 60, 60}), 0, 15).hit);
    CHECK_THROWS_AS(pointing_game(peak_at(10, 10, 5, 5), one_box(10, 10, {3, 3, 8, 8}), 1, 0), InputError);
}

TEST_CASE("argmax tie-break and monotone invariance") {
    Tensor m({3, 4}, {0, 2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 1});
    CHECK(argmax2d(m).x == 1);
    CHECK(argmax2d(m).y == 0);
    std::mt19937_64 rng(4);
    const auto ann = one_box(12, 9, {2, 2, 6, 5});
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor r = oracle::random_tensor({9, 12}, rng);
        Tensor t = r;
        for (auto& v : t.values()) v = std::exp(3.0f * v) - 7.0f;
        const auto a = pointing_game(r, ann, 0, 1), b = pointing_game(t, ann, 0, 1);
        CHECK(a.hit == b.hit);
        CHECK(a.argmax.x == b.argmax.x);
        CHECK(a.argmax.y == b.argmax.y);
    }
}

TEST_CASE("positive masks") {
    const Tensor m({1, 3}, {-1.0f, 1.0f, 3.0f});
    CHECK(positive_mask(m, false).on == std::vector<std::uint8_t>{0, 1, 1});
    CHECK(positive_mask(m, true).on == std::vector<std::uint8_t>{0, 0, 1});
    const Tensor neg({2, 2}, -1.0f);
    CHECK(positive_mask(neg, false).count() == 0);
    CHECK(positive_mask(neg, true).count() == 0);
}

TEST_CASE("box IoU") {
    const auto ann = one_box(4, 2, {0, 0, 1, 1});
    const Mask box = rasterize_boxes(ann, 0);
    CHECK(box.on == std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 0, 0});
    CHECK(miou_bbox(box, ann, 0) == 1.0);
    CHECK(miou_bbox(mask_of({2, 4}, {0, 0, 1, 1, 0, 0, 1, 1}), ann, 0) == 0.0);
    // Shift by one column: 2 shared pixels, 6 in the union.
    const Mask half = mask_of({2, 4}, {0, 1, 1, 0, 0, 1, 1, 0});
    CHECK(miou_bbox(half, ann, 0) == doctest::Approx(1.0 / 3.0));
    CHECK(mask_iou(half, box) == mask_iou(box, half));
    CHECK(mask_iou(Mask({2, 4}), Mask({2, 4})) == 0.0);

    BBoxAnnotation two = ann;
    two.boxes[0].push_back({3, 0, 3, 1});
    CHECK(rasterize_boxes(two, 0).count() == 6);

    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> bit(0, 1);
    for (int trial = 0; trial < 50; ++trial) {
        Mask a({5, 5}), b({5, 5});
        for (auto& v : a.on) v = static_cast<std::uint8_t>(bit(rng));
        for (auto& v : b.on) v = static_cast<std::uint8_t>(bit(rng));
        const double iou = mask_iou(a, b);
        CHECK(iou >= 0.0);
        CHECK(iou <= 1.0);
        CHECK(iou == mask_iou(b, a));
    }
}

TEST_CASE("annotation parsing") {
    const std::vector<std::string> names{"cat", "dog"};
    const auto anns = parse_annotations(
        "{\"id\":\"a\",\"width\":10,\"height\":8,\"boxes\":[{\"class\":\"dog\",\"x0\":1,\"y0\":2,\"x1\":3,\"y1\":4}],"
        "\"labels\":[\"dog\"]}\n"
        "\n"
        "{\"id\":\"b\",\"width\":4,\"height\":4,\"boxes\":[{\"class\":0,\"x0\":0,\"y0\":0,\"x1\":3,\"y1\":3}],"
        "\"labels\":[]}\n",
        names);
    REQUIRE(anns.size() == 2);
    CHECK(anns[0].boxes.at(1).front().y1 == 4);
    CHECK(anns[0].labels == std::vector<std::size_t>{1});
    CHECK(anns[1].labels == std::vector<std::size_t>{0});

    try {
        parse_annotations("{\"id\":\"a\",\"width\":4,\"height\":4,\"boxes\":[{\"class\":\"cow\",\"x0\":0,\"y0\":0,"
                          "\"x1\":1,\"y1\":1}],\"labels\":[]}\n",
                          names);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("cow") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_annotations("{\"id\":\"a\",\"width\":4,\"height\":4,\"boxes\":[{\"class\":0,\"x0\":0,"
                                      "\"y0\":0,\"x1\":4,\"y1\":1}],\"labels\":[]}\n",
                                      names),
                    InputError);
    CHECK_THROWS_AS(parse_annotations("not json\n", names), InputError);
}

TEST_CASE("csv rows") {
    EvalRecord r{"img7", "dog", EvalMode::labels, true, 0.5, 1.0 / 3.0, {4, 9}};
    CHECK(to_csv_row(r) == "img7,dog,L,1,0.500000,0.333333,4,9");
    CHECK(kEvalCsvHeader == "id,class,mode,hit,iou_raw,iou_thr,argmax_x,argmax_y");
}

TEST_CASE("spearman") {
    const std::vector<float> a{1, 2, 3, 4, 5};
    const std::vector<float> rev{5, 4, 3, 2, 1};
    CHECK(spearman(a, a) == 1.0);
    CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-12));
    const std::vector<float> c(5, 2.0f);
    CHECK(spearman(a, c) == 0.0);
    // Tied values share the average rank; the result is the Pearson correlation of the ranks.
    const std::vector<float> x{1, 1, 2, 3};
    const std::vector<float> y{1, 2, 3, 4};
    const double mx = 2.5, my = 2.5;
    const double rx[] = {1.5, 1.5, 3, 4}, ry[] = {1, 2, 3, 4};
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 4; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    CHECK(spearman(x, y) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-12));
    CHECK_THROWS_AS(spearman(a, std::vector<float>{1, 2}), ShapeError);
}

TEST_CASE("sanity curve starts at one") {
    auto net = toy::two_quadrant_net(16);
    const auto sample = toy::two_quadrant_sample(16, 2, 0);
    const Tensor x = normalize_image(net.model, sample.image);
    const auto order = learnable_layers_from_end(net.model);
    const auto curve = sanity_curve(net.model, net.weights, x, {0, {1}, HostileMode::predicted}, {}, order, 5);
    REQUIRE(curve.size() == order.size() + 1);
    CHECK(curve.front().layer == "none");
    CHECK(curve.front().rho == 1.0);
    for (std::size_t k = 1; k < curve.size(); ++k) {
        CHECK(curve[k].layer == order[k - 1]);
        CHECK(curve[k].rho >= -1.0);
        CHECK(curve[k].rho <= 1.0);
    }
    const auto again = sanity_curve(net.model, net.weights, x, {0, {1}, HostileMode::predicted}, {}, order, 5);
    for (std::size_t k = 0; k < curve.size(); ++k) CHECK(curve[k].rho == again[k].rho);
}

TEST_CASE("seismic colormap and heatmaps") {
    CHECK(seismic(0.0) == std::array<std::uint8_t, 3>{255, 255, 255});
    CHECK(seismic(1.0) == std::array<std::uint8_t, 3>{128, 0, 0});
    CHECK(seismic(-1.0) == std::array<std::uint8_t, 3>{0, 0, 77});
    CHECK(seismic(0.5) == std::array<std::uint8_t, 3>{255, 0, 0});
    CHECK(seismic(-0.5) == std::array<std::uint8_t, 3>{0, 0, 255});

    const Tensor zero({3, 5});
    const Tensor z = decode_png(render_heatmap(zero));
    REQUIRE(z.shape() == Shape{3, 3, 5});
    for (std::size_t p = 0; p < 15; ++p) CHECK(pixel(z, p) == std::array<int, 3>{255, 255, 255});

    const Tensor pm({1, 2}, {-4.0f, 4.0f});
    const Tensor d = decode_png(render_heatmap(pm));
    CHECK(pixel(d, 0) == std::array<int, 3>{0, 0, 77});
    CHECK(pixel(d, 1) == std::array<int, 3>{128, 0, 0});

    std::mt19937_64 rng(2);
    const Tensor map = oracle::random_tensor({6, 7}, rng);
    const Tensor under = oracle::random_tensor({1, 6, 7}, rng, 0.0, 1.0);
    CHECK(render_heatmap(map, &under) == render_heatmap(map, &under));
    CHECK(render_heatmap(map, &under) != render_heatmap(map));
    // Blending a black underlay halves the neutral white.
    const Tensor black({3, 3, 5});
    const Tensor blended = decode_png(render_heatmap(zero, &black));
    CHECK(std::abs(pixel(blended, 0)[0] - 128) <= 1);
    CHECK_THROWS_AS(render_heatmap(map, &black), ShapeError);
}

} // TEST_SUITE
