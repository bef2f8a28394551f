#include "doctest.h"

#include "steerfuse/augment/augment.hpp"
#include "steerfuse/vbp/vbp.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <cmath>

using namespace steerfuse;
using namespace steerfuse::arch;
using nn::Tensor;
using steerfuse::testing::random_tensor;

namespace {

Geometry tiny_geometry()
{
    Geometry g;
    g.camera = {3, 12, 14, {{3, 3, 3, 2, 2}, {4, 2, 2, 1, 1}, {3, 2, 2, 1, 1}, {2, 2, 2, 1, 1}, {3, 1, 1, 1, 1}}};
    g.lidar = {4, 6, 11, {{2, 2, 3, 1, 2}, {2, 2, 2, 1, 1}, {3, 1, 1, 1, 1}, {2, 2, 1, 1, 1}, {2, 1, 1, 1, 1}}};
    g.hidden = 5;
    return g;
}

Tensor<float> input(const BlockGeometry& b, Rng& rng)
{
    return nn::cast<float>(random_tensor({1, b.in_channels, b.in_h, b.in_w}, rng));
}

void randomize(Network<float>& net, Rng& rng, double bias_lo = -0.2, double bias_hi = 0.3)
{
    for (auto* p : net.parameters()) {
        const bool bias = p->name.ends_with("bias");
        for (float& v : p->value.data()) {
            v = float(bias ? rng.uniform(bias_lo, bias_hi) : rng.uniform(-0.8, 0.8));
        }
    }
}

/// Input rows/cols reached by output cell range [lo, hi) of the last layer.
std::pair<std::size_t, std::size_t> receptive(std::size_t lo, std::size_t hi, const BlockGeometry& b, bool rows)
{
    for (std::size_t k = b.layers.size(); k-- > 0;) {
        const auto& l = b.layers[k];
        const std::size_t s = rows ? l.stride_h : l.stride_w, kk = rows ? l.kernel_h : l.kernel_w;
        hi = (hi - 1) * s + kk;
        lo = lo * s;
    }
    return {lo, hi};
}

} // namespace

TEST_CASE("upsampling is a transposed unit-kernel convolution")
{
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const ConvLayerGeometry l{1, 1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(3), 1 + rng.index(3)};
        const std::size_t h = 1 + rng.index(5), w = 1 + rng.index(6);
        Tensor<float> m({h, w});
        for (float& v : m.data()) {
            v = float(rng.uniform());
        }
        const std::size_t oh = (h - 1) * l.stride_h + l.kernel_h + rng.index(2);
        const std::size_t ow = (w - 1) * l.stride_w + l.kernel_w + rng.index(2);
        const Tensor<float> up = vbp::upsample(m, l, oh, ow);
        // Gather form: each output cell sums the inputs whose footprint covers it.
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (std::size_t i = 0; i < h; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        if (y >= i * l.stride_h && y < i * l.stride_h + l.kernel_h && x >= j * l.stride_w &&
                            x < j * l.stride_w + l.kernel_w) {
                            acc += m[i * w + j];
                        }
                    }
                }
                CHECK(up[y * ow + x] == doctest::Approx(acc).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("degenerate chains")
{
    Rng rng(2);
    BlockGeometry one{2, 7, 8, {{3, 3, 2, 2, 2}}};
    Tensor<float> act({1, 3, 3, 4});
    for (float& v : act.data()) {
        v = float(rng.uniform());
    }
    const std::vector<Tensor<float>> acts{act};
    const Tensor<float> mask = vbp::chain(acts, one);
    CHECK(mask == vbp::upsample(vbp::channel_mean(act), one.layers[0], 7, 8));

    // Zero input with zero biases gives zero activations and a zero mask.
    Network<float> net(Variant::dual, tiny_geometry(), 3);
    for (auto* p : net.parameters()) {
        if (p->name.ends_with("bias")) {
            p->value.fill(0.0f);
        }
    }
    const Tensor<float> cam({1, 3, 12, 14}), lid({1, 4, 6, 11});
    for (Modality m : {Modality::camera, Modality::lidar}) {
        const vbp::SaliencyMask s = vbp::visual_backprop(net, &cam, &lid, m);
        for (float v : s.values.data()) {
            CHECK(v == 0.0f);
        }
    }
}

TEST_CASE("masks are non-negative on random inputs")
{
    const Geometry g = tiny_geometry();
    Rng rng(3);
    Network<float> net(Variant::cgdual, g, 5);
    randomize(net, rng);
    std::size_t nonzero = 0;
    for (int i = 0; i < 1000; ++i) {
        if (i % 100 == 0) {
            randomize(net, rng);
        }
        const Tensor<float> cam = input(g.camera, rng), lid = input(g.lidar, rng);
        for (Modality m : {Modality::camera, Modality::lidar}) {
            const vbp::SaliencyMask s = vbp::visual_backprop(net, &cam, &lid, m);
            const BlockGeometry& b = m == Modality::camera ? g.camera : g.lidar;
            REQUIRE(s.values.shape() == nn::Shape{b.in_h, b.in_w});
            for (float v : s.values.data()) {
                REQUIRE(v >= 0.0f);
                nonzero += v > 0.0f;
            }
        }
    }
    CHECK(nonzero > 0);
}

TEST_CASE("mask support lies inside receptive fields of active last-layer cells")
{
    const Geometry g = tiny_geometry();
    Rng rng(4);
    SUBCASE("constructed sparse fixtures")
    {
        const BlockGeometry& b = g.camera;
        const auto shapes = block_shapes(b, "camera");
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<Tensor<float>> acts;
            for (const LayerShape& s : shapes) {
                Tensor<float> a(s.output);
                for (float& v : a.data()) {
                    v = float(rng.uniform(0.1, 1.0));
                }
                acts.push_back(a);
            }
            Tensor<float>& top = acts.back();
            top.fill(0.0f);
            const std::size_t th = top.dim(1), tw = top.dim(2);
            const std::size_t i = rng.index(th), j = rng.index(tw);
            top[(rng.index(top.dim(0)) * th + i) * tw + j] = 1.0f;
            const Tensor<float> mask = vbp::chain(acts, b);
            const auto [r0, r1] = receptive(i, i + 1, b, true);
            const auto [c0, c1] = receptive(j, j + 1, b, false);
            for (std::size_t y = 0; y < b.in_h; ++y) {
                for (std::size_t x = 0; x < b.in_w; ++x) {
                    const bool inside = y >= r0 && y < r1 && x >= c0 && x < c1;
                    const float v = mask[y * b.in_w + x];
                    CHECK((inside ? v > 0.0f : v == 0.0f));
                }
            }
        }
    }
    SUBCASE("trained-like networks")
    {
        Network<float> net(Variant::dual, g, 9);
        for (int trial = 0; trial < 50; ++trial) {
            randomize(net, rng, -0.6, 0.1);
            const Tensor<float> cam = input(g.camera, rng), lid = input(g.lidar, rng);
            const vbp::SaliencyMask s = vbp::visual_backprop(net, &cam, &lid, Modality::camera);
            const Tensor<float>& top = *net.block_output(Modality::camera);
            const std::size_t c = top.dim(1), th = top.dim(2), tw = top.dim(3);
            std::vector<bool> allowed(g.camera.in_h * g.camera.in_w, false);
            for (std::size_t i = 0; i < th; ++i) {
                for (std::size_t j = 0; j < tw; ++j) {
                    bool active = false;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        active = active || top[(ch * th + i) * tw + j] != 0.0f;
                    }
                    if (!active) {
                        continue;
                    }
                    const auto [r0, r1] = receptive(i, i + 1, g.camera, true);
                    const auto [c0, c1] = receptive(j, j + 1, g.camera, false);
                    for (std::size_t y = r0; y < r1; ++y) {
                        for (std::size_t x = c0; x < c1; ++x) {
                            allowed[y * g.camera.in_w + x] = true;
                        }
                    }
                }
            }
            for (std::size_t k = 0; k < allowed.size(); ++k) {
                CHECK((allowed[k] || s.values[k] == 0.0f));
            }
        }
    }
}

TEST_CASE("gates forced to one give the ungated mask bit-exactly")
{
    const Geometry g = tiny_geometry();
    Rng rng(6);
    Network<float> gated(Variant::cgdual, g, 21), plain(Variant::dual, g, 21);
    gated.set_gate_override(1.0f);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor<float> cam = input(g.camera, rng), lid = input(g.lidar, rng);
        for (Modality m : {Modality::camera, Modality::lidar}) {
            CHECK(vbp::visual_backprop(gated, &cam, &lid, m).values ==
                  vbp::visual_backprop(plain, &cam, &lid, m).values);
        }
    }
    // Real gates generally change the mask.
    gated.set_gate_override(std::nullopt);
    const Tensor<float> cam = input(g.camera, rng), lid = input(g.lidar, rng);
    CHECK_FALSE(vbp::visual_backprop(gated, &cam, &lid, Modality::camera).values ==
                vbp::visual_backprop(plain, &cam, &lid, Modality::camera).values);
}

TEST_CASE("absent modality is rejected")
{
    const Geometry g = tiny_geometry();
    Network<float> net(Variant::camera, g, 1);
    Rng rng(1);
    const Tensor<float> cam = input(g.camera, rng);
    CHECK_THROWS_AS(vbp::visual_backprop(net, &cam, nullptr, Modality::lidar), std::invalid_argument);
}

TEST_CASE("log scaling")
{
    const Tensor<float> zero({4, 5});
    const Tensor<float> zd = vbp::log_scale(zero);
    for (float v : zd.data()) {
        CHECK(v == 0.0f);
    }
    Rng rng(7);
    Tensor<float> m({6, 7});
    for (float& v : m.data()) {
        v = float(rng.uniform() * rng.uniform() * 1e-3);
    }
    const Tensor<float> d = vbp::log_scale(m);
    const auto argmax = [](const Tensor<float>& t) {
        return std::max_element(t.data().begin(), t.data().end()) - t.data().begin();
    };
    CHECK(*std::max_element(d.data().begin(), d.data().end()) == 1.0f);
    for (float k : {1e-3f, 0.5f, 7.0f, 1e4f}) {
        Tensor<float> scaled = m;
        for (float& v : scaled.data()) {
            v *= k;
        }
        CHECK(argmax(vbp::log_scale(scaled)) == argmax(m));
    }
    for (std::size_t a = 0; a < m.size(); ++a) {
        for (std::size_t b = 0; b < m.size(); ++b) {
            if (m[a] < m[b]) {
                CHECK(d[a] <= d[b]);
            }
        }
        CHECK(d[a] >= 0.0f);
        CHECK(d[a] <= 1.0f);
    }
    // Logarithmic: eps-sized values are lifted well above linear scaling.
    Tensor<float> two({1, 2});
    two[0] = 1e-6f;
    two[1] = 1.0f;
    CHECK(vbp::log_scale(two)[0] == doctest::Approx(std::log(2.0) / std::log1p(1e6)).epsilon(1e-5));
}

TEST_CASE("overlays")
{
    Rng rng(8);
    Tensor<float> yuv({3, 5, 6});
    for (std::size_t i = 0; i < 30; ++i) {
        const auto v = augment::rgb_to_yuv({float(rng.uniform()), float(rng.uniform()), float(rng.uniform())});
        yuv[i] = v[0];
        yuv[30 + i] = v[1];
        yuv[60 + i] = v[2];
    }
    const vbp::RgbImage none = vbp::overlay_camera(Tensor<float>({5, 6}), yuv);
    CHECK(none.rows == 5);
    CHECK(none.cols == 6);
    for (std::size_t i = 0; i < 30; ++i) {
        const auto rgb = augment::yuv_to_rgb({yuv[i], yuv[30 + i], yuv[60 + i]});
        for (int c = 0; c < 3; ++c) {
            CHECK(int(none.pixels[3 * i + c]) == int(std::lround(std::clamp(rgb[c], 0.0f, 1.0f) * 255.0)));
        }
    }
    const vbp::RgbImage full = vbp::overlay_camera(Tensor<float>({5, 6}, 1.0f), yuv);
    for (std::size_t i = 0; i < 30; ++i) {
        CHECK(full.pixels[3 * i] == 0);
        CHECK(full.pixels[3 * i + 1] == 255);
        CHECK(full.pixels[3 * i + 2] == 255);
    }
    CHECK_THROWS_AS(vbp::overlay_camera(Tensor<float>({4, 6}), yuv), nn::ShapeError);

    const vbp::RgbImage l = vbp::overlay_lidar(Tensor<float>({11, 8}), Tensor<float>({4, 11, 8}));
    CHECK(l.rows == 22);
    CHECK(l.cols == 8);
}
