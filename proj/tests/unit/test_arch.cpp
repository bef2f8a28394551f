#include "doctest.h"

#include "steerfuse/arch/network.hpp"
#include "steerfuse/nn/adam.hpp"
#include "test_support.hpp"

#include <cmath>

using namespace steerfuse;
using namespace steerfuse::arch;
using steerfuse::testing::max_gradient_error;
using steerfuse::testing::random_tensor;

namespace {

// Tiny five-layer stacks so finite differences over every parameter stay cheap.
Geometry tiny_geometry()
{
    Geometry g;
    g.camera = {3, 9, 10, {{2, 2, 2, 1, 1}, {3, 2, 2, 1, 1}, {3, 2, 2, 1, 1}, {2, 2, 2, 1, 1}, {2, 1, 1, 1, 1}}};
    g.lidar = {4, 6, 9, {{2, 2, 3, 1, 2}, {2, 2, 2, 1, 1}, {3, 1, 1, 1, 1}, {2, 2, 1, 1, 1}, {2, 1, 1, 1, 1}}};
    g.hidden = 5;
    return g;
}

template <typename T>
Tensor<T> random_input(const BlockGeometry& b, std::size_t batch, Rng& rng)
{
    return nn::cast<T>(random_tensor({batch, b.in_channels, b.in_h, b.in_w}, rng));
}

const Shape& find(const std::vector<LayerShape>& ledger, const std::string& name)
{
    for (const LayerShape& s : ledger) {
        if (s.name == name) {
            return s.output;
        }
    }
    FAIL("missing ledger entry " << name);
    static Shape none;
    return none;
}

} // namespace

TEST_CASE("architecture ids round-trip")
{
    for (Variant v : {Variant::camera, Variant::lidar, Variant::dual, Variant::cgdual}) {
        CHECK(parse_variant(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_variant("fusion"), std::invalid_argument);
}

TEST_CASE("full-resolution shape ledger")
{
    const Geometry g = full_resolution_geometry();
    const auto cam = block_shapes(g.camera, "camera");
    REQUIRE(cam.size() == 5);
    CHECK(cam[0].output == Shape{24, 30, 151});
    CHECK(cam[1].output == Shape{36, 13, 74});
    CHECK(cam[2].output == Shape{48, 5, 35});
    CHECK(cam[3].output == Shape{64, 3, 33});
    CHECK(cam[4].output == Shape{64, 1, 31});
    CHECK(flattened_features(g.camera) == 1984);

    const auto lid = block_shapes(g.lidar, "lidar");
    REQUIRE(lid.size() == 5);
    CHECK(lid[0].output == Shape{24, 9, 153});
    CHECK(lid[1].output == Shape{36, 7, 75});
    CHECK(lid[2].output == Shape{48, 5, 36});
    CHECK(lid[3].output == Shape{64, 3, 34});
    CHECK(lid[4].output == Shape{64, 1, 32});
    CHECK(flattened_features(g.lidar) == 2048);

    CHECK(head_input_features(Variant::camera, g) == 1984);
    CHECK(head_input_features(Variant::lidar, g) == 2048);
    CHECK(head_input_features(Variant::dual, g) == 4032);
    CHECK(head_input_features(Variant::cgdual, g) == 4032);
    CHECK(gate_count(g) == 128);

    const auto ledger = shape_ledger(Variant::cgdual, g);
    CHECK(find(ledger, "gate.sigmoid") == Shape{128});
    CHECK(find(ledger, "head.input") == Shape{4032});
    CHECK(find(ledger, "head.hidden") == Shape{100});
    CHECK(find(ledger, "head.output") == Shape{1});
}

TEST_CASE("half-resolution geometry keeps five layers and 64-channel outputs")
{
    const Geometry g = half_resolution_geometry();
    CHECK(g.camera.in_h == 32);
    CHECK(g.camera.in_w == 153);
    CHECK(g.lidar.in_h == 11);
    CHECK(g.lidar.in_w == 155);
    CHECK(block_shapes(g.camera, "camera").back().output == Shape{64, 1, 30});
    CHECK(block_shapes(g.lidar, "lidar").back().output == Shape{64, 1, 12});
    CHECK(gate_count(g) == 128);
}

TEST_CASE("built networks match the ledger")
{
    const Geometry g = full_resolution_geometry();
    for (Variant v : {Variant::camera, Variant::lidar, Variant::dual, Variant::cgdual}) {
        Network<float> net(v, g, 1);
        std::size_t expected = 0;
        auto block_params = [&](const BlockGeometry& b) {
            std::size_t c = b.in_channels, n = 0;
            for (const ConvLayerGeometry& l : b.layers) {
                n += l.out_channels * c * l.kernel_h * l.kernel_w + l.out_channels;
                c = l.out_channels;
            }
            return n;
        };
        const std::size_t features = head_input_features(v, g);
        if (uses(v, Modality::camera)) {
            expected += block_params(g.camera);
        }
        if (uses(v, Modality::lidar)) {
            expected += block_params(g.lidar);
        }
        expected += features * 100 + 100 + 100 + 1;
        if (v == Variant::cgdual) {
            expected += block_params(g.camera) + block_params(g.lidar) + features * 128 + 128;
        }
        CHECK(net.parameter_count() == expected);
    }
}

TEST_CASE("impossible geometry names the failing layer")
{
    Geometry g = full_resolution_geometry();
    g.lidar.layers[2].kernel_h = 9;
    try {
        block_shapes(g.lidar, "lidar");
        FAIL("expected GeometryError");
    } catch (const GeometryError& e) {
        CHECK(std::string(e.what()).find("lidar.conv3") != std::string::npos);
    }
    CHECK_THROWS_AS(Network<float>(Variant::lidar, g, 1), GeometryError);
}

TEST_CASE("missing required modality is rejected")
{
    const Geometry g = tiny_geometry();
    Rng rng(1);
    Tensor<double> cam = random_input<double>(g.camera, 1, rng);
    Tensor<double> lid = random_input<double>(g.lidar, 1, rng);
    Network<double> camera(Variant::camera, g, 1);
    Network<double> lidar(Variant::lidar, g, 1);
    Network<double> dual(Variant::dual, g, 1);
    CHECK_THROWS_AS(camera.forward({nullptr, &lid}), std::invalid_argument);
    CHECK_THROWS_AS(lidar.forward({&cam, nullptr}), std::invalid_argument);
    CHECK_THROWS_AS(dual.forward({&cam, nullptr}), std::invalid_argument);
    CHECK_NOTHROW(camera.forward({&cam, nullptr}));
    CHECK_NOTHROW(lidar.forward({nullptr, &lid}));
}

TEST_CASE("all-zero weights give the final bias")
{
    const Geometry g = tiny_geometry();
    Network<double> net(Variant::dual, g, 7);
    for (auto* p : net.parameters()) {
        p->value.fill(0.0);
    }
    net.parameters().back()->value[0] = 0.37;
    Tensor<double> cam({1, 3, 9, 10});
    Tensor<double> lid({1, 4, 6, 9});
    CHECK(net.predict(&cam, &lid) == 0.37);
}

TEST_CASE("gate overrides")
{
    const Geometry g = tiny_geometry();
    Rng rng(13);
    Tensor<float> cam = random_input<float>(g.camera, 3, rng);
    Tensor<float> lid = random_input<float>(g.lidar, 3, rng);

    SUBCASE("gates forced to 1 reproduce the ungated steering network bit-exactly")
    {
        Network<float> gated(Variant::cgdual, g, 42);
        Network<float> plain(Variant::dual, g, 42);
        gated.set_gate_override(1.0f);
        CHECK(gated.forward({&cam, &lid}) == plain.forward({&cam, &lid}));
    }
    SUBCASE("gates forced to 0 leave only the head's response to a zero feature vector")
    {
        Network<double> gated(Variant::cgdual, g, 42);
        gated.set_gate_override(0.0);
        Tensor<double> camd = nn::cast<double>(cam), lidd = nn::cast<double>(lid);
        Tensor<double> y = gated.forward({&camd, &lidd});
        auto params = gated.parameters();
        // Declaration order: steering blocks, head.hidden.{weight,bias}, head.output.{weight,bias}, gate...
        std::size_t k = 0;
        while (params[k]->name != "head.hidden.bias") {
            ++k;
        }
        const Tensor<double>& b1 = params[k]->value;
        const Tensor<double>& w2 = params[k + 1]->value;
        const Tensor<double>& b2 = params[k + 2]->value;
        double expected = b2[0];
        for (std::size_t i = 0; i < b1.size(); ++i) {
            expected += w2[i] * std::max(0.0, b1[i]);
        }
        for (std::size_t n = 0; n < 3; ++n) {
            CHECK(y[n] == doctest::Approx(expected).epsilon(1e-14));
        }
        CHECK(y[0] == y[1]);
        CHECK(y[1] == y[2]);
    }
}

TEST_CASE("apply_gates")
{
    Rng rng(3);
    Tensor<double> cf = random_tensor({2, 64, 1, 31}, rng);
    Tensor<double> lf = random_tensor({2, 64, 1, 32}, rng);

    SUBCASE("all 0.5 halves every feature")
    {
        auto [c, l] = apply_gates(Tensor<double>({2, 128}, 0.5), cf, lf);
        for (std::size_t i = 0; i < cf.size(); ++i) {
            CHECK(c[i] == cf[i] * 0.5);
        }
        for (std::size_t i = 0; i < lf.size(); ++i) {
            CHECK(l[i] == lf[i] * 0.5);
        }
    }
    SUBCASE("one-hot on camera channel 3 zeroes every other channel")
    {
        Tensor<double> gates({2, 128});
        gates[3] = 1.0;
        gates[128 + 3] = 1.0;
        auto [c, l] = apply_gates(gates, cf, lf);
        for (std::size_t n = 0; n < 2; ++n) {
            for (std::size_t ch = 0; ch < 64; ++ch) {
                for (std::size_t x = 0; x < 31; ++x) {
                    const std::size_t i = (n * 64 + ch) * 31 + x;
                    CHECK(c[i] == (ch == 3 ? cf[i] : 0.0));
                }
            }
        }
        for (double v : l.data()) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("random gates scale each channel exactly")
    {
        Tensor<double> gates = random_tensor({2, 128}, rng, 0.0, 1.0);
        auto [c, l] = apply_gates(gates, cf, lf);
        for (std::size_t n = 0; n < 2; ++n) {
            for (std::size_t ch = 0; ch < 64; ++ch) {
                for (std::size_t x = 0; x < 31; ++x) {
                    const std::size_t i = (n * 64 + ch) * 31 + x;
                    CHECK(c[i] == gates[n * 128 + ch] * cf[i]);
                }
                for (std::size_t x = 0; x < 32; ++x) {
                    const std::size_t i = (n * 64 + ch) * 32 + x;
                    CHECK(l[i] == gates[n * 128 + 64 + ch] * lf[i]);
                }
            }
        }
    }
    SUBCASE("shape mismatch is rejected")
    {
        CHECK_THROWS_AS(apply_gates(Tensor<double>({2, 127}), cf, lf), nn::ShapeError);
    }
}

TEST_CASE("dual branches are independent")
{
    const Geometry g = tiny_geometry();
    Rng rng(17);
    Tensor<double> cam = random_input<double>(g.camera, 2, rng);
    Tensor<double> lid = random_input<double>(g.lidar, 2, rng);
    Network<double> net(Variant::dual, g, 5);
    net.forward({&cam, &lid});
    const auto lidar_acts = net.steering_block(Modality::lidar)->activations();
    const auto camera_acts = net.steering_block(Modality::camera)->activations();
    Tensor<double> zero_cam(cam.shape());
    net.forward({&zero_cam, &lid});
    const auto& lidar_after = net.steering_block(Modality::lidar)->activations();
    REQUIRE(lidar_after.size() == lidar_acts.size());
    for (std::size_t i = 0; i < lidar_acts.size(); ++i) {
        CHECK(lidar_after[i] == lidar_acts[i]);
    }
    CHECK_FALSE(net.steering_block(Modality::camera)->activations().back() == camera_acts.back());
}

TEST_CASE("network gradients match finite differences")
{
    const Geometry g = tiny_geometry();
    for (Variant v : {Variant::camera, Variant::lidar, Variant::dual, Variant::cgdual}) {
        CAPTURE(to_string(v));
        Rng rng(29);
        Tensor<double> cam = random_input<double>(g.camera, 2, rng);
        Tensor<double> lid = random_input<double>(g.lidar, 2, rng);
        Tensor<double> target = random_tensor({2, 1}, rng);
        Network<double> net(v, g, 3);
        // Zero biases put dead units exactly on the relu kink; move them off it.
        for (nn::Parameter<double>* p : net.parameters()) {
            if (p->name.ends_with(".bias")) {
                for (double& b : p->value.data()) {
                    b = rng.uniform(0.05, 0.3);
                }
            }
        }
        auto loss = [&] { return nn::mse_loss(net.forward({&cam, &lid}), target).value; };

        net.zero_grad();
        net.backward(nn::mse_loss(net.forward({&cam, &lid}), target).grad);
        double worst = 0.0;
        for (nn::Parameter<double>* p : net.parameters()) {
            const Tensor<double> grad = p->grad;
            worst = std::max(worst, max_gradient_error(p->value, grad, loss));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("forward is deterministic and training is reproducible from the seed")
{
    const Geometry g = tiny_geometry();
    auto train = [&](std::uint64_t seed) {
        Network<float> net(Variant::cgdual, g, seed);
        nn::Adam<float> adam;
        Rng rng(99);
        for (int step = 0; step < 5; ++step) {
            Tensor<float> cam = random_input<float>(g.camera, 4, rng);
            Tensor<float> lid = random_input<float>(g.lidar, 4, rng);
            Tensor<float> target = nn::cast<float>(random_tensor({4, 1}, rng));
            net.zero_grad();
            net.backward(nn::mse_loss(net.forward({&cam, &lid}), target).grad);
            adam.step(net.parameters());
        }
        std::vector<Tensor<float>> values;
        for (const auto* p : net.parameters()) {
            values.push_back(p->value);
        }
        return values;
    };
    CHECK(train(8) == train(8));
    CHECK_FALSE(train(8) == train(9));

    Rng rng(4);
    Tensor<float> cam = random_input<float>(g.camera, 1, rng);
    Tensor<float> lid = random_input<float>(g.lidar, 1, rng);
    Network<float> net(Variant::dual, g, 2);
    const float a = net.predict(&cam, &lid);
    const float b = net.predict(&cam, &lid);
    CHECK(a == b);
}

TEST_CASE("NormStats validation and channel normalization")
{
    NormStats s;
    CHECK_NOTHROW(validate(s));
    s.lidar_std[2] = 0.0;
    CHECK_THROWS_AS(validate(s), std::invalid_argument);

    std::vector<float> data = {1, 2, 3, 4, 10, 20, 30, 40};
    normalize_channels<float, 2>(data, 4, {2.5, 25.0}, {0.5, 10.0});
    CHECK(data[0] == -3.0f);
    CHECK(data[3] == 3.0f);
    CHECK(data[4] == -1.5f);
    CHECK(data[7] == 1.5f);
}
