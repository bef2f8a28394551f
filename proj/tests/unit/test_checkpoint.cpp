#include "doctest.h"

#include "steerfuse/arch/checkpoint.hpp"
#include "steerfuse/util/binary_io.hpp"
#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace steerfuse;
using namespace steerfuse::arch;
namespace fs = std::filesystem;

namespace {

Geometry small_geometry()
{
    Geometry g;
    g.camera = {3, 9, 10, {{4, 3, 3, 1, 1}, {4, 3, 3, 1, 1}, {4, 3, 3, 1, 1}, {4, 2, 2, 1, 1}, {64, 2, 2, 1, 1}}};
    g.lidar = {4, 6, 9, {{4, 2, 2, 1, 1}, {4, 2, 2, 1, 1}, {4, 2, 2, 1, 1}, {4, 1, 2, 1, 1}, {64, 1, 2, 1, 1}}};
    g.hidden = 5;
    return g;
}

fs::path temp_file(const std::string& name)
{
    return fs::temp_directory_path() / ("steerfuse-ckpt-" + name + "-" + std::to_string(::getpid()) + ".bin");
}

} // namespace

TEST_CASE("checkpoint round trip")
{
    for (Variant v : {Variant::camera, Variant::lidar, Variant::dual, Variant::cgdual}) {
        Network<float> net(v, small_geometry(), 42);
        Rng rng(1);
        for (auto* p : net.parameters()) {
            for (float& x : p->value.data()) {
                x = float(rng.uniform(-1.0, 1.0));
            }
        }
        CheckpointMeta meta{v, small_geometry(), {}, 42, {{"epoch", 3}}};
        meta.norm.camera_mean = {0.1, 0.2, 0.3};
        const fs::path path = temp_file(std::string(to_string(v)));
        save_checkpoint(path, net, meta);
        LoadedCheckpoint back = load_checkpoint(path);
        CHECK(back.meta.variant == v);
        CHECK(back.meta.geometry == small_geometry());
        CHECK(back.meta.norm == meta.norm);
        CHECK(back.meta.extra.at("epoch") == 3);
        const auto a = net.parameters();
        const auto b = back.network.parameters();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i]->name == b[i]->name);
            CHECK(a[i]->value == b[i]->value);
        }
        const auto cam = nn::cast<float>(testing::random_tensor({1, 3, 9, 10}, rng));
        const auto lid = nn::cast<float>(testing::random_tensor({1, 4, 6, 9}, rng));
        CHECK(net.forward({&cam, &lid}) == back.network.forward({&cam, &lid}));
        fs::remove(path);
    }
}

TEST_CASE("damaged checkpoints are rejected")
{
    Network<float> net(Variant::dual, small_geometry(), 1);
    const fs::path path = temp_file("damaged");
    save_checkpoint(path, net, {Variant::dual, small_geometry(), {}, 1, {}});

    SUBCASE("bad magic")
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
        f.close();
        CHECK_THROWS_AS(load_checkpoint(path), io::FormatError);
    }
    SUBCASE("truncated payload")
    {
        fs::resize_file(path, fs::file_size(path) - 4);
        CHECK_THROWS_AS(load_checkpoint(path), io::FormatError);
    }
    SUBCASE("trailing bytes")
    {
        std::ofstream(path, std::ios::app | std::ios::binary) << "x";
        CHECK_THROWS_AS(load_checkpoint(path), io::FormatError);
    }
    SUBCASE("metadata must match the network")
    {
        CHECK_THROWS_AS(save_checkpoint(path, net, {Variant::camera, small_geometry(), {}, 1, {}}),
                        std::invalid_argument);
    }
    CHECK_THROWS(load_checkpoint(temp_file("missing")));
    fs::remove(path);
}
