#include "doctest.h"

#include "steerfuse/data/dataset.hpp"
#include "steerfuse/util/binary_io.hpp"
#include "steerfuse/util/rng.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

using namespace steerfuse;
using namespace steerfuse::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / ("steerfuse-test-" + name + "-" + std::to_string(::getpid())))
    {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

/// Small synthetic store: `train_steps` per train sequence with 3 poses, one
/// test sequence of center frames. Values are a deterministic function of the record.
Manifest build_store(const fs::path& root, std::size_t train_seqs, std::size_t train_steps, std::uint64_t seed)
{
    Manifest m;
    m.camera = {4, 5};
    m.lidar = lidar::RangeGeometry::with_columns(6);
    m.seed = seed;
    const std::vector<augment::PoseOffset> poses{{0, 0, 0}, {0.39, 0.08, 0}, {-0.39, 0.08, 0}};
    Rng rng(seed);
    for (std::size_t s = 0; s <= train_seqs; ++s) {
        const bool test = s == train_seqs;
        SequenceInfo info;
        info.id = std::int64_t(s);
        info.dir = "seq-" + std::to_string(s);
        info.role = test ? "test" : "train";
        info.surface = "gravel";
        info.steps = test ? 30 : train_steps;
        info.poses = test ? std::vector<augment::PoseOffset>{poses[0]} : poses;
        SequenceWriter w(root, info.dir, m.camera, m.lidar);
        for (std::size_t t = 0; t < info.steps; ++t) {
            const double steer = rng.uniform(-60.0, 60.0);
            for (std::size_t p = 0; p < info.poses.size(); ++p) {
                Frame f;
                f.header.step = std::int64_t(t);
                f.header.sequence = info.id;
                f.header.pose = std::int64_t(p);
                f.header.camera_time = 0.1 * double(t);
                f.header.lidar_time = 0.1 * double(t) + 0.01;
                f.header.steering = steer;
                f.header.label = steer - 29.79 * info.poses[p].lateral;
                f.header.offset = info.poses[p];
                f.header.speed = 8.0;
                f.camera = nn::Tensor<float>({3, 4, 5});
                for (float& v : f.camera.data()) {
                    v = float(rng.uniform());
                }
                f.lidar = lidar::RangeImage(m.lidar);
                for (float& v : f.lidar.data.data()) {
                    v = float(rng.uniform(-5.0, 5.0));
                }
                w.append(f);
            }
        }
        w.close();
        m.sequences.push_back(info);
    }
    write_manifest(root, m);
    return m;
}

std::multiset<FrameRef> as_multiset(const std::vector<FrameRef>& v) { return {v.begin(), v.end()}; }

} // namespace

TEST_CASE("label assignment")
{
    const std::vector<double> s{0, 1, 2, 3, 4};
    CHECK(assign_labels(s) == std::vector<double>{2, 3, 4});
    const std::vector<double> c(7, 12.5);
    for (double l : assign_labels(c)) {
        CHECK(l == 12.5);
    }
    const std::vector<double> two{1, 2};
    CHECK_THROWS_AS(assign_labels(two), std::invalid_argument);
    const std::vector<double> three{1, 2, 3};
    CHECK(assign_labels(three) == std::vector<double>{3});
}

TEST_CASE("validation windows")
{
    const SplitConfig cfg;
    std::vector<std::size_t> held;
    for (std::size_t t = 0; t < 400; ++t) {
        if (in_validation(t, cfg)) {
            held.push_back(t);
        }
    }
    REQUIRE(held.size() == 40);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(held[i] == i);
        CHECK(held[20 + i] == 200 + i);
    }
    std::size_t short_held = 0;
    for (std::size_t t = 0; t < 100; ++t) {
        short_held += in_validation(t, cfg);
    }
    CHECK(short_held == 20);

    // 10% +- 1% on long sequences.
    std::size_t long_held = 0;
    for (std::size_t t = 0; t < 6543; ++t) {
        long_held += in_validation(t, cfg);
    }
    CHECK(std::abs(double(long_held) / 6543.0 - 0.1) <= 0.01);
}

TEST_CASE("balancing")
{
    std::vector<double> labels(90, 5.0);
    labels.insert(labels.end(), 10, -45.0);
    const Balance b = balance(labels, {});
    CHECK(b.curve_multiplicity == 8);
    CHECK(b.indices.size() == 90 + 80);
    CHECK(std::count(b.indices.begin(), b.indices.end(), 95u) == 8);
    CHECK(std::count(b.indices.begin(), b.indices.end(), 3u) == 1);

    const std::vector<double> straight(50, 1.0);
    const Balance id = balance(straight, {});
    CHECK(id.curve_multiplicity == 1);
    for (std::size_t i = 0; i < 50; ++i) {
        CHECK(id.indices[i] == i);
    }
    const std::vector<double> curves(50, 100.0);
    CHECK(balance(curves, {}).indices.size() == 50);
    CHECK(balance({}, {}).indices.empty());

    // Exact threshold counts as a curve; ceil(3 / 1) = 3.
    const std::vector<double> edge{30.0, 0.0, 1.0, -2.0};
    CHECK(balance(edge, {}).curve_multiplicity == 3);

    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> l(rng.index(300) + 1);
        for (double& v : l) {
            v = rng.normal() * 40.0;
        }
        BalanceConfig cfg;
        cfg.max_multiplicity = 1 + rng.index(10);
        CHECK(balance(l, cfg).curve_multiplicity <= cfg.max_multiplicity);
    }
    CHECK_THROWS_AS(balance(edge, {0.0, 8}), std::invalid_argument);
}

TEST_CASE("closest timestamp matching")
{
    const std::vector<double> cam{0.0, 0.1, 0.2, 0.3}, lid{0.04, 0.17, 0.26, 0.31};
    CHECK(match_closest(cam, lid) == std::vector<std::size_t>{0, 0, 1, 3});

    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> q(40), c(25);
        for (double& v : q) {
            v = double(rng.index(100)) * 0.01;
        }
        for (double& v : c) {
            v = double(rng.index(100)) * 0.01;
        }
        const auto got = match_closest(q, c);
        for (std::size_t i = 0; i < q.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < c.size(); ++j) {
                if (std::abs(c[j] - q[i]) < std::abs(c[best] - q[i])) {
                    best = j;
                }
            }
            CHECK(got[i] == best);
        }
    }
    CHECK_THROWS_AS(match_closest(cam, {}), std::invalid_argument);
}

TEST_CASE("frame store round trip")
{
    TempDir dir("store");
    const Manifest m = build_store(dir.path, 2, 50, 3);
    const FrameStore store(dir.path);
    CHECK(store.manifest().sequences.size() == 3);
    CHECK(store.records(0) == 150);
    CHECK(store.records(2) == 30);

    Rng rng(3);
    // Regenerate the first record independently and compare.
    const Frame f = store.read({0, 0});
    const double steer = rng.uniform(-60.0, 60.0);
    CHECK(f.header.steering == steer);
    CHECK(f.header.label == steer);
    CHECK(f.camera[0] == float(rng.uniform()));
    CHECK(f.header.lidar_time == doctest::Approx(0.01));

    const Frame g = store.read({0, 1});
    CHECK(g.header.pose == 1);
    CHECK(g.header.label == doctest::Approx(steer - 29.79 * 0.39));

    SUBCASE("writing twice is byte-identical")
    {
        TempDir again("store2");
        build_store(again.path, 2, 50, 3);
        for (const char* p : {"seq-0/frames.bin", "seq-2/frames.bin", "manifest.json"}) {
            std::ifstream a(dir.path / p, std::ios::binary), b(again.path / p, std::ios::binary);
            const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
            CHECK(sa == sb);
        }
    }
}

TEST_CASE("corrupt stores are rejected with the frame index")
{
    TempDir dir("corrupt");
    const Manifest m = build_store(dir.path, 1, 20, 4);
    SUBCASE("truncated file")
    {
        fs::resize_file(dir.path / "seq-0/frames.bin", fs::file_size(dir.path / "seq-0/frames.bin") - 10);
        CHECK_THROWS_AS(FrameStore{dir.path}, io::FormatError);
    }
    SUBCASE("bad header")
    {
        std::fstream f(dir.path / "seq-0/frames.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(std::streamoff(7 * m.record_bytes() + 8));
        const char junk[8] = {9, 9, 9, 9, 0, 0, 0, 0};
        f.write(junk, 8);
        f.close();
        try {
            FrameStore s(dir.path);
            FAIL("expected a format error");
        } catch (const io::FormatError& e) {
            CHECK(std::string(e.what()).find("frame 7") != std::string::npos);
        }
    }
    SUBCASE("non-finite payload")
    {
        std::fstream f(dir.path / "seq-0/frames.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(std::streamoff(5 * m.record_bytes() + frame_header_bytes + 12));
        const float nan = std::numeric_limits<float>::quiet_NaN();
        f.write(reinterpret_cast<const char*>(&nan), 4);
        f.close();
        const FrameStore s(dir.path);
        try {
            s.read({0, 5});
            FAIL("expected a format error");
        } catch (const io::FormatError& e) {
            CHECK(std::string(e.what()).find("frame 5") != std::string::npos);
        }
    }
    SUBCASE("missing manifest")
    {
        fs::remove(dir.path / "manifest.json");
        CHECK_THROWS_AS(FrameStore{dir.path}, std::runtime_error);
    }
}

TEST_CASE("splits, balancing and iteration")
{
    TempDir dir("iter");
    build_store(dir.path, 2, 250, 5);
    const FrameStore store(dir.path);
    const Splits sp = make_splits(store);
    // 250 steps: windows [0, 20) and [200, 220) -> 40 held out per sequence, 3 poses.
    CHECK(sp.validation_augmented.size() == 2 * 40 * 3);
    CHECK(sp.validation_center.size() == 2 * 40);
    CHECK(sp.train.size() == 2 * 210 * 3);
    CHECK(sp.test.size() == 30);
    std::set<FrameRef> val(sp.validation_augmented.begin(), sp.validation_augmented.end());
    for (const FrameRef& r : sp.test) {
        CHECK(store.manifest().sequences[r.sequence].role == "test");
    }

    std::size_t mult = 0;
    const auto weighted = weighted_training_list(store, sp.train, &mult);
    CHECK(mult >= 1);
    CHECK(weighted.size() >= sp.train.size());

    BatchOptions opt;
    opt.batch_size = 32;
    opt.jitter = true;
    BatchIterator a(store, weighted, opt, 7, 2), b(store, weighted, opt, 7, 2), c(store, weighted, opt, 7, 3);
    CHECK(a.order() == b.order());
    CHECK_FALSE(a.order() == c.order());
    CHECK(a.batch_count() == (weighted.size() + 31) / 32);

    std::vector<FrameRef> seen;
    Batch ba, bb;
    std::size_t batches = 0;
    while (a.next(ba)) {
        REQUIRE(b.next(bb));
        CHECK(ba.camera == bb.camera);
        CHECK(ba.lidar == bb.lidar);
        for (const FrameRef& r : ba.refs) {
            CHECK(val.count(r) == 0);
        }
        seen.insert(seen.end(), ba.refs.begin(), ba.refs.end());
        ++batches;
    }
    CHECK(batches == a.batch_count());
    CHECK(as_multiset(seen) == as_multiset(weighted));
}

TEST_CASE("normalization statistics")
{
    TempDir dir("norm");
    Manifest m = build_store(dir.path, 1, 60, 6);
    {
        const FrameStore store(dir.path);
        m.norm = compute_norm_stats(store, make_splits(store).train);
    }
    write_manifest(dir.path, m);
    const FrameStore store(dir.path);
    // Independent recomputation: two-pass mean/variance per channel.
    const auto train = make_splits(store).train;
    std::array<std::vector<double>, 3> cam;
    for (const FrameRef& r : train) {
        const Frame f = store.read(r);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < 20; ++i) {
                cam[c].push_back(f.camera[c * 20 + i]);
            }
        }
    }
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (double v : cam[c]) {
            mean += v;
        }
        mean /= double(cam[c].size());
        double var = 0.0;
        for (double v : cam[c]) {
            var += (v - mean) * (v - mean);
        }
        var /= double(cam[c].size());
        CHECK(std::abs(store.manifest().norm.camera_mean[c] - mean) <= 1e-6);
        CHECK(std::abs(store.manifest().norm.camera_std[c] - std::sqrt(var)) <= 1e-6);
    }

    // Normalized batch of a single frame equals the raw frame mapped by the stats.
    BatchOptions opt;
    opt.shuffle = false;
    BatchIterator it(store, {train[0]}, opt, 1, 0);
    Batch b;
    REQUIRE(it.next(b));
    const Frame f = store.read(train[0]);
    const auto& n = store.manifest().norm;
    CHECK(b.camera[0] == doctest::Approx((f.camera[0] - n.camera_mean[0]) / n.camera_std[0]).epsilon(1e-6));
    CHECK(b.labels[0] == float(f.header.label));
}
