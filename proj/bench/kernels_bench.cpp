// Serial reference vs parallel kernels on the layer shapes the half- and
// full-resolution models actually run, batch 32.
//
//   build/bench/steerfuse_bench --benchmark_filter=conv

#include "steerfuse/arch/network.hpp"
#include "steerfuse/nn/kernels.hpp"
#include "steerfuse/util/rng.hpp"

#include <benchmark/benchmark.h>

#include <vector>

namespace {

using namespace steerfuse;

constexpr std::size_t batch = 32;

std::vector<nn::Conv2dShape> layer_shapes(const arch::BlockGeometry& b)
{
    std::vector<nn::Conv2dShape> out;
    std::size_t c = b.in_channels, h = b.in_h, w = b.in_w;
    for (const arch::ConvLayerGeometry& l : b.layers) {
        nn::Conv2dShape s{batch, c, h, w, l.out_channels, l.kernel_h, l.kernel_w, l.stride_h, l.stride_w};
        out.push_back(s);
        c = l.out_channels;
        h = s.out_h();
        w = s.out_w();
    }
    return out;
}

// Index: 0-4 half-res camera, 5-9 half-res lidar, 10-14 full-res camera.
nn::Conv2dShape shape_at(std::int64_t i)
{
    static const std::vector<nn::Conv2dShape> all = [] {
        const arch::Geometry half = arch::half_resolution_geometry(), full = arch::full_resolution_geometry();
        std::vector<nn::Conv2dShape> v;
        for (const arch::BlockGeometry* b : {&half.camera, &half.lidar, &full.camera}) {
            const auto s = layer_shapes(*b);
            v.insert(v.end(), s.begin(), s.end());
        }
        return v;
    }();
    return all.at(std::size_t(i));
}

std::vector<float> random(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<float> v(n);
    for (float& x : v) {
        x = float(rng.uniform(-1.0, 1.0));
    }
    return v;
}

double conv_flops(const nn::Conv2dShape& s)
{
    return 2.0 * double(s.batch * s.out_channels * s.out_h() * s.out_w() * s.patch_size());
}

template <bool Parallel>
void conv_forward(benchmark::State& state)
{
    const nn::Conv2dShape s = shape_at(state.range(0));
    const auto x = random(s.input_count(), 1), w = random(s.weight_count(), 2), b = random(s.out_channels, 3);
    std::vector<float> y(s.output_count());
    for (auto _ : state) {
        if constexpr (Parallel) {
            nn::parallel::conv2d_forward(s, x.data(), w.data(), b.data(), y.data());
        } else {
            nn::serial::conv2d_forward(s, x.data(), w.data(), b.data(), y.data());
        }
        benchmark::DoNotOptimize(y.data());
    }
    state.counters["GFLOPS"] =
        benchmark::Counter(conv_flops(s) * double(state.iterations()) * 1e-9, benchmark::Counter::kIsRate);
}

template <bool Parallel>
void conv_backward(benchmark::State& state)
{
    const nn::Conv2dShape s = shape_at(state.range(0));
    const auto x = random(s.input_count(), 1), w = random(s.weight_count(), 2), up = random(s.output_count(), 3);
    std::vector<float> gx(s.input_count()), gw(s.weight_count()), gb(s.out_channels);
    for (auto _ : state) {
        if constexpr (Parallel) {
            nn::parallel::conv2d_backward(s, x.data(), w.data(), up.data(), gx.data(), gw.data(), gb.data());
        } else {
            nn::serial::conv2d_backward(s, x.data(), w.data(), up.data(), gx.data(), gw.data(), gb.data());
        }
        benchmark::DoNotOptimize(gw.data());
    }
    state.counters["GFLOPS"] =
        benchmark::Counter(2.0 * conv_flops(s) * double(state.iterations()) * 1e-9, benchmark::Counter::kIsRate);
}

// Head hidden layer: 4032 -> 100.
template <bool Parallel>
void dense_step(benchmark::State& state)
{
    const std::size_t in = 4032, out = 100;
    const auto x = random(batch * in, 1), w = random(out * in, 2), b = random(out, 3), up = random(batch * out, 4);
    std::vector<float> y(batch * out), gx(batch * in), gw(out * in), gb(out);
    for (auto _ : state) {
        if constexpr (Parallel) {
            nn::parallel::dense_forward(batch, in, out, x.data(), w.data(), b.data(), y.data());
            nn::parallel::dense_backward(batch, in, out, x.data(), w.data(), up.data(), gx.data(), gw.data(),
                                         gb.data());
        } else {
            nn::serial::dense_forward(batch, in, out, x.data(), w.data(), b.data(), y.data());
            nn::serial::dense_backward(batch, in, out, x.data(), w.data(), up.data(), gx.data(), gw.data(), gb.data());
        }
        benchmark::DoNotOptimize(gw.data());
    }
}

void layers(benchmark::internal::Benchmark* b)
{
    for (int i = 0; i < 15; ++i) {
        b->Arg(i);
    }
    b->Unit(benchmark::kMillisecond);
}

BENCHMARK(conv_forward<false>)->Name("conv_forward/serial")->Apply(layers);
BENCHMARK(conv_forward<true>)->Name("conv_forward/parallel")->Apply(layers);
BENCHMARK(conv_backward<false>)->Name("conv_backward/serial")->Apply(layers);
BENCHMARK(conv_backward<true>)->Name("conv_backward/parallel")->Apply(layers);
BENCHMARK(dense_step<false>)->Name("dense_step/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(dense_step<true>)->Name("dense_step/parallel")->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
