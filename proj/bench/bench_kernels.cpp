// Serial reference kernels against the OpenMP kernels on layer shapes the
// classifiers and the velocity network actually use.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "cfx/kernels.hpp"

namespace k = cfx::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

k::ConvDims conv_dims(const benchmark::State& s) {
    k::ConvDims d;
    d.batch = 32;
    d.in_ch = static_cast<std::size_t>(s.range(0));
    d.out_ch = static_cast<std::size_t>(s.range(1));
    d.in_h = d.in_w = 16;
    return d;
}

template <void (*Fn)(const k::ConvDims&, k::In, k::In, k::In, k::Out)>
void conv_forward(benchmark::State& s) {
    const auto d = conv_dims(s);
    const auto x = random_vector(d.in_size(), 1), w = random_vector(d.weight_size(), 2), b = random_vector(d.out_ch, 3);
    std::vector<double> y(d.out_size());
    for (auto _ : s) {
        Fn(d, x, w, b, y);
        benchmark::DoNotOptimize(y.data());
    }
    s.SetItemsProcessed(s.iterations() * static_cast<long>(d.out_size()));
}

template <void (*Fn)(const k::ConvDims&, k::In, k::In, k::Out)>
void conv_backward_input(benchmark::State& s) {
    const auto d = conv_dims(s);
    const auto g = random_vector(d.out_size(), 1), w = random_vector(d.weight_size(), 2);
    std::vector<double> gx(d.in_size());
    for (auto _ : s) {
        Fn(d, g, w, gx);
        benchmark::DoNotOptimize(gx.data());
    }
}

template <void (*Fn)(const k::ConvDims&, k::In, k::In, k::Out, k::Out)>
void conv_backward_params(benchmark::State& s) {
    const auto d = conv_dims(s);
    const auto x = random_vector(d.in_size(), 1), g = random_vector(d.out_size(), 2);
    std::vector<double> gw(d.weight_size()), gb(d.out_ch);
    for (auto _ : s) {
        Fn(d, x, g, gw, gb);
        benchmark::DoNotOptimize(gw.data());
    }
}

template <void (*Fn)(const k::DenseDims&, k::In, k::In, k::In, k::Out)>
void dense_forward(benchmark::State& s) {
    const k::DenseDims d{32, static_cast<std::size_t>(s.range(0)), static_cast<std::size_t>(s.range(1))};
    const auto x = random_vector(d.batch * d.in, 1), w = random_vector(d.in * d.out, 2), b = random_vector(d.out, 3);
    std::vector<double> y(d.batch * d.out);
    for (auto _ : s) {
        Fn(d, x, w, b, y);
        benchmark::DoNotOptimize(y.data());
    }
}

template <void (*Fn)(const k::PlaneDims&, k::In, k::In, k::Out)>
void blur(benchmark::State& s) {
    const k::PlaneDims d{static_cast<std::size_t>(s.range(0)), 64, 64};
    const auto x = random_vector(d.planes * d.height * d.width, 1);
    const std::vector<double> kernel{0.05, 0.25, 0.4, 0.25, 0.05};
    std::vector<double> y(x.size());
    for (auto _ : s) {
        Fn(d, kernel, x, y);
        benchmark::DoNotOptimize(y.data());
    }
}

}  // namespace

BENCHMARK(conv_forward<k::serial::conv2d_forward>)->Name("conv2d_forward/serial")->Args({8, 16})->Args({16, 16});
BENCHMARK(conv_forward<k::parallel::conv2d_forward>)->Name("conv2d_forward/parallel")->Args({8, 16})->Args({16, 16});
BENCHMARK(conv_backward_input<k::serial::conv2d_backward_input>)->Name("conv2d_backward_input/serial")->Args({8, 16});
BENCHMARK(conv_backward_input<k::parallel::conv2d_backward_input>)->Name("conv2d_backward_input/parallel")->Args({8, 16});
BENCHMARK(conv_backward_params<k::serial::conv2d_backward_params>)->Name("conv2d_backward_params/serial")->Args({8, 16});
BENCHMARK(conv_backward_params<k::parallel::conv2d_backward_params>)->Name("conv2d_backward_params/parallel")->Args({8, 16});
BENCHMARK(dense_forward<k::serial::dense_forward>)->Name("dense_forward/serial")->Args({512, 256});
BENCHMARK(dense_forward<k::parallel::dense_forward>)->Name("dense_forward/parallel")->Args({512, 256});
BENCHMARK(blur<k::serial::separable_blur>)->Name("separable_blur/serial")->Arg(16);
BENCHMARK(blur<k::parallel::separable_blur>)->Name("separable_blur/parallel")->Arg(16);

BENCHMARK_MAIN();
