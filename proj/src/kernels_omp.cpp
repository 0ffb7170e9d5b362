#include <algorithm>
#include <vector>

#include "cfx/kernels.hpp"

namespace cfx::kernels::parallel {

namespace {

// Range of output positions [lo, hi) whose input tap o*stride + k - pad is in [0, extent).
void valid_range(std::size_t k, const ConvDims& d, std::size_t extent, std::size_t out_n, std::size_t& lo,
                 std::size_t& hi) {
    const long s = static_cast<long>(d.stride), p = static_cast<long>(d.pad), kk = static_cast<long>(k);
    long first = p - kk;  // need o*s >= p - k
    first = first <= 0 ? 0 : (first + s - 1) / s;
    long last = static_cast<long>(extent) - 1 + p - kk;  // o*s <= extent - 1 + p - k
    last = last < 0 ? -1 : last / s;
    lo = static_cast<std::size_t>(first);
    hi = static_cast<std::size_t>(std::min<long>(last + 1, static_cast<long>(out_n)));
    if (hi < lo) hi = lo;
}

}  // namespace

void conv2d_forward(const ConvDims& d, In input, In weight, In bias, Out output) {
    const std::size_t oh_n = d.out_h(), ow_n = d.out_w(), k = d.kernel;
    const std::size_t in_plane = d.in_h * d.in_w, out_plane = oh_n * ow_n;
    const long total = static_cast<long>(d.batch * d.out_ch);
#pragma omp parallel for schedule(static)
    for (long job = 0; job < total; ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / d.out_ch;
        const std::size_t co = static_cast<std::size_t>(job) % d.out_ch;
        double* out = output.data() + (n * d.out_ch + co) * out_plane;
        std::fill(out, out + out_plane, bias[co]);
        for (std::size_t ci = 0; ci < d.in_ch; ++ci) {
            const double* in = input.data() + (n * d.in_ch + ci) * in_plane;
            for (std::size_t kh = 0; kh < k; ++kh) {
                std::size_t oh_lo, oh_hi;
                valid_range(kh, d, d.in_h, oh_n, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < k; ++kw) {
                    std::size_t ow_lo, ow_hi;
                    valid_range(kw, d, d.in_w, ow_n, ow_lo, ow_hi);
                    const double w = weight[((co * d.in_ch + ci) * k + kh) * k + kw];
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const double* row = in + (oh * d.stride + kh - d.pad) * d.in_w;
                        double* orow = out + oh * ow_n;
                        if (d.stride == 1) {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += w * row[ow + kw - d.pad];
                        } else {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += w * row[ow * d.stride + kw - d.pad];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(const ConvDims& d, In grad_output, In weight, Out grad_input) {
    const std::size_t oh_n = d.out_h(), ow_n = d.out_w(), k = d.kernel;
    const std::size_t in_plane = d.in_h * d.in_w, out_plane = oh_n * ow_n;
    const long total = static_cast<long>(d.batch * d.in_ch);
#pragma omp parallel for schedule(static)
    for (long job = 0; job < total; ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / d.in_ch;
        const std::size_t ci = static_cast<std::size_t>(job) % d.in_ch;
        double* gin = grad_input.data() + (n * d.in_ch + ci) * in_plane;
        std::fill(gin, gin + in_plane, 0.0);
        for (std::size_t co = 0; co < d.out_ch; ++co) {
            const double* g = grad_output.data() + (n * d.out_ch + co) * out_plane;
            for (std::size_t kh = 0; kh < k; ++kh) {
                std::size_t oh_lo, oh_hi;
                valid_range(kh, d, d.in_h, oh_n, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < k; ++kw) {
                    std::size_t ow_lo, ow_hi;
                    valid_range(kw, d, d.in_w, ow_n, ow_lo, ow_hi);
                    const double w = weight[((co * d.in_ch + ci) * k + kh) * k + kw];
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        double* row = gin + (oh * d.stride + kh - d.pad) * d.in_w;
                        const double* grow = g + oh * ow_n;
                        if (d.stride == 1) {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) row[ow + kw - d.pad] += w * grow[ow];
                        } else {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) row[ow * d.stride + kw - d.pad] += w * grow[ow];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_params(const ConvDims& d, In input, In grad_output, Out grad_weight, Out grad_bias) {
    const std::size_t oh_n = d.out_h(), ow_n = d.out_w(), k = d.kernel;
    const std::size_t in_plane = d.in_h * d.in_w, out_plane = oh_n * ow_n;
    const long total = static_cast<long>(d.out_ch);
#pragma omp parallel for schedule(static)
    for (long job = 0; job < total; ++job) {
        const std::size_t co = static_cast<std::size_t>(job);
        for (std::size_t n = 0; n < d.batch; ++n) {
            const double* g = grad_output.data() + (n * d.out_ch + co) * out_plane;
            double bsum = 0.0;
            for (std::size_t i = 0; i < out_plane; ++i) bsum += g[i];
            grad_bias[co] += bsum;
            for (std::size_t ci = 0; ci < d.in_ch; ++ci) {
                const double* in = input.data() + (n * d.in_ch + ci) * in_plane;
                for (std::size_t kh = 0; kh < k; ++kh) {
                    std::size_t oh_lo, oh_hi;
                    valid_range(kh, d, d.in_h, oh_n, oh_lo, oh_hi);
                    for (std::size_t kw = 0; kw < k; ++kw) {
                        std::size_t ow_lo, ow_hi;
                        valid_range(kw, d, d.in_w, ow_n, ow_lo, ow_hi);
                        double acc = 0.0;
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const double* row = in + (oh * d.stride + kh - d.pad) * d.in_w;
                            const double* grow = g + oh * ow_n;
                            if (d.stride == 1) {
                                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * row[ow + kw - d.pad];
                            } else {
                                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * row[ow * d.stride + kw - d.pad];
                            }
                        }
                        grad_weight[((co * d.in_ch + ci) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
}

void dense_forward(const DenseDims& d, In input, In weight, In bias, Out output) {
    const long total = static_cast<long>(d.batch * d.out);
#pragma omp parallel for schedule(static)
    for (long job = 0; job < total; ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / d.out;
        const std::size_t o = static_cast<std::size_t>(job) % d.out;
        const double* w = weight.data() + o * d.in;
        const double* x = input.data() + n * d.in;
        double acc = 0.0;
        for (std::size_t i = 0; i < d.in; ++i) acc += w[i] * x[i];
        output[job] = acc + bias[o];
    }
}

void dense_backward_input(const DenseDims& d, In grad_output, In weight, Out grad_input) {
    const long total = static_cast<long>(d.batch);
#pragma omp parallel for schedule(static)
    for (long job = 0; job < total; ++job) {
        const std::size_t n = static_cast<std::size_t>(job);
        double* gi = grad_input.data() + n * d.in;
        std::fill(gi, gi + d.in, 0.0);
        for (std::size_t o = 0; o < d.out; ++o) {
            const double g = grad_output[n * d.out + o];
            const double* w = weight.data() + o * d.in;
            for (std::size_t i = 0; i < d.in; ++i) gi[i] += g * w[i];
        }
    }
}

void dense_backward_params(const DenseDims& d, In input, In grad_output, Out grad_weight, Out grad_bias) {
    const long total = static_cast<long>(d.out);
#pragma omp parallel for schedule(static)
    for (long job = 0; job < total; ++job) {
        const std::size_t o = static_cast<std::size_t>(job);
        double* gw = grad_weight.data() + o * d.in;
        for (std::size_t n = 0; n < d.batch; ++n) {
            const double g = grad_output[n * d.out + o];
            grad_bias[o] += g;
            const double* x = input.data() + n * d.in;
            for (std::size_t i = 0; i < d.in; ++i) gw[i] += g * x[i];
        }
    }
}

void separable_blur(const PlaneDims& d, In kernel1d, In input, Out output) {
    const long r = static_cast<long>(kernel1d.size() / 2);
    const long h = static_cast<long>(d.height), w = static_cast<long>(d.width);
    const long total = static_cast<long>(d.planes);
#pragma omp parallel for schedule(static)
    for (long p = 0; p < total; ++p) {
        const std::size_t base = static_cast<std::size_t>(p) * d.height * d.width;
        std::vector<double> tmp(d.height * d.width);
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double acc = 0.0, norm = 0.0;
                for (long t = std::max(-r, -x); t <= std::min(r, w - 1 - x); ++t) {
                    const double k = kernel1d[static_cast<std::size_t>(t + r)];
                    acc += k * input[base + static_cast<std::size_t>(y * w + x + t)];
                    norm += k;
                }
                tmp[static_cast<std::size_t>(y * w + x)] = acc / norm;
            }
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double acc = 0.0, norm = 0.0;
                for (long t = std::max(-r, -y); t <= std::min(r, h - 1 - y); ++t) {
                    const double k = kernel1d[static_cast<std::size_t>(t + r)];
                    acc += k * tmp[static_cast<std::size_t>((y + t) * w + x)];
                    norm += k;
                }
                output[base + static_cast<std::size_t>(y * w + x)] = acc / norm;
            }
    }
}

}  // namespace cfx::kernels::parallel

namespace cfx::kernels {

namespace {
Backend g_backend = Backend::parallel;
}

void set_backend(Backend b) { g_backend = b; }
Backend backend() { return g_backend; }

#define CFX_DISPATCH(name, ...)                                  \
    if (g_backend == Backend::serial) return serial::name(__VA_ARGS__); \
    return parallel::name(__VA_ARGS__)

void conv2d_forward(const ConvDims& d, In input, In weight, In bias, Out output) {
    CFX_DISPATCH(conv2d_forward, d, input, weight, bias, output);
}
void conv2d_backward_input(const ConvDims& d, In grad_output, In weight, Out grad_input) {
    CFX_DISPATCH(conv2d_backward_input, d, grad_output, weight, grad_input);
}
void conv2d_backward_params(const ConvDims& d, In input, In grad_output, Out grad_weight, Out grad_bias) {
    CFX_DISPATCH(conv2d_backward_params, d, input, grad_output, grad_weight, grad_bias);
}
void dense_forward(const DenseDims& d, In input, In weight, In bias, Out output) {
    CFX_DISPATCH(dense_forward, d, input, weight, bias, output);
}
void dense_backward_input(const DenseDims& d, In grad_output, In weight, Out grad_input) {
    CFX_DISPATCH(dense_backward_input, d, grad_output, weight, grad_input);
}
void dense_backward_params(const DenseDims& d, In input, In grad_output, Out grad_weight, Out grad_bias) {
    CFX_DISPATCH(dense_backward_params, d, input, grad_output, grad_weight, grad_bias);
}
void separable_blur(const PlaneDims& d, In kernel1d, In input, Out output) {
    CFX_DISPATCH(separable_blur, d, kernel1d, input, output);
}

#undef CFX_DISPATCH

}  // namespace cfx::kernels
