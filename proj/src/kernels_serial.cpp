#include <vector>

#include "cfx/kernels.hpp"

namespace cfx::kernels::serial {

namespace {

// Input coordinate feeding output coordinate o through kernel tap k, or -1.
long tap(std::size_t o, std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent) {
    const long i = static_cast<long>(o * stride + k) - static_cast<long>(pad);
    return (i >= 0 && i < static_cast<long>(extent)) ? i : -1;
}

}  // namespace

void conv2d_forward(const ConvDims& d, In input, In weight, In bias, Out output) {
    const std::size_t oh_n = d.out_h(), ow_n = d.out_w(), k = d.kernel;
    for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t co = 0; co < d.out_ch; ++co)
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    double acc = bias[co];
                    for (std::size_t ci = 0; ci < d.in_ch; ++ci)
                        for (std::size_t kh = 0; kh < k; ++kh)
                            for (std::size_t kw = 0; kw < k; ++kw) {
                                const long ih = tap(oh, kh, d.stride, d.pad, d.in_h);
                                const long iw = tap(ow, kw, d.stride, d.pad, d.in_w);
                                if (ih < 0 || iw < 0) continue;
                                acc += weight[((co * d.in_ch + ci) * k + kh) * k + kw] *
                                       input[((n * d.in_ch + ci) * d.in_h + ih) * d.in_w + iw];
                            }
                    output[((n * d.out_ch + co) * oh_n + oh) * ow_n + ow] = acc;
                }
}

void conv2d_backward_input(const ConvDims& d, In grad_output, In weight, Out grad_input) {
    const std::size_t oh_n = d.out_h(), ow_n = d.out_w(), k = d.kernel;
    for (auto& g : grad_input) g = 0.0;
    for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t co = 0; co < d.out_ch; ++co)
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    const double g = grad_output[((n * d.out_ch + co) * oh_n + oh) * ow_n + ow];
                    for (std::size_t ci = 0; ci < d.in_ch; ++ci)
                        for (std::size_t kh = 0; kh < k; ++kh)
                            for (std::size_t kw = 0; kw < k; ++kw) {
                                const long ih = tap(oh, kh, d.stride, d.pad, d.in_h);
                                const long iw = tap(ow, kw, d.stride, d.pad, d.in_w);
                                if (ih < 0 || iw < 0) continue;
                                grad_input[((n * d.in_ch + ci) * d.in_h + ih) * d.in_w + iw] +=
                                    g * weight[((co * d.in_ch + ci) * k + kh) * k + kw];
                            }
                }
}

void conv2d_backward_params(const ConvDims& d, In input, In grad_output, Out grad_weight, Out grad_bias) {
    const std::size_t oh_n = d.out_h(), ow_n = d.out_w(), k = d.kernel;
    for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t co = 0; co < d.out_ch; ++co)
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    const double g = grad_output[((n * d.out_ch + co) * oh_n + oh) * ow_n + ow];
                    grad_bias[co] += g;
                    for (std::size_t ci = 0; ci < d.in_ch; ++ci)
                        for (std::size_t kh = 0; kh < k; ++kh)
                            for (std::size_t kw = 0; kw < k; ++kw) {
                                const long ih = tap(oh, kh, d.stride, d.pad, d.in_h);
                                const long iw = tap(ow, kw, d.stride, d.pad, d.in_w);
                                if (ih < 0 || iw < 0) continue;
                                grad_weight[((co * d.in_ch + ci) * k + kh) * k + kw] +=
                                    g * input[((n * d.in_ch + ci) * d.in_h + ih) * d.in_w + iw];
                            }
                }
}

void dense_forward(const DenseDims& d, In input, In weight, In bias, Out output) {
    for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t o = 0; o < d.out; ++o) {
            double acc = bias[o];
            for (std::size_t i = 0; i < d.in; ++i) acc += weight[o * d.in + i] * input[n * d.in + i];
            output[n * d.out + o] = acc;
        }
}

void dense_backward_input(const DenseDims& d, In grad_output, In weight, Out grad_input) {
    for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t i = 0; i < d.in; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < d.out; ++o) acc += grad_output[n * d.out + o] * weight[o * d.in + i];
            grad_input[n * d.in + i] = acc;
        }
}

void dense_backward_params(const DenseDims& d, In input, In grad_output, Out grad_weight, Out grad_bias) {
    for (std::size_t o = 0; o < d.out; ++o) {
        for (std::size_t n = 0; n < d.batch; ++n) grad_bias[o] += grad_output[n * d.out + o];
        for (std::size_t i = 0; i < d.in; ++i)
            for (std::size_t n = 0; n < d.batch; ++n)
                grad_weight[o * d.in + i] += grad_output[n * d.out + o] * input[n * d.in + i];
    }
}

void separable_blur(const PlaneDims& d, In kernel1d, In input, Out output) {
    const long r = static_cast<long>(kernel1d.size() / 2);
    const long h = static_cast<long>(d.height), w = static_cast<long>(d.width);
    for (std::size_t p = 0; p < d.planes; ++p) {
        const std::size_t base = p * d.height * d.width;
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double acc = 0.0, norm = 0.0;
                for (long dy = -r; dy <= r; ++dy)
                    for (long dx = -r; dx <= r; ++dx) {
                        const long yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        const double wgt = kernel1d[static_cast<std::size_t>(dy + r)] *
                                           kernel1d[static_cast<std::size_t>(dx + r)];
                        acc += wgt * input[base + static_cast<std::size_t>(yy * w + xx)];
                        norm += wgt;
                    }
                output[base + static_cast<std::size_t>(y * w + x)] = acc / norm;
            }
    }
}

}  // namespace cfx::kernels::serial
