#pragma once

// Data-parallel numeric kernels behind the neural network layers and the
// residual blur used by the masking code.
//
// Two implementations live side by side:
//   serial::   direct per-output-element formulas, kept as the reference
//   parallel:: loop-reordered OpenMP versions used in production
// Each parallel kernel assigns every output element to exactly one thread and
// sums in a fixed order, so results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace cfx::kernels {

struct ConvDims {
    std::size_t batch = 1;
    std::size_t in_ch = 1;
    std::size_t in_h = 1;
    std::size_t in_w = 1;
    std::size_t out_ch = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;

    std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    std::size_t in_size() const { return batch * in_ch * in_h * in_w; }
    std::size_t out_size() const { return batch * out_ch * out_h() * out_w(); }
    std::size_t weight_size() const { return out_ch * in_ch * kernel * kernel; }
};

struct DenseDims {
    std::size_t batch = 1;
    std::size_t in = 1;
    std::size_t out = 1;
};

// Independent planes of size height x width (batch * channels of them).
struct PlaneDims {
    std::size_t planes = 1;
    std::size_t height = 1;
    std::size_t width = 1;
};

using In = std::span<const double>;
using Out = std::span<double>;

#define CFX_KERNEL_DECLS                                                                      \
    void conv2d_forward(const ConvDims& d, In input, In weight, In bias, Out output);         \
    /* grad_input is overwritten */                                                          \
    void conv2d_backward_input(const ConvDims& d, In grad_output, In weight, Out grad_input); \
    /* grad_weight and grad_bias are accumulated into */                                     \
    void conv2d_backward_params(const ConvDims& d, In input, In grad_output, Out grad_weight,  \
                                Out grad_bias);                                               \
    void dense_forward(const DenseDims& d, In input, In weight, In bias, Out output);         \
    void dense_backward_input(const DenseDims& d, In grad_output, In weight, Out grad_input); \
    void dense_backward_params(const DenseDims& d, In input, In grad_output, Out grad_weight, \
                               Out grad_bias);                                                \
    /* Separable blur with a symmetric 1-D kernel of odd length. Taps falling outside */     \
    /* the plane are dropped and the remaining weights renormalized. */                      \
    void separable_blur(const PlaneDims& d, In kernel1d, In input, Out output);

namespace serial {
CFX_KERNEL_DECLS
}  // namespace serial

namespace parallel {
CFX_KERNEL_DECLS
}  // namespace parallel

#undef CFX_KERNEL_DECLS

enum class Backend { serial, parallel };

// Process-wide backend selection used by the dispatching wrappers below.
void set_backend(Backend b);
Backend backend();

void conv2d_forward(const ConvDims& d, In input, In weight, In bias, Out output);
void conv2d_backward_input(const ConvDims& d, In grad_output, In weight, Out grad_input);
void conv2d_backward_params(const ConvDims& d, In input, In grad_output, Out grad_weight, Out grad_bias);
void dense_forward(const DenseDims& d, In input, In weight, In bias, Out output);
void dense_backward_input(const DenseDims& d, In grad_output, In weight, Out grad_input);
void dense_backward_params(const DenseDims& d, In input, In grad_output, Out grad_weight, Out grad_bias);
void separable_blur(const PlaneDims& d, In kernel1d, In input, Out output);

}  // namespace cfx::kernels
