#pragma once

#include <vector>

#include "cfx/tensor.hpp"

namespace cfx {

// Normalized Gaussian taps of standard deviation sigma, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

// Blurs every (H, W) plane of a rank-4 tensor. Taps outside the plane are
// dropped and the remaining weights renormalized.
Tensor gaussian_blur(const Tensor& x, double sigma);

}  // namespace cfx
