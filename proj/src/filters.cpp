#include "cfx/filters.hpp"

#include <cmath>

#include "cfx/kernels.hpp"

namespace cfx {

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("gaussian sigma must be positive");
    const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(radius);
        k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        total += k[i];
    }
    for (auto& v : k) v /= total;
    return k;
}

Tensor gaussian_blur(const Tensor& x, double sigma) {
    if (x.rank() != 4) throw ShapeError("gaussian_blur expects (N, C, H, W), got " + to_string(x.shape));
    Tensor out(x.shape);
    const auto k = gaussian_kernel(sigma);
    kernels::separable_blur({x.dim(0) * x.dim(1), x.dim(2), x.dim(3)}, k, x.data, out.data);
    return out;
}

}  // namespace cfx
