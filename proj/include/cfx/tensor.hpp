#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cfx/errors.hpp"

namespace cfx {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& s);

// Dense row-major array of doubles. Rank-4 tensors are laid out
// (batch, channel, height, width); rank-2 tensors are (batch, features).
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> values);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t batch() const { return shape.empty() ? 0 : shape[0]; }
    // Elements per batch entry.
    std::size_t sample_size() const { return shape.empty() || shape[0] == 0 ? 0 : size() / shape[0]; }
    Shape sample_shape() const { return Shape(shape.begin() + 1, shape.end()); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    std::span<double> sample(std::size_t n) { return {data.data() + n * sample_size(), sample_size()}; }
    std::span<const double> sample(std::size_t n) const {
        return {data.data() + n * sample_size(), sample_size()};
    }

    // Copies batch entries [first, first + count).
    Tensor slice(std::size_t first, std::size_t count) const;
    // Gathers the given batch entries in order.
    Tensor gather(std::span<const std::size_t> rows) const;
    Tensor reshaped(Shape s) const;

    bool operator==(const Tensor&) const = default;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* context);

// Concatenates along the batch axis; all inputs share a sample shape.
Tensor concat_batch(std::span<const Tensor> parts);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor& operator+=(Tensor& a, const Tensor& b);
// a += s * b
void axpy(double s, const Tensor& b, Tensor& a);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
double max_abs(std::span<const double> a);
double mean(std::span<const double> a);
bool all_finite(std::span<const double> a);
Tensor clipped(const Tensor& a, double lo, double hi);

}  // namespace cfx
