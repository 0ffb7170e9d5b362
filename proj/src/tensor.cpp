#include "cfx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cfx {

std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape))
        throw ShapeError("tensor data of " + std::to_string(data.size()) + " elements does not fit shape " +
                         to_string(shape));
}

Tensor Tensor::slice(std::size_t first, std::size_t count) const {
    if (first + count > batch()) throw ShapeError("slice out of range");
    Shape s = shape;
    s[0] = count;
    const std::size_t ss = sample_size();
    Tensor out(s);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(first * ss), count * ss, out.data.begin());
    return out;
}

Tensor Tensor::gather(std::span<const std::size_t> rows) const {
    Shape s = shape;
    s[0] = rows.size();
    const std::size_t ss = sample_size();
    Tensor out(s);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= batch()) throw ShapeError("gather index out of range");
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(rows[i] * ss), ss,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * ss));
    }
    return out;
}

Tensor Tensor::reshaped(Shape s) const {
    if (numel(s) != size()) throw ShapeError("cannot reshape " + to_string(shape) + " to " + to_string(s));
    return Tensor(std::move(s), data);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* context) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(context) + ": shape mismatch " + to_string(a.shape) + " vs " +
                         to_string(b.shape));
}

Tensor concat_batch(std::span<const Tensor> parts) {
    if (parts.empty()) return {};
    Shape s = parts.front().shape;
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.sample_shape() != parts.front().sample_shape()) throw ShapeError("concat_batch: sample shape mismatch");
        n += p.batch();
    }
    s[0] = n;
    Tensor out(s);
    auto it = out.data.begin();
    for (const auto& p : parts) it = std::copy(p.data.begin(), p.data.end(), it);
    return out;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "subtract");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor operator*(double s, const Tensor& a) {
    Tensor out = a;
    for (auto& v : out.data) v *= s;
    return out;
}

Tensor& operator+=(Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
    return a;
}

void axpy(double s, const Tensor& b, Tensor& a) {
    require_same_shape(a, b, "axpy");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += s * b.data[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

double mean(std::span<const double> a) {
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (double v : a) s += v;
    return s / static_cast<double>(a.size());
}

bool all_finite(std::span<const double> a) {
    return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

Tensor clipped(const Tensor& a, double lo, double hi) {
    Tensor out = a;
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return out;
}

}  // namespace cfx
