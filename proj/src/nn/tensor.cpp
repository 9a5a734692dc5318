#include "cgssl/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "cgssl/error.hpp"

namespace cgssl::nn {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << ')';
    return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_size(shape_)) {
        throw InvalidInput("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
}

std::size_t Tensor::row_size() const {
    if (shape_.empty()) return 1;
    return shape_[0] == 0 ? shape_size(Shape(shape_.begin() + 1, shape_.end())) : data_.size() / shape_[0];
}

std::span<double> Tensor::row(std::size_t i) {
    const auto n = row_size();
    return std::span<double>(data_).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
    const auto n = row_size();
    return std::span<const double>(data_).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
}

void Tensor::reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
        throw InvalidInput("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
    if (t.rank() == 0 || end > t.dim(0) || begin > end) {
        throw InvalidInput("row slice out of range for shape " + shape_string(t.shape()));
    }
    Shape shape = t.shape();
    shape[0] = end - begin;
    const auto n = t.row_size();
    std::vector<double> values(t.storage().begin() + static_cast<std::ptrdiff_t>(begin * n),
                               t.storage().begin() + static_cast<std::ptrdiff_t>(end * n));
    return Tensor(std::move(shape), std::move(values));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw InvalidInput("cannot concatenate " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
    }
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    std::vector<double> values;
    values.reserve(a.size() + b.size());
    values.insert(values.end(), a.storage().begin(), a.storage().end());
    values.insert(values.end(), b.storage().begin(), b.storage().end());
    return Tensor(std::move(shape), std::move(values));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw InvalidInput("nothing to concatenate");
    Shape shape = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
            throw InvalidInput("cannot concatenate " + shape_string(shape) + " with " + shape_string(p.shape()));
        }
        total += p.dim(0);
    }
    shape[0] = total;
    std::vector<double> values;
    values.reserve(shape_size(shape));
    for (const auto& p : parts) values.insert(values.end(), p.storage().begin(), p.storage().end());
    return Tensor(std::move(shape), std::move(values));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
    Shape shape = t.shape();
    shape[0] = rows.size();
    Tensor out(shape);
    const auto n = t.row_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= t.dim(0)) throw InvalidInput("gather index out of range");
        std::copy_n(t.data() + rows[i] * n, n, out.data() + i * n);
    }
    return out;
}

}  // namespace cgssl::nn
