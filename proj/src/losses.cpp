#include "cgssl/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cgssl/error.hpp"

namespace cgssl {

namespace {

void check_pair(const Tensor& logits, const Tensor& targets) {
    if (logits.rank() != 2 || logits.shape() != targets.shape()) {
        throw InvalidInput("logits " + nn::shape_string(logits.shape()) + " and targets " +
                           nn::shape_string(targets.shape()) + " must be matching (N, C) matrices");
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw InvalidInput("softmax_rows expects an (N, C) matrix");
    Tensor p(logits.shape());
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        const double* z = logits.data() + i * c;
        double* out = p.data() + i * c;
        const double m = *std::max_element(z, z + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[j] = std::exp(z[j] - m);
            sum += out[j];
        }
        for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
    }
    return p;
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
    Tensor t({labels.size(), num_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) throw InvalidInput("label out of range");
        t[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return t;
}

LossAndGrad soft_cross_entropy(const Tensor& logits, const Tensor& targets) {
    check_pair(logits, targets);
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    LossAndGrad out{0.0, Tensor(logits.shape())};
    if (n == 0) return out;
    const Tensor p = softmax_rows(logits);
    for (std::size_t i = 0; i < n; ++i) {
        const double* z = logits.data() + i * c;
        const double m = *std::max_element(z, z + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(z[j] - m);
        const double log_norm = m + std::log(sum);
        for (std::size_t j = 0; j < c; ++j) {
            const double t = targets[i * c + j];
            if (t != 0.0) out.loss -= t * (z[j] - log_norm);
            out.grad[i * c + j] = (p[i * c + j] - t) / static_cast<double>(n);
        }
    }
    out.loss /= static_cast<double>(n);
    return out;
}

LossAndGrad softmax_squared_error(const Tensor& logits, const Tensor& targets) {
    check_pair(logits, targets);
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    LossAndGrad out{0.0, Tensor(logits.shape())};
    if (n == 0) return out;
    const Tensor p = softmax_rows(logits);
    const double scale = 1.0 / static_cast<double>(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        const double* pi = p.data() + i * c;
        const double* ti = targets.data() + i * c;
        // dL/dp_j = 2 (p_j - t_j) / (N C); chain through the softmax Jacobian.
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = pi[j] - ti[j];
            out.loss += d * d;
            dot += 2.0 * d * scale * pi[j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            const double g = 2.0 * (pi[j] - ti[j]) * scale;
            out.grad[i * c + j] = pi[j] * (g - dot);
        }
    }
    out.loss *= scale;
    return out;
}

std::vector<int> argmax_rows(const Tensor& m) {
    if (m.rank() != 2) throw InvalidInput("argmax_rows expects an (N, C) matrix");
    std::vector<int> out(m.dim(0));
    for (std::size_t i = 0; i < m.dim(0); ++i) {
        const double* row = m.data() + i * m.dim(1);
        out[i] = static_cast<int>(std::max_element(row, row + m.dim(1)) - row);
    }
    return out;
}

}  // namespace cgssl
