#pragma once

#include <span>
#include <vector>

#include "cgssl/nn/tensor.hpp"

namespace cgssl {

using nn::Tensor;

// Row-wise softmax of an (N, C) logit matrix with max subtraction.
Tensor softmax_rows(const Tensor& logits);

Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

struct LossAndGrad {
    double loss = 0.0;
    Tensor grad;  // d loss / d logits
};

// Mean over rows of -sum_c t_c log softmax(z)_c.
LossAndGrad soft_cross_entropy(const Tensor& logits, const Tensor& targets);

// Mean over rows and classes of (softmax(z)_c - t_c)^2.
LossAndGrad softmax_squared_error(const Tensor& logits, const Tensor& targets);

std::vector<int> argmax_rows(const Tensor& m);

}  // namespace cgssl
