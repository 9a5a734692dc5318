#pragma once

#include <vector>

#include "cgssl/nn/layers.hpp"

namespace cgssl::nn {

// SGD with heavy-ball momentum: v = m*v + g + wd*p; p -= lr*v.
class Sgd {
public:
    Sgd(std::vector<ParamRef> params, double learning_rate, double momentum, double weight_decay = 0.0);
    void step();
    void zero_grad();
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    std::vector<ParamRef> params_;
    std::vector<Tensor> velocity_;
    double lr_, momentum_, weight_decay_;
};

class Adam {
public:
    Adam(std::vector<ParamRef> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step();
    void zero_grad();

private:
    std::vector<ParamRef> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace cgssl::nn
