#include "cgssl/nn/optim.hpp"

#include <cmath>

namespace cgssl::nn {

Sgd::Sgd(std::vector<ParamRef> params, double learning_rate, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.value->shape());
}

void Sgd::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& value = params_[i].value->storage();
        const auto& grad = params_[i].grad->storage();
        auto& vel = velocity_[i].storage();
        for (std::size_t j = 0; j < value.size(); ++j) {
            vel[j] = momentum_ * vel[j] + grad[j] + weight_decay_ * value[j];
            value[j] -= lr_ * vel[j];
        }
    }
}

void Sgd::zero_grad() {
    for (auto& p : params_) p.grad->fill(0.0);
}

Adam::Adam(std::vector<ParamRef> params, double learning_rate, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.value->shape());
        v_.emplace_back(p.value->shape());
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& value = params_[i].value->storage();
        const auto& grad = params_[i].grad->storage();
        auto& m = m_[i].storage();
        auto& v = v_[i].storage();
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
            value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.grad->fill(0.0);
}

}  // namespace cgssl::nn
