#include "cgssl/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cgssl/error.hpp"

namespace cgssl::nn {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;

void require_rank(const Tensor& x, std::size_t rank, const char* layer) {
    if (x.rank() != rank) {
        throw InvalidInput(std::string(layer) + " expects a rank-" + std::to_string(rank) + " input, got " +
                           shape_string(x.shape()));
    }
}

void add_child(const std::string& prefix, const std::string& name, Layer& child, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) {
    child.collect(prefix + name + ".", params, buffers);
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : in_(in), out_(out), weight_({out, in}), bias_({out}), grad_weight_({out, in}), grad_bias_({out}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : weight_.storage()) w = rng.uniform(-bound, bound);
    for (auto& b : bias_.storage()) b = rng.uniform(-bound, bound);
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
    require_rank(x, 2, "Linear");
    if (x.dim(1) != in_) {
        throw InvalidInput("Linear expects " + std::to_string(in_) + " features, got " + shape_string(x.shape()));
    }
    const std::size_t n = x.dim(0);
    Tensor y({n, out_});
    if (n > 0) {
        ConstMapRM X(x.data(), n, in_);
        ConstMapRM W(weight_.data(), out_, in_);
        MapRM Y(y.data(), n, out_);
        Y.noalias() = X * W.transpose();
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias_.data(), out_);
    }
    if (mode == Mode::kTrain) input_ = x;
    return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
    const std::size_t n = input_.dim(0);
    Tensor gx({n, in_});
    if (n == 0) return gx;
    ConstMapRM G(grad_out.data(), n, out_);
    ConstMapRM X(input_.data(), n, in_);
    ConstMapRM W(weight_.data(), out_, in_);
    MapRM(grad_weight_.data(), out_, in_).noalias() += G.transpose() * X;
    Eigen::Map<Eigen::RowVectorXd>(grad_bias_.data(), out_) += G.colwise().sum();
    MapRM(gx.data(), n, in_).noalias() = G * W;
    return gx;
}

void Linear::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>&) {
    params.push_back({prefix + "weight", &weight_, &grad_weight_});
    params.push_back({prefix + "bias", &bias_, &grad_bias_});
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
               std::size_t padding, bool bias, Rng& rng)
    : in_c_(in_channels),
      out_c_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding),
      has_bias_(bias),
      weight_({out_channels, in_channels * kernel * kernel}),
      grad_weight_({out_channels, in_channels * kernel * kernel}) {
    if (stride == 0 || kernel == 0) throw InvalidArchitecture("convolution kernel and stride must be positive");
    // Kaiming normal, fan-out mode.
    const double std = std::sqrt(2.0 / static_cast<double>(out_channels * kernel * kernel));
    for (auto& w : weight_.storage()) w = std * rng.normal();
    if (has_bias_) {
        bias_ = Tensor({out_channels});
        grad_bias_ = Tensor({out_channels});
    }
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
    require_rank(x, 4, "Conv2d");
    if (x.dim(1) != in_c_) {
        throw InvalidInput("Conv2d expects " + std::to_string(in_c_) + " channels, got " + shape_string(x.shape()));
    }
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (h + 2 * pad_ < k_ || w + 2 * pad_ < k_) throw InvalidInput("Conv2d input smaller than kernel");
    const std::size_t ho = (h + 2 * pad_ - k_) / stride_ + 1;
    const std::size_t wo = (w + 2 * pad_ - k_) / stride_ + 1;
    const std::size_t hw_out = ho * wo;
    const std::size_t rows = in_c_ * k_ * k_;
    const std::size_t cols = n * hw_out;

    Tensor columns({rows, cols});
    double* col = columns.data();
    for (std::size_t c = 0; c < in_c_; ++c) {
        for (std::size_t ki = 0; ki < k_; ++ki) {
            for (std::size_t kj = 0; kj < k_; ++kj) {
                double* dst = col + ((c * k_ + ki) * k_ + kj) * cols;
                for (std::size_t b = 0; b < n; ++b) {
                    const double* src = x.data() + (b * in_c_ + c) * h * w;
                    double* out = dst + b * hw_out;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh * stride_ + ki) - static_cast<long>(pad_);
                        double* orow = out + oh * wo;
                        if (ih < 0 || ih >= static_cast<long>(h)) {
                            std::fill_n(orow, wo, 0.0);
                            continue;
                        }
                        const double* srow = src + static_cast<std::size_t>(ih) * w;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw = static_cast<long>(ow * stride_ + kj) - static_cast<long>(pad_);
                            orow[ow] = (iw < 0 || iw >= static_cast<long>(w)) ? 0.0 : srow[iw];
                        }
                    }
                }
            }
        }
    }

    MatRM out_mat(out_c_, cols);
    if (cols > 0) {
        out_mat.noalias() = ConstMapRM(weight_.data(), out_c_, rows) * ConstMapRM(col, rows, cols);
    }
    Tensor y({n, out_c_, ho, wo});
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < out_c_; ++o) {
            const double bias = has_bias_ ? bias_[o] : 0.0;
            const double* src = out_mat.data() + o * cols + b * hw_out;
            double* dst = y.data() + (b * out_c_ + o) * hw_out;
            for (std::size_t i = 0; i < hw_out; ++i) dst[i] = src[i] + bias;
        }
    }
    if (mode == Mode::kTrain) {
        columns_ = std::move(columns);
        input_shape_ = x.shape();
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
    const std::size_t n = input_shape_[0], h = input_shape_[2], w = input_shape_[3];
    const std::size_t ho = grad_out.dim(2), wo = grad_out.dim(3);
    const std::size_t hw_out = ho * wo;
    const std::size_t rows = in_c_ * k_ * k_;
    const std::size_t cols = n * hw_out;

    MatRM g(out_c_, cols);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < out_c_; ++o) {
            std::copy_n(grad_out.data() + (b * out_c_ + o) * hw_out, hw_out, g.data() + o * cols + b * hw_out);
        }
    }
    Tensor gx(input_shape_);
    if (cols == 0) return gx;
    ConstMapRM col(columns_.data(), rows, cols);
    MapRM(grad_weight_.data(), out_c_, rows).noalias() += g * col.transpose();
    if (has_bias_) Eigen::Map<Eigen::VectorXd>(grad_bias_.data(), out_c_) += g.rowwise().sum();
    MatRM gcol(rows, cols);
    gcol.noalias() = ConstMapRM(weight_.data(), out_c_, rows).transpose() * g;

    for (std::size_t c = 0; c < in_c_; ++c) {
        for (std::size_t ki = 0; ki < k_; ++ki) {
            for (std::size_t kj = 0; kj < k_; ++kj) {
                const double* src = gcol.data() + ((c * k_ + ki) * k_ + kj) * cols;
                for (std::size_t b = 0; b < n; ++b) {
                    double* dst = gx.data() + (b * in_c_ + c) * h * w;
                    const double* in = src + b * hw_out;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh * stride_ + ki) - static_cast<long>(pad_);
                        if (ih < 0 || ih >= static_cast<long>(h)) continue;
                        double* drow = dst + static_cast<std::size_t>(ih) * w;
                        const double* irow = in + oh * wo;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw = static_cast<long>(ow * stride_ + kj) - static_cast<long>(pad_);
                            if (iw >= 0 && iw < static_cast<long>(w)) drow[iw] += irow[ow];
                        }
                    }
                }
            }
        }
    }
    return gx;
}

void Conv2d::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>&) {
    params.push_back({prefix + "weight", &weight_, &grad_weight_});
    if (has_bias_) params.push_back({prefix + "bias", &bias_, &grad_bias_});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::size_t channels, double momentum, double eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_({channels}, 1.0),
      beta_({channels}),
      grad_gamma_({channels}),
      grad_beta_({channels}),
      running_mean_({channels}),
      running_var_({channels}, 1.0) {}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
    if ((x.rank() != 4 && x.rank() != 2) || x.dim(1) != channels_) {
        throw InvalidInput("BatchNorm2d expects (N, " + std::to_string(channels_) + ", ...), got " +
                           shape_string(x.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const std::size_t count = n * spatial;
    Tensor y(x.shape());

    if (mode == Mode::kEval) {
        for (std::size_t c = 0; c < channels_; ++c) {
            const double scale = gamma_[c] / std::sqrt(running_var_[c] + eps_);
            const double shift = beta_[c] - running_mean_[c] * scale;
            for (std::size_t b = 0; b < n; ++b) {
                const double* src = x.data() + (b * channels_ + c) * spatial;
                double* dst = y.data() + (b * channels_ + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) dst[i] = src[i] * scale + shift;
            }
        }
        return y;
    }

    if (count < 2) throw InvalidInput("BatchNorm2d in training mode needs more than one value per channel");
    normalized_ = Tensor(x.shape());
    inv_std_ = Tensor({channels_});
    input_shape_ = x.shape();
    for (std::size_t c = 0; c < channels_; ++c) {
        double mean = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const double* src = x.data() + (b * channels_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) mean += src[i];
        }
        mean /= static_cast<double>(count);
        double var = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const double* src = x.data() + (b * channels_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) var += (src[i] - mean) * (src[i] - mean);
        }
        var /= static_cast<double>(count);
        const double inv_std = 1.0 / std::sqrt(var + eps_);
        inv_std_[c] = inv_std;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * channels_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                const double xh = (x[off + i] - mean) * inv_std;
                normalized_[off + i] = xh;
                y[off + i] = gamma_[c] * xh + beta_[c];
            }
        }
        running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
        const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
        running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
    const std::size_t n = input_shape_[0];
    const std::size_t spatial = input_shape_.size() == 4 ? input_shape_[2] * input_shape_[3] : 1;
    const double count = static_cast<double>(n * spatial);
    Tensor gx(input_shape_);
    for (std::size_t c = 0; c < channels_; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * channels_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                sum_g += grad_out[off + i];
                sum_gx += grad_out[off + i] * normalized_[off + i];
            }
        }
        grad_beta_[c] += sum_g;
        grad_gamma_[c] += sum_gx;
        const double k = gamma_[c] * inv_std_[c] / count;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * channels_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                gx[off + i] = k * (count * grad_out[off + i] - sum_g - normalized_[off + i] * sum_gx);
            }
        }
    }
    return gx;
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
    params.push_back({prefix + "weight", &gamma_, &grad_gamma_});
    params.push_back({prefix + "bias", &beta_, &grad_beta_});
    buffers.push_back({prefix + "running_mean", &running_mean_});
    buffers.push_back({prefix + "running_var", &running_var_});
}

// ---------------------------------------------------------------------------
// Pointwise and shape layers

Tensor ReLU::forward(const Tensor& x, Mode mode) {
    Tensor y = x;
    for (auto& v : y.storage()) v = v > 0.0 ? v : 0.0;
    if (mode == Mode::kTrain) mask_ = x;
    return y;
}

Tensor ReLU::backward(const Tensor& grad_out) {
    Tensor gx = grad_out;
    for (std::size_t i = 0; i < gx.size(); ++i) {
        if (!(mask_[i] > 0.0)) gx[i] = 0.0;
    }
    return gx;
}

Tensor Sigmoid::forward(const Tensor& x, Mode mode) {
    Tensor y = x;
    for (auto& v : y.storage()) {
        v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    if (mode == Mode::kTrain) output_ = y;
    return y;
}

Tensor Sigmoid::backward(const Tensor& grad_out) {
    Tensor gx = grad_out;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= output_[i] * (1.0 - output_[i]);
    return gx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, Mode mode) {
    require_rank(x, 4, "GlobalAvgPool");
    const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
    Tensor y({n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < spatial; ++j) s += x[i * spatial + j];
        y[i] = s / static_cast<double>(spatial);
    }
    if (mode == Mode::kTrain) input_shape_ = x.shape();
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
    Tensor gx(input_shape_);
    const std::size_t spatial = input_shape_[2] * input_shape_[3];
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
        const double g = grad_out[i] / static_cast<double>(spatial);
        std::fill_n(gx.data() + i * spatial, spatial, g);
    }
    return gx;
}

MaxPool2d::MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t padding)
    : k_(kernel), stride_(stride), pad_(padding) {}

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
    require_rank(x, 4, "MaxPool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = (h + 2 * pad_ - k_) / stride_ + 1;
    const std::size_t wo = (w + 2 * pad_ - k_) / stride_ + 1;
    Tensor y({n, c, ho, wo});
    std::vector<std::size_t> argmax(y.size());
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* src = x.data() + p * h * w;
        for (std::size_t oh = 0; oh < ho; ++oh) {
            for (std::size_t ow = 0; ow < wo; ++ow) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                for (std::size_t ki = 0; ki < k_; ++ki) {
                    const long ih = static_cast<long>(oh * stride_ + ki) - static_cast<long>(pad_);
                    if (ih < 0 || ih >= static_cast<long>(h)) continue;
                    for (std::size_t kj = 0; kj < k_; ++kj) {
                        const long iw = static_cast<long>(ow * stride_ + kj) - static_cast<long>(pad_);
                        if (iw < 0 || iw >= static_cast<long>(w)) continue;
                        const std::size_t idx = static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
                        if (src[idx] > best) {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                const std::size_t o = (p * ho + oh) * wo + ow;
                y[o] = best;
                argmax[o] = p * h * w + best_idx;
            }
        }
    }
    if (mode == Mode::kTrain) {
        input_shape_ = x.shape();
        argmax_ = std::move(argmax);
    }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
    Tensor gx(input_shape_);
    for (std::size_t i = 0; i < grad_out.size(); ++i) gx[argmax_[i]] += grad_out[i];
    return gx;
}

Tensor Reshape::forward(const Tensor& x, Mode mode) {
    Shape shape{x.dim(0)};
    shape.insert(shape.end(), trailing_.begin(), trailing_.end());
    if (mode == Mode::kTrain) input_shape_ = x.shape();
    return x.reshaped(std::move(shape));
}

Tensor Reshape::backward(const Tensor& grad_out) { return grad_out.reshaped(input_shape_); }

Tensor Flatten::forward(const Tensor& x, Mode mode) {
    if (mode == Mode::kTrain) input_shape_ = x.shape();
    return x.reshaped({x.dim(0), x.row_size()});
}

Tensor Flatten::backward(const Tensor& grad_out) { return grad_out.reshaped(input_shape_); }

Tensor Upsample2x::forward(const Tensor& x, Mode mode) {
    require_rank(x, 4, "Upsample2x");
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (std::size_t p = 0; p < nc; ++p) {
        const double* src = x.data() + p * h * w;
        double* dst = y.data() + p * 4 * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
            for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
        }
    }
    if (mode == Mode::kTrain) input_shape_ = x.shape();
    return y;
}

Tensor Upsample2x::backward(const Tensor& grad_out) {
    Tensor gx(input_shape_);
    const std::size_t nc = input_shape_[0] * input_shape_[1], h = input_shape_[2], w = input_shape_[3];
    for (std::size_t p = 0; p < nc; ++p) {
        const double* src = grad_out.data() + p * 4 * h * w;
        double* dst = gx.data() + p * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
            for (std::size_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Containers and blocks

Sequential& Sequential::add(LayerPtr layer) {
    layers_.push_back(std::move(layer));
    return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
    Tensor h = x;
    for (auto& layer : layers_) h = layer->forward(h, mode);
    return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
}

void Sequential::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
    for (std::size_t i = 0; i < layers_.size(); ++i) add_child(prefix, std::to_string(i), *layers_[i], params, buffers);
}

WideBasicBlock::WideBasicBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                               Rng& rng)
    : identity_(in_channels == out_channels && stride == 1),
      bn1_(in_channels),
      bn2_(out_channels),
      conv1_(in_channels, out_channels, 3, stride, 1, false, rng),
      conv2_(out_channels, out_channels, 3, 1, 1, false, rng) {
    if (!identity_) shortcut_ = std::make_unique<Conv2d>(in_channels, out_channels, 1, stride, 0, false, rng);
}

Tensor WideBasicBlock::forward(const Tensor& x, Mode mode) {
    Tensor o = relu1_.forward(bn1_.forward(x, mode), mode);
    Tensor y = conv1_.forward(o, mode);
    y = conv2_.forward(relu2_.forward(bn2_.forward(y, mode), mode), mode);
    const Tensor sc = identity_ ? x : shortcut_->forward(o, mode);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
    return y;
}

Tensor WideBasicBlock::backward(const Tensor& grad_out) {
    Tensor g = conv2_.backward(grad_out);
    g = bn2_.backward(relu2_.backward(g));
    Tensor go = conv1_.backward(g);
    if (!identity_) {
        const Tensor gs = shortcut_->backward(grad_out);
        for (std::size_t i = 0; i < go.size(); ++i) go[i] += gs[i];
    }
    Tensor gx = bn1_.backward(relu1_.backward(go));
    if (identity_) {
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += grad_out[i];
    }
    return gx;
}

void WideBasicBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                             std::vector<BufferRef>& buffers) {
    add_child(prefix, "bn1", bn1_, params, buffers);
    add_child(prefix, "conv1", conv1_, params, buffers);
    add_child(prefix, "bn2", bn2_, params, buffers);
    add_child(prefix, "conv2", conv2_, params, buffers);
    if (shortcut_) add_child(prefix, "shortcut", *shortcut_, params, buffers);
}

BottleneckBlock::BottleneckBlock(std::size_t in_channels, std::size_t width, std::size_t out_channels,
                                 std::size_t stride, Rng& rng) {
    branch_.emplace<Conv2d>(in_channels, width, 1, 1, 0, false, rng);
    branch_.emplace<BatchNorm2d>(width);
    branch_.emplace<ReLU>();
    branch_.emplace<Conv2d>(width, width, 3, stride, 1, false, rng);
    branch_.emplace<BatchNorm2d>(width);
    branch_.emplace<ReLU>();
    branch_.emplace<Conv2d>(width, out_channels, 1, 1, 0, false, rng);
    branch_.emplace<BatchNorm2d>(out_channels);
    if (in_channels != out_channels || stride != 1) {
        shortcut_ = std::make_unique<Sequential>();
        shortcut_->emplace<Conv2d>(in_channels, out_channels, 1, stride, 0, false, rng);
        shortcut_->emplace<BatchNorm2d>(out_channels);
    }
}

Tensor BottleneckBlock::forward(const Tensor& x, Mode mode) {
    Tensor y = branch_.forward(x, mode);
    const Tensor sc = shortcut_ ? shortcut_->forward(x, mode) : x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
    return out_relu_.forward(y, mode);
}

Tensor BottleneckBlock::backward(const Tensor& grad_out) {
    const Tensor g = out_relu_.backward(grad_out);
    Tensor gx = branch_.backward(g);
    const Tensor gs = shortcut_ ? shortcut_->backward(g) : g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gs[i];
    return gx;
}

void BottleneckBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                              std::vector<BufferRef>& buffers) {
    add_child(prefix, "branch", branch_, params, buffers);
    if (shortcut_) add_child(prefix, "shortcut", *shortcut_, params, buffers);
}

// ---------------------------------------------------------------------------
// State helpers

LayerState collect_state(Layer& root, const std::string& prefix) {
    LayerState state;
    root.collect(prefix, state.params, state.buffers);
    return state;
}

StateDict state_dict(Layer& root, const std::string& prefix) {
    StateDict out;
    auto state = collect_state(root, prefix);
    for (const auto& p : state.params) out.emplace(p.name, *p.value);
    for (const auto& b : state.buffers) out.emplace(b.name, *b.value);
    return out;
}

void load_state_dict(Layer& root, const StateDict& state, const std::string& prefix, bool strict) {
    auto refs = collect_state(root, prefix);
    auto assign = [&](const std::string& name, Tensor* target) {
        const auto it = state.find(name);
        if (it == state.end()) {
            if (strict) throw InvalidInput("checkpoint is missing entry '" + name + "'");
            return;
        }
        if (it->second.shape() != target->shape()) {
            throw InvalidInput("checkpoint entry '" + name + "' has shape " + shape_string(it->second.shape()) +
                               ", expected " + shape_string(target->shape()));
        }
        *target = it->second;
    };
    for (const auto& p : refs.params) assign(p.name, p.value);
    for (const auto& b : refs.buffers) assign(b.name, b.value);
}

void zero_grad(Layer& root) {
    for (auto& p : collect_state(root).params) p.grad->fill(0.0);
}

}  // namespace cgssl::nn
