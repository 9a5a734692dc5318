#pragma once

#include <map>
#include <memory>
#include "cgssl/random.hpp"
#include <string>
#include <vector>

#include "cgssl/nn/tensor.hpp"

namespace cgssl::nn {

enum class Mode { kTrain, kEval };

struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;
};

struct BufferRef {
    std::string name;
    Tensor* value;
};

using StateDict = std::map<std::string, Tensor>;

// A differentiable layer. forward() in kTrain mode caches what backward() needs;
// backward() accumulates parameter gradients and returns the input gradient.
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, Mode mode) = 0;
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual void collect(const std::string& prefix, std::vector<ParamRef>& params,
                         std::vector<BufferRef>& buffers) {
        (void)prefix;
        (void)params;
        (void)buffers;
    }
};

using LayerPtr = std::unique_ptr<Layer>;

class Linear final : public Layer {
public:
    Linear(std::size_t in, std::size_t out, Rng& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

    Tensor& weight() { return weight_; }
    Tensor& bias() { return bias_; }
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

private:
    std::size_t in_, out_;
    Tensor weight_, bias_, grad_weight_, grad_bias_;
    Tensor input_;
};

class Conv2d final : public Layer {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
           std::size_t padding, bool bias, Rng& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

private:
    std::size_t in_c_, out_c_, k_, stride_, pad_;
    bool has_bias_;
    Tensor weight_, bias_, grad_weight_, grad_bias_;
    Tensor columns_;
    Shape input_shape_;
};

// Normalizes over (N, H, W) per channel with batch statistics in kTrain mode and
// running statistics in kEval mode.
class BatchNorm2d final : public Layer {
public:
    explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double eps = 1e-5);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

private:
    std::size_t channels_;
    double momentum_, eps_;
    Tensor gamma_, beta_, grad_gamma_, grad_beta_;
    Tensor running_mean_, running_var_;
    Tensor normalized_, inv_std_;
    Shape input_shape_;
};

class ReLU final : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Tensor mask_;
};

class Sigmoid final : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Tensor output_;
};

class GlobalAvgPool final : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Shape input_shape_;
};

class MaxPool2d final : public Layer {
public:
    MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t padding);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::size_t k_, stride_, pad_;
    Shape input_shape_;
    std::vector<std::size_t> argmax_;
};

// Reshapes (N, ...) to (N, target...).
class Reshape final : public Layer {
public:
    explicit Reshape(Shape trailing) : trailing_(std::move(trailing)) {}
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Shape trailing_;
    Shape input_shape_;
};

class Flatten final : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Shape input_shape_;
};

// Nearest-neighbour 2x spatial upsampling.
class Upsample2x final : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Shape input_shape_;
};

class Sequential final : public Layer {
public:
    Sequential() = default;
    Sequential& add(LayerPtr layer);
    template <typename L, typename... Args>
    L& emplace(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;
    std::size_t size() const { return layers_.size(); }

private:
    std::vector<LayerPtr> layers_;
};

// Pre-activation wide residual block: BN-ReLU-conv3x3-BN-ReLU-conv3x3 plus a
// 1x1 projection shortcut when the shape changes.
class WideBasicBlock final : public Layer {
public:
    WideBasicBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride, Rng& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

private:
    bool identity_;
    BatchNorm2d bn1_, bn2_;
    ReLU relu1_, relu2_;
    Conv2d conv1_, conv2_;
    std::unique_ptr<Conv2d> shortcut_;
};

// Post-activation bottleneck block (1x1 reduce, 3x3, 1x1 expand) of the
// ResNet-50 family; `width` is the inner channel count.
class BottleneckBlock final : public Layer {
public:
    BottleneckBlock(std::size_t in_channels, std::size_t width, std::size_t out_channels, std::size_t stride,
                    Rng& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) override;

private:
    Sequential branch_;
    std::unique_ptr<Sequential> shortcut_;
    ReLU out_relu_;
};

// Gathers parameters and buffers of `root` under stable dotted names.
struct LayerState {
    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;
};
LayerState collect_state(Layer& root, const std::string& prefix = "");

StateDict state_dict(Layer& root, const std::string& prefix = "");
// Copies matching entries into the layer; throws on shape mismatch and, when
// `strict`, on any missing name.
void load_state_dict(Layer& root, const StateDict& state, const std::string& prefix = "", bool strict = true);

void zero_grad(Layer& root);

}  // namespace cgssl::nn
