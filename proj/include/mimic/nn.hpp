#pragma once

// Minimal dense-network core. Batches are column-major: one column per sample.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

namespace mimic::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation : std::uint32_t { Identity = 0, Relu = 1 };

struct LayerSpec {
    Eigen::Index inputs = 0;
    Eigen::Index outputs = 0;
    Activation activation = Activation::Relu;
    double init_scale = 1.0;  // multiplies the uniform init bound
};

struct DenseLayer {
    MatrixXd weight;  // outputs x inputs
    VectorXd bias;
    Activation activation = Activation::Relu;

    bool operator==(const DenseLayer& o) const {
        return activation == o.activation && weight == o.weight && bias == o.bias;
    }
};

/// Thrown when a tensor shape does not match what a network expects.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an update would write non-finite values into a network.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DenseNet {
public:
    std::vector<DenseLayer> layers;
    std::uint64_t seed = 0;

    /// He-uniform for relu layers, LeCun-uniform for identity layers; zero biases.
    static DenseNet create(std::span<const LayerSpec> specs, std::uint64_t seed);

    Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
    Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }
    Eigen::Index parameter_count() const;

    /// Layer by layer: weights in column-major order, then bias.
    VectorXd flat_parameters() const;
    void set_flat_parameters(const VectorXd& flat);

    /// Dimension chaining and finiteness; throws ShapeError / NonFiniteError.
    void validate() const;
    bool same_shape(const DenseNet& other) const;

    bool operator==(const DenseNet& o) const { return layers == o.layers; }
};

struct ForwardCache {
    std::vector<MatrixXd> inputs;           // input to each layer
    std::vector<MatrixXd> pre_activations;  // affine output of each layer
};

MatrixXd forward(const DenseNet& net, const MatrixXd& input, ForwardCache* cache = nullptr);

struct GradientSet {
    std::vector<MatrixXd> weight;
    std::vector<VectorXd> bias;

    static GradientSet zeros_like(const DenseNet& net);
    VectorXd flat() const;
    static GradientSet from_flat(const DenseNet& net, const VectorXd& flat);
    bool all_finite() const;
    bool congruent_with(const DenseNet& net) const;
    GradientSet& operator+=(const GradientSet& o);
    GradientSet& operator*=(double s);
};

/// Reverse-mode gradient of sum(output_grad .* output) w.r.t. every parameter.
/// If `input_grad` is non-null it receives the gradient w.r.t. the network input.
GradientSet backward(const DenseNet& net, const ForwardCache& cache, const MatrixXd& output_grad,
                     MatrixXd* input_grad = nullptr);

/// Forward-mode directional derivative of the outputs along a parameter direction.
MatrixXd jvp(const DenseNet& net, const ForwardCache& cache, const GradientSet& direction);

VectorXd softmax(const VectorXd& logits);

struct LossGrad {
    double loss = 0.0;
    VectorXd grad;  // d loss / d logits
};

/// -weight * log softmax(logits)[label - 1]; labels are 1-based ratings.
LossGrad softmax_cross_entropy(const VectorXd& logits, int label, double weight = 1.0);

struct SgdConfig {
    double learning_rate = 1e-2;
    int batch_size = 32;
    void validate() const;
};

/// theta <- theta - lr * g. Throws NonFiniteError (leaving `net` untouched) on non-finite gradients.
void sgd_step(DenseNet& net, const GradientSet& grads, const SgdConfig& config);

// "VNN1" checkpoints: magic, u32 layer count, per layer u32 rows/cols/activation,
// then f64 weights (row-major) and f64 biases. Little-endian.
void save_vnn(const DenseNet& net, std::ostream& out);
DenseNet load_vnn(std::istream& in);
void write_vnn(const DenseNet& net, const std::filesystem::path& path);
DenseNet read_vnn(const std::filesystem::path& path);

}  // namespace mimic::nn
