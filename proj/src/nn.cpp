#include "mimic/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "mimic/util.hpp"

namespace mimic::nn {
namespace {

constexpr char kMagic[4] = {'V', 'N', 'N', '1'};

void apply_activation(MatrixXd& z, Activation act) {
    if (act == Activation::Relu) {
        z = z.cwiseMax(0.0);
    }
}

}  // namespace

DenseNet DenseNet::create(std::span<const LayerSpec> specs, std::uint64_t seed) {
    DenseNet net;
    net.seed = seed;
    Eigen::Index prev = specs.empty() ? 0 : specs.front().inputs;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        const LayerSpec& s = specs[l];
        if (s.inputs != prev || s.inputs <= 0 || s.outputs <= 0) {
            throw ShapeError("DenseNet::create: layer " + std::to_string(l) + " does not chain");
        }
        const double fan_in = static_cast<double>(s.inputs);
        const double bound =
            s.init_scale * (s.activation == Activation::Relu ? std::sqrt(6.0 / fan_in) : std::sqrt(3.0 / fan_in));
        Rng rng(derive_seed(seed, 0x1a7e5, l));
        std::uniform_real_distribution<double> dist(-bound, bound);
        DenseLayer layer;
        layer.activation = s.activation;
        layer.weight.resize(s.outputs, s.inputs);
        for (Eigen::Index c = 0; c < s.inputs; ++c) {
            for (Eigen::Index r = 0; r < s.outputs; ++r) {
                layer.weight(r, c) = bound > 0.0 ? dist(rng) : 0.0;
            }
        }
        layer.bias = VectorXd::Zero(s.outputs);
        net.layers.push_back(std::move(layer));
        prev = s.outputs;
    }
    return net;
}

Eigen::Index DenseNet::parameter_count() const {
    Eigen::Index n = 0;
    for (const DenseLayer& l : layers) {
        n += l.weight.size() + l.bias.size();
    }
    return n;
}

VectorXd DenseNet::flat_parameters() const {
    VectorXd out(parameter_count());
    Eigen::Index at = 0;
    for (const DenseLayer& l : layers) {
        out.segment(at, l.weight.size()) = l.weight.reshaped();
        at += l.weight.size();
        out.segment(at, l.bias.size()) = l.bias;
        at += l.bias.size();
    }
    return out;
}

void DenseNet::set_flat_parameters(const VectorXd& flat) {
    if (flat.size() != parameter_count()) {
        throw ShapeError("DenseNet::set_flat_parameters: size mismatch");
    }
    Eigen::Index at = 0;
    for (DenseLayer& l : layers) {
        l.weight.reshaped() = flat.segment(at, l.weight.size());
        at += l.weight.size();
        l.bias = flat.segment(at, l.bias.size());
        at += l.bias.size();
    }
}

void DenseNet::validate() const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const DenseLayer& layer = layers[l];
        if (layer.bias.size() != layer.weight.rows()) {
            throw ShapeError("DenseNet: bias/weight mismatch in layer " + std::to_string(l));
        }
        if (l > 0 && layer.weight.cols() != layers[l - 1].weight.rows()) {
            throw ShapeError("DenseNet: layer " + std::to_string(l) + " does not chain");
        }
        if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
            throw NonFiniteError("DenseNet: non-finite parameter in layer " + std::to_string(l));
        }
    }
}

bool DenseNet::same_shape(const DenseNet& other) const {
    if (layers.size() != other.layers.size()) {
        return false;
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].weight.rows() != other.layers[l].weight.rows() ||
            layers[l].weight.cols() != other.layers[l].weight.cols() ||
            layers[l].activation != other.layers[l].activation) {
            return false;
        }
    }
    return true;
}

MatrixXd forward(const DenseNet& net, const MatrixXd& input, ForwardCache* cache) {
    if (input.rows() != net.input_dim()) {
        throw ShapeError("forward: input has " + std::to_string(input.rows()) + " rows, network expects " +
                         std::to_string(net.input_dim()));
    }
    if (cache) {
        cache->inputs.clear();
        cache->pre_activations.clear();
    }
    MatrixXd a = input;
    for (const DenseLayer& layer : net.layers) {
        MatrixXd z = layer.weight * a;
        z.colwise() += layer.bias;
        if (cache) {
            cache->inputs.push_back(std::move(a));
            cache->pre_activations.push_back(z);
        }
        apply_activation(z, layer.activation);
        a = std::move(z);
    }
    return a;
}

GradientSet GradientSet::zeros_like(const DenseNet& net) {
    GradientSet g;
    for (const DenseLayer& l : net.layers) {
        g.weight.push_back(MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
        g.bias.push_back(VectorXd::Zero(l.bias.size()));
    }
    return g;
}

VectorXd GradientSet::flat() const {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < weight.size(); ++l) {
        n += weight[l].size() + bias[l].size();
    }
    VectorXd out(n);
    Eigen::Index at = 0;
    for (std::size_t l = 0; l < weight.size(); ++l) {
        out.segment(at, weight[l].size()) = weight[l].reshaped();
        at += weight[l].size();
        out.segment(at, bias[l].size()) = bias[l];
        at += bias[l].size();
    }
    return out;
}

GradientSet GradientSet::from_flat(const DenseNet& net, const VectorXd& flat) {
    if (flat.size() != net.parameter_count()) {
        throw ShapeError("GradientSet::from_flat: size mismatch");
    }
    GradientSet g = zeros_like(net);
    Eigen::Index at = 0;
    for (std::size_t l = 0; l < g.weight.size(); ++l) {
        g.weight[l].reshaped() = flat.segment(at, g.weight[l].size());
        at += g.weight[l].size();
        g.bias[l] = flat.segment(at, g.bias[l].size());
        at += g.bias[l].size();
    }
    return g;
}

bool GradientSet::all_finite() const {
    for (std::size_t l = 0; l < weight.size(); ++l) {
        if (!weight[l].allFinite() || !bias[l].allFinite()) {
            return false;
        }
    }
    return true;
}

bool GradientSet::congruent_with(const DenseNet& net) const {
    if (weight.size() != net.layers.size() || bias.size() != net.layers.size()) {
        return false;
    }
    for (std::size_t l = 0; l < weight.size(); ++l) {
        if (weight[l].rows() != net.layers[l].weight.rows() || weight[l].cols() != net.layers[l].weight.cols() ||
            bias[l].size() != net.layers[l].bias.size()) {
            return false;
        }
    }
    return true;
}

GradientSet& GradientSet::operator+=(const GradientSet& o) {
    for (std::size_t l = 0; l < weight.size(); ++l) {
        weight[l] += o.weight[l];
        bias[l] += o.bias[l];
    }
    return *this;
}

GradientSet& GradientSet::operator*=(double s) {
    for (std::size_t l = 0; l < weight.size(); ++l) {
        weight[l] *= s;
        bias[l] *= s;
    }
    return *this;
}

GradientSet backward(const DenseNet& net, const ForwardCache& cache, const MatrixXd& output_grad,
                     MatrixXd* input_grad) {
    const std::size_t n = net.layers.size();
    if (cache.inputs.size() != n || cache.pre_activations.size() != n) {
        throw ShapeError("backward: cache does not belong to this network");
    }
    if (n > 0 && (output_grad.rows() != net.output_dim() || output_grad.cols() != cache.inputs.front().cols())) {
        throw ShapeError("backward: output gradient shape mismatch");
    }
    GradientSet g = GradientSet::zeros_like(net);
    MatrixXd delta = output_grad;
    for (std::size_t k = n; k-- > 0;) {
        const DenseLayer& layer = net.layers[k];
        if (layer.activation == Activation::Relu) {
            delta = delta.cwiseProduct((cache.pre_activations[k].array() > 0.0).cast<double>().matrix());
        }
        g.weight[k].noalias() = delta * cache.inputs[k].transpose();
        g.bias[k] = delta.rowwise().sum();
        if (k > 0 || input_grad) {
            delta = layer.weight.transpose() * delta;
        }
    }
    if (input_grad) {
        *input_grad = std::move(delta);
    }
    return g;
}

MatrixXd jvp(const DenseNet& net, const ForwardCache& cache, const GradientSet& direction) {
    if (!direction.congruent_with(net) || cache.inputs.size() != net.layers.size()) {
        throw ShapeError("jvp: direction/cache not congruent with network");
    }
    MatrixXd da;  // tangent of the current layer input; the network input has none
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        const DenseLayer& layer = net.layers[k];
        MatrixXd dz = direction.weight[k] * cache.inputs[k];
        dz.colwise() += direction.bias[k];
        if (k > 0) {
            dz.noalias() += layer.weight * da;
        }
        if (layer.activation == Activation::Relu) {
            dz = dz.cwiseProduct((cache.pre_activations[k].array() > 0.0).cast<double>().matrix());
        }
        da = std::move(dz);
    }
    return da;
}

VectorXd softmax(const VectorXd& logits) {
    const double m = logits.maxCoeff();
    VectorXd e = (logits.array() - m).exp();
    return e / e.sum();
}

LossGrad softmax_cross_entropy(const VectorXd& logits, int label, double weight) {
    if (label < 1 || label > logits.size()) {
        throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " outside 1.." +
                                std::to_string(logits.size()));
    }
    if (!logits.allFinite()) {
        throw NonFiniteError("softmax_cross_entropy: non-finite logits");
    }
    const double m = logits.maxCoeff();
    const VectorXd shifted = logits.array() - m;
    const double log_z = std::log(shifted.array().exp().sum());
    const Eigen::Index k = label - 1;
    LossGrad out;
    out.loss = -weight * (shifted(k) - log_z);
    out.grad = (shifted.array() - log_z).exp();
    out.grad(k) -= 1.0;
    out.grad *= weight;
    return out;
}

void SgdConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("SgdConfig: learning_rate must be finite and non-negative");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("SgdConfig: batch_size must be positive");
    }
}

void sgd_step(DenseNet& net, const GradientSet& grads, const SgdConfig& config) {
    if (!grads.congruent_with(net)) {
        throw ShapeError("sgd_step: gradients not congruent with network");
    }
    if (!grads.all_finite()) {
        throw NonFiniteError("sgd_step: non-finite gradient, update rejected");
    }
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        net.layers[l].weight.noalias() -= config.learning_rate * grads.weight[l];
        net.layers[l].bias.noalias() -= config.learning_rate * grads.bias[l];
    }
}

void save_vnn(const DenseNet& net, std::ostream& out) {
    out.write(kMagic, 4);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.layers.size()));
    for (const DenseLayer& l : net.layers) {
        io::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.weight.rows()));
        io::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.weight.cols()));
        io::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.activation));
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
                io::put<double>(out, l.weight(r, c));
            }
        }
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) {
            io::put<double>(out, l.bias(r));
        }
    }
}

DenseNet load_vnn(std::istream& in) {
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("VNN1 header: bad magic");
    }
    const auto n = io::get<std::uint32_t>(in, "VNN1 header");
    DenseNet net;
    for (std::uint32_t k = 0; k < n; ++k) {
        const std::string section = "VNN1 layer " + std::to_string(k);
        const auto rows = io::get<std::uint32_t>(in, section);
        const auto cols = io::get<std::uint32_t>(in, section);
        const auto act = io::get<std::uint32_t>(in, section);
        if (act > 1) {
            throw FormatError(section + ": unknown activation code " + std::to_string(act));
        }
        if (rows == 0 || cols == 0 || rows > (1u << 20) || cols > (1u << 20)) {
            throw FormatError(section + ": implausible dimensions");
        }
        DenseLayer l;
        l.activation = static_cast<Activation>(act);
        l.weight.resize(rows, cols);
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
                l.weight(r, c) = io::get<double>(in, section);
            }
        }
        l.bias.resize(rows);
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) {
            l.bias(r) = io::get<double>(in, section);
        }
        if (!net.layers.empty() && net.layers.back().weight.rows() != l.weight.cols()) {
            throw FormatError(section + ": does not chain with the previous layer");
        }
        net.layers.push_back(std::move(l));
    }
    return net;
}

void write_vnn(const DenseNet& net, const std::filesystem::path& path) {
    std::ostringstream out(std::ios::binary);
    save_vnn(net, out);
    io::write_file_atomic(path, out.str());
}

DenseNet read_vnn(const std::filesystem::path& path) {
    std::istringstream in(io::read_file(path), std::ios::binary);
    DenseNet net = load_vnn(in);
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("VNN1 trailer: unexpected bytes in " + path.string());
    }
    return net;
}

}  // namespace mimic::nn
