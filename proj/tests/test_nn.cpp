#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mimic/nn.hpp"
#include "support.hpp"

using namespace mimic;
using nn::Activation;
using nn::MatrixXd;
using nn::VectorXd;

namespace {

nn::DenseNet make_net(std::vector<nn::LayerSpec> specs, std::uint64_t seed) {
    return nn::DenseNet::create(specs, seed);
}

MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

// Loss sum(W .* net(X)) so that backward with output_grad W is its exact gradient.
testing::GradCheck check_net(nn::DenseNet net, Eigen::Index batch, std::size_t max_coords, std::uint64_t seed) {
    const MatrixXd x = random_matrix(net.input_dim(), batch, seed);
    const MatrixXd w = random_matrix(net.output_dim(), batch, seed + 1);
    nn::ForwardCache cache;
    nn::forward(net, x, &cache);
    const VectorXd analytic = nn::backward(net, cache, w).flat();
    const VectorXd theta = net.flat_parameters();
    const auto f = [&](const VectorXd& p) {
        nn::DenseNet probe = net;
        probe.set_flat_parameters(p);
        return (w.array() * nn::forward(probe, x).array()).sum();
    };
    return testing::check_gradient(f, theta, analytic, testing::sample_coords(theta.size(), max_coords, seed));
}

}  // namespace

TEST_CASE("forward examples") {
    SUBCASE("identity layer") {
        auto net = make_net({{3, 3, Activation::Identity}}, 1);
        net.layers[0].weight = MatrixXd::Identity(3, 3);
        net.layers[0].bias.setZero();
        const MatrixXd x = random_matrix(3, 4, 2);
        CHECK(nn::forward(net, x) == x);
    }
    SUBCASE("relu on negative pre-activations") {
        auto net = make_net({{2, 3, Activation::Relu}}, 1);
        net.layers[0].weight.setZero();
        net.layers[0].bias.setConstant(-1.0);
        CHECK(nn::forward(net, random_matrix(2, 5, 3)).isZero(0.0));
    }
    SUBCASE("zero weights give the final bias") {
        auto net = make_net({{4, 6, Activation::Relu}, {6, 2, Activation::Identity}}, 3);
        for (auto& l : net.layers) {
            l.weight.setZero();
        }
        net.layers[1].bias << 0.5, -2.0;
        const MatrixXd out = nn::forward(net, random_matrix(4, 3, 4));
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
            CHECK(out(0, c) == 0.5);
            CHECK(out(1, c) == -2.0);
        }
    }
    SUBCASE("dimension mismatch") {
        auto net = make_net({{4, 2, Activation::Relu}}, 3);
        CHECK_THROWS_AS(nn::forward(net, MatrixXd::Zero(3, 1)), nn::ShapeError);
    }
}

TEST_CASE("softmax cross-entropy") {
    const VectorXd uniform = VectorXd::Zero(5);
    const auto lg = nn::softmax_cross_entropy(uniform, 3);
    CHECK(lg.loss == doctest::Approx(std::log(5.0)).epsilon(1e-15));
    CHECK(lg.loss == doctest::Approx(1.6094).epsilon(1e-4));
    VectorXd confident = VectorXd::Zero(5);
    confident[1] = 30.0;
    CHECK(nn::softmax_cross_entropy(confident, 2).loss < 1e-9);
    VectorXd logits(5);
    logits << 0.3, -1.2, 2.0, 0.0, 0.7;
    const auto one = nn::softmax_cross_entropy(logits, 4, 1.0);
    const auto two = nn::softmax_cross_entropy(logits, 4, 2.0);
    CHECK(two.loss == doctest::Approx(2.0 * one.loss).epsilon(1e-15));
    CHECK((two.grad - 2.0 * one.grad).norm() < 1e-15);
    CHECK_THROWS_AS(nn::softmax_cross_entropy(logits, 0), std::out_of_range);
    CHECK_THROWS_AS(nn::softmax_cross_entropy(logits, 6), std::out_of_range);
    // Gradient against central differences of the loss.
    const auto f = [](const VectorXd& z) { return nn::softmax_cross_entropy(z, 4, 1.5).loss; };
    const auto gc = testing::check_gradient(f, logits, nn::softmax_cross_entropy(logits, 4, 1.5).grad, {0, 1, 2, 3, 4});
    CHECK(gc.max_rel_error < 1e-6);
}

TEST_CASE("softmax is a distribution") {
    Rng rng(3);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    for (int t = 0; t < 200; ++t) {
        VectorXd z(5);
        for (auto& v : z) {
            v = u(rng);
        }
        const VectorXd p = nn::softmax(z);
        CHECK(std::abs(p.sum() - 1.0) < 1e-12);
        CHECK(p.minCoeff() >= 0.0);
        CHECK(p.maxCoeff() <= 1.0);
    }
}

TEST_CASE("backward matches central differences") {
    SUBCASE("small relu stack") {
        CHECK(check_net(make_net({{5, 7, Activation::Relu}, {7, 3, Activation::Identity}}, 11), 4, 1000, 1)
                  .max_rel_error < 1e-4);
    }
    SUBCASE("three layers") {
        CHECK(check_net(make_net({{8, 16, Activation::Relu}, {16, 16, Activation::Relu}, {16, 2, Activation::Identity}},
                                 12),
                        3, 1000, 2)
                  .max_rel_error < 1e-4);
    }
}

TEST_CASE("backward terminal cases") {
    auto net = make_net({{4, 6, Activation::Relu}, {6, 3, Activation::Identity}}, 5);
    const MatrixXd x = random_matrix(4, 7, 6);
    nn::ForwardCache cache;
    nn::forward(net, x, &cache);
    SUBCASE("zero upstream gradient") {
        const auto g = nn::backward(net, cache, MatrixXd::Zero(3, 7));
        CHECK(g.flat().isZero(0.0));
    }
    SUBCASE("final bias receives the upstream gradient") {
        const MatrixXd up = random_matrix(3, 7, 7);
        const auto g = nn::backward(net, cache, up);
        CHECK((g.bias[1] - up.rowwise().sum()).norm() < 1e-14);
    }
    SUBCASE("input gradient matches central differences") {
        const MatrixXd up = random_matrix(3, 7, 8);
        MatrixXd dx;
        nn::backward(net, cache, up, &dx);
        const VectorXd flat_x = Eigen::Map<const VectorXd>(x.data(), x.size());
        const VectorXd analytic = Eigen::Map<const VectorXd>(dx.data(), dx.size());
        const auto f = [&](const VectorXd& v) {
            const MatrixXd in = Eigen::Map<const MatrixXd>(v.data(), x.rows(), x.cols());
            return (up.array() * nn::forward(net, in).array()).sum();
        };
        CHECK(testing::check_gradient(f, flat_x, analytic, testing::sample_coords(flat_x.size(), 100, 1)).max_rel_error <
              1e-4);
    }
    SUBCASE("jvp is the directional derivative") {
        const VectorXd dir = random_matrix(net.parameter_count(), 1, 9);
        const MatrixXd j = nn::jvp(net, cache, nn::GradientSet::from_flat(net, dir));
        const double h = 1e-6;
        auto plus = net;
        auto minus = net;
        plus.set_flat_parameters(net.flat_parameters() + h * dir);
        minus.set_flat_parameters(net.flat_parameters() - h * dir);
        const MatrixXd fd = (nn::forward(plus, x) - nn::forward(minus, x)) / (2.0 * h);
        CHECK((j - fd).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, j.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("sgd step") {
    auto net = make_net({{1, 1, Activation::Identity}}, 1);
    net.layers[0].weight(0, 0) = 1.0;
    net.layers[0].bias[0] = 0.0;
    auto g = nn::GradientSet::zeros_like(net);
    g.weight[0](0, 0) = 2.0;
    SUBCASE("scalar example") {
        nn::sgd_step(net, g, {0.1, 1});
        CHECK(net.layers[0].weight(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
    }
    SUBCASE("zero learning rate") {
        const auto before = net;
        nn::sgd_step(net, g, {0.0, 1});
        CHECK(net == before);
    }
    SUBCASE("two steps equal one summed step") {
        auto big = make_net({{3, 4, Activation::Relu}, {4, 2, Activation::Identity}}, 2);
        auto a = big;
        auto b = big;
        const auto g1 = nn::GradientSet::from_flat(big, random_matrix(big.parameter_count(), 1, 1));
        const auto g2 = nn::GradientSet::from_flat(big, random_matrix(big.parameter_count(), 1, 2));
        nn::sgd_step(a, g1, {0.01, 1});
        nn::sgd_step(a, g2, {0.01, 1});
        auto sum = g1;
        sum += g2;
        nn::sgd_step(b, sum, {0.01, 1});
        CHECK((a.flat_parameters() - b.flat_parameters()).cwiseAbs().maxCoeff() < 1e-15);
    }
    SUBCASE("non-finite gradients are rejected") {
        const auto before = net;
        g.bias[0][0] = std::nan("");
        CHECK_THROWS_AS(nn::sgd_step(net, g, {0.1, 1}), nn::NonFiniteError);
        CHECK(net == before);
    }
}

TEST_CASE("initialization is seeded") {
    const std::vector<nn::LayerSpec> specs{{10, 20, Activation::Relu}, {20, 5, Activation::Identity}};
    CHECK(nn::DenseNet::create(specs, 4) == nn::DenseNet::create(specs, 4));
    CHECK_FALSE(nn::DenseNet::create(specs, 4) == nn::DenseNet::create(specs, 5));
    // He-uniform bound sqrt(6 / fan_in) for relu layers.
    const auto net = nn::DenseNet::create(specs, 4);
    CHECK(net.layers[0].weight.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 10.0));
    CHECK(net.layers[0].bias.isZero(0.0));
}

TEST_CASE("VNN1 round trip is bit-exact") {
    const auto net = make_net({{6, 9, Activation::Relu}, {9, 4, Activation::Identity}}, 21);
    std::stringstream ss;
    nn::save_vnn(net, ss);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "VNN1");
    std::stringstream in(bytes);
    const auto back = nn::load_vnn(in);
    CHECK(back == net);
    std::stringstream again;
    nn::save_vnn(back, again);
    CHECK(again.str() == bytes);
    std::stringstream bad("VNN2....");
    CHECK_THROWS_AS(nn::load_vnn(bad), FormatError);
    std::stringstream cut(bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(nn::load_vnn(cut), FormatError);
}
