#include "mimic/simpred.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "mimic/util.hpp"

namespace mimic::simpred {
namespace {

using nn::MatrixXd;
using nn::VectorXd;

struct BranchCaches {
    nn::ForwardCache visual;
    nn::ForwardCache standard;
    nn::ForwardCache head;
};

MatrixXd normalize_observations(const SimilarityPredictor& pred, const MatrixXd& obs) {
    if (obs.rows() != pred.obs_dim()) {
        throw nn::ShapeError("similarity predictor: observation has " + std::to_string(obs.rows()) +
                             " entries, expected " + std::to_string(pred.obs_dim()));
    }
    MatrixXd out = obs;
    out.colwise() -= pred.obs_shift;
    return pred.obs_scale.asDiagonal() * out;
}

MatrixXd head_input(const MatrixXd& visual, const MatrixXd& standard) {
    MatrixXd joined(visual.rows() + standard.rows(), visual.cols());
    joined.topRows(visual.rows()) = visual;
    joined.bottomRows(standard.rows()) = standard;
    return joined;
}

MatrixXd forward_normalized(const SimilarityPredictor& pred, const MatrixXd& features, const MatrixXd& obs_norm,
                            BranchCaches* caches) {
    const MatrixXd v = nn::forward(pred.visual, features, caches ? &caches->visual : nullptr);
    const MatrixXd s = nn::forward(pred.standard, obs_norm, caches ? &caches->standard : nullptr);
    return nn::forward(pred.head, head_input(v, s), caches ? &caches->head : nullptr);
}

struct PredictorGrads {
    nn::GradientSet visual;
    nn::GradientSet standard;
    nn::GradientSet head;
};

PredictorGrads backward_all(const SimilarityPredictor& pred, const BranchCaches& caches, const MatrixXd& dlogits) {
    PredictorGrads g;
    MatrixXd d_joined;
    g.head = nn::backward(pred.head, caches.head, dlogits, &d_joined);
    const Eigen::Index nv = pred.visual.output_dim();
    g.visual = nn::backward(pred.visual, caches.visual, d_joined.topRows(nv));
    g.standard = nn::backward(pred.standard, caches.standard, d_joined.bottomRows(d_joined.rows() - nv));
    return g;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t content_key(const AnnotationSample& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(s.frame.pixels.data(), s.frame.pixels.size(), h);
    h = fnv1a(s.observation.values.data(), sizeof(double) * static_cast<std::size_t>(s.observation.values.size()), h);
    h = fnv1a(&s.rating, sizeof(s.rating), h);
    return h;
}

/// Sample indices sorted by content so that batching ignores storage order.
std::vector<std::size_t> canonical_order(const Dataset& data) {
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        keyed[i] = {content_key(data[i]), i};
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::size_t> out(data.size());
    for (std::size_t i = 0; i < keyed.size(); ++i) {
        out[i] = keyed[i].second;
    }
    return out;
}

void check_rating(int r) {
    if (r < 1 || r > kNumRatings) {
        throw std::out_of_range("rating " + std::to_string(r) + " outside 1..5");
    }
}

struct PackedData {
    MatrixXd features;  // 1024 x N
    MatrixXd obs_norm;  // d x N
    std::vector<int> labels;
};

PackedData pack(const SimilarityPredictor& pred, const Dataset& data) {
    PackedData p;
    p.features.resize(static_cast<Eigen::Index>(render::kFeatureDim), static_cast<Eigen::Index>(data.size()));
    MatrixXd obs(pred.obs_dim(), static_cast<Eigen::Index>(data.size()));
    p.labels.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto f = render::frame_features(data[i].frame);
        p.features.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
        if (data[i].observation.values.size() != pred.obs_dim()) {
            throw nn::ShapeError("dataset observation dimension does not match the predictor");
        }
        obs.col(static_cast<Eigen::Index>(i)) = data[i].observation.values;
        check_rating(data[i].rating);
        p.labels.push_back(data[i].rating);
    }
    p.obs_norm = normalize_observations(pred, obs);
    return p;
}

std::vector<int> argmax_ratings(const MatrixXd& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        Eigen::Index best = 0;
        logits.col(c).maxCoeff(&best);
        out[static_cast<std::size_t>(c)] = static_cast<int>(best) + 1;
    }
    return out;
}

double accuracy_of(const SimilarityPredictor& pred, const PackedData& data) {
    if (data.labels.empty()) {
        return 0.0;
    }
    const auto predicted = argmax_ratings(forward_normalized(pred, data.features, data.obs_norm, nullptr));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        hits += predicted[i] == data.labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// One epoch of minibatch SGD; returns the mean per-sample loss.
double run_epoch(SimilarityPredictor& pred, const Dataset& raw, const PackedData& data, TrainVariant variant,
                 const nn::SgdConfig& sgd, std::uint64_t seed) {
    std::array<double, kNumRatings> weights;
    weights.fill(1.0);
    if (weighted(variant)) {
        weights = class_weights(raw);
    }
    double total = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(raw, variant, sgd.batch_size, seed)) {
        const std::vector<Eigen::Index> idx(batch.begin(), batch.end());
        const MatrixXd f = data.features(Eigen::all, idx);
        const MatrixXd o = data.obs_norm(Eigen::all, idx);
        BranchCaches caches;
        const MatrixXd logits = forward_normalized(pred, f, o, &caches);
        MatrixXd dlogits(logits.rows(), logits.cols());
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            const int label = data.labels[batch[static_cast<std::size_t>(c)]];
            const nn::LossGrad lg = nn::softmax_cross_entropy(logits.col(c), label, weights[label - 1]);
            total += lg.loss;
            dlogits.col(c) = lg.grad * inv_b;
        }
        seen += batch.size();
        const PredictorGrads g = backward_all(pred, caches, dlogits);
        if (!g.visual.all_finite() || !g.standard.all_finite() || !g.head.all_finite()) {
            throw nn::NonFiniteError("similarity predictor: non-finite gradient");
        }
        nn::sgd_step(pred.visual, g.visual, sgd);
        nn::sgd_step(pred.standard, g.standard, sgd);
        nn::sgd_step(pred.head, g.head, sgd);
    }
    return seen ? total / static_cast<double>(seen) : 0.0;
}

}  // namespace

std::string_view to_string(TrainVariant v) {
    switch (v) {
        case TrainVariant::RandomSampling: return "random_sampling";
        case TrainVariant::SamplingEqually: return "sampling_equally";
        case TrainVariant::ClassWeights: return "class_weights";
        case TrainVariant::EqualPlusWeights: return "equal_plus_weights";
        case TrainVariant::AdditionalLayer: return "additional_layer";
    }
    return "unknown";
}

TrainVariant variant_from_string(std::string_view name) {
    for (TrainVariant v : kAllVariants) {
        if (to_string(v) == name) {
            return v;
        }
    }
    throw std::invalid_argument("unknown train variant '" + std::string(name) + "'");
}

bool stratified(TrainVariant v) {
    return v == TrainVariant::SamplingEqually || v == TrainVariant::EqualPlusWeights ||
           v == TrainVariant::AdditionalLayer;
}

bool weighted(TrainVariant v) { return v == TrainVariant::ClassWeights || v == TrainVariant::EqualPlusWeights; }

Observation Observation::from(const env::EnvState& s, const env::EnvAction& a) {
    Observation o;
    o.values.resize(kObservationDim);
    const auto st = s.to_array();
    for (std::size_t k = 0; k < st.size(); ++k) {
        o.values(static_cast<Eigen::Index>(k)) = st[k];
    }
    o.values(env::kStateDim) = a.torque;
    o.values(env::kStateDim + 1) = a.thrust;
    return o;
}

SimilarityPredictor SimilarityPredictor::create(TrainVariant variant, std::uint64_t seed, Eigen::Index obs_dim) {
    using nn::Activation;
    using nn::LayerSpec;
    SimilarityPredictor p;
    p.variant = variant;
    const LayerSpec visual[] = {{static_cast<Eigen::Index>(render::kFeatureDim), kVisualEmbedding, Activation::Relu}};
    const LayerSpec standard[] = {{obs_dim, kStandardEmbedding, Activation::Relu},
                                  {kStandardEmbedding, kStandardEmbedding, Activation::Relu}};
    const Eigen::Index joined = kVisualEmbedding + kStandardEmbedding;
    p.visual = nn::DenseNet::create(visual, derive_seed(seed, 1));
    p.standard = nn::DenseNet::create(standard, derive_seed(seed, 2));
    if (variant == TrainVariant::AdditionalLayer) {
        const LayerSpec head[] = {{joined, kHeadHidden, Activation::Relu},
                                  {kHeadHidden, kNumRatings, Activation::Identity}};
        p.head = nn::DenseNet::create(head, derive_seed(seed, 3));
    } else {
        const LayerSpec head[] = {{joined, kNumRatings, Activation::Identity}};
        p.head = nn::DenseNet::create(head, derive_seed(seed, 3));
    }
    p.obs_shift = VectorXd::Zero(obs_dim);
    p.obs_scale = VectorXd::Ones(obs_dim);
    return p;
}

bool SimilarityPredictor::same_architecture(const SimilarityPredictor& o) const {
    return visual.same_shape(o.visual) && standard.same_shape(o.standard) && head.same_shape(o.head);
}

void SimilarityPredictor::validate() const {
    visual.validate();
    standard.validate();
    head.validate();
    if (visual.output_dim() + standard.output_dim() != head.input_dim()) {
        throw nn::ShapeError("similarity predictor: branch outputs do not sum to the head input");
    }
    if (head.output_dim() != kNumRatings) {
        throw nn::ShapeError("similarity predictor: head must output 5 logits");
    }
    if (visual.input_dim() != static_cast<Eigen::Index>(render::kFeatureDim)) {
        throw nn::ShapeError("similarity predictor: visual branch must take 1024 features");
    }
    if (obs_shift.size() != obs_dim() || obs_scale.size() != obs_dim()) {
        throw nn::ShapeError("similarity predictor: observation scaling has the wrong size");
    }
}

void fit_observation_scaling(SimilarityPredictor& pred, std::span<const env::EnvState> states, double min_std) {
    pred.obs_shift = VectorXd::Zero(pred.obs_dim());
    pred.obs_scale = VectorXd::Ones(pred.obs_dim());
    if (states.empty()) {
        return;
    }
    const double n = static_cast<double>(states.size());
    for (std::size_t k = 0; k < env::kStateDim; ++k) {
        double mean = 0.0;
        for (const auto& s : states) {
            mean += s.to_array()[k];
        }
        mean /= n;
        double var = 0.0;
        for (const auto& s : states) {
            const double d = s.to_array()[k] - mean;
            var += d * d;
        }
        const double sd = std::max(std::sqrt(var / n), min_std);
        pred.obs_shift(static_cast<Eigen::Index>(k)) = mean;
        pred.obs_scale(static_cast<Eigen::Index>(k)) = 1.0 / sd;
    }
}

MatrixXd predict_logits(const SimilarityPredictor& pred, const MatrixXd& features, const MatrixXd& observations) {
    if (features.cols() != observations.cols()) {
        throw nn::ShapeError("predict_logits: feature/observation batch sizes differ");
    }
    return forward_normalized(pred, features, normalize_observations(pred, observations), nullptr);
}

Distribution predict(const SimilarityPredictor& pred, const render::Frame& frame, const Observation& obs) {
    const auto f = render::frame_features(frame);
    const MatrixXd features = Eigen::Map<const VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    const VectorXd p = nn::softmax(predict_logits(pred, features, obs.values).col(0));
    Distribution out;
    for (int k = 0; k < kNumRatings; ++k) {
        out[static_cast<std::size_t>(k)] = p(k);
    }
    return out;
}

double expected_rating(const Distribution& dist) {
    double total = 0.0;
    double mean = 0.0;
    for (int k = 0; k < kNumRatings; ++k) {
        const double p = dist[static_cast<std::size_t>(k)];
        if (!(p >= 0.0)) {
            throw std::invalid_argument("expected_rating: negative or NaN probability");
        }
        total += p;
        mean += (k + 1) * p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument("expected_rating: probabilities sum to " + std::to_string(total));
    }
    return std::clamp(mean, 1.0, 5.0);
}

double reward_from_rating(const Distribution& dist) { return (expected_rating(dist) - 1.0) / 4.0; }

DemoRewardModel::DemoRewardModel(std::shared_ptr<const SimilarityPredictor> pred, const render::DemoVideo& demo)
    : pred_(std::move(pred)) {
    MatrixXd features(static_cast<Eigen::Index>(render::kFeatureDim), static_cast<Eigen::Index>(demo.size()));
    for (std::size_t t = 0; t < demo.size(); ++t) {
        const auto f = render::frame_features(demo.frames[t]);
        features.col(static_cast<Eigen::Index>(t)) =
            Eigen::Map<const VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    }
    embeddings_ = nn::forward(pred_->visual, features);
}

Distribution DemoRewardModel::distribution(std::size_t t, const Observation& obs) const {
    if (t >= length()) {
        throw std::out_of_range("DemoRewardModel: step beyond the demo");
    }
    const MatrixXd s = nn::forward(pred_->standard, normalize_observations(*pred_, obs.values));
    const VectorXd p = nn::softmax(nn::forward(pred_->head, head_input(embeddings_.col(static_cast<Eigen::Index>(t)), s)).col(0));
    Distribution out;
    for (int k = 0; k < kNumRatings; ++k) {
        out[static_cast<std::size_t>(k)] = p(k);
    }
    return out;
}

double DemoRewardModel::reward(std::size_t t, const env::EnvState& s, const env::EnvAction& a) const {
    return reward_from_rating(distribution(t, Observation::from(s, a)));
}

VectorXd flat_parameters(const SimilarityPredictor& pred) {
    const VectorXd v = pred.visual.flat_parameters();
    const VectorXd s = pred.standard.flat_parameters();
    const VectorXd h = pred.head.flat_parameters();
    VectorXd out(v.size() + s.size() + h.size());
    out << v, s, h;
    return out;
}

void set_flat_parameters(SimilarityPredictor& pred, const VectorXd& flat) {
    const Eigen::Index nv = pred.visual.parameter_count();
    const Eigen::Index ns = pred.standard.parameter_count();
    const Eigen::Index nh = pred.head.parameter_count();
    if (flat.size() != nv + ns + nh) {
        throw nn::ShapeError("similarity predictor: flat parameter vector has the wrong length");
    }
    pred.visual.set_flat_parameters(flat.segment(0, nv));
    pred.standard.set_flat_parameters(flat.segment(nv, ns));
    pred.head.set_flat_parameters(flat.segment(nv + ns, nh));
}

LossGradient loss_gradient(const SimilarityPredictor& pred, const Dataset& samples,
                           const std::array<double, kNumRatings>& weights) {
    if (samples.empty()) {
        throw std::invalid_argument("loss_gradient: empty sample set");
    }
    const PackedData data = pack(pred, samples);
    BranchCaches caches;
    const MatrixXd logits = forward_normalized(pred, data.features, data.obs_norm, &caches);
    MatrixXd dlogits(logits.rows(), logits.cols());
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    LossGradient out;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const int label = data.labels[static_cast<std::size_t>(c)];
        const nn::LossGrad lg = nn::softmax_cross_entropy(logits.col(c), label, weights[label - 1]);
        out.loss += lg.loss * inv_n;
        dlogits.col(c) = lg.grad * inv_n;
    }
    const PredictorGrads g = backward_all(pred, caches, dlogits);
    const VectorXd gv = g.visual.flat();
    const VectorXd gs = g.standard.flat();
    const VectorXd gh = g.head.flat();
    out.grad.resize(gv.size() + gs.size() + gh.size());
    out.grad << gv, gs, gh;
    return out;
}

std::array<double, kNumRatings> class_weights(const Dataset& data) {
    if (data.empty()) {
        throw std::invalid_argument("class_weights: empty dataset");
    }
    std::array<std::size_t, kNumRatings> counts{};
    for (const auto& s : data) {
        check_rating(s.rating);
        ++counts[static_cast<std::size_t>(s.rating - 1)];
    }
    std::array<double, kNumRatings> w{};
    const double n = static_cast<double>(data.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
        w[c] = counts[c] ? n / (kNumRatings * static_cast<double>(counts[c])) : 0.0;
    }
    return w;
}

std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, TrainVariant variant, int batch_size,
                                                   std::uint64_t seed) {
    if (data.empty()) {
        throw std::invalid_argument("make_batches: empty dataset");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("make_batches: batch_size must be positive");
    }
    const auto order = canonical_order(data);
    const std::size_t b = static_cast<std::size_t>(batch_size);
    Rng rng(seed);
    std::vector<std::vector<std::size_t>> batches;

    if (!stratified(variant)) {
        std::vector<std::size_t> perm = order;
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t at = 0; at < perm.size(); at += b) {
            batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                                 perm.begin() + static_cast<std::ptrdiff_t>(std::min(perm.size(), at + b)));
        }
        return batches;
    }

    if (batch_size < kNumRatings) {
        throw std::invalid_argument("make_batches: stratified batching needs batch_size >= 5");
    }
    std::array<std::vector<std::size_t>, kNumRatings> pools;
    for (std::size_t i : order) {
        check_rating(data[i].rating);
        pools[static_cast<std::size_t>(data[i].rating - 1)].push_back(i);
    }
    std::vector<std::size_t> present;
    for (std::size_t c = 0; c < pools.size(); ++c) {
        if (!pools[c].empty()) {
            std::shuffle(pools[c].begin(), pools[c].end(), rng);
            present.push_back(c);
        }
    }
    std::array<std::size_t, kNumRatings> cursor{};
    // Cycle through a class pool, reshuffling whenever it is exhausted; small
    // classes are thereby sampled with replacement across batches.
    auto draw = [&](std::size_t c) {
        if (cursor[c] == pools[c].size()) {
            std::shuffle(pools[c].begin(), pools[c].end(), rng);
            cursor[c] = 0;
        }
        return pools[c][cursor[c]++];
    };

    const std::size_t n_batches = (data.size() + b - 1) / b;
    const std::size_t quota = b / present.size();
    const std::size_t extra = b % present.size();
    for (std::size_t k = 0; k < n_batches; ++k) {
        std::vector<std::size_t> batch;
        batch.reserve(b);
        for (std::size_t j = 0; j < present.size(); ++j) {
            // Remainder slots rotate round-robin across batches.
            const bool bonus = ((j + present.size() - (k * extra) % present.size()) % present.size()) < extra;
            const std::size_t take = quota + (bonus ? 1 : 0);
            for (std::size_t q = 0; q < take; ++q) {
                batch.push_back(draw(present[j]));
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

TrainResult train(const SimilarityPredictor& pred, const Dataset& train_set, const Dataset& val_set,
                  TrainVariant variant, const nn::SgdConfig& sgd, int epochs, std::uint64_t seed) {
    pred.validate();
    sgd.validate();
    if ((variant == TrainVariant::AdditionalLayer) != (pred.head.layers.size() == 2)) {
        throw nn::ShapeError("train: the additional-layer variant requires (and only it uses) the two-layer head");
    }
    TrainResult result{pred, {}, 0};
    result.predictor.variant = variant;
    if (epochs <= 0 || train_set.empty()) {
        return result;
    }
    const PackedData train_data = pack(pred, train_set);
    const PackedData val_data = val_set.empty() ? PackedData{} : pack(pred, val_set);
    const PackedData& selection = val_set.empty() ? train_data : val_data;

    SimilarityPredictor current = result.predictor;
    double best = -1.0;
    for (int e = 1; e <= epochs; ++e) {
        const double loss = run_epoch(current, train_set, train_data, variant, sgd, derive_seed(seed, 0xba7c4, e));
        const double acc = accuracy_of(current, selection);
        result.history.push_back({e, loss, acc});
        if (acc > best) {
            best = acc;
            result.best_epoch = e;
            result.predictor = current;
        }
    }
    return result;
}

SimilarityPredictor fine_tune(const SimilarityPredictor& pred, const Dataset& samples, const nn::SgdConfig& sgd,
                              int epochs, std::uint64_t seed) {
    pred.validate();
    if (samples.empty()) {
        throw std::invalid_argument("fine_tune: no samples");
    }
    for (const auto& s : samples) {
        if (s.observation.values.size() != pred.obs_dim()) {
            throw nn::ShapeError("fine_tune: architecture mismatch (observation dimension)");
        }
    }
    nn::SgdConfig slow = sgd;
    slow.learning_rate *= 0.1;
    slow.validate();
    SimilarityPredictor current = pred;
    if (epochs <= 0) {
        return current;
    }
    const PackedData data = pack(pred, samples);
    for (int e = 1; e <= epochs; ++e) {
        run_epoch(current, samples, data, pred.variant, slow, derive_seed(seed, 0xf17e, e));
    }
    return current;
}

double merged_f1(std::span<const int> predicted, std::span<const int> truth, std::span<const int> positive) {
    auto is_pos = [&](int r) { return std::find(positive.begin(), positive.end(), r) != positive.end(); };
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool p = is_pos(predicted[i]);
        const bool t = is_pos(truth[i]);
        tp += (p && t) ? 1 : 0;
        fp += (p && !t) ? 1 : 0;
        fn += (!p && t) ? 1 : 0;
    }
    if (tp + fp + fn == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

EvalMetrics evaluate_predictions(std::span<const int> predicted, std::span<const int> truth) {
    if (truth.empty()) {
        throw std::invalid_argument("evaluate: empty dataset");
    }
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("evaluate: prediction/label count mismatch");
    }
    EvalMetrics m;
    m.count = truth.size();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        check_rating(predicted[i]);
        check_rating(truth[i]);
        hits += predicted[i] == truth[i] ? 1 : 0;
        ++m.abs_error_hist[static_cast<std::size_t>(std::abs(predicted[i] - truth[i]))];
    }
    m.accuracy = static_cast<double>(hits) / static_cast<double>(truth.size());
    static constexpr int k345[] = {3, 4, 5};
    static constexpr int k45[] = {4, 5};
    m.f1_345 = merged_f1(predicted, truth, k345);
    m.f1_45 = merged_f1(predicted, truth, k45);
    return m;
}

EvalMetrics evaluate(const SimilarityPredictor& pred, const Dataset& data) {
    if (data.empty()) {
        throw std::invalid_argument("evaluate: empty dataset");
    }
    const PackedData packed = pack(pred, data);
    const auto predicted = argmax_ratings(forward_normalized(pred, packed.features, packed.obs_norm, nullptr));
    return evaluate_predictions(predicted, packed.labels);
}

void save_predictor(const SimilarityPredictor& pred, const std::filesystem::path& dir) {
    pred.validate();
    std::filesystem::create_directories(dir);
    nn::write_vnn(pred.visual, dir / "visual.vnn");
    nn::write_vnn(pred.standard, dir / "standard.vnn");
    nn::write_vnn(pred.head, dir / "head.vnn");
    nlohmann::json manifest = {
        {"format", "mimic-predictor-1"},
        {"variant", to_string(pred.variant)},
        {"frame_features", render::kFeatureDim},
        {"obs_dim", pred.obs_dim()},
        {"visual_embedding", pred.visual.output_dim()},
        {"standard_embedding", pred.standard.output_dim()},
        {"head_layers", pred.head.layers.size()},
        {"obs_shift", std::vector<double>(pred.obs_shift.begin(), pred.obs_shift.end())},
        {"obs_scale", std::vector<double>(pred.obs_scale.begin(), pred.obs_scale.end())},
    };
    io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

SimilarityPredictor load_predictor(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        throw FormatError("predictor checkpoint: missing " + manifest_path.string());
    }
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(io::read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("predictor manifest: " + std::string(e.what()));
    }
    SimilarityPredictor p;
    try {
        p.variant = variant_from_string(m.at("variant").get<std::string>());
        const auto shift = m.at("obs_shift").get<std::vector<double>>();
        const auto scale = m.at("obs_scale").get<std::vector<double>>();
        p.obs_shift = Eigen::Map<const VectorXd>(shift.data(), static_cast<Eigen::Index>(shift.size()));
        p.obs_scale = Eigen::Map<const VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size()));
    } catch (const std::exception& e) {
        throw FormatError("predictor manifest: " + std::string(e.what()));
    }
    for (const char* part : {"visual.vnn", "standard.vnn", "head.vnn"}) {
        if (!std::filesystem::exists(dir / part)) {
            throw FormatError("predictor checkpoint: missing " + (dir / part).string());
        }
    }
    p.visual = nn::read_vnn(dir / "visual.vnn");
    p.standard = nn::read_vnn(dir / "standard.vnn");
    p.head = nn::read_vnn(dir / "head.vnn");
    try {
        p.validate();
    } catch (const std::exception& e) {
        throw FormatError("predictor checkpoint: " + std::string(e.what()));
    }
    if (m.at("obs_dim").get<Eigen::Index>() != p.obs_dim()) {
        throw FormatError("predictor manifest: obs_dim disagrees with standard.vnn");
    }
    return p;
}

}  // namespace mimic::simpred
