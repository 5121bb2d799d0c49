#pragma once

// Similarity predictor: maps (demo frame, agent observation) to a distribution
// over the five similarity ratings. The visual branch consumes pooled frame
// features, the standard branch the concatenated state/action observation; the
// two embeddings are concatenated and classified by the head.

#include <array>
#include <filesystem>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "mimic/env.hpp"
#include "mimic/nn.hpp"
#include "mimic/render.hpp"

namespace mimic::simpred {

inline constexpr int kNumRatings = 5;
inline constexpr Eigen::Index kVisualEmbedding = 128;
inline constexpr Eigen::Index kStandardEmbedding = 64;
inline constexpr Eigen::Index kHeadHidden = 64;
inline constexpr Eigen::Index kObservationDim = env::kStateDim + env::kActionDim;

enum class TrainVariant { RandomSampling, SamplingEqually, ClassWeights, EqualPlusWeights, AdditionalLayer };

inline constexpr std::array kAllVariants = {TrainVariant::RandomSampling, TrainVariant::SamplingEqually,
                                            TrainVariant::ClassWeights, TrainVariant::EqualPlusWeights,
                                            TrainVariant::AdditionalLayer};

std::string_view to_string(TrainVariant v);
/// Accepts the snake_case names produced by to_string; throws std::invalid_argument otherwise.
TrainVariant variant_from_string(std::string_view name);
bool stratified(TrainVariant v);
bool weighted(TrainVariant v);

struct Observation {
    nn::VectorXd values;  // state then action

    static Observation from(const env::EnvState& s, const env::EnvAction& a);
    bool operator==(const Observation& o) const { return values == o.values; }
};

struct AnnotationSample {
    render::Frame frame;
    Observation observation;
    int rating = 1;
};

using Dataset = std::vector<AnnotationSample>;
using Distribution = std::array<double, kNumRatings>;

struct SimilarityPredictor {
    nn::DenseNet visual;    // 1024 -> 128
    nn::DenseNet standard;  // obs -> 64 -> 64
    nn::DenseNet head;      // 192 -> 5, or 192 -> 64 -> 5 for AdditionalLayer
    TrainVariant variant = TrainVariant::AdditionalLayer;
    // Fixed affine preprocessing of observations: (o - shift) .* scale.
    nn::VectorXd obs_shift;
    nn::VectorXd obs_scale;

    static SimilarityPredictor create(TrainVariant variant, std::uint64_t seed,
                                      Eigen::Index obs_dim = kObservationDim);
    Eigen::Index obs_dim() const { return standard.input_dim(); }
    bool same_architecture(const SimilarityPredictor& o) const;
    /// Throws nn::ShapeError if the branches and head do not fit together.
    void validate() const;
    bool operator==(const SimilarityPredictor& o) const {
        return variant == o.variant && visual == o.visual && standard == o.standard && head == o.head &&
               obs_shift == o.obs_shift && obs_scale == o.obs_scale;
    }
};

/// Observation preprocessing fitted to a demo's states: centred on their mean,
/// scaled by the inverse standard deviation (floored at `min_std`).
void fit_observation_scaling(SimilarityPredictor& pred, std::span<const env::EnvState> states,
                             double min_std = 0.5);

Distribution predict(const SimilarityPredictor& pred, const render::Frame& frame, const Observation& obs);

/// Raw 5xB logits for a batch of pooled frame features (1024xB) and raw observations (dxB).
nn::MatrixXd predict_logits(const SimilarityPredictor& pred, const nn::MatrixXd& features,
                            const nn::MatrixXd& observations);

/// Throws std::invalid_argument unless the entries sum to 1 within 1e-6.
double expected_rating(const Distribution& dist);
/// (expected_rating - 1) / 4, in [0, 1].
double reward_from_rating(const Distribution& dist);

/// Per-step reward against a fixed demo: visual embeddings of every demo frame
/// are computed once per predictor snapshot.
class DemoRewardModel {
public:
    DemoRewardModel(std::shared_ptr<const SimilarityPredictor> pred, const render::DemoVideo& demo);

    Distribution distribution(std::size_t t, const Observation& obs) const;
    double reward(std::size_t t, const env::EnvState& s, const env::EnvAction& a) const;
    std::size_t length() const { return static_cast<std::size_t>(embeddings_.cols()); }

private:
    std::shared_ptr<const SimilarityPredictor> pred_;
    nn::MatrixXd embeddings_;  // 128 x n_frames
};

/// Visual, standard and head parameters, concatenated in that order.
nn::VectorXd flat_parameters(const SimilarityPredictor& pred);
void set_flat_parameters(SimilarityPredictor& pred, const nn::VectorXd& flat);

struct LossGradient {
    double loss = 0.0;     // mean class-weighted cross-entropy over the samples
    nn::VectorXd grad;     // d loss / d flat_parameters
};

/// The training objective on `samples` with per-rating loss weights.
LossGradient loss_gradient(const SimilarityPredictor& pred, const Dataset& samples,
                           const std::array<double, kNumRatings>& weights);

/// w_c = N / (5 N_c); classes with no samples get weight 0.
std::array<double, kNumRatings> class_weights(const Dataset& data);

/// Index batches for one epoch. The result depends on sample content and seed,
/// never on storage order.
std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, TrainVariant variant, int batch_size,
                                                   std::uint64_t seed);

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainResult {
    SimilarityPredictor predictor;
    std::vector<EpochMetrics> history;
    int best_epoch = 0;  // 0 when no epoch ran
};

/// Trains with the variant's batching and loss weighting; returns the parameters
/// of the epoch with the best validation accuracy (training accuracy if `val` is empty).
TrainResult train(const SimilarityPredictor& pred, const Dataset& train_set, const Dataset& val_set,
                  TrainVariant variant, const nn::SgdConfig& sgd, int epochs, std::uint64_t seed);

/// Continues training from existing parameters at 0.1x the learning rate; returns the final parameters.
SimilarityPredictor fine_tune(const SimilarityPredictor& pred, const Dataset& samples, const nn::SgdConfig& sgd,
                              int epochs, std::uint64_t seed);

struct EvalMetrics {
    double accuracy = 0.0;
    double f1_345 = 0.0;
    double f1_45 = 0.0;
    std::array<std::size_t, kNumRatings> abs_error_hist{};
    std::size_t count = 0;
};

EvalMetrics evaluate(const SimilarityPredictor& pred, const Dataset& data);
/// Metrics from already-made argmax predictions (ratings 1..5).
EvalMetrics evaluate_predictions(std::span<const int> predicted, std::span<const int> truth);
/// Binary F1 with `positive` as the positive label set; 1.0 when there are no
/// positives and none were predicted.
double merged_f1(std::span<const int> predicted, std::span<const int> truth, std::span<const int> positive);

// Checkpoint directory: visual.vnn, standard.vnn, head.vnn and manifest.json.
void save_predictor(const SimilarityPredictor& pred, const std::filesystem::path& dir);
SimilarityPredictor load_predictor(const std::filesystem::path& dir);

}  // namespace mimic::simpred
