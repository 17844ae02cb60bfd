#pragma once

#include "fuseclin/imaging.hpp"
#include "fuseclin/matrix.hpp"
#include "fuseclin/rng.hpp"

#include <json.hpp>

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fuseclin::cxrnet {

using imaging::ImageTensor;

struct ImageSize {
    int height = 64;
    int width = 64;
    friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

// ---------------------------------------------------------------------------
// Feature extractors

/// Maps an image of `input_size()` to `feature_dim()` finite values.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;

    virtual ImageSize input_size() const = 0;
    virtual std::size_t feature_dim() const = 0;
    virtual bool differentiable() const { return false; }
    /// First trainable layer, when part of the extractor can be fine-tuned.
    virtual std::optional<std::size_t> trainable_tail_boundary() const { return std::nullopt; }

    /// `img` must already have the input size.
    virtual std::vector<double> extract(const ImageTensor& img) const = 0;

    virtual nlohmann::json to_json() const = 0;
    virtual std::unique_ptr<FeatureExtractor> clone() const = 0;
};

/// Builds an extractor from its JSON descriptor ("reference" or "conv").
std::unique_ptr<FeatureExtractor> extractor_from_json(const nlohmann::json& j);

/// Non-differentiable reference extractor. The image is standardized to zero mean and unit
/// variance, then summarized by a 16x16 mean-pooling grid (256 values) followed by
/// mean/sd/min/max over the whole image and the four canonical anatomy regions, repeated
/// cyclically to 1024 values.
class ReferencePatchExtractor final : public FeatureExtractor {
public:
    static constexpr std::size_t kGrid = 16;
    static constexpr std::size_t kFeatureDim = 1024;

    explicit ReferencePatchExtractor(ImageSize input = {});

    ImageSize input_size() const override { return input_; }
    std::size_t feature_dim() const override { return kFeatureDim; }
    std::vector<double> extract(const ImageTensor& img) const override;
    nlohmann::json to_json() const override;
    std::unique_ptr<FeatureExtractor> clone() const override;

private:
    ImageSize input_;
};

/// Single-channel-to-many 3x3 convolution block: conv (zero padding) -> ReLU -> optional 2x2 mean pool.
struct ConvBlock {
    int in_channels = 1;
    int out_channels = 1;
    bool pool = true;
    std::vector<double> weights;  // out x in x 3 x 3
    std::vector<double> bias;     // out
};

/// Channel-major activation tensor.
struct FeatureMaps {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;

    double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Differentiable convolutional teacher. Features are the linearized activations of the
/// block selected by `feature_layer` (negative, counted from the end: -1 is the last block).
/// Blocks below `frozen_prefix` are frozen; the blocks from there up to the feature block
/// form the trainable tail.
class ConvTeacherExtractor final : public FeatureExtractor {
public:
    ConvTeacherExtractor(ImageSize input, std::vector<ConvBlock> blocks, int feature_layer, std::size_t frozen_prefix);

    /// Seeded random weights (uniform fan-in scheme); used for tests and as a stand-in teacher.
    static ConvTeacherExtractor random(ImageSize input, const std::vector<int>& channels, int feature_layer,
                                       std::size_t frozen_prefix, std::uint64_t seed);

    ImageSize input_size() const override { return input_; }
    std::size_t feature_dim() const override { return feature_dim_; }
    bool differentiable() const override { return true; }
    std::optional<std::size_t> trainable_tail_boundary() const override { return frozen_prefix_; }
    std::vector<double> extract(const ImageTensor& img) const override;
    nlohmann::json to_json() const override;
    std::unique_ptr<FeatureExtractor> clone() const override;

    /// Activations retained for backpropagation: block inputs and pre-pool ReLU outputs.
    struct Trace {
        std::vector<FeatureMaps> inputs;
        std::vector<FeatureMaps> relu;
        FeatureMaps features;
    };
    Trace forward(const ImageTensor& img) const;
    /// Shape of the feature block output.
    const FeatureMaps& feature_shape() const { return feature_shape_; }

    bool has_trainable_tail() const { return frozen_prefix_ <= feature_block_; }
    /// Trainable parameter buffers in a fixed order (weights, bias per tail block).
    std::vector<std::span<double>> trainable_parameters();
    /// Accumulates parameter gradients (same order as trainable_parameters()) given dL/dfeatures.
    void backward(const Trace& trace, std::span<const double> grad_features, std::vector<std::vector<double>>& grads) const;
    std::vector<std::vector<double>> zero_gradients() const;

    const std::vector<ConvBlock>& blocks() const { return blocks_; }
    std::size_t feature_block() const { return feature_block_; }

private:
    ImageSize input_;
    std::vector<ConvBlock> blocks_;
    int feature_layer_;
    std::size_t feature_block_;
    std::size_t frozen_prefix_;
    std::size_t feature_dim_ = 0;
    FeatureMaps feature_shape_;
};

// ---------------------------------------------------------------------------
// Classification head

enum class Activation { relu, leaky_relu };
enum class BiasInit { none, calculated };

struct HeadConfig {
    std::vector<int> hidden_layers = {128, 64};
    Activation activation = Activation::leaky_relu;
    double leaky_slope = 0.01;
    double dropout = 0.5;
    BiasInit bias_init = BiasInit::calculated;
    double weight_negative = 1.0;
    double weight_positive = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static HeadConfig from_json(const nlohmann::json& j);
};

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;  // out x in
    std::vector<double> bias;     // out
};

/// Hidden dense layers with the configured activation, one dropout layer after the last
/// hidden activation, and a single-logit output layer.
struct HeadWeights {
    std::vector<DenseLayer> hidden;
    DenseLayer output;
    Activation activation = Activation::leaky_relu;
    double leaky_slope = 0.01;
    double dropout = 0.0;

    std::size_t feature_dim() const { return hidden.empty() ? output.in : hidden.front().in; }
    double output_bias() const { return output.bias.at(0); }

    /// Parameter buffers in a fixed order: (weights, bias) per hidden layer, then output.
    std::vector<std::span<double>> parameters();
    std::vector<std::span<const double>> parameters() const;
    std::vector<std::vector<double>> zero_gradients() const;
};

/// Hidden weights uniform in +-sqrt(6 / fan_in), output weights uniform in +-sqrt(3 / fan_in),
/// hidden biases 0; output bias ln(pos/neg) when calculated, else 0.
HeadWeights init_head(const HeadConfig& cfg, std::size_t feature_dim, std::size_t pos_count, std::size_t neg_count,
                      std::uint64_t seed);

struct HeadTrace {
    std::vector<std::vector<double>> layer_inputs;  // input of each hidden layer, then of the output layer
    std::vector<std::vector<double>> pre_activation;
    std::vector<double> dropout_scale;  // empty in evaluation mode
    double logit = 0.0;
};

/// Evaluation mode unless `dropout_rng` is given (inverted dropout).
double head_forward(const HeadWeights& head, std::span<const double> features, Rng* dropout_rng = nullptr,
                    HeadTrace* trace = nullptr);
/// Accumulates dL/dparams for dL/dlogit; optionally writes dL/dfeatures.
void head_backward(const HeadWeights& head, const HeadTrace& trace, double grad_logit,
                   std::vector<std::vector<double>>& grads, std::vector<double>* grad_features = nullptr);

double sigmoid(double z);
/// -w_y [y ln p + (1-y) ln(1-p)] computed from the logit without overflow.
double weighted_bce_from_logit(double logit, int label, double w_neg, double w_pos);

struct BceResult {
    std::vector<double> probabilities;
    double loss = 0.0;
};

/// Evaluation-mode forward on every row plus the mean class-weighted BCE.
BceResult forward_bce(const HeadWeights& head, const Matrix& features, std::span<const int> labels, double w_neg,
                      double w_pos);
/// Gradient of forward_bce's loss with respect to head parameters (evaluation mode).
std::vector<std::vector<double>> bce_gradients(const HeadWeights& head, const Matrix& features,
                                               std::span<const int> labels, double w_neg, double w_pos);

// ---------------------------------------------------------------------------
// Optimisation

/// Adam with bias correction; beta1 0.9, beta2 0.999, epsilon 1e-7, no weight decay.
class Adam {
public:
    explicit Adam(const std::vector<std::span<double>>& params, double beta1 = 0.9, double beta2 = 0.999,
                  double epsilon = 1e-7);
    void step(const std::vector<std::span<double>>& params, const std::vector<std::vector<double>>& grads, double lr);
    long steps() const { return t_; }

private:
    double beta1_, beta2_, epsilon_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// lr(epoch) = initial_lr * decay^epoch (epoch counted from 0).
double learning_rate(double initial_lr, double decay, int epoch);

/// Tracks the best validation loss; signals a stop after `patience` epochs without improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience);
    /// Returns true when `loss` improves on the best seen so far.
    bool update(double loss);
    bool should_stop() const { return stale_ >= patience_; }
    int best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_; }

private:
    int patience_;
    int epoch_ = -1;
    int best_epoch_ = -1;
    int stale_ = 0;
    double best_;
};

struct TrainConfig {
    int batch_size = 16;
    double initial_lr = 0.002;
    double lr_decay = 0.96;
    int max_epochs = 30;
    int patience = 2;
    std::uint64_t seed = 2020;
    bool augment_bbox = true;
    bool online_augment = true;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochMetrics {
    double loss = 0.0;
    double recall = 0.0;
    double precision = 0.0;
    double accuracy = 0.0;
    double auroc = 0.0;
    double f1 = 0.0;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    EpochMetrics train;
    EpochMetrics valid;
};

struct FoldSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> valid_ids;
};

/// Immutable trained model: extractor, head and training history.
struct TrainedCXRModel {
    std::shared_ptr<const FeatureExtractor> extractor;
    HeadWeights head;
    std::vector<EpochRecord> history;
    int best_epoch = -1;

    nlohmann::json to_json() const;
    static TrainedCXRModel from_json(const nlohmann::json& j);
    /// CSV: epoch, lr, train/valid loss, recall, precision, accuracy, auroc, f1.
    std::string history_csv() const;
};

/// Trains the head (and the extractor's trainable tail when differentiable) with Adam on
/// class-weighted BCE, with exponential per-epoch learning-rate decay and early stopping on
/// the (unweighted) validation loss. Weights of the best validation epoch are retained.
TrainedCXRModel train_cxr(const imaging::ImageStore& store, const std::map<std::string, int>& labels,
                          const FeatureExtractor& extractor, const HeadConfig& head_cfg, const TrainConfig& train_cfg,
                          const FoldSplit& split);

/// Resizes to the extractor's input size (no augmentation) and returns P(expired).
double predict_cxr(const TrainedCXRModel& model, const ImageTensor& img);

/// Mean Grad-CAM heatmap (extractor input size) over images with label 1 and probability
/// above `threshold`. Each map is ReLU(sum_c alpha_c A_c), upsampled, then min-max normalized
/// (an all-flat map stays at 0).
ImageTensor gradcam_mean(const TrainedCXRModel& model, const std::vector<ImageTensor>& images,
                         std::span<const int> labels, std::span<const double> probabilities, double threshold = 0.6);

/// Grad-CAM heatmap for a single image.
ImageTensor gradcam(const TrainedCXRModel& model, const ImageTensor& img);

}  // namespace fuseclin::cxrnet
