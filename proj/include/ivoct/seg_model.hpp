#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "ivoct/imaging.hpp"
#include "ivoct/nn/layers.hpp"
#include "ivoct/nn/optim.hpp"

namespace ivoct {

struct EncoderStage {
    int channels = 16;
    int stride = 2;
    friend bool operator==(const EncoderStage&, const EncoderStage&) = default;
};

struct SegConfig {
    int input_rows = 496;  // A-lines
    int input_cols = 300;  // radial ROI
    // Resample frames whose shape differs from the network input (bilinear
    // for images, nearest for labels); otherwise such frames are rejected.
    bool resize_input = false;
    std::vector<EncoderStage> encoder{{16, 2}, {32, 2}, {64, 2}};
    int aspp_channels = 32;
    std::vector<int> aspp_rates{1, 2, 4};
    bool aspp_global = true;
    int classes = 2;

    void validate() const;
    friend bool operator==(const SegConfig&, const SegConfig&) = default;
};

nlohmann::json to_json(const SegConfig& c);
SegConfig seg_config_from_json(const nlohmann::json& j, SegConfig base = {});

// Receptive-field probe along one axis: true iff every output position
// depends on every input position. Axis 0 = rows (theta), 1 = cols (r).
bool full_receptive_field(const SegConfig& cfg, int axis);

// conv + batchnorm + ReLU
struct ConvBlock {
    nn::Conv2d conv;
    nn::BatchNorm2d bn;
    nn::ReLU relu;

    ConvBlock() = default;
    ConvBlock(const std::string& name, int in, int out, int k, int stride, int dilation);
    nn::Tensor forward(const nn::Tensor& x, bool training);
    nn::Tensor backward(const nn::Tensor& dy);
    void collect(std::vector<nn::Param*>& params, std::vector<std::pair<std::string, nn::Tensor*>>& state);
};

// Encoder (strided conv blocks) -> ASPP (1x1, dilated 3x3 branches, global
// average branch) -> decoder (bilinear upsampling fused with encoder skips)
// -> head (upsample to input size, fuse the input image, 3x3 conv to logits).
class SegModel {
public:
    SegModel(SegConfig cfg, std::uint64_t seed);

    // (N, 1, rows, cols) -> logits (N, classes, rows, cols)
    nn::Tensor forward(const nn::Tensor& x, bool training);
    // Input gradient; parameter gradients accumulate.
    nn::Tensor backward(const nn::Tensor& dlogits);

    std::vector<nn::Param*> params();
    // Parameters and batch-norm running statistics, in a fixed order.
    std::vector<std::pair<std::string, nn::Tensor*>> state();
    const SegConfig& config() const noexcept { return cfg_; }
    std::size_t parameter_count();

    void save(const std::filesystem::path& path);
    static SegModel load(const std::filesystem::path& path);

private:
    void build();

    SegConfig cfg_;
    std::vector<ConvBlock> enc_;
    std::vector<ConvBlock> aspp_;
    nn::GlobalAvgPool gap_;
    nn::Conv2d gconv_;
    nn::ReLU grelu_;
    nn::Resize gup_;
    ConvBlock proj_;
    std::vector<nn::Resize> dec_up_;
    std::vector<ConvBlock> dec_;
    nn::Resize head_up_;
    nn::Conv2d head_;

    std::vector<int> skip_channels_;
};

struct SegPrediction {
    Image p_background;
    Image p_vessel;
    Mask mask;  // argmax, ties to background, excluded pixels forced to 0
};

// Frames must match the network input unless resize_input is set; the
// prediction is returned at the frame's own shape.
std::vector<SegPrediction> predict_masks(SegModel& model, std::span<const Image> frames,
                                         std::span<const Mask> excluded, int batch_size = 4);
SegPrediction predict_mask(SegModel& model, const Image& frame, const Mask& excluded);

struct SegSample {
    const Image* image = nullptr;
    const Mask* mask = nullptr;
    const Mask* excluded = nullptr;  // may be null
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::optional<double> val_dice;
};

struct SegTrainOptions {
    nn::TrainSchedule sched;
    int batch_size = 4;
    std::uint64_t seed = 0;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct SegTrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    std::vector<double> class_weights;
};

// Weighted cross-entropy + L2 with Adam, piecewise learning rate and early
// stopping on validation loss. The model keeps its stopping-epoch weights
// unless sched.restore_best is set.
SegTrainResult train_segmentation(SegModel& model, std::span<const SegSample> train, std::span<const SegSample> val,
                                  const SegTrainOptions& opt);

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

}  // namespace ivoct
