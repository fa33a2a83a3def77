#pragma once

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ivoct/imaging.hpp"
#include "ivoct/nn/layers.hpp"
#include "ivoct/nn/optim.hpp"

namespace ivoct {

// Polar sampling needed for physical areas. `shift` maps a mask column j on
// A-line a to the raw radial sample j + shift[a]; empty means raw coordinates.
struct PolarGeometry {
    int alines = 0;
    double r_pixel_mm = 0.005;
    std::vector<int> shift;

    int raw_sample(int a, int j) const noexcept { return shift.empty() ? j : j + shift[a]; }
};

// Rectangle in (theta, r). a0 may lie anywhere on the ring; rows [a0, a0 + rows)
// wrap modulo the A-line count. r0 may be negative or run past the image.
struct BoundingBox {
    int a0 = 0, rows = 0;
    int r0 = 0, cols = 0;
};

struct Candidate {
    std::vector<std::pair<int, int>> pixels;  // (aline, sample), row-major scan order
    BoundingBox bbox;
    int area_px = 0;
    double area_mm2 = 0.0;
    double centroid_a = 0.0;      // in [0, alines)
    double centroid_r = 0.0;      // mask coordinates
    double centroid_r_raw = 0.0;  // raw radial samples
};

// 8-connected blobs with theta wrapping; components under min_blob_px dropped.
// Boxes are the tight box grown on one side per axis so the centroid sits at
// the box centre.
std::vector<Candidate> extract_candidates(const Mask& mask, const PolarGeometry& geom, int min_blob_px = 3);

// Sum of r * dr * dtheta over the pixels (r at the raw pixel centre).
double polar_area_mm2(std::span<const std::pair<int, int>> pixels, const PolarGeometry& geom);

struct ClassifierConfig {
    int patch_size = 30;
    int padding_px = 3;
    std::vector<int> filters{8, 16, 32};

    void validate() const;
};
nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j, ClassifierConfig base = {});

// Crop the box padded by `padding_px` on every edge (theta wraps, r
// replicates the border) and resample bilinearly to patch_size squared.
Image make_patch(const Image& img, const Candidate& c, const ClassifierConfig& cfg = {});

// Rotation about the patch centre with bilinear sampling, border replicated.
Image rotate_patch(const Image& patch, double degrees);
// Rotations by 30, 60, ..., 180 degrees.
std::vector<Image> rotate_patch_set(const Image& patch);

struct LabeledPatch {
    Image patch;
    int label = 0;  // 1 = microvessel
};

// Positives followed by their six rotations; negatives unchanged.
std::vector<LabeledPatch> augment_training_set(std::span<const LabeledPatch> set);

// conv(s2)+BN+ReLU, maxpool, conv(s2)+BN+ReLU, maxpool, conv(s2)+BN+ReLU, FC(2)
class CandidateClassifier {
public:
    CandidateClassifier(ClassifierConfig cfg, std::uint64_t seed);

    nn::Tensor forward(const nn::Tensor& x, bool training);
    nn::Tensor backward(const nn::Tensor& dlogits);
    std::vector<nn::Param*> params();
    std::vector<std::pair<std::string, nn::Tensor*>> state();
    const ClassifierConfig& config() const noexcept { return cfg_; }

    void save(const std::filesystem::path& path);
    static CandidateClassifier load(const std::filesystem::path& path);

private:
    ClassifierConfig cfg_;
    nn::Conv2d c1_, c2_, c3_;
    nn::BatchNorm2d b1_, b2_, b3_;
    nn::ReLU r1_, r2_, r3_;
    nn::MaxPool2d p1_, p2_;
    nn::Linear fc_;
};

struct ClassifierTrainOptions {
    nn::TrainSchedule sched;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
    std::vector<double> train_loss, val_loss;
    int best_epoch = 0;
    std::size_t train_patches = 0;  // after augmentation
};

// Unweighted cross-entropy; rotation augmentation on the training positives.
// An empty validation set falls back to the training loss for model selection.
ClassifierTrainResult train_classifier(CandidateClassifier& model, std::span<const LabeledPatch> train,
                                       std::span<const LabeledPatch> val, const ClassifierTrainOptions& opt);

struct Verdict {
    int label = 0;
    double prob_vessel = 0.0;
};
std::vector<Verdict> classify_candidates(CandidateClassifier& model, std::span<const Image> patches,
                                         int batch_size = 64);

// Clears the pixels of candidates labelled non-microvessel.
Mask refine_mask(const Mask& mask, std::span<const Candidate> candidates, std::span<const Verdict> verdicts);

// 1 when the candidate contains a microvessel: at least `min_overlap` of its
// pixels are truth pixels, or it holds at least `min_overlap` of the pixels of
// some 8-connected truth blob it touches.
int overlap_label(const Candidate& c, const Mask& truth, double min_overlap = 0.5);

struct CandidateRow {
    int frame = 0;
    const Candidate* candidate = nullptr;
    Verdict verdict;
};
void write_candidates_csv(const std::filesystem::path& path, std::span<const CandidateRow> rows);

}  // namespace ivoct
