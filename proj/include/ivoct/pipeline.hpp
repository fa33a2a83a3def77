#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ivoct/augmentation.hpp"
#include "ivoct/candidates.hpp"
#include "ivoct/evaluation.hpp"
#include "ivoct/log.hpp"
#include "ivoct/phantom.hpp"
#include "ivoct/preprocess.hpp"
#include "ivoct/reconstruct3d.hpp"
#include "ivoct/seg_model.hpp"

namespace ivoct {

// One labelled pullback. `confounders` (non-zero = confounder pixel) and
// `shadow` come from phantom truth and may be empty.
struct Segment {
    PolarPullback pullback;
    std::vector<Mask> masks;
    std::vector<Mask> confounders;
    std::vector<AngularInterval> shadow;

    const std::string& id() const noexcept { return pullback.segment_id; }
};

// Segments "seg00", "seg01", ... each from its own derived seed.
std::vector<Segment> generate_corpus(const PhantomParams& base, int segments, std::uint64_t seed);
// dir/<segment id>/ per segment (pullback directory, plus truth.json when known).
void save_corpus(std::span<const Phantom> phantoms, const std::filesystem::path& dir);
std::vector<Phantom> generate_phantoms(const PhantomParams& base, int segments, std::uint64_t seed);
Segment segment_from_phantom(const Phantom& ph);
// A pullback directory with masks, plus truth.json when present.
Segment load_segment(const std::filesystem::path& dir);
// Sub-directories of `dir` holding `marker`, in name order; FormatError when none.
std::vector<std::filesystem::path> segment_dirs(const std::filesystem::path& dir, const std::string& marker);
// Every sub-directory holding meta.json, in name order.
std::vector<Segment> load_corpus(const std::filesystem::path& dir);

// Offset-angle copies of a segment; the copies keep the segment id.
std::vector<Segment> augment_segment(const Segment& s, const AugmentSpec& spec);

struct PreparedSegment {
    std::string id;
    PullbackMeta meta;
    std::vector<PreprocessedFrame> frames;
    std::vector<Mask> masks;        // truth in pre-processed coordinates
    std::vector<Mask> confounders;  // empty without truth

    PolarGeometry geometry(int frame) const;
};

// Frame-parallel pre-processing of a segment and its labels.
PreparedSegment prepare_segment(const Segment& s, const PreprocessConfig& cfg);

// Directory layout: prepared.json (meta, lumen), transform_%05d.json (shift
// record, shadow, ROI), pre_%05d.pgm (16-bit), mask_%05d.pgm and, with truth,
// conf_%05d.pgm.
// "<stem>_00042.pgm"
std::string indexed_file(const char* stem, std::size_t i, const char* ext = ".pgm");

void save_prepared(const PreparedSegment& s, const std::filesystem::path& dir);
PreparedSegment load_prepared(const std::filesystem::path& dir);
// Every sub-directory holding prepared.json, in name order.
std::vector<PreparedSegment> load_prepared_set(const std::filesystem::path& dir);

struct PipelineConfig {
    PhantomParams phantom;
    int segments = 5;
    bool augment = true;
    AugmentSpec augment_spec;
    PreprocessConfig preprocess;
    SegConfig seg;
    nn::TrainSchedule seg_sched;
    int seg_batch = 4;
    ClassifierConfig clf;
    nn::TrainSchedule clf_sched;
    int clf_batch = 32;
    int min_blob_px = 3;
    TrackConfig tracks;
    int folds = 5;
    double train_frac = 0.70;
    double val_frac = 0.15;
    std::uint64_t seed = 7;
};

// Stage helpers shared by the subcommands and the end-to-end pipeline.
std::vector<SegSample> seg_samples(std::span<const PreparedSegment> segs);
SegTrainResult train_seg_stage(SegModel& model, std::span<const PreparedSegment> train,
                               std::span<const PreparedSegment> val, const PipelineConfig& cfg, std::uint64_t seed,
                               const Logger& log);
// Predicted masks in pre-processed coordinates.
std::vector<Mask> segment_frames(SegModel& model, const PreparedSegment& s, int batch_size = 4);
// Predicted blobs labelled by truth overlap, plus every truth vessel blob
// (positive) and truth confounder blob (negative).
std::vector<LabeledPatch> classifier_dataset(const PreparedSegment& s, std::span<const Mask> predicted,
                                             const ClassifierConfig& cfg, int min_blob_px);

struct InferredSegment {
    std::vector<std::vector<Candidate>> candidates;  // pre-processed coordinates
    std::vector<std::vector<Verdict>> verdicts;
    std::vector<Mask> raw_before;  // raw coordinates
    std::vector<Mask> raw_after;
};
InferredSegment infer_segment(SegModel& seg, CandidateClassifier& clf, const PreparedSegment& s, int min_blob_px);

// Per-frame microvessel area in mm^2 (raw-coordinate masks).
double mask_area_mm2(const Mask& raw, const PullbackMeta& meta);

struct SegmentEvaluation {
    ConfusionCounts before, after;
    std::vector<double> pred_area_mm2, truth_area_mm2;
    std::vector<bool> pred_present, truth_present;
};
// Compares raw-coordinate predictions with the segment's truth, skipping the
// truth shadow band when it is known.
SegmentEvaluation evaluate_segment(const Segment& s, std::span<const Mask> before, std::span<const Mask> after);

struct FoldResult {
    int fold = 0;
    FoldSplit split;
    SegmentEvaluation eval;
    ConfusionCounts classifier;  // held-out candidate verdicts vs labels
    int seg_epochs = 0;
    int seg_best_epoch = 0;
    int clf_best_epoch = 0;
    std::size_t clf_train_patches = 0;
    int tracks = 0;
    int truth_tracks = 0;
    double longest_track_mm = 0.0;
};

struct PipelineResult {
    std::vector<FoldResult> folds;
    nlohmann::json report;
};

// Grouped k-fold run over the corpus. With an output directory, each fold
// writes its checkpoints, histories, candidates, tracks and PLY scene under
// fold_<k>/, and report.json and folds.csv go to the top level.
PipelineResult run_pipeline(std::span<const Segment> corpus, const PipelineConfig& cfg,
                            const std::optional<std::filesystem::path>& out_dir, const Logger& log);

nlohmann::json fold_json(const FoldResult& f);
// Complete fold record (confusion counts and per-frame series) that `report`
// aggregates; fold_from_record inverts it.
nlohmann::json fold_record(const FoldResult& f);
FoldResult fold_from_record(const nlohmann::json& j);
// {folds, summary, frame_agreement, stats}
nlohmann::json make_report(std::span<const FoldResult> folds);
void write_folds_csv(const std::filesystem::path& path, std::span<const FoldResult> folds);

}  // namespace ivoct
