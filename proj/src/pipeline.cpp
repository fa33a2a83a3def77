#include "ivoct/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>

#include "ivoct/error.hpp"

namespace ivoct {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// OpenMP loop that rethrows the first exception (by index) on the caller.
template <typename F>
void parallel_for(int n, F&& fn) {
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string segment_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "seg%02d", i);
    return buf;
}

std::vector<Mask> confounder_masks(const GroundTruth& truth, const PullbackMeta& meta, int frames) {
    std::vector<Mask> out;
    out.reserve(frames);
    for (int f = 0; f < frames; ++f)
        out.push_back(rasterize_confounders(truth, f, meta.alines_per_frame, meta.samples_per_aline));
    return out;
}

// Zeroes the A-lines of `band` so shadowed pixels count nowhere.
Mask without_band(const Mask& m, const std::optional<AngularInterval>& band) {
    if (!band || band->width == 0) return m;
    Mask out = m;
    for (int a = 0; a < m.rows(); ++a)
        if (band->contains(a, m.rows()))
            for (auto& v : out.row(a)) v = 0;
    return out;
}

Mask band_mask(int rows, int cols, const std::optional<AngularInterval>& band) {
    Mask out(rows, cols, 0);
    if (!band) return out;
    for (int a = 0; a < rows; ++a)
        if (band->contains(a, rows))
            for (auto& v : out.row(a)) v = 1;
    return out;
}

}  // namespace

std::vector<Phantom> generate_phantoms(const PhantomParams& base, int segments, std::uint64_t seed) {
    if (segments < 1) throw ConfigError("corpus needs at least one segment");
    std::vector<std::optional<Phantom>> out(segments);
    parallel_for(segments, [&](int i) {
        PhantomParams p = base;
        p.segment_id = segment_name(i);
        out[i] = generate_phantom(p, derive_seed(seed, 0xc0a70000ULL + i));
    });
    std::vector<Phantom> result;
    for (auto& p : out) result.push_back(std::move(*p));
    return result;
}

Segment segment_from_phantom(const Phantom& ph) {
    Segment s;
    s.pullback = ph.pullback;
    s.masks = ph.truth.masks;
    s.confounders = confounder_masks(ph.truth, ph.pullback.meta, ph.pullback.frame_count());
    s.shadow = ph.truth.shadow;
    return s;
}

std::vector<Segment> generate_corpus(const PhantomParams& base, int segments, std::uint64_t seed) {
    std::vector<Segment> out;
    for (const auto& ph : generate_phantoms(base, segments, seed)) out.push_back(segment_from_phantom(ph));
    return out;
}

void save_corpus(std::span<const Phantom> phantoms, const fs::path& dir) {
    for (const auto& ph : phantoms) save_phantom(ph, dir / ph.pullback.segment_id);
}

Segment load_segment(const fs::path& d) {
    auto loaded = load_pullback(d);
    Segment s;
    s.pullback = std::move(loaded.pullback);
    s.masks = std::move(loaded.masks);
    if (s.masks.empty()) throw FormatError("segment without masks: " + d.string());
    if (fs::exists(d / "truth.json")) {
        std::ifstream in(d / "truth.json");
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw FormatError("malformed truth.json in " + d.string() + ": " + e.what());
        }
        auto truth = truth_from_json(j);
        s.confounders = confounder_masks(truth, s.pullback.meta, s.pullback.frame_count());
        s.shadow = truth.shadow;
        if (static_cast<int>(s.shadow.size()) != s.pullback.frame_count())
            throw FormatError("truth.json shadow count differs from frame count in " + d.string());
    }
    return s;
}

std::vector<fs::path> segment_dirs(const fs::path& dir, const std::string& marker) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / marker)) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw FormatError("no " + marker + " directories under " + dir.string());
    return out;
}

std::vector<Segment> load_corpus(const fs::path& dir) {
    std::vector<Segment> out;
    for (const auto& d : segment_dirs(dir, "meta.json")) out.push_back(load_segment(d));
    return out;
}

std::vector<Segment> augment_segment(const Segment& s, const AugmentSpec& spec) {
    auto copies = offset_angle_augment(s.pullback, s.masks, spec);
    std::vector<Segment> out;
    for (int k = 0; k < static_cast<int>(copies.size()); ++k) {
        Segment c;
        c.pullback = std::move(copies[k].pullback);
        c.pullback.segment_id = s.id();
        c.masks = std::move(copies[k].masks);
        if (!s.confounders.empty())
            c.confounders =
                recut_pullback(s.pullback, s.confounders, static_cast<long long>(k + 1) * spec.increment_alines).masks;
        out.push_back(std::move(c));
    }
    return out;
}

PolarGeometry PreparedSegment::geometry(int frame) const {
    return {meta.alines_per_frame, meta.r_pixel_mm(), frames.at(frame).transform.shift_record};
}

PreparedSegment prepare_segment(const Segment& s, const PreprocessConfig& cfg) {
    cfg.validate();
    PreparedSegment out;
    out.id = s.id();
    out.meta = s.pullback.meta;
    const int n = s.pullback.frame_count();
    out.frames.resize(n);
    out.masks.resize(n);
    if (!s.confounders.empty()) out.confounders.resize(n);
    parallel_for(n, [&](int f) {
        out.frames[f] = preprocess_frame(s.pullback.frames[f], s.pullback.meta, cfg);
        const auto& t = out.frames[f].transform;
        if (!s.masks.empty()) out.masks[f] = transform_mask(s.masks[f], t);
        if (!s.confounders.empty()) out.confounders[f] = transform_mask(s.confounders[f], t);
    });
    return out;
}

namespace {


json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("cannot parse " + path.string() + ": " + e.what());
    }
}

}  // namespace

std::string indexed_file(const char* stem, std::size_t i, const char* ext) {
    char digits[24];
    std::snprintf(digits, sizeof digits, "%05zu", i);
    return std::string(stem) + "_" + digits + ext;
}

void save_prepared(const PreparedSegment& s, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    json j;
    j["segment_id"] = s.id;
    j["meta"] = to_json(s.meta);
    j["frames"] = s.frames.size();
    j["lumen"] = json::array();
    for (const auto& f : s.frames) j["lumen"].push_back(f.lumen.radius_px);
    j["has_confounders"] = !s.confounders.empty();
    {
        std::ofstream out(dir / "prepared.json");
        out << j.dump() << "\n";
        if (!out) throw IoError("write failed: " + (dir / "prepared.json").string());
    }
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
        const auto tpath = dir / indexed_file("transform", f, ".json");
        std::ofstream t(tpath);
        t << to_json(s.frames[f].transform).dump() << "\n";
        if (!t) throw IoError("write failed: " + tpath.string());
        write_pgm16(dir / indexed_file("pre", f), s.frames[f].pixels);
        write_pgm8(dir / indexed_file("mask", f), s.masks[f]);
        if (!s.confounders.empty()) write_pgm8(dir / indexed_file("conf", f), s.confounders[f]);
    }
}

PreparedSegment load_prepared(const fs::path& dir) {
    auto path = dir / "prepared.json";
    auto j = read_json_file(path);
    PreparedSegment s;
    try {
        s.id = j.at("segment_id").get<std::string>();
        s.meta = meta_from_json(j.at("meta"), path);
        const auto n = j.at("frames").get<std::size_t>();
        const auto& lu = j.at("lumen");
        if (lu.size() != n) throw FormatError(path.string() + ": lumen count differs from the frame count");
        const bool conf = j.at("has_confounders").get<bool>();
        for (std::size_t f = 0; f < n; ++f) {
            PreprocessedFrame pf;
            const auto tpath = dir / indexed_file("transform", f, ".json");
            try {
                pf.transform = transform_from_json(read_json_file(tpath));
            } catch (const json::exception& e) {
                throw FormatError(tpath.string() + ": " + e.what());
            }
            pf.lumen.radius_px = lu[f].get<std::vector<int>>();
            pf.pixels = read_pgm16(dir / indexed_file("pre", f));
            if (pf.pixels.rows() != pf.transform.alines() || pf.pixels.cols() != pf.transform.roi_depth_px)
                throw CorruptInputError(dir.string() + ": frame " + std::to_string(f) + " does not match its transform");
            pf.excluded = Mask(pf.pixels.rows(), pf.pixels.cols(), 0);
            for (int a = 0; a < pf.pixels.rows(); ++a)
                if (pf.transform.excluded(a))
                    for (auto& v : pf.excluded.row(a)) v = 1;
            Mask m = read_pgm8(dir / indexed_file("mask", f));
            if (!m.same_shape(pf.pixels)) throw CorruptInputError(dir.string() + ": mask shape mismatch");
            s.masks.push_back(std::move(m));
            if (conf) s.confounders.push_back(read_pgm8(dir / indexed_file("conf", f)));
            s.frames.push_back(std::move(pf));
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return s;
}

std::vector<PreparedSegment> load_prepared_set(const fs::path& dir) {
    std::vector<PreparedSegment> out;
    for (const auto& d : segment_dirs(dir, "prepared.json")) out.push_back(load_prepared(d));
    return out;
}

std::vector<SegSample> seg_samples(std::span<const PreparedSegment> segs) {
    std::vector<SegSample> out;
    for (const auto& s : segs)
        for (std::size_t f = 0; f < s.frames.size(); ++f)
            out.push_back({&s.frames[f].pixels, &s.masks[f], &s.frames[f].excluded});
    return out;
}

SegTrainResult train_seg_stage(SegModel& model, std::span<const PreparedSegment> train,
                               std::span<const PreparedSegment> val, const PipelineConfig& cfg, std::uint64_t seed,
                               const Logger& log) {
    auto tr = seg_samples(train);
    auto va = seg_samples(val);
    SegTrainOptions opt;
    opt.sched = cfg.seg_sched;
    opt.batch_size = cfg.seg_batch;
    opt.seed = seed;
    opt.on_epoch = [&](const EpochRecord& r) {
        json j{{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}};
        j["val_dice"] = r.val_dice ? json(*r.val_dice) : json(nullptr);
        log.event("seg_epoch", j);
    };
    return train_segmentation(model, tr, va, opt);
}

std::vector<Mask> segment_frames(SegModel& model, const PreparedSegment& s, int batch_size) {
    std::vector<Image> imgs;
    std::vector<Mask> excl;
    for (const auto& f : s.frames) {
        imgs.push_back(f.pixels);
        excl.push_back(f.excluded);
    }
    auto preds = predict_masks(model, imgs, excl, batch_size);
    std::vector<Mask> out;
    for (auto& p : preds) out.push_back(std::move(p.mask));
    return out;
}

std::vector<LabeledPatch> classifier_dataset(const PreparedSegment& s, std::span<const Mask> predicted,
                                             const ClassifierConfig& cfg, int min_blob_px) {
    std::vector<LabeledPatch> out;
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
        const auto& img = s.frames[f].pixels;
        const auto geom = s.geometry(static_cast<int>(f));
        if (f < predicted.size())
            for (const auto& c : extract_candidates(predicted[f], geom, min_blob_px))
                out.push_back({make_patch(img, c, cfg), overlap_label(c, s.masks[f])});
        // Truth pixels under the guidewire carry no signal.
        const auto& band = s.frames[f].transform.shadow;
        for (const auto& c : extract_candidates(without_band(s.masks[f], band), geom, min_blob_px))
            out.push_back({make_patch(img, c, cfg), 1});
        if (!s.confounders.empty()) {
            Mask conf = s.confounders[f];
            for (auto& v : conf.data()) v = v ? 1 : 0;
            conf = without_band(conf, band);
            for (const auto& c : extract_candidates(conf, geom, min_blob_px))
                out.push_back({make_patch(img, c, cfg), 0});
        }
    }
    return out;
}

InferredSegment infer_segment(SegModel& seg, CandidateClassifier& clf, const PreparedSegment& s, int min_blob_px) {
    auto pred = segment_frames(seg, s);
    const int n = static_cast<int>(s.frames.size());
    InferredSegment out;
    out.candidates.resize(n);
    out.verdicts.resize(n);
    out.raw_before.resize(n);
    out.raw_after.resize(n);
    for (int f = 0; f < n; ++f) {
        out.candidates[f] = extract_candidates(pred[f], s.geometry(f), min_blob_px);
        std::vector<Image> patches;
        for (const auto& c : out.candidates[f]) patches.push_back(make_patch(s.frames[f].pixels, c, clf.config()));
        out.verdicts[f] = classify_candidates(clf, patches);
        Mask refined = refine_mask(pred[f], out.candidates[f], out.verdicts[f]);
        out.raw_before[f] = restore_mask(pred[f], s.frames[f].transform);
        out.raw_after[f] = restore_mask(refined, s.frames[f].transform);
    }
    return out;
}

double mask_area_mm2(const Mask& raw, const PullbackMeta& meta) {
    std::vector<std::pair<int, int>> px;
    for (int a = 0; a < raw.rows(); ++a)
        for (int r = 0; r < raw.cols(); ++r)
            if (raw(a, r)) px.emplace_back(a, r);
    return polar_area_mm2(px, {meta.alines_per_frame, meta.r_pixel_mm(), {}});
}

SegmentEvaluation evaluate_segment(const Segment& s, std::span<const Mask> before, std::span<const Mask> after) {
    const auto n = s.masks.size();
    if (before.size() != n || after.size() != n) throw ContractError("evaluate_segment: frame count mismatch");
    SegmentEvaluation ev;
    for (std::size_t f = 0; f < n; ++f) {
        std::optional<AngularInterval> band;
        if (!s.shadow.empty()) band = s.shadow[f];
        const Mask excl = band_mask(s.masks[f].rows(), s.masks[f].cols(), band);
        ev.before += confusion_counts(before[f], s.masks[f], &excl);
        ev.after += confusion_counts(after[f], s.masks[f], &excl);
        Mask p = without_band(after[f], band), t = without_band(s.masks[f], band);
        ev.pred_area_mm2.push_back(mask_area_mm2(p, s.pullback.meta));
        ev.truth_area_mm2.push_back(mask_area_mm2(t, s.pullback.meta));
        ev.pred_present.push_back(ev.pred_area_mm2.back() > 0.0);
        ev.truth_present.push_back(ev.truth_area_mm2.back() > 0.0);
    }
    return ev;
}

namespace {

std::vector<const Segment*> pick(std::span<const Segment> corpus, const std::vector<std::string>& ids) {
    std::vector<const Segment*> out;
    for (const auto& id : ids)
        for (const auto& s : corpus)
            if (s.id() == id) out.push_back(&s);
    return out;
}

ConfusionCounts classifier_counts(CandidateClassifier& clf, std::span<const LabeledPatch> set) {
    std::vector<Image> patches;
    for (const auto& p : set) patches.push_back(p.patch);
    auto v = classify_candidates(clf, patches);
    ConfusionCounts c;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const bool pred = v[i].label == 1, truth = set[i].label == 1;
        c.tp += pred && truth;
        c.tn += !pred && !truth;
        c.fp += pred && !truth;
        c.fn += !pred && truth;
    }
    return c;
}

std::vector<std::vector<Candidate>> raw_candidates(std::span<const Mask> masks, const PullbackMeta& meta, int min_blob) {
    std::vector<std::vector<Candidate>> out;
    PolarGeometry geom{meta.alines_per_frame, meta.r_pixel_mm(), {}};
    for (const auto& m : masks) out.push_back(extract_candidates(m, geom, min_blob));
    return out;
}

}  // namespace

PipelineResult run_pipeline(std::span<const Segment> corpus, const PipelineConfig& cfg,
                            const std::optional<fs::path>& out_dir, const Logger& log) {
    std::vector<SegmentInfo> infos;
    std::map<std::string, int> seen;
    for (const auto& s : corpus) {
        if (seen[s.id()]++) throw ConfigError("duplicate segment id " + s.id());
        infos.push_back({s.id(), s.pullback.frame_count()});
    }
    auto plan = group_kfold(infos, cfg.folds, cfg.train_frac, cfg.val_frac, cfg.seed);
    if (cfg.augment) cfg.augment_spec.validate(corpus.front().pullback.meta.alines_per_frame);

    log.event("prepare", {{"segments", corpus.size()}});
    std::map<std::string, PreparedSegment> prepared;
    for (const auto& s : corpus) prepared.emplace(s.id(), prepare_segment(s, cfg.preprocess));

    PipelineResult result;
    for (int k = 0; k < static_cast<int>(plan.size()); ++k) {
        const auto& split = plan[k];
        FoldResult fr;
        fr.fold = k + 1;
        fr.split = split;
        log.event("fold_start", {{"fold", fr.fold}, {"test", split.test}, {"val", split.val}, {"train", split.train}});

        std::vector<PreparedSegment> train, val;
        for (const auto* s : pick(corpus, split.train)) {
            train.push_back(prepared.at(s->id()));
            if (cfg.augment)
                for (const auto& c : augment_segment(*s, cfg.augment_spec))
                    train.push_back(prepare_segment(c, cfg.preprocess));
        }
        for (const auto& id : split.val) val.push_back(prepared.at(id));

        SegModel seg(cfg.seg, derive_seed(cfg.seed, 0x5e600000ULL + k));
        auto seg_res = train_seg_stage(seg, train, val, cfg, derive_seed(cfg.seed, 0x5e610000ULL + k), log);
        fr.seg_epochs = static_cast<int>(seg_res.history.size());
        fr.seg_best_epoch = seg_res.best_epoch;

        // Classifier data from the un-augmented training and validation segments.
        std::vector<LabeledPatch> clf_train, clf_val;
        for (const auto& id : split.train) {
            const auto& s = prepared.at(id);
            auto part = classifier_dataset(s, segment_frames(seg, s), cfg.clf, cfg.min_blob_px);
            clf_train.insert(clf_train.end(), part.begin(), part.end());
        }
        for (const auto& s : val) {
            auto part = classifier_dataset(s, segment_frames(seg, s), cfg.clf, cfg.min_blob_px);
            clf_val.insert(clf_val.end(), part.begin(), part.end());
        }
        CandidateClassifier clf(cfg.clf, derive_seed(cfg.seed, 0xc1f00000ULL + k));
        ClassifierTrainOptions copt;
        copt.sched = cfg.clf_sched;
        copt.batch_size = cfg.clf_batch;
        copt.seed = derive_seed(cfg.seed, 0xc1f10000ULL + k);
        auto clf_res = train_classifier(clf, clf_train, clf_val, copt);
        fr.clf_best_epoch = clf_res.best_epoch;
        fr.clf_train_patches = clf_res.train_patches;
        log.event("classifier_trained", {{"fold", fr.fold},
                                         {"patches", clf_res.train_patches},
                                         {"epochs", clf_res.train_loss.size()},
                                         {"best_epoch", clf_res.best_epoch}});

        std::optional<fs::path> fold_dir;
        if (out_dir) {
            fold_dir = *out_dir / ("fold_" + std::to_string(fr.fold));
            fs::create_directories(*fold_dir);
            seg.save(*fold_dir / "seg_model.ckpt");
            clf.save(*fold_dir / "clf_model.ckpt");
            write_history_csv(*fold_dir / "seg_history.csv", seg_res.history);
        }

        std::vector<CandidateRow> rows;
        std::vector<InferredSegment> inferred;
        for (const auto* s : pick(corpus, split.test)) {
            const auto& ps = prepared.at(s->id());
            auto inf = infer_segment(seg, clf, ps, cfg.min_blob_px);
            auto ev = evaluate_segment(*s, inf.raw_before, inf.raw_after);
            fr.eval.before += ev.before;
            fr.eval.after += ev.after;
            for (std::size_t f = 0; f < ev.pred_area_mm2.size(); ++f) {
                fr.eval.pred_area_mm2.push_back(ev.pred_area_mm2[f]);
                fr.eval.truth_area_mm2.push_back(ev.truth_area_mm2[f]);
                fr.eval.pred_present.push_back(ev.pred_present[f]);
                fr.eval.truth_present.push_back(ev.truth_present[f]);
            }
            fr.classifier += classifier_counts(
                clf, classifier_dataset(ps, segment_frames(seg, ps), cfg.clf, cfg.min_blob_px));

            const auto& meta = s->pullback.meta;
            auto kept = filter_min_frames(
                link_tracks(raw_candidates(inf.raw_after, meta, cfg.min_blob_px), meta, cfg.tracks),
                cfg.tracks.min_frames);
            auto truth_kept = filter_min_frames(
                link_tracks(raw_candidates(s->masks, meta, cfg.min_blob_px), meta, cfg.tracks), cfg.tracks.min_frames);
            fr.tracks += static_cast<int>(kept.size());
            fr.truth_tracks += static_cast<int>(truth_kept.size());
            for (const auto& t : kept) fr.longest_track_mm = std::max(fr.longest_track_mm, t.length_mm);
            if (fold_dir) {
                std::vector<LumenContour> lumen;
                for (const auto& f : ps.frames) lumen.push_back(f.lumen);
                export_ply(lumen, kept, meta, *fold_dir / (s->id() + "_scene.ply"), 4);
                write_tracks_csv(*fold_dir / (s->id() + "_tracks.csv"), kept);
            }
            inferred.push_back(std::move(inf));
        }
        if (fold_dir) {
            for (const auto& inf : inferred)
                for (std::size_t f = 0; f < inf.candidates.size(); ++f)
                    for (std::size_t c = 0; c < inf.candidates[f].size(); ++c)
                        rows.push_back({static_cast<int>(f), &inf.candidates[f][c], inf.verdicts[f][c]});
            write_candidates_csv(*fold_dir / "candidates.csv", rows);
            std::ofstream(*fold_dir / "metrics.json") << fold_json(fr).dump(2) << "\n";
            std::ofstream(*fold_dir / "record.json") << fold_record(fr).dump() << "\n";
        }
        auto m = pixel_metrics(fr.eval.after);
        log.event("fold_done", {{"fold", fr.fold},
                                {"dice", m.dice ? json(*m.dice) : json(nullptr)},
                                {"dice_before_refine", to_json(pixel_metrics(fr.eval.before))["dice"]},
                                {"classifier_accuracy", to_json(pixel_metrics(fr.classifier))["accuracy"]}});
        result.folds.push_back(std::move(fr));
    }

    result.report = make_report(result.folds);
    if (out_dir) {
        std::ofstream(*out_dir / "report.json") << result.report.dump(2) << "\n";
        write_folds_csv(*out_dir / "folds.csv", result.folds);
    }
    return result;
}

json fold_json(const FoldResult& f) {
    auto after = to_json(pixel_metrics(f.eval.after));
    json j = after;
    j["fold"] = f.fold;
    j["test"] = f.split.test;
    j["val"] = f.split.val;
    j["train"] = f.split.train;
    j["before_refine"] = to_json(pixel_metrics(f.eval.before));
    auto c = to_json(pixel_metrics(f.classifier));
    j["classifier"] = {{"accuracy", c["accuracy"]},
                       {"sensitivity", c["sensitivity"]},
                       {"specificity", c["specificity"]},
                       {"candidates", f.classifier.total()}};
    j["seg_epochs"] = f.seg_epochs;
    j["seg_best_epoch"] = f.seg_best_epoch;
    j["clf_best_epoch"] = f.clf_best_epoch;
    j["clf_train_patches"] = f.clf_train_patches;
    j["tracks"] = f.tracks;
    j["truth_tracks"] = f.truth_tracks;
    j["longest_track_mm"] = f.longest_track_mm;
    return j;
}

namespace {

json counts_json(const ConfusionCounts& c) { return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}}; }

ConfusionCounts counts_from(const json& j) {
    return {j.at("tp").get<long long>(), j.at("tn").get<long long>(), j.at("fp").get<long long>(),
            j.at("fn").get<long long>()};
}

}  // namespace

json fold_record(const FoldResult& f) {
    json j;
    j["fold"] = f.fold;
    j["split"] = {{"test", f.split.test}, {"val", f.split.val}, {"train", f.split.train}};
    j["counts"] = {{"before_refine", counts_json(f.eval.before)},
                   {"after_refine", counts_json(f.eval.after)},
                   {"classifier", counts_json(f.classifier)}};
    j["frames"] = {{"pred_area_mm2", f.eval.pred_area_mm2},
                   {"truth_area_mm2", f.eval.truth_area_mm2},
                   {"pred_present", f.eval.pred_present},
                   {"truth_present", f.eval.truth_present}};
    j["training"] = {{"seg_epochs", f.seg_epochs},
                     {"seg_best_epoch", f.seg_best_epoch},
                     {"clf_best_epoch", f.clf_best_epoch},
                     {"clf_train_patches", f.clf_train_patches}};
    j["tracks"] = {{"count", f.tracks}, {"truth_count", f.truth_tracks}, {"longest_mm", f.longest_track_mm}};
    return j;
}

FoldResult fold_from_record(const json& j) {
    FoldResult f;
    try {
        f.fold = j.at("fold").get<int>();
        const auto& sp = j.at("split");
        f.split.test = sp.at("test").get<std::vector<std::string>>();
        f.split.val = sp.at("val").get<std::vector<std::string>>();
        f.split.train = sp.at("train").get<std::vector<std::string>>();
        const auto& c = j.at("counts");
        f.eval.before = counts_from(c.at("before_refine"));
        f.eval.after = counts_from(c.at("after_refine"));
        f.classifier = counts_from(c.at("classifier"));
        const auto& fr = j.at("frames");
        f.eval.pred_area_mm2 = fr.at("pred_area_mm2").get<std::vector<double>>();
        f.eval.truth_area_mm2 = fr.at("truth_area_mm2").get<std::vector<double>>();
        f.eval.pred_present = fr.at("pred_present").get<std::vector<bool>>();
        f.eval.truth_present = fr.at("truth_present").get<std::vector<bool>>();
        const auto n = f.eval.pred_area_mm2.size();
        if (f.eval.truth_area_mm2.size() != n || f.eval.pred_present.size() != n || f.eval.truth_present.size() != n)
            throw FormatError("fold record: per-frame series differ in length");
        const auto& tr = j.at("training");
        f.seg_epochs = tr.at("seg_epochs").get<int>();
        f.seg_best_epoch = tr.at("seg_best_epoch").get<int>();
        f.clf_best_epoch = tr.at("clf_best_epoch").get<int>();
        f.clf_train_patches = tr.at("clf_train_patches").get<std::size_t>();
        const auto& tk = j.at("tracks");
        f.tracks = tk.at("count").get<int>();
        f.truth_tracks = tk.at("truth_count").get<int>();
        f.longest_track_mm = tk.at("longest_mm").get<double>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed fold record: ") + e.what());
    }
    return f;
}

json make_report(std::span<const FoldResult> folds) {
    json report;
    report["folds"] = json::array();
    std::map<std::string, std::vector<std::optional<double>>> per_metric;
    std::vector<double> dice_before, dice_after;
    std::vector<bool> pred_present, truth_present;
    std::vector<double> pred_area, truth_area;
    for (const auto& f : folds) {
        auto fj = fold_json(f);
        report["folds"].push_back(fj);
        auto before = pixel_metrics(f.eval.before), after = pixel_metrics(f.eval.after);
        auto clf = pixel_metrics(f.classifier);
        per_metric["dice"].push_back(after.dice);
        per_metric["sensitivity"].push_back(after.sensitivity);
        per_metric["specificity"].push_back(after.specificity);
        per_metric["accuracy"].push_back(after.accuracy);
        per_metric["dice_before_refine"].push_back(before.dice);
        per_metric["specificity_before_refine"].push_back(before.specificity);
        per_metric["classifier_accuracy"].push_back(clf.accuracy);
        per_metric["classifier_sensitivity"].push_back(clf.sensitivity);
        per_metric["classifier_specificity"].push_back(clf.specificity);
        if (before.dice && after.dice) {
            dice_before.push_back(*before.dice);
            dice_after.push_back(*after.dice);
        }
        pred_present.insert(pred_present.end(), f.eval.pred_present.begin(), f.eval.pred_present.end());
        truth_present.insert(truth_present.end(), f.eval.truth_present.begin(), f.eval.truth_present.end());
        pred_area.insert(pred_area.end(), f.eval.pred_area_mm2.begin(), f.eval.pred_area_mm2.end());
        truth_area.insert(truth_area.end(), f.eval.truth_area_mm2.begin(), f.eval.truth_area_mm2.end());
    }
    json summary = json::object();
    for (const auto& [k, v] : per_metric) summary[k] = to_json(mean_sd(v));
    report["summary"] = summary;
    report["frame_agreement"] = to_json(frame_presence_agreement(pred_present, truth_present));

    json stats;
    stats["quantity"] = "microvessel area per frame (mm2), automated vs truth";
    try {
        auto fit = linear_regression(truth_area, pred_area);
        stats["r_squared"] = fit.r_squared;
        stats["slope"] = fit.slope;
        stats["intercept"] = fit.intercept;
    } catch (const ContractError&) {
        stats["r_squared"] = nullptr;
    }
    auto t_json = [](const TTest& t) {
        auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
        return json{{"t", num(t.t)}, {"p", t.p}, {"df", t.df}, {"degenerate_variance", t.degenerate_variance}};
    };
    if (pred_area.size() >= 2) {
        auto ba = bland_altman(pred_area, truth_area);
        stats["bland_altman"] = {
            {"mean_bias", ba.mean_bias}, {"sd", ba.sd}, {"loa_low", ba.loa_low}, {"loa_high", ba.loa_high}};
        stats["t_test"] = t_json(paired_t_test(pred_area, truth_area));
    } else {
        stats["bland_altman"] = nullptr;
        stats["t_test"] = nullptr;
    }
    stats["refine_dice_t_test"] = dice_after.size() >= 2 ? t_json(paired_t_test(dice_after, dice_before)) : json(nullptr);
    report["stats"] = stats;
    return report;
}

void write_folds_csv(const fs::path& path, std::span<const FoldResult> folds) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "fold,dice,sensitivity,specificity,accuracy,dice_before_refine,classifier_accuracy\n";
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", *v);
        return std::string(buf);
    };
    for (const auto& f : folds) {
        auto a = pixel_metrics(f.eval.after), b = pixel_metrics(f.eval.before), c = pixel_metrics(f.classifier);
        out << f.fold << ',' << cell(a.dice) << ',' << cell(a.sensitivity) << ',' << cell(a.specificity) << ','
            << cell(a.accuracy) << ',' << cell(b.dice) << ',' << cell(c.accuracy) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ivoct
