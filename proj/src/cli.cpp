#include "ivoct/cli.hpp"

#include <omp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "ivoct/error.hpp"

namespace ivoct::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

PipelineConfig desk_preset() {
    PipelineConfig c;
    auto& p = c.phantom;
    p.n_frames = 50;
    p.alines_per_frame = 128;
    p.samples_per_aline = 300;
    p.lumen_radius_px = 60;
    p.lumen_radius_amp_px = 6;
    p.lumen_lobes = 2;
    p.vessel_count = 3;
    p.vessel_min_frames = 4;
    p.vessel_max_frames = 12;
    p.guidewire_width_alines = 10;
    p.confounder_count = 10;
    p.roi_depth_px = 80;
    c.segments = 5;
    c.augment_spec = {2, 43};
    c.preprocess.roi_depth_px = 96;
    c.preprocess.gw_window = 10;
    c.seg.input_rows = 128;
    c.seg.input_cols = 96;
    c.seg.encoder = {{8, 2}, {16, 2}, {32, 2}};
    c.seg.aspp_channels = 16;
    c.seg_sched.max_epochs = 20;
    c.clf_sched.max_epochs = 30;
    return c;
}

PipelineConfig full_preset() {
    PipelineConfig c;
    c.phantom.n_frames = 100;
    c.augment_spec = {9, 55};
    c.preprocess.roi_depth_px = 300;
    return c;
}

PipelineConfig preset_config(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "full") return full_preset();
    throw ConfigError("unknown preset '" + name + "' (expected desk or full)");
}

void put_block(json& flat, const std::string& prefix, const json& block) {
    for (const auto& [k, v] : block.items()) flat[prefix + "." + k] = v;
}

json flatten(const PipelineConfig& c) {
    json flat = json::object();
    flat["seed"] = c.seed;
    flat["corpus.segments"] = c.segments;
    json ph = to_json(c.phantom);
    ph.erase("segment_id");
    put_block(flat, "phantom", ph);
    flat["augment.enabled"] = c.augment;
    flat["augment.n_shifts"] = c.augment_spec.n_shifts;
    flat["augment.increment_alines"] = c.augment_spec.increment_alines;
    put_block(flat, "preprocess", to_json(c.preprocess));
    put_block(flat, "seg", to_json(c.seg));
    put_block(flat, "seg_train", nn::to_json(c.seg_sched));
    flat["seg_train.batch_size"] = c.seg_batch;
    put_block(flat, "clf", to_json(c.clf));
    put_block(flat, "clf_train", nn::to_json(c.clf_sched));
    flat["clf_train.batch_size"] = c.clf_batch;
    flat["candidates.min_blob_px"] = c.min_blob_px;
    flat["tracks.max_dr_px"] = c.tracks.max_dr_px;
    flat["tracks.max_dtheta_alines"] = c.tracks.max_dtheta_alines;
    flat["tracks.min_frames"] = c.tracks.min_frames;
    flat["folds.k"] = c.folds;
    flat["folds.train_frac"] = c.train_frac;
    flat["folds.val_frac"] = c.val_frac;
    return flat;
}

bool compatible(const json& def, const json& v) {
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) return v.is_array();
    return v.type() == def.type();
}

}  // namespace

RunConfig::RunConfig(const std::string& preset) : values_(flatten(preset_config(preset))) {}

std::vector<std::string> RunConfig::presets() { return {"desk", "full"}; }

void RunConfig::set(const std::string& key, const json& value, const std::string& source) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(source + ": unknown configuration key '" + key + "'");
    if (!compatible(*it, value))
        throw ConfigError(source + ": key '" + key + "' expects a value like " + it->dump() + ", got " + value.dump());
    if (key == "seed" && value.is_number_integer() && value.get<long long>() < 0 && !value.is_number_unsigned())
        throw ConfigError(source + ": seed must be non-negative");
    *it = value;
}

void RunConfig::merge(const json& flat, const std::string& source) {
    if (!flat.is_object()) throw ConfigError(source + ": configuration must be a flat JSON object");
    for (const auto& [k, v] : flat.items()) set(k, v, source);
}

void RunConfig::set(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
    std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    set(key, value, "--set");
}

std::uint64_t RunConfig::seed() const { return values_.at("seed").get<std::uint64_t>(); }

PipelineConfig RunConfig::pipeline() const {
    std::map<std::string, json> blocks;
    for (const auto& [k, v] : values_.items()) {
        auto dot = k.find('.');
        if (dot == std::string::npos) continue;
        blocks[k.substr(0, dot)][k.substr(dot + 1)] = v;
    }
    PipelineConfig c;
    try {
        c.seed = seed();
        c.segments = blocks["corpus"].at("segments").get<int>();
        c.phantom = phantom_params_from_json(blocks["phantom"]);
        c.phantom.validate();
        const auto& aug = blocks["augment"];
        c.augment = aug.at("enabled").get<bool>();
        c.augment_spec = {aug.at("n_shifts").get<int>(), aug.at("increment_alines").get<int>()};
        c.preprocess = preprocess_config_from_json(blocks["preprocess"]);
        c.seg = seg_config_from_json(blocks["seg"]);
        json st = blocks["seg_train"];
        c.seg_batch = st.at("batch_size").get<int>();
        st.erase("batch_size");
        c.seg_sched = nn::schedule_from_json(st);
        c.clf = classifier_config_from_json(blocks["clf"]);
        json ct = blocks["clf_train"];
        c.clf_batch = ct.at("batch_size").get<int>();
        ct.erase("batch_size");
        c.clf_sched = nn::schedule_from_json(ct);
        c.min_blob_px = blocks["candidates"].at("min_blob_px").get<int>();
        const auto& tr = blocks["tracks"];
        c.tracks.max_dr_px = tr.at("max_dr_px").get<double>();
        c.tracks.max_dtheta_alines = tr.at("max_dtheta_alines").get<double>();
        c.tracks.min_frames = tr.at("min_frames").get<int>();
        const auto& fo = blocks["folds"];
        c.folds = fo.at("k").get<int>();
        c.train_frac = fo.at("train_frac").get<double>();
        c.val_frac = fo.at("val_frac").get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("configuration: ") + e.what());
    }
    if (c.segments < 1) throw ConfigError("corpus.segments must be >= 1");
    if (c.seg_batch < 1 || c.clf_batch < 1) throw ConfigError("batch sizes must be >= 1");
    if (c.min_blob_px < 1) throw ConfigError("candidates.min_blob_px must be >= 1");
    if (c.folds < 2) throw ConfigError("folds.k must be >= 2");
    if (!(c.train_frac > 0.0) || !(c.val_frac >= 0.0)) throw ConfigError("folds fractions must be positive");
    c.tracks.validate();
    if (c.augment) c.augment_spec.validate(c.phantom.alines_per_frame);
    return c;
}

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 1;
    if (dynamic_cast<const TrainingError*>(&e)) return 3;
    return 2;
}

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const TrainingError*>(&e)) return "training";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const CorruptInputError*>(&e)) return "corrupt_input";
    if (dynamic_cast<const ContractError*>(&e)) return "contract";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const DetectionError*>(&e)) return "detection";
    return "internal";
}

struct Options {
    std::string preset = "desk";
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    int threads = 0;
    bool log_json = false;
    bool error_json = false;
    bool force = false;
    bool quiet = false;

    std::string in, out, data, truth, pred, seg_model, clf_model;
    std::vector<std::string> inputs;
    std::string train_ids, val_ids, segment_ids;
    std::optional<int> frames, segments, folds, epochs;
};

struct Context {
    RunConfig cfg;
    Logger log;
    const Options& opt;
    std::string command;
};

std::vector<std::string> split_ids(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("cannot parse " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path.string());
}

bool inside(const fs::path& a, const fs::path& b) {
    auto ca = fs::weakly_canonical(a), cb = fs::weakly_canonical(b);
    auto [ia, ib] = std::mismatch(cb.begin(), cb.end(), ca.begin(), ca.end());
    return ia == cb.end();
}

// Creates the output directory. An existing non-empty directory needs --force;
// outputs may never overlap an input.
fs::path prepare_output(const Context& ctx, const std::vector<std::string>& inputs) {
    fs::path out = ctx.opt.out;
    for (const auto& in : inputs) {
        if (in.empty()) continue;
        if (inside(out, in) || inside(in, out))
            throw ConfigError("output directory " + out.string() + " overlaps input " + in);
    }
    if (fs::exists(out)) {
        if (!fs::is_directory(out)) throw ConfigError("output path exists and is not a directory: " + out.string());
        if (!fs::is_empty(out) && !ctx.opt.force)
            throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    return out;
}

void write_resolved(const Context& ctx, const fs::path& out, const json& inputs) {
    json j;
    j["command"] = ctx.command;
    j["config"] = ctx.cfg.values();
    j["inputs"] = inputs;
    write_json(out / "resolved_config.json", j);
}


std::vector<Mask> read_masks(const fs::path& dir, const char* stem, std::size_t n) {
    std::vector<Mask> out;
    for (std::size_t f = 0; f < n; ++f) {
        auto p = dir / indexed_file(stem, f);
        if (!fs::exists(p)) throw FormatError("missing " + p.string());
        out.push_back(read_pgm8(p));
    }
    return out;
}

// Prepared segments whose id is listed (each id must match at least one).
std::vector<PreparedSegment> select(const std::vector<PreparedSegment>& all, const std::vector<std::string>& ids,
                                    const std::string& what) {
    std::vector<PreparedSegment> out;
    for (const auto& id : ids) {
        bool found = false;
        for (const auto& s : all)
            if (s.id == id) {
                out.push_back(s);
                found = true;
            }
        if (!found) throw ConfigError(what + ": no prepared segment with id '" + id + "'");
    }
    return out;
}

int cmd_phantom(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {});
    auto phantoms = generate_phantoms(cfg.phantom, cfg.segments, cfg.seed);
    save_corpus(phantoms, out);
    write_resolved(ctx, out, json::object());
    ctx.log.event("phantom_written", {{"segments", phantoms.size()}, {"frames", cfg.phantom.n_frames}});
    return 0;
}

int cmd_augment(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.in});
    int copies = 0;
    for (const auto& dir : segment_dirs(ctx.opt.in, "meta.json")) {
        auto s = load_segment(dir);
        const auto name = dir.filename().string();
        save_pullback(s.pullback, out / name, s.masks);
        if (fs::exists(dir / "truth.json")) fs::copy_file(dir / "truth.json", out / name / "truth.json");
        auto aug = augment_segment(s, cfg.augment_spec);
        for (std::size_t k = 0; k < aug.size(); ++k) {
            save_pullback(aug[k].pullback, out / (name + "_aug" + std::to_string(k + 1)), aug[k].masks);
            ++copies;
        }
    }
    write_resolved(ctx, out, {{"in", ctx.opt.in}});
    ctx.log.event("augment_written", {{"copies", copies}});
    return 0;
}

int cmd_preprocess(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.in});
    for (const auto& dir : segment_dirs(ctx.opt.in, "meta.json")) {
        auto ps = prepare_segment(load_segment(dir), cfg.preprocess);
        save_prepared(ps, out / dir.filename());
        ctx.log.event("segment_prepared", {{"segment", ps.id}, {"frames", ps.frames.size()}});
    }
    write_resolved(ctx, out, {{"in", ctx.opt.in}});
    return 0;
}

std::pair<std::vector<std::string>, std::vector<std::string>> train_val_ids(const Context& ctx,
                                                                           const std::vector<PreparedSegment>& all) {
    auto val = split_ids(ctx.opt.val_ids);
    auto train = split_ids(ctx.opt.train_ids);
    if (train.empty()) {
        std::set<std::string> seen;
        for (const auto& s : all)
            if (std::find(val.begin(), val.end(), s.id) == val.end() && seen.insert(s.id).second) train.push_back(s.id);
    }
    for (const auto& id : train)
        if (std::find(val.begin(), val.end(), id) != val.end())
            throw ConfigError("segment '" + id + "' is listed for both training and validation");
    if (train.empty()) throw ConfigError("no training segments");
    return {train, val};
}

int cmd_train_seg(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.data});
    auto all = load_prepared_set(ctx.opt.data);
    auto [train_ids, val_ids] = train_val_ids(ctx, all);
    auto train = select(all, train_ids, "--train");
    auto val = select(all, val_ids, "--val");
    SegModel model(cfg.seg, derive_seed(cfg.seed, 0x5e600000ULL));
    auto res = train_seg_stage(model, train, val, cfg, derive_seed(cfg.seed, 0x5e610000ULL), ctx.log);
    model.save(out / "seg_model.ckpt");
    write_history_csv(out / "seg_history.csv", res.history);
    write_json(out / "train_seg.json", {{"train", train_ids},
                                        {"val", val_ids},
                                        {"best_epoch", res.best_epoch},
                                        {"epochs", res.history.size()},
                                        {"class_weights", res.class_weights},
                                        {"parameters", model.parameter_count()}});
    write_resolved(ctx, out, {{"data", ctx.opt.data}, {"train", train_ids}, {"val", val_ids}});
    return 0;
}

int cmd_train_clf(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.data});
    auto all = load_prepared_set(ctx.opt.data);
    auto [train_ids, val_ids] = train_val_ids(ctx, all);
    auto seg = SegModel::load(ctx.opt.seg_model);
    std::vector<LabeledPatch> tr, va;
    for (const auto& s : select(all, train_ids, "--train")) {
        auto part = classifier_dataset(s, segment_frames(seg, s), cfg.clf, cfg.min_blob_px);
        tr.insert(tr.end(), part.begin(), part.end());
    }
    for (const auto& s : select(all, val_ids, "--val")) {
        auto part = classifier_dataset(s, segment_frames(seg, s), cfg.clf, cfg.min_blob_px);
        va.insert(va.end(), part.begin(), part.end());
    }
    CandidateClassifier clf(cfg.clf, derive_seed(cfg.seed, 0xc1f00000ULL));
    ClassifierTrainOptions opt;
    opt.sched = cfg.clf_sched;
    opt.batch_size = cfg.clf_batch;
    opt.seed = derive_seed(cfg.seed, 0xc1f10000ULL);
    auto res = train_classifier(clf, tr, va, opt);
    clf.save(out / "clf_model.ckpt");
    write_json(out / "train_clf.json", {{"train", train_ids},
                                        {"val", val_ids},
                                        {"patches", tr.size()},
                                        {"train_patches_augmented", res.train_patches},
                                        {"best_epoch", res.best_epoch},
                                        {"train_loss", res.train_loss},
                                        {"val_loss", res.val_loss}});
    write_resolved(ctx, out, {{"data", ctx.opt.data}, {"seg_model", ctx.opt.seg_model}});
    return 0;
}

int cmd_infer(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.data});
    auto seg = SegModel::load(ctx.opt.seg_model);
    auto clf = CandidateClassifier::load(ctx.opt.clf_model);
    auto wanted = split_ids(ctx.opt.segment_ids);
    for (const auto& dir : segment_dirs(ctx.opt.data, "prepared.json")) {
        auto ps = load_prepared(dir);
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), ps.id) == wanted.end()) continue;
        auto inf = infer_segment(seg, clf, ps, cfg.min_blob_px);
        auto od = out / dir.filename();
        fs::create_directories(od);
        for (std::size_t f = 0; f < inf.raw_after.size(); ++f) {
            write_pgm8(od / indexed_file("pred", f), inf.raw_after[f]);
            write_pgm8(od / indexed_file("pred_before", f), inf.raw_before[f]);
        }
        std::vector<CandidateRow> rows;
        for (std::size_t f = 0; f < inf.candidates.size(); ++f)
            for (std::size_t c = 0; c < inf.candidates[f].size(); ++c)
                rows.push_back({static_cast<int>(f), &inf.candidates[f][c], inf.verdicts[f][c]});
        write_candidates_csv(od / "candidates.csv", rows);
        write_json(od / "prediction.json",
                   {{"segment_id", ps.id}, {"frames", inf.raw_after.size()}, {"meta", to_json(ps.meta)}});
        ctx.log.event("segment_inferred", {{"segment", ps.id}, {"candidates", rows.size()}});
    }
    write_resolved(ctx, out,
                   {{"data", ctx.opt.data}, {"seg_model", ctx.opt.seg_model}, {"clf_model", ctx.opt.clf_model}});
    return 0;
}

int cmd_evaluate(Context& ctx) {
    auto out = prepare_output(ctx, {ctx.opt.pred, ctx.opt.truth});
    FoldResult fr;
    fr.fold = 1;
    json per_segment = json::object();
    for (const auto& dir : segment_dirs(ctx.opt.pred, "prediction.json")) {
        auto info = read_json(dir / "prediction.json");
        auto truth_dir = fs::path(ctx.opt.truth) / dir.filename();
        if (!fs::exists(truth_dir / "meta.json"))
            throw FormatError("no truth segment for prediction " + dir.filename().string());
        auto seg = load_segment(truth_dir);
        const auto n = seg.masks.size();
        if (info.at("frames").get<std::size_t>() != n)
            throw CorruptInputError("prediction and truth frame counts differ for " + seg.id());
        auto after = read_masks(dir, "pred", n), before = read_masks(dir, "pred_before", n);
        for (std::size_t f = 0; f < n; ++f)
            if (!after[f].same_shape(seg.masks[f]) || !before[f].same_shape(seg.masks[f]))
                throw CorruptInputError("prediction shape differs from truth in " + dir.string());
        auto ev = evaluate_segment(seg, before, after);
        per_segment[dir.filename().string()] = {{"after_refine", to_json(pixel_metrics(ev.after))},
                                                {"before_refine", to_json(pixel_metrics(ev.before))}};
        fr.split.test.push_back(seg.id());
        fr.eval.before += ev.before;
        fr.eval.after += ev.after;
        fr.eval.pred_area_mm2.insert(fr.eval.pred_area_mm2.end(), ev.pred_area_mm2.begin(), ev.pred_area_mm2.end());
        fr.eval.truth_area_mm2.insert(fr.eval.truth_area_mm2.end(), ev.truth_area_mm2.begin(),
                                      ev.truth_area_mm2.end());
        fr.eval.pred_present.insert(fr.eval.pred_present.end(), ev.pred_present.begin(), ev.pred_present.end());
        fr.eval.truth_present.insert(fr.eval.truth_present.end(), ev.truth_present.begin(), ev.truth_present.end());
    }
    auto report = make_report(std::span<const FoldResult>(&fr, 1));
    json metrics = fold_json(fr);
    metrics["segments"] = per_segment;
    metrics["frame_agreement"] = report["frame_agreement"];
    metrics["stats"] = report["stats"];
    write_json(out / "metrics.json", metrics);
    std::ofstream(out / "record.json") << fold_record(fr).dump() << "\n";
    write_resolved(ctx, out, {{"pred", ctx.opt.pred}, {"truth", ctx.opt.truth}});
    return 0;
}

int cmd_reconstruct(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.pred, ctx.opt.data});
    json summary = json::object();
    for (const auto& dir : segment_dirs(ctx.opt.pred, "prediction.json")) {
        auto ps = load_prepared(fs::path(ctx.opt.data) / dir.filename());
        auto masks = read_masks(dir, "pred", ps.frames.size());
        std::vector<std::vector<Candidate>> cands;
        PolarGeometry geom{ps.meta.alines_per_frame, ps.meta.r_pixel_mm(), {}};
        for (const auto& m : masks) cands.push_back(extract_candidates(m, geom, cfg.min_blob_px));
        auto kept = filter_min_frames(link_tracks(cands, ps.meta, cfg.tracks), cfg.tracks.min_frames);
        auto filtered = apply_track_filter(masks, cands, kept);
        const auto name = dir.filename().string();
        auto od = out / name;
        fs::create_directories(od);
        for (std::size_t f = 0; f < filtered.size(); ++f) write_pgm8(od / indexed_file("mask", f), filtered[f]);
        std::vector<LumenContour> lumen;
        for (const auto& f : ps.frames) lumen.push_back(f.lumen);
        export_ply(lumen, kept, ps.meta, od / "scene.ply", 4);
        write_tracks_csv(od / "tracks.csv", kept);
        double longest = 0.0;
        for (const auto& t : kept) longest = std::max(longest, t.length_mm);
        summary[name] = {{"tracks", kept.size()}, {"longest_track_mm", longest}};
    }
    write_json(out / "tracks.json", summary);
    write_resolved(ctx, out, {{"pred", ctx.opt.pred}, {"data", ctx.opt.data}});
    return 0;
}

std::vector<fs::path> find_records(const std::string& input) {
    fs::path p(input);
    if (fs::is_regular_file(p)) return {p};
    if (!fs::is_directory(p)) throw IoError("no such file or directory: " + input);
    if (fs::exists(p / "record.json")) return {p / "record.json"};
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(p))
        if (e.is_directory() && fs::exists(e.path() / "record.json")) out.push_back(e.path() / "record.json");
    std::sort(out.begin(), out.end());
    if (out.empty()) throw FormatError("no record.json under " + input);
    return out;
}

int cmd_report(Context& ctx) {
    auto out = prepare_output(ctx, ctx.opt.inputs);
    std::vector<FoldResult> folds;
    for (const auto& in : ctx.opt.inputs)
        for (const auto& path : find_records(in)) {
            folds.push_back(fold_from_record(read_json(path)));
            folds.back().fold = static_cast<int>(folds.size());
        }
    auto report = make_report(folds);
    write_json(out / "report.json", report);
    write_folds_csv(out / "folds.csv", folds);
    write_resolved(ctx, out, {{"inputs", ctx.opt.inputs}});
    const auto& d = report["summary"]["dice"];
    if (!d["mean"].is_null()) std::printf("dice %.4f over %zu fold(s)\n", d["mean"].get<double>(), folds.size());
    return 0;
}

int cmd_pipeline(Context& ctx) {
    auto cfg = ctx.cfg.pipeline();
    auto out = prepare_output(ctx, {ctx.opt.data});
    std::vector<Segment> corpus;
    if (!ctx.opt.data.empty()) {
        corpus = load_corpus(ctx.opt.data);
    } else {
        ctx.log.event("generate_corpus", {{"segments", cfg.segments}, {"frames", cfg.phantom.n_frames}});
        corpus = generate_corpus(cfg.phantom, cfg.segments, cfg.seed);
    }
    write_resolved(ctx, out, {{"data", ctx.opt.data}});
    auto res = run_pipeline(corpus, cfg, out, ctx.log);
    const auto& s = res.report["summary"];
    auto show = [&](const char* key) {
        const auto& m = s[key];
        if (m["mean"].is_null()) return std::string("n/a");
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4f +/- %.4f", m["mean"].get<double>(),
                      m["sd"].is_null() ? 0.0 : m["sd"].get<double>());
        return std::string(buf);
    };
    std::printf("folds %zu  dice %s  (before refine %s)  specificity %s  classifier accuracy %s\n", res.folds.size(),
                show("dice").c_str(), show("dice_before_refine").c_str(), show("specificity").c_str(),
                show("classifier_accuracy").c_str());
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    Options o;
    CLI::App app{"Two-stage IVOCT microvessel segmentation on polar pullbacks"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--preset", o.preset, "Default set: desk or full")->check(CLI::IsMember(RunConfig::presets()));
    app.add_option("--config", o.config_file, "Flat JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", o.sets, "Override one key: KEY=VALUE (repeatable)");
    app.add_option("--seed", o.seed, "Global seed");
    app.add_option("--threads", o.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    app.add_flag("--log-json", o.log_json, "Structured logs, one JSON object per line on stderr");
    app.add_flag("--error-json", o.error_json, "Print errors as JSON on stdout");
    app.add_flag("--force", o.force, "Allow writing into a non-empty output directory");
    app.add_flag("--quiet", o.quiet, "No progress logging");

    auto out_opt = [&](CLI::App* sub) { sub->add_option("--out", o.out, "Output directory")->required(); };

    auto* phantom = app.add_subcommand("phantom", "Generate a phantom corpus");
    out_opt(phantom);
    phantom->add_option("--frames", o.frames, "Frames per segment");
    phantom->add_option("--segments", o.segments, "Number of segments");

    auto* augment = app.add_subcommand("augment", "Offset-angle augmentation of a corpus");
    augment->add_option("--in", o.in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    out_opt(augment);

    auto* pre = app.add_subcommand("preprocess", "Guidewire/lumen detection, pixel shifting, ROI, smoothing");
    pre->add_option("--in", o.in, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    out_opt(pre);

    auto* tseg = app.add_subcommand("train-seg", "Train the segmentation network");
    tseg->add_option("--data", o.data, "Pre-processed directory")->required()->check(CLI::ExistingDirectory);
    tseg->add_option("--train", o.train_ids, "Comma-separated training segment ids (default: all but --val)");
    tseg->add_option("--val", o.val_ids, "Comma-separated validation segment ids")->required();
    tseg->add_option("--epochs", o.epochs, "Maximum epochs");
    out_opt(tseg);

    auto* tclf = app.add_subcommand("train-clf", "Train the candidate classifier");
    tclf->add_option("--data", o.data, "Pre-processed directory")->required()->check(CLI::ExistingDirectory);
    tclf->add_option("--seg-model", o.seg_model, "Segmentation checkpoint")->required()->check(CLI::ExistingFile);
    tclf->add_option("--train", o.train_ids, "Comma-separated training segment ids (default: all but --val)");
    tclf->add_option("--val", o.val_ids, "Comma-separated validation segment ids");
    out_opt(tclf);

    auto* infer = app.add_subcommand("infer", "Segment, classify candidates and refine");
    infer->add_option("--data", o.data, "Pre-processed directory")->required()->check(CLI::ExistingDirectory);
    infer->add_option("--seg-model", o.seg_model, "Segmentation checkpoint")->required()->check(CLI::ExistingFile);
    infer->add_option("--clf-model", o.clf_model, "Classifier checkpoint")->required()->check(CLI::ExistingFile);
    infer->add_option("--segments", o.segment_ids, "Comma-separated segment ids (default: all)");
    out_opt(infer);

    auto* eval = app.add_subcommand("evaluate", "Pixel metrics, frame agreement and statistics against truth");
    eval->add_option("--pred", o.pred, "Output of infer")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--truth", o.truth, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    out_opt(eval);

    auto* recon = app.add_subcommand("reconstruct3d", "Link detections into tracks and export PLY");
    recon->add_option("--pred", o.pred, "Output of infer")->required()->check(CLI::ExistingDirectory);
    recon->add_option("--data", o.data, "Pre-processed directory (lumen contours)")
        ->required()
        ->check(CLI::ExistingDirectory);
    out_opt(recon);

    auto* report = app.add_subcommand("report", "Aggregate fold records");
    report->add_option("--in", o.inputs, "record.json files or directories holding them")->required();
    out_opt(report);

    auto* pipe = app.add_subcommand("pipeline", "End-to-end grouped k-fold run");
    pipe->add_option("--data", o.data, "Corpus directory (default: generate a phantom corpus)")
        ->check(CLI::ExistingDirectory);
    pipe->add_option("--frames", o.frames, "Frames per generated segment");
    pipe->add_option("--segments", o.segments, "Number of generated segments");
    pipe->add_option("--folds", o.folds, "Number of folds");
    pipe->add_option("--epochs", o.epochs, "Maximum segmentation epochs");
    out_opt(pipe);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    Logger::Mode mode = o.quiet ? Logger::Mode::Quiet : o.log_json ? Logger::Mode::Json : Logger::Mode::Text;
    try {
        Context ctx{RunConfig(o.preset), Logger(mode), o, command};
        if (!o.config_file.empty()) ctx.cfg.merge(read_json(o.config_file), o.config_file);
        for (const auto& s : o.sets) ctx.cfg.set(s);
        if (o.seed) ctx.cfg.set("seed", *o.seed, "--seed");
        if (o.frames) ctx.cfg.set("phantom.n_frames", *o.frames, "--frames");
        if (o.segments) ctx.cfg.set("corpus.segments", *o.segments, "--segments");
        if (o.folds) ctx.cfg.set("folds.k", *o.folds, "--folds");
        if (o.epochs) ctx.cfg.set("seg_train.max_epochs", *o.epochs, "--epochs");
        if (o.threads > 0) omp_set_num_threads(o.threads);
        ctx.log.event("start", {{"command", command}, {"seed", ctx.cfg.seed()}, {"threads", omp_get_max_threads()}});

        int rc = 0;
        if (command == "phantom") rc = cmd_phantom(ctx);
        else if (command == "augment") rc = cmd_augment(ctx);
        else if (command == "preprocess") rc = cmd_preprocess(ctx);
        else if (command == "train-seg") rc = cmd_train_seg(ctx);
        else if (command == "train-clf") rc = cmd_train_clf(ctx);
        else if (command == "infer") rc = cmd_infer(ctx);
        else if (command == "evaluate") rc = cmd_evaluate(ctx);
        else if (command == "reconstruct3d") rc = cmd_reconstruct(ctx);
        else if (command == "report") rc = cmd_report(ctx);
        else if (command == "pipeline") rc = cmd_pipeline(ctx);
        ctx.log.event("done", {{"command", command}});
        return rc;
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        std::fprintf(stderr, "error: %s\n", e.what());
        if (o.error_json) {
            json j{{"error", {{"kind", error_kind(e)}, {"message", e.what()}, {"exit_code", code}, {"command", command}}}};
            std::printf("%s\n", j.dump().c_str());
        }
        return code;
    }
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace ivoct::cli
