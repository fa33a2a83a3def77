#include <doctest.h>

#include "ivoct/pipeline.hpp"
#include "test_util.hpp"

using namespace ivoct;

namespace {

PhantomParams tiny_params() {
    PhantomParams p;
    p.n_frames = 6;
    p.alines_per_frame = 128;
    p.samples_per_aline = 300;
    p.lumen_radius_px = 60;
    p.lumen_radius_amp_px = 6;
    p.vessel_count = 2;
    p.vessel_min_frames = 4;
    p.vessel_max_frames = 6;
    p.guidewire_width_alines = 10;
    p.confounder_count = 3;
    p.roi_depth_px = 80;
    return p;
}

PreprocessConfig tiny_pre() {
    PreprocessConfig c;
    c.roi_depth_px = 96;
    c.gw_window = 10;
    return c;
}

}  // namespace

TEST_CASE("corpus generation is seeded per segment") {
    auto a = generate_corpus(tiny_params(), 3, 5);
    auto b = generate_corpus(tiny_params(), 3, 5);
    REQUIRE(a.size() == 3);
    CHECK(a[0].id() == "seg00");
    CHECK(a[2].id() == "seg02");
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].pullback.frames == b[i].pullback.frames);
        CHECK(a[i].confounders == b[i].confounders);
        CHECK(a[i].shadow == b[i].shadow);
    }
    CHECK_FALSE(a[0].pullback.frames[0] == a[1].pullback.frames[0]);
    CHECK_THROWS_AS(generate_corpus(tiny_params(), 0, 1), ConfigError);
}

TEST_CASE("corpus save/load keeps masks, confounders and shadows") {
    test::TempDir dir("corpus");
    auto ph = generate_phantoms(tiny_params(), 2, 9);
    save_corpus(ph, dir.path());
    auto loaded = load_corpus(dir.path());
    REQUIRE(loaded.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        auto s = segment_from_phantom(ph[i]);
        CHECK(loaded[i].id() == s.id());
        CHECK(loaded[i].masks == s.masks);
        CHECK(loaded[i].confounders == s.confounders);
        CHECK(loaded[i].shadow == s.shadow);
        for (std::size_t f = 0; f < s.pullback.frames.size(); ++f)
            CHECK(loaded[i].pullback.frames[f] == quantized(s.pullback.frames[f]));
    }
    CHECK_THROWS_AS(load_corpus(dir / "nothing"), IoError);
}

TEST_CASE("augmented copies carry labels along with their A-lines") {
    auto s = generate_corpus(tiny_params(), 1, 3)[0];
    auto copies = augment_segment(s, {2, 43});
    REQUIRE(copies.size() == 2);
    for (int k = 0; k < 2; ++k) {
        auto direct = recut_pullback(s.pullback, s.confounders, 43LL * (k + 1));
        CHECK(copies[k].confounders == direct.masks);
        CHECK(copies[k].id() == s.id());
        CHECK(copies[k].masks == recut_pullback(s.pullback, s.masks, 43LL * (k + 1)).masks);
    }
}

TEST_CASE("prepared segments round-trip through disk") {
    test::TempDir dir("prepared");
    auto s = generate_corpus(tiny_params(), 1, 4)[0];
    auto ps = prepare_segment(s, tiny_pre());
    REQUIRE(ps.frames.size() == 6);
    CHECK(ps.frames[0].pixels.rows() == 128);
    CHECK(ps.frames[0].pixels.cols() == 96);
    save_prepared(ps, dir / "seg00");
    auto back = load_prepared(dir / "seg00");
    CHECK(back.id == ps.id);
    CHECK(back.meta == ps.meta);
    CHECK(back.masks == ps.masks);
    CHECK(back.confounders == ps.confounders);
    for (std::size_t f = 0; f < ps.frames.size(); ++f) {
        CHECK(back.frames[f].pixels == quantized(ps.frames[f].pixels));
        CHECK(back.frames[f].excluded == ps.frames[f].excluded);
        CHECK(back.frames[f].lumen.radius_px == ps.frames[f].lumen.radius_px);
        CHECK(back.frames[f].transform.shift_record == ps.frames[f].transform.shift_record);
    }
    auto set = load_prepared_set(dir.path());
    CHECK(set.size() == 1);
}

TEST_CASE("evaluation skips the truth shadow band") {
    auto s = generate_corpus(tiny_params(), 1, 6)[0];
    auto perfect = evaluate_segment(s, s.masks, s.masks);
    CHECK(perfect.after.fp == 0);
    CHECK(perfect.after.fn == 0);
    const long long pixels = 6LL * 128 * 300 - 6LL * 10 * 300;
    CHECK(perfect.after.total() == pixels);
    std::vector<Mask> empty(6, Mask(128, 300, 0));
    auto none = evaluate_segment(s, empty, empty);
    CHECK(none.after.tp == 0);
    for (std::size_t f = 0; f < 6; ++f) {
        CHECK_FALSE(none.pred_present[f]);
        CHECK(none.pred_area_mm2[f] == 0.0);
        CHECK(perfect.pred_area_mm2[f] == perfect.truth_area_mm2[f]);
    }
    // A prediction that only fires inside the shadow costs nothing.
    std::vector<Mask> shadow_only(6, Mask(128, 300, 0));
    for (std::size_t f = 0; f < 6; ++f)
        for (int a = 0; a < 128; ++a)
            if (s.shadow[f].contains(a, 128)) shadow_only[f](a, 150) = 1;
    CHECK(evaluate_segment(s, shadow_only, shadow_only).after.fp == 0);
}

TEST_CASE("classifier dataset labels") {
    auto s = generate_corpus(tiny_params(), 1, 8)[0];
    auto ps = prepare_segment(s, tiny_pre());
    // Predicting exactly the truth yields each truth blob twice (as a
    // prediction and as a truth blob) plus one negative per confounder blob.
    auto set = classifier_dataset(ps, ps.masks, {}, 3);
    std::size_t pos = 0, neg = 0;
    for (const auto& p : set) {
        CHECK(p.patch.rows() == 30);
        (p.label ? pos : neg)++;
    }
    CHECK(pos % 2 == 0);
    CHECK(pos > 0);
    CHECK(neg > 0);
    auto no_pred = classifier_dataset(ps, {}, {}, 3);
    CHECK(no_pred.size() == set.size() - pos / 2);
}

TEST_CASE("fold records round-trip") {
    FoldResult f;
    f.fold = 3;
    f.split = {{"a"}, {"b"}, {"c", "d"}};
    f.eval.before = {1, 2, 3, 4};
    f.eval.after = {5, 6, 7, 8};
    f.classifier = {9, 10, 11, 12};
    f.eval.pred_area_mm2 = {0.1, 0.0};
    f.eval.truth_area_mm2 = {0.2, 0.3};
    f.eval.pred_present = {true, false};
    f.eval.truth_present = {true, true};
    f.seg_epochs = 7;
    f.tracks = 2;
    f.longest_track_mm = 1.25;
    auto back = fold_from_record(fold_record(f));
    CHECK(fold_record(back) == fold_record(f));
    CHECK(back.eval.after == f.eval.after);
    auto broken = fold_record(f);
    broken["frames"]["pred_area_mm2"].push_back(1.0);
    CHECK_THROWS_AS(fold_from_record(broken), FormatError);
}

TEST_CASE("report schema") {
    FoldResult a, b;
    a.fold = 1;
    b.fold = 2;
    a.eval.after = {8, 80, 2, 10};
    a.eval.before = {9, 78, 4, 9};
    b.eval.after = {10, 85, 1, 4};
    b.eval.before = {10, 84, 2, 4};
    a.eval.pred_area_mm2 = {0.01, 0.0, 0.02};
    a.eval.truth_area_mm2 = {0.012, 0.0, 0.018};
    a.eval.pred_present = {true, false, true};
    a.eval.truth_present = {true, false, true};
    b.eval.pred_area_mm2 = {0.0, 0.03};
    b.eval.truth_area_mm2 = {0.001, 0.028};
    b.eval.pred_present = {false, true};
    b.eval.truth_present = {true, true};
    std::vector<FoldResult> folds{a, b};
    auto r = make_report(folds);
    REQUIRE(r["folds"].size() == 2);
    for (const char* key : {"dice", "sensitivity", "specificity", "accuracy"}) {
        CHECK(r["folds"][0].contains(key));
        CHECK(r["summary"][key].contains("mean"));
        CHECK(r["summary"][key].contains("sd"));
    }
    CHECK(r["folds"][0]["dice"].get<double>() == doctest::Approx(16.0 / 28));
    CHECK(r["summary"]["dice"]["mean"].get<double>() == doctest::Approx((16.0 / 28 + 20.0 / 25) / 2));
    CHECK(r["frame_agreement"]["n_frames"] == 5);
    CHECK(r["frame_agreement"]["fn_frames"] == 1);
    CHECK(r["stats"].contains("r_squared"));
    CHECK(r["stats"]["bland_altman"].contains("mean_bias"));
    CHECK(r["stats"]["t_test"].contains("p"));
}
