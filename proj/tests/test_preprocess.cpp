#include <doctest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "ivoct/phantom.hpp"
#include "ivoct/preprocess.hpp"
#include "test_util.hpp"

using namespace ivoct;

namespace {

PhantomParams clinical_like() {
    PhantomParams p;
    p.n_frames = 3;
    p.alines_per_frame = 496;
    p.samples_per_aline = 400;
    p.lumen_radius_px = 80;
    p.vessel_count = 2;
    p.vessel_min_frames = 2;
    p.vessel_max_frames = 3;
    p.confounder_count = 0;
    p.guidewire_width_alines = 30;
    p.guidewire_start_aline = 100;
    p.guidewire_drift_alines = 0;
    return p;
}

}  // namespace

TEST_CASE("guidewire shadow at [100,130) is recovered") {
    auto p = clinical_like();
    auto ph = generate_phantom(p, 2);
    for (int f = 0; f < p.n_frames; ++f) {
        auto band = detect_guidewire(ph.pullback.frames[f], std::nullopt, ph.pullback.meta);
        REQUIRE(band.has_value());
        CHECK(interval_iou(*band, AngularInterval{100, 30}, 496) >= 0.8);
    }
}

TEST_CASE("seam-straddling shadow is one circular interval") {
    auto p = clinical_like();
    p.guidewire_start_aline = 480;
    p.guidewire_width_alines = 31;  // [480, 15)
    auto ph = generate_phantom(p, 4);
    auto band = detect_guidewire(ph.pullback.frames[0], std::nullopt, ph.pullback.meta);
    REQUIRE(band.has_value());
    CHECK(interval_iou(*band, AngularInterval{480, 31}, 496) >= 0.8);
    CHECK(band->width <= 40);
    CHECK(band->contains(495, 496));
    CHECK(band->contains(0, 496));
}

TEST_CASE("constant frame has no shadow") {
    PullbackMeta meta;
    meta.samples_per_aline = 300;
    CHECK_FALSE(detect_guidewire(Image(496, 300, 0.4), std::nullopt, meta).has_value());
    CHECK_FALSE(detect_guidewire(Image(496, 300, 0.0), std::nullopt, meta).has_value());
}

TEST_CASE("lumen detection on a constant-radius phantom") {
    auto p = clinical_like();
    auto ph = generate_phantom(p, 8);
    for (int f = 0; f < p.n_frames; ++f) {
        auto shadow = detect_guidewire(ph.pullback.frames[f], std::nullopt, ph.pullback.meta);
        auto lumen = detect_lumen(ph.pullback.frames[f], shadow, ph.pullback.meta);
        int worst = 0;
        for (int a = 0; a < 496; ++a) worst = std::max(worst, std::abs(lumen.radius_px[a] - 80));
        CHECK(worst <= 2);
    }
}

TEST_CASE("lumen detection on a sinusoidal phantom, smoothness across the seam") {
    auto p = clinical_like();
    p.lumen_radius_amp_px = 10;
    p.lumen_lobes = 2;
    auto ph = generate_phantom(p, 12);
    PreprocessConfig cfg;
    for (int f = 0; f < p.n_frames; ++f) {
        auto shadow = detect_guidewire(ph.pullback.frames[f], std::nullopt, ph.pullback.meta);
        auto lumen = detect_lumen(ph.pullback.frames[f], shadow, ph.pullback.meta);
        double mae = 0.0;
        for (int a = 0; a < 496; ++a) {
            mae += std::abs(lumen.radius_px[a] - ph.truth.lumen_radius[f][a]);
            CHECK(std::abs(lumen.radius_px[a] - lumen.radius_px[wrap_index(a - 1, 496)]) <= cfg.lumen_max_step);
        }
        CHECK(mae / 496 <= 2.0);
    }
}

TEST_CASE("lumen detection without a shadow uses the closed DP") {
    auto p = clinical_like();
    p.guidewire_width_alines = 0;
    p.lumen_radius_amp_px = 8;
    auto ph = generate_phantom(p, 13);
    auto lumen = detect_lumen(ph.pullback.frames[0], std::nullopt, ph.pullback.meta);
    double mae = 0.0;
    for (int a = 0; a < 496; ++a) {
        mae += std::abs(lumen.radius_px[a] - ph.truth.lumen_radius[0][a]);
        CHECK(std::abs(lumen.radius_px[a] - lumen.radius_px[wrap_index(a - 1, 496)]) <= 15);
    }
    CHECK(mae / 496 <= 2.0);
}

TEST_CASE("all-zero frame raises a detection error") {
    PullbackMeta meta;
    meta.samples_per_aline = 300;
    CHECK_THROWS_AS(detect_lumen(Image(496, 300, 0.0), std::nullopt, meta), DetectionError);
}

TEST_CASE("pixel shift definitions") {
    Rng rng(4);
    auto f = test::random_image(16, 40, rng);
    SUBCASE("zero shift is the identity") {
        auto s = pixel_shift(f, LumenContour{std::vector<int>(16, 0)});
        CHECK(s.pixels == f);
    }
    SUBCASE("constant shift moves columns") {
        const int k = 7;
        auto s = pixel_shift(f, LumenContour{std::vector<int>(16, k)});
        for (int a = 0; a < 16; ++a)
            for (int j = 0; j < 40; ++j) CHECK(s.pixels(a, j) == (j < 40 - k ? f(a, j + k) : 0.0));
    }
    SUBCASE("unshift restores columns at or beyond the lumen") {
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<int> r(16);
            for (auto& v : r) v = rng.uniform_int(0, 39);
            auto s = pixel_shift(f, LumenContour{r});
            auto back = pixel_unshift(s.pixels, s.shift_record, 40);
            for (int a = 0; a < 16; ++a)
                for (int j = 0; j < 40; ++j) CHECK(back(a, j) == (j >= r[a] ? f(a, j) : 0.0));
        }
    }
}

TEST_CASE("crop_roi") {
    Rng rng(5);
    auto wide = test::random_image(8, 400, rng);
    auto c = crop_roi(wide, 300);
    REQUIRE(c.cols() == 300);
    for (int a = 0; a < 8; ++a)
        for (int j = 0; j < 300; ++j) CHECK(c(a, j) == wide(a, j));
    auto narrow = test::random_image(8, 250, rng);
    auto p = crop_roi(narrow, 300);
    REQUIRE(p.cols() == 300);
    for (int a = 0; a < 8; ++a) {
        for (int j = 0; j < 250; ++j) CHECK(p(a, j) == narrow(a, j));
        for (int j = 250; j < 300; ++j) CHECK(p(a, j) == 0.0);
    }
    CHECK(crop_roi(narrow, 250) == narrow);
    CHECK_THROWS_AS(crop_roi(narrow, 0), ContractError);
}

namespace {

// Direct 2-D convolution with the outer-product kernel: theta wraps, r replicates.
Image brute_force_smooth(const Image& img, int ksize, double sigma) {
    const int c = ksize / 2;
    std::vector<double> g(ksize);
    for (int i = 0; i < ksize; ++i) g[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    double norm = 0.0;
    for (int i = 0; i < ksize; ++i)
        for (int j = 0; j < ksize; ++j) norm += g[i] * g[j];
    Image out(img.rows(), img.cols());
    for (int a = 0; a < img.rows(); ++a)
        for (int r = 0; r < img.cols(); ++r) {
            double acc = 0.0;
            for (int i = 0; i < ksize; ++i)
                for (int j = 0; j < ksize; ++j)
                    acc += g[i] * g[j] *
                           img(wrap_index(a + i - c, img.rows()), std::clamp(r + j - c, 0, img.cols() - 1));
            out(a, r) = acc / norm;
        }
    return out;
}

}  // namespace

TEST_CASE("gaussian smoothing") {
    auto k = gaussian_kernel(7, 1.0);
    CHECK(std::abs(std::accumulate(k.begin(), k.end(), 0.0) - 1.0) <= 1e-9);
    CHECK_THROWS_AS(gaussian_smooth(Image(4, 4), 6, 1.0), ContractError);

    SUBCASE("constant frame unchanged") {
        auto out = gaussian_smooth(Image(20, 30, 0.37));
        for (double v : out.data()) CHECK(std::abs(v - 0.37) <= 1e-9);
    }
    SUBCASE("impulse response is the sampled 2-D Gaussian") {
        Image img(21, 21, 0.0);
        img(10, 10) = 1.0;
        auto out = gaussian_smooth(img);
        double norm = 0.0;
        for (int i = -3; i <= 3; ++i)
            for (int j = -3; j <= 3; ++j) norm += std::exp(-0.5 * (i * i + j * j));
        for (int i = -3; i <= 3; ++i)
            for (int j = -3; j <= 3; ++j)
                CHECK(std::abs(out(10 + i, 10 + j) - std::exp(-0.5 * (i * i + j * j)) / norm) <= 1e-12);
        // Centre weight: 1/(2 pi) up to the discrete normalisation.
        CHECK(out(10, 10) == doctest::Approx(1.0 / (2.0 * std::numbers::pi)).epsilon(0.01));
        CHECK(out(10, 14) == 0.0);
    }
    SUBCASE("separable result equals brute-force 2-D convolution") {
        Rng rng(6);
        auto img = test::random_image(17, 23, rng);
        auto a = gaussian_smooth(img, 7, 1.0);
        auto b = brute_force_smooth(img, 7, 1.0);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-9);
        auto c = gaussian_smooth(img, 5, 1.7);
        auto d = brute_force_smooth(img, 5, 1.7);
        for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c.data()[i] - d.data()[i]) <= 1e-9);
    }
    SUBCASE("mean preserved on a zero-bordered frame") {
        Rng rng(7);
        Image img(32, 40, 0.0);
        for (int a = 0; a < 32; ++a)
            for (int r = 4; r < 36; ++r) img(a, r) = rng.uniform();
        auto out = gaussian_smooth(img);
        auto mean = [](const Image& x) { return std::accumulate(x.data().begin(), x.data().end(), 0.0) / x.size(); };
        CHECK(std::abs(mean(out) - mean(img)) <= 1e-6);
    }
}

TEST_CASE("preprocess_frame geometry and mask co-transformation") {
    auto p = clinical_like();
    p.vessel_count = 3;
    auto ph = generate_phantom(p, 21);
    for (int f = 0; f < p.n_frames; ++f) {
        auto pf = preprocess_frame(ph.pullback.frames[f], ph.pullback.meta);
        CHECK(pf.pixels.rows() == 496);
        CHECK(pf.pixels.cols() == 300);
        REQUIRE(pf.transform.shadow.has_value());
        // Shadow rows are zeroed and flagged.
        for (int a = 0; a < 496; ++a) {
            bool ex = pf.transform.excluded(a);
            CHECK(static_cast<bool>(pf.excluded(a, 5)) == ex);
            if (ex) CHECK(pf.pixels(a, 17) == 0.0);
        }
        const auto& raw = ph.truth.masks[f];
        auto pre = transform_mask(raw, pf.transform);
        // Brute-force per-pixel coordinate map.
        for (int a = 0; a < 496; ++a)
            for (int j = 0; j < 300; ++j) {
                int r = j + pf.transform.shift_record[a];
                CHECK(pre(a, j) == (r < 400 ? raw(a, r) : 0));
            }
        CHECK(restore_mask(pre, pf.transform) == raw);
    }
}

TEST_CASE("no detected shadow leaves every pixel included") {
    auto p = clinical_like();
    p.guidewire_width_alines = 0;
    auto ph = generate_phantom(p, 22);
    auto pf = preprocess_frame(ph.pullback.frames[0], ph.pullback.meta);
    CHECK_FALSE(pf.transform.shadow.has_value());
    for (auto v : pf.excluded.data()) CHECK(v == 0);
}

TEST_CASE("transform record JSON round trip") {
    FrameTransform t{{1, 2, 3}, AngularInterval{4, 5}, 300, 400};
    auto u = transform_from_json(to_json(t));
    CHECK(u.shift_record == t.shift_record);
    CHECK(u.shadow == t.shadow);
    CHECK(u.roi_depth_px == 300);
    FrameTransform none{{0}, std::nullopt, 10, 20};
    CHECK_FALSE(transform_from_json(to_json(none)).shadow.has_value());
}
