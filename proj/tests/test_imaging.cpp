#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "ivoct/imaging.hpp"
#include "test_util.hpp"

using namespace ivoct;
using ivoct::test::TempDir;

namespace {

PullbackMeta small_meta() {
    PullbackMeta m;
    m.alines_per_frame = 16;
    m.samples_per_aline = 300;
    return m;
}

PolarPullback random_pullback(int frames, std::uint64_t seed) {
    Rng rng(seed);
    PolarPullback p;
    p.meta = small_meta();
    p.segment_id = "seg-a";
    for (int i = 0; i < frames; ++i) p.frames.push_back(test::random_image(16, 300, rng));
    return p;
}

std::size_t count_files(const std::filesystem::path& dir, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        n += e.path().filename().string().starts_with(prefix);
    return n;
}

}  // namespace

TEST_CASE("save/load round trip is the identity on quantized pullbacks") {
    TempDir dir("roundtrip");
    auto p = random_pullback(3, 11);
    for (auto& f : p.frames) f = quantized(f);
    Rng rng(5);
    std::vector<FrameMask> masks;
    for (int i = 0; i < 3; ++i) masks.push_back(test::random_mask(16, 300, rng));
    save_pullback(p, dir.path(), masks);
    auto loaded = load_pullback(dir.path());
    CHECK(loaded.pullback.meta == p.meta);
    CHECK(loaded.pullback.segment_id == "seg-a");
    REQUIRE(loaded.pullback.frames.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(loaded.pullback.frames[i] == p.frames[i]);
        CHECK(loaded.masks[i] == masks[i]);
    }
}

TEST_CASE("quantize-dequantize error is bounded by half a 16-bit step") {
    Rng rng(3);
    double worst = 0.0;
    for (int i = 0; i < 100000; ++i) {
        double v = rng.uniform();
        worst = std::max(worst, std::abs(dequantize16(quantize16(v)) - v));
    }
    CHECK(worst <= 1.0 / (2.0 * 65535.0) + 1e-15);
}

TEST_CASE("frame cardinality and file layout") {
    TempDir dir("cardinality");
    SUBCASE("fifty frames") {
        save_pullback(random_pullback(50, 1), dir.path());
        CHECK(load_pullback(dir.path()).pullback.frames.size() == 50);
        CHECK(count_files(dir.path(), "frame_") == 50);
    }
    SUBCASE("empty pullback writes only the sidecar") {
        save_pullback(random_pullback(0, 1), dir.path());
        CHECK(count_files(dir.path(), "frame_") == 0);
        CHECK(std::filesystem::exists(dir / "meta.json"));
        CHECK(load_pullback(dir.path()).pullback.frames.empty());
    }
    SUBCASE("one frame") {
        save_pullback(random_pullback(1, 1), dir.path());
        CHECK(count_files(dir.path(), "frame_") == 1);
        CHECK(std::filesystem::exists(dir / "frame_00000.pgm"));
    }
}

TEST_CASE("loader errors") {
    TempDir dir("errors");
    SUBCASE("missing sidecar") { CHECK_THROWS_AS(load_pullback(dir.path()), FormatError); }
    SUBCASE("row count disagrees with sidecar") {
        auto p = random_pullback(1, 2);
        save_pullback(p, dir.path());
        write_pgm16(dir / "frame_00000.pgm", Image(10, 300, 0.5));
        CHECK_THROWS_AS(load_pullback(dir.path()), CorruptInputError);
    }
    SUBCASE("496 A-line sidecar with a 400-row file") {
        PolarPullback p;
        p.meta.alines_per_frame = 496;
        p.meta.samples_per_aline = 300;
        p.segment_id = "x";
        save_pullback(p, dir.path());
        write_pgm16(dir / "frame_00000.pgm", Image(400, 300, 0.25));
        CHECK_THROWS_AS(load_pullback(dir.path()), CorruptInputError);
    }
    SUBCASE("saving a NaN frame is rejected") {
        auto p = random_pullback(1, 2);
        p.frames[0](0, 0) = std::nan("");
        CHECK_THROWS_AS(save_pullback(p, dir.path()), CorruptInputError);
    }
    SUBCASE("sidecar missing a key") {
        std::ofstream(dir / "meta.json") << R"({"alines_per_frame": 16})";
        CHECK_THROWS_AS(load_pullback(dir.path()), FormatError);
    }
}

TEST_CASE("16-bit PGM is big-endian") {
    TempDir dir("pgm");
    Image img(1, 2);
    img(0, 0) = dequantize16(0x1234);
    img(0, 1) = 1.0;
    write_pgm16(dir / "x.pgm", img);
    std::ifstream is(dir / "x.pgm", std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(is)), {});
    REQUIRE(content.size() == std::string("P5\n2 1\n65535\n").size() + 4);
    auto tail = content.substr(content.size() - 4);
    CHECK(static_cast<unsigned char>(tail[0]) == 0x12);
    CHECK(static_cast<unsigned char>(tail[1]) == 0x34);
    CHECK(static_cast<unsigned char>(tail[2]) == 0xff);
}

TEST_CASE("metadata invariants") {
    PullbackMeta m;
    CHECK_NOTHROW(m.validate());
    m.alines_per_frame = 4;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = PullbackMeta{};
    m.pullback_speed_mm_s = 36.0;
    m.frame_rate_fps = 180.0;
    CHECK_NOTHROW(m.validate());
    m.frame_spacing_mm = 0.25;
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("scan conversion of a constant frame is a disk") {
    auto meta = small_meta();
    Image f(16, 300, 0.625);
    auto cart = scan_convert(f, meta, 65);
    const double half = 32.0;
    for (int i = 0; i < 65; ++i) {
        for (int j = 0; j < 65; ++j) {
            double rho = std::hypot(i - half, j - half) * 300.0 / half;
            if (rho <= 300.0)
                CHECK(std::abs(cart.pixels(i, j) - 0.625) <= 1e-6);
            else
                CHECK(cart.pixels(i, j) == 0.0);
        }
    }
    CHECK(cart.mm_per_pixel == doctest::Approx(300.0 / half * 0.005));
}

TEST_CASE("scan conversion centre reads the r=0 samples") {
    auto meta = small_meta();
    Rng rng(9);
    auto f = test::random_image(16, 300, rng);
    auto cart = scan_convert(f, meta, 41);
    // atan2(0,0) = 0: only A-line 0 carries weight at the centre.
    CHECK(cart.pixels(20, 20) == doctest::Approx(f(0, 0)).epsilon(1e-12));
}

TEST_CASE("scan conversion is equivariant under A-line rotation") {
    auto meta = small_meta();
    Rng rng(21);
    // Theta-only profile.
    Image f(16, 300);
    for (int a = 0; a < 16; ++a) {
        double v = rng.uniform();
        for (int r = 0; r < 300; ++r) f(a, r) = v;
    }
    for (int k : {1, 3, 8, 15}) {
        auto rotated = scan_convert(roll_alines(f, k), meta, 51);
        auto direct = scan_convert(f, meta, 51, 2.0 * std::numbers::pi * k / 16.0);
        double worst = 0.0;
        for (std::size_t i = 0; i < rotated.pixels.size(); ++i)
            worst = std::max(worst, std::abs(rotated.pixels.data()[i] - direct.pixels.data()[i]));
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("interval IoU handles the seam") {
    AngularInterval a{490, 20};  // 490..495, 0..13
    AngularInterval b{492, 20};
    CHECK(interval_iou(a, b, 496) == doctest::Approx(18.0 / 22.0));
    CHECK(a.contains(5, 496));
    CHECK_FALSE(a.contains(14, 496));
}
