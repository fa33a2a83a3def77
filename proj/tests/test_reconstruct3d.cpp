#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ivoct/phantom.hpp"
#include "ivoct/reconstruct3d.hpp"
#include "test_util.hpp"

using namespace ivoct;

namespace {

PullbackMeta small_meta() {
    PullbackMeta m;
    m.alines_per_frame = 496;
    m.samples_per_aline = 300;
    return m;
}

Candidate blob(double a, double r, double area_mm2 = 1e-3) {
    Candidate c;
    c.centroid_a = a;
    c.centroid_r = c.centroid_r_raw = r;
    c.area_mm2 = area_mm2;
    return c;
}

MicrovesselTrack stationary(int n, double a, double r, double area) {
    MicrovesselTrack t;
    for (int f = 0; f < n; ++f) t.nodes.push_back({f, -1, a, r, area});
    return t;
}

// Minimum-cost assignment by exhaustive search over permutations, used to
// confirm greedy linking on well-separated layouts.
std::vector<int> brute_force_assignment(const std::vector<Candidate>& prev, const std::vector<Candidate>& next,
                                        int alines) {
    std::vector<int> perm(next.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    double best = 1e300;
    std::vector<int> best_perm;
    do {
        double cost = 0.0;
        for (std::size_t i = 0; i < prev.size(); ++i) {
            double da = std::abs(prev[i].centroid_a - next[perm[i]].centroid_a);
            da = std::min(da, alines - da);
            cost += std::hypot(da, prev[i].centroid_r_raw - next[perm[i]].centroid_r_raw);
        }
        if (cost < best) {
            best = cost;
            best_perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best_perm;
}

}  // namespace

TEST_CASE("link_tracks basic cases") {
    auto meta = small_meta();
    std::vector<std::vector<Candidate>> one(5, {blob(40, 100)});
    auto t = link_tracks(one, meta);
    REQUIRE(t.size() == 1);
    CHECK(t[0].frame_count() == 5);
    for (int f = 0; f < 5; ++f) CHECK(t[0].nodes[f].frame == f);

    std::vector<std::vector<Candidate>> two(6, {blob(10, 100), blob(110, 100)});
    auto t2 = link_tracks(two, meta);
    REQUIRE(t2.size() == 2);
    for (const auto& tr : t2) {
        CHECK(tr.frame_count() == 6);
        for (const auto& n : tr.nodes) CHECK(n.centroid_a == tr.nodes[0].centroid_a);
    }

    std::vector<std::vector<Candidate>> jump{{blob(10, 100)}, {blob(10, 100)}, {blob(60, 100)}, {blob(60, 100)}};
    auto t3 = link_tracks(jump, meta);
    REQUIRE(t3.size() == 2);
    CHECK(t3[0].frame_count() == 2);
    CHECK(t3[1].frame_count() == 2);

    // Gates: radial 10 px and circular 12 A-lines, inclusive; theta wraps.
    std::vector<std::vector<Candidate>> gate{{blob(490, 100)}, {blob(6, 110)}};
    CHECK(link_tracks(gate, meta).size() == 1);
    std::vector<std::vector<Candidate>> over{{blob(490, 100)}, {blob(6, 110.5)}};
    CHECK(link_tracks(over, meta).size() == 2);
    std::vector<std::vector<Candidate>> wide{{blob(490, 100)}, {blob(6.5, 100)}};
    CHECK(link_tracks(wide, meta).size() == 2);

    // A gap frame breaks the track.
    std::vector<std::vector<Candidate>> gap{{blob(10, 100)}, {}, {blob(10, 100)}};
    CHECK(link_tracks(gap, meta).size() == 2);

    // Two candidates compete for one track: the nearer wins, the other starts fresh.
    std::vector<std::vector<Candidate>> compete{{blob(50, 100)}, {blob(55, 100), blob(52, 100)}};
    auto t4 = link_tracks(compete, meta);
    REQUIRE(t4.size() == 2);
    CHECK(t4[0].nodes[1].candidate == 1);
    CHECK(t4[1].nodes[0].candidate == 0);
}

TEST_CASE("greedy linking agrees with optimal matching on separated layouts") {
    auto meta = small_meta();
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        int k = rng.uniform_int(2, 5);
        std::vector<Candidate> prev, next;
        for (int i = 0; i < k; ++i) {
            double a = i * (496.0 / k) + rng.uniform(0.0, 10.0);
            double r = rng.uniform(60.0, 200.0);
            prev.push_back(blob(a, r));
            next.push_back(blob(std::fmod(a + rng.uniform(-5.0, 5.0) + 496.0, 496.0), r + rng.uniform(-4.0, 4.0)));
        }
        std::vector<Candidate> shuffled = next;
        std::vector<int> order(k);
        for (int i = 0; i < k; ++i) order[i] = i;
        for (int i = k - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
        for (int i = 0; i < k; ++i) shuffled[i] = next[order[i]];

        auto tracks = link_tracks({prev, shuffled}, meta);
        CHECK(tracks.size() == static_cast<std::size_t>(k));
        auto opt = brute_force_assignment(prev, shuffled, 496);
        for (int i = 0; i < k; ++i) {
            REQUIRE(tracks[i].frame_count() == 2);
            CHECK(tracks[i].nodes[1].candidate == opt[i]);
        }
    }
}

TEST_CASE("filter_min_frames and pixel removal") {
    std::vector<MicrovesselTrack> tracks{stationary(2, 10, 100, 1e-3), stationary(3, 50, 100, 1e-3),
                                         stationary(5, 90, 100, 1e-3)};
    auto kept = filter_min_frames(tracks, 3);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].frame_count() == 3);
    auto again = filter_min_frames(kept, 3);
    CHECK(again.size() == kept.size());
    CHECK(filter_min_frames(tracks, 4).size() == 1);

    auto meta = small_meta();
    meta.alines_per_frame = 64;
    meta.samples_per_aline = 64;
    PolarGeometry geom{64, meta.r_pixel_mm(), {}};
    std::vector<Mask> masks(4, Mask(64, 64, 0));
    for (int f = 0; f < 4; ++f)
        for (int a = 10; a < 14; ++a)
            for (int r = 20; r < 24; ++r) masks[f](a, r) = 1;
    for (int f = 0; f < 2; ++f)
        for (int a = 40; a < 44; ++a)
            for (int r = 30; r < 34; ++r) masks[f](a, r) = 1;
    std::vector<std::vector<Candidate>> cands;
    for (const auto& m : masks) cands.push_back(extract_candidates(m, geom));
    auto all = link_tracks(cands, meta);
    CHECK(all.size() == 2);
    auto longer = filter_min_frames(all, 3);
    REQUIRE(longer.size() == 1);
    auto filtered = apply_track_filter(masks, cands, longer);
    for (int f = 0; f < 4; ++f) {
        CHECK(filtered[f](11, 21) == 1);
        CHECK(filtered[f](41, 31) == 0);
    }
    auto twice = apply_track_filter(filtered, cands, longer);
    CHECK(twice == filtered);
}

TEST_CASE("phantom vessels survive linking and the frame filter") {
    PhantomParams p;
    p.n_frames = 30;
    p.alines_per_frame = 128;
    p.samples_per_aline = 300;
    p.lumen_radius_px = 60;
    p.lumen_radius_amp_px = 6;
    p.vessel_count = 3;
    p.vessel_min_frames = 4;
    p.vessel_max_frames = 10;
    p.guidewire_width_alines = 10;
    p.confounder_count = 0;
    p.roi_depth_px = 120;
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        auto ph = generate_phantom(p, seed);
        const auto& meta = ph.pullback.meta;
        PolarGeometry geom{meta.alines_per_frame, meta.r_pixel_mm(), {}};
        std::vector<std::vector<Candidate>> cands;
        for (const auto& m : ph.truth.masks) cands.push_back(extract_candidates(m, geom));
        auto tracks = link_tracks(cands, meta);
        auto kept = filter_min_frames(tracks, 3);
        CHECK(kept.size() == ph.truth.vessel_tracks.size());
        CHECK(tracks.size() == kept.size());
        auto filtered = apply_track_filter(ph.truth.masks, cands, kept);
        CHECK(filtered == ph.truth.masks);
    }
}

TEST_CASE("track metrics") {
    auto meta = small_meta();
    meta.frame_spacing_mm = 0.2;
    auto t = stationary(38, 100, 150, 9.0607e-3);
    auto m = track_metrics(t, meta);
    CHECK(m.length_mm == 7.4);
    CHECK(m.axial_extent_mm == doctest::Approx(7.4).epsilon(1e-14));
    CHECK(std::abs(m.mean_diameter_um - 107.4) <= 0.05);
    CHECK(std::abs(equivalent_diameter_um(9.0607e-3) - 2000.0 * std::sqrt(9.0607e-3 / std::numbers::pi)) <= 1e-12);

    // In-plane drift only lengthens the track.
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto d = stationary(rng.uniform_int(2, 20), 0, 0, 1e-3);
        for (auto& n : d.nodes) {
            n.centroid_a = rng.uniform(0.0, 496.0);
            n.centroid_r = rng.uniform(50.0, 250.0);
        }
        auto dm = track_metrics(d, meta);
        CHECK(dm.length_mm >= (d.frame_count() - 1) * meta.frame_spacing_mm - 1e-12);
        CHECK(dm.length_mm >= dm.axial_extent_mm - 1e-12);
    }
    // Step between two nodes by independent Cartesian arithmetic.
    MicrovesselTrack two;
    two.nodes = {{0, -1, 0.0, 99.5, 1e-3}, {1, -1, 124.0, 99.5, 1e-3}};
    double rho = 100.0 * meta.r_pixel_mm();
    CHECK(track_metrics(two, meta).length_mm == doctest::Approx(std::sqrt(2 * rho * rho + 0.04)).epsilon(1e-12));

    CHECK_THROWS_AS(track_metrics(stationary(1, 0, 0, 1e-3), meta), ContractError);
    auto broken = stationary(3, 0, 0, 1e-3);
    broken.nodes[2].frame = 5;
    CHECK_THROWS_AS(track_metrics(broken, meta), ContractError);
}

TEST_CASE("PLY export") {
    test::TempDir dir("ply");
    auto meta = small_meta();
    std::vector<LumenContour> lumen(3);
    Rng rng(5);
    for (auto& l : lumen) {
        l.radius_px.resize(496);
        for (auto& r : l.radius_px) r = rng.uniform_int(60, 120);
    }
    auto path = dir / "scene.ply";
    export_ply(lumen, {}, meta, path);
    {
        std::ifstream in(path);
        std::string first;
        std::getline(in, first);
        CHECK(first == "ply");
    }

    std::vector<MicrovesselTrack> tracks{stationary(4, 10, 150, 1e-3), stationary(3, 200, 120, 1e-3)};
    tracks[1].id = 1;
    for (auto& n : tracks[1].nodes) n.frame += 2;
    export_ply(lumen, tracks, meta, path, 2);

    std::ifstream in(path);
    std::string line;
    std::size_t nv = 0, ne = 0;
    while (std::getline(in, line) && line != "end_header") {
        std::istringstream ss(line);
        std::string a, b;
        ss >> a >> b;
        if (a == "element" && b == "vertex") ss >> nv;
        if (a == "element" && b == "edge") ss >> ne;
    }
    CHECK(nv == 3 * 248 + 4 + 3);
    CHECK(ne == 3 + 2);
    std::vector<std::array<double, 3>> expect;
    for (int f = 0; f < 3; ++f)
        for (int a = 0; a < 496; a += 2) expect.push_back(polar_to_mm(f, a, lumen[f].radius_px[a], meta));
    for (const auto& t : tracks)
        for (const auto& n : t.nodes) expect.push_back(polar_to_mm(n.frame, n.centroid_a, n.centroid_r, meta));
    for (std::size_t i = 0; i < nv; ++i) {
        std::array<double, 3> p;
        int r, g, b;
        in >> p[0] >> p[1] >> p[2] >> r >> g >> b;
        for (int k = 0; k < 3; ++k) CHECK(std::abs(p[k] - expect[i][k]) <= 1e-6);
    }
    std::vector<std::pair<int, int>> edges(ne);
    for (auto& e : edges) in >> e.first >> e.second;
    CHECK(edges.front() == std::pair<int, int>{744, 745});
    CHECK(edges.back() == std::pair<int, int>{749, 750});
    CHECK_THROWS_AS(export_ply(lumen, tracks, meta, dir.path() / "missing" / "x.ply"), IoError);
}

TEST_CASE("tracks CSV") {
    test::TempDir dir("tracks");
    auto meta = small_meta();
    std::vector<std::vector<Candidate>> one(4, {blob(40, 100, 9.0607e-3)});
    auto t = link_tracks(one, meta);
    write_tracks_csv(dir / "tracks.csv", t);
    std::ifstream in(dir / "tracks.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "track_id,n_frames,length_mm,axial_extent_mm,mean_diameter_um,first_frame");
    CHECK(row.rfind("0,4,0.600000,0.600000,107.4", 0) == 0);
}
