#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <map>
#include <set>

#include "ivoct/evaluation.hpp"
#include "test_util.hpp"

using namespace ivoct;

namespace {

// Two-sided p-value from Boost.Math, used as an independent oracle.
double boost_two_sided(double t, double df) {
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

}  // namespace

TEST_CASE("confusion counts") {
    Rng rng(1);
    auto truth = test::random_mask(8, 8, rng, 0.3);
    long long n = 0;
    for (auto v : truth.data()) n += v;
    auto same = confusion_counts(truth, truth);
    CHECK(same == ConfusionCounts{n, 64 - n, 0, 0});
    CHECK(confusion_counts(Mask(8, 8, 0), truth).fn == n);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = test::random_mask(8, 8, rng, 0.4);
        auto t = test::random_mask(8, 8, rng, 0.4);
        auto e = test::random_mask(8, 8, rng, 0.2);
        ConfusionCounts want;
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) {
                if (e(i, j)) continue;
                want.tp += p(i, j) && t(i, j);
                want.tn += !p(i, j) && !t(i, j);
                want.fp += p(i, j) && !t(i, j);
                want.fn += !p(i, j) && t(i, j);
            }
        auto got = confusion_counts(p, t, &e);
        CHECK(got == want);
        // Aggregation is an elementwise sum.
        auto a = confusion_counts(p, t);
        a += confusion_counts(t, p);
        CHECK(a.total() == 128);
    }
    CHECK_THROWS_AS(confusion_counts(Mask(2, 3), Mask(3, 2)), ContractError);
}

TEST_CASE("pixel metrics") {
    auto m = pixel_metrics({8, 80, 2, 10});
    CHECK(*m.sensitivity == doctest::Approx(8.0 / 18).epsilon(1e-12));
    CHECK(*m.specificity == doctest::Approx(80.0 / 82).epsilon(1e-12));
    CHECK(*m.accuracy == doctest::Approx(0.88).epsilon(1e-12));
    CHECK(*m.dice == doctest::Approx(16.0 / 28).epsilon(1e-12));
    CHECK(std::round(*m.sensitivity * 1e4) / 1e4 == 0.4444);
    CHECK(std::round(*m.specificity * 1e4) / 1e4 == 0.9756);
    CHECK(std::round(*m.dice * 1e4) / 1e4 == 0.5714);
    auto perfect = pixel_metrics({5, 7, 0, 0});
    CHECK(*perfect.sensitivity == 1.0);
    CHECK(*perfect.specificity == 1.0);
    CHECK(*perfect.accuracy == 1.0);
    CHECK(*perfect.dice == 1.0);
    auto miss = pixel_metrics({0, 10, 0, 4});
    CHECK(*miss.sensitivity == 0.0);
    CHECK(*miss.dice == 0.0);
    auto undefined = pixel_metrics({0, 10, 0, 0});
    CHECK_FALSE(undefined.sensitivity.has_value());
    CHECK_FALSE(undefined.dice.has_value());
    CHECK(*undefined.specificity == 1.0);
    CHECK_FALSE(pixel_metrics({}).accuracy.has_value());
}

TEST_CASE("pixel metrics on random counts, with the Dice identity") {
    Rng rng(2);
    for (int trial = 0; trial < 1000; ++trial) {
        ConfusionCounts c{rng.uniform_int(0, 5000), rng.uniform_int(0, 100000), rng.uniform_int(0, 5000),
                          rng.uniform_int(0, 5000)};
        auto m = pixel_metrics(c);
        const double tp = c.tp, tn = c.tn, fp = c.fp, fn = c.fn;
        if (tp + fn > 0) CHECK(*m.sensitivity == tp / (tp + fn));
        if (tn + fp > 0) CHECK(*m.specificity == tn / (tn + fp));
        if (c.total() > 0) CHECK(*m.accuracy == (tp + tn) / (tp + tn + fp + fn));
        if (2 * tp + fp + fn > 0) CHECK(*m.dice == 2 * tp / (2 * tp + fp + fn));
        if (tp > 0) {
            const double prec = tp / (tp + fp), rec = tp / (tp + fn);
            CHECK(std::abs(*m.dice - 2 * prec * rec / (prec + rec)) <= 1e-12);
        }
    }
}

TEST_CASE("group_kfold") {
    auto segs = [](int n) {
        std::vector<SegmentInfo> s;
        for (int i = 0; i < n; ++i) s.push_back({"seg" + std::to_string(i), 20 + i});
        return s;
    };
    auto s122 = segs(122);
    auto plan = group_kfold(s122, 5, 0.70, 0.15, 3);
    std::multiset<std::size_t> sizes;
    for (const auto& f : plan) sizes.insert(f.test.size());
    CHECK(sizes == std::multiset<std::size_t>{24, 24, 24, 25, 25});

    for (int n : {5, 6, 7, 12, 31, 122})
        for (int k : {2, 3, 5}) {
            if (n < k) continue;
            auto s = segs(n);
            auto p = group_kfold(s, k, 0.70, 0.15, n * 10 + k);
            std::map<std::string, int> in_test;
            for (const auto& f : p) {
                std::set<std::string> all;
                for (auto* part : {&f.test, &f.val, &f.train})
                    for (const auto& id : *part) CHECK(all.insert(id).second);
                CHECK(all.size() == static_cast<std::size_t>(n));
                CHECK_FALSE(f.train.empty());
                for (const auto& id : f.test) ++in_test[id];
            }
            CHECK(in_test.size() == static_cast<std::size_t>(n));
            for (auto& [id, c] : in_test) CHECK(c == 1);
            std::size_t lo = n, hi = 0;
            for (const auto& f : p) {
                lo = std::min(lo, f.test.size());
                hi = std::max(hi, f.test.size());
            }
            CHECK(hi - lo <= 1);
        }
    auto five = group_kfold(segs(5), 5, 0.70, 0.15, 1);
    for (const auto& f : five) {
        CHECK(f.test.size() == 1);
        CHECK(f.val.size() == 1);
        CHECK(f.train.size() == 3);
    }
    auto again = group_kfold(s122, 5, 0.70, 0.15, 3);
    for (std::size_t f = 0; f < 5; ++f) {
        CHECK(again[f].test == plan[f].test);
        CHECK(again[f].val == plan[f].val);
    }
    auto other = group_kfold(s122, 5, 0.70, 0.15, 4);
    CHECK(other[0].test != plan[0].test);
    // Validation is close to 15/85 of the remaining segments.
    CHECK(plan[0].val.size() == 17);
    CHECK_THROWS_AS(group_kfold(segs(4), 5), ConfigError);
}

TEST_CASE("frame presence agreement") {
    std::vector<bool> pred(2812, false), truth(2812, false);
    for (int i = 0; i < 698; ++i) pred[i] = true;
    for (int i = 0; i < 730; ++i) truth[i] = true;
    auto f = frame_presence_agreement(pred, truth);
    CHECK(*f.pct_difference == doctest::Approx(32.0 / 730 * 100));
    CHECK(std::round(*f.pct_difference * 10) / 10 == 4.4);
    CHECK(std::round(*f.pct_difference * 100) / 100 == 4.38);

    auto same = frame_presence_agreement(truth, truth);
    CHECK(*same.pct_difference == 0.0);

    std::vector<Mask> p(3, Mask(4, 4, 0)), t(3, Mask(4, 4, 0));
    p[0](1, 1) = p[1](2, 2) = 1;
    t[1](0, 0) = t[2](3, 3) = 1;
    auto g = frame_presence_agreement(p, t);
    CHECK(g.fp_frames == 1);
    CHECK(g.fn_frames == 1);
    CHECK(g.fp_pct_of_frames == doctest::Approx(100.0 / 3));
    CHECK(g.fn_pct_of_frames == doctest::Approx(100.0 / 3));
    CHECK(*g.fp_pct_of_truth_pos == doctest::Approx(50.0));
    CHECK_FALSE(frame_presence_agreement(std::vector<bool>{true}, std::vector<bool>{false}).pct_difference);
}

TEST_CASE("linear regression") {
    std::vector<double> x{0, 1, 2}, y{0, 2, 3};
    auto f = linear_regression(x, y);
    CHECK(std::abs(f.slope - 1.5) <= 1e-12);
    CHECK(std::abs(f.intercept - 1.0 / 6) <= 1e-12);
    CHECK(std::abs(f.r_squared - 27.0 / 28) <= 1e-12);
    std::vector<double> u{0.3, 1.7, 2.2, 9.1};
    auto id = linear_regression(u, u);
    CHECK(id.slope == 1.0);
    CHECK(id.intercept == 0.0);
    CHECK(id.r_squared == 1.0);
    std::vector<double> c{2, 2, 2, 2};
    CHECK(linear_regression(u, c).r_squared == 0.0);
    CHECK_THROWS_AS(linear_regression(c, u), ContractError);
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> a(10), b(10);
        for (int i = 0; i < 10; ++i) {
            a[i] = rng.normal();
            b[i] = rng.normal();
        }
        auto r = linear_regression(a, b);
        CHECK(r.r_squared >= 0.0);
        CHECK(r.r_squared <= 1.0);
    }
}

TEST_CASE("bland-altman") {
    std::vector<double> a{1, 2, 3}, b{1, 2, 3};
    auto z = bland_altman(a, b);
    CHECK(z.mean_bias == 0.0);
    CHECK(z.loa_low == 0.0);
    CHECK(z.loa_high == 0.0);
    std::vector<double> p{1.1, 0.9}, q{1.0, 1.0};
    auto d = bland_altman(p, q);
    CHECK(std::abs(d.mean_bias) <= 1e-12);
    CHECK(std::abs(d.sd - std::sqrt(0.02)) <= 1e-12);
    CHECK(std::abs(d.loa_high - 1.96 * std::sqrt(0.02)) <= 1e-12);
    CHECK(std::abs(d.loa_low + 1.96 * std::sqrt(0.02)) <= 1e-12);
    auto swapped = bland_altman(q, p);
    CHECK(swapped.mean_bias == doctest::Approx(-d.mean_bias));

    Rng rng(4);
    std::vector<double> u(20000), v(20000);
    for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] = rng.normal();
        v[i] = 0.3 + 0.5 * rng.normal();
    }
    auto ba = bland_altman(u, v);
    int inside = 0;
    for (std::size_t i = 0; i < u.size(); ++i) inside += (u[i] - v[i] >= ba.loa_low && u[i] - v[i] <= ba.loa_high);
    CHECK(inside >= 0.95 * u.size() - 100);
}

TEST_CASE("paired t-test") {
    std::vector<double> a{1, 2, 3}, zero{0, 0, 0};
    auto r = paired_t_test(a, zero);
    CHECK(std::abs(r.t - 2.0 * std::sqrt(3.0)) <= 1e-12);
    CHECK(r.df == 2);
    CHECK(std::abs(r.p - boost_two_sided(r.t, 2)) <= 1e-8);
    CHECK(std::round(r.p * 1e4) / 1e4 == 0.0742);

    auto same = paired_t_test(a, a);
    CHECK(same.t == 0.0);
    CHECK(same.p == 1.0);
    std::vector<double> shifted{2, 3, 4};
    auto deg = paired_t_test(shifted, a);
    CHECK(deg.p == 0.0);
    CHECK(deg.degenerate_variance);

    double prev = 1.0;
    for (double off = 0.0; off <= 3.0; off += 0.25) {
        std::vector<double> d{1 + off - 2, 2 + off - 2, 3 + off - 2, 0.5 + off - 2};
        auto t = paired_t_test(d, std::vector<double>(4, 0.0));
        if (off > 1.0) CHECK(t.p < prev);
        if (off > 1.0) prev = t.p;
        else prev = 1.0;
    }
    CHECK_THROWS_AS(paired_t_test(std::vector<double>{1}, std::vector<double>{1}), ContractError);
}

TEST_CASE("student-t cdf against boost") {
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        const double df = rng.uniform_int(1, 200) + (trial % 3 == 0 ? 0.5 : 0.0);
        const double t = rng.uniform(-12.0, 12.0);
        boost::math::students_t dist(df);
        CHECK(std::abs(student_t_cdf(t, df) - boost::math::cdf(dist, t)) <= 1e-8);
    }
    for (double x : {0.0, 0.1, 0.5, 0.9, 1.0}) CHECK(incomplete_beta(1.0, 1.0, x) == doctest::Approx(x).epsilon(1e-14));
    CHECK(student_t_cdf(0.0, 7) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("fold summary") {
    std::vector<std::optional<double>> v{0.7, std::nullopt, 0.8, 0.6};
    auto m = mean_sd(v);
    CHECK(m.n == 3);
    CHECK(*m.mean == doctest::Approx(0.7));
    CHECK(*m.sd == doctest::Approx(0.1));
    CHECK_FALSE(mean_sd(std::vector<std::optional<double>>{std::nullopt}).mean);
    auto j = to_json(pixel_metrics({0, 10, 0, 0}));
    CHECK(j["dice"].is_null());
}
