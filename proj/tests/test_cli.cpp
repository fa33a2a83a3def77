#include <doctest.h>

#include <fstream>
#include <sstream>

#include "ivoct/cli.hpp"
#include "test_util.hpp"

using namespace ivoct;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
    args.insert(args.begin(), {"ivoct", "--quiet"});
    return cli::run(args);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Byte comparison of two directory trees.
bool same_tree(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) return false;
    for (const auto& f : fa)
        if (slurp(a / f) != slurp(b / f)) return false;
    return true;
}

nlohmann::json read(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_CASE("run configuration") {
    cli::RunConfig c;
    CHECK(c.values().contains("seed"));
    CHECK(c.values().contains("phantom.n_frames"));
    CHECK(c.values().contains("seg_train.lr0"));
    CHECK_NOTHROW(c.pipeline());
    CHECK_THROWS_AS(c.set("no.such.key=1"), ConfigError);
    CHECK_THROWS_AS(c.set("phantom.n_frames=1.5"), ConfigError);
    CHECK_THROWS_AS(c.set("phantom.n_frames"), ConfigError);
    c.set("phantom.n_frames=12");
    c.set("seg_train.lr0=0.01");
    c.set("augment.enabled=false");
    c.set("seg.aspp_rates=[1,3]");
    auto p = c.pipeline();
    CHECK(p.phantom.n_frames == 12);
    CHECK(p.seg_sched.lr0 == 0.01);
    CHECK_FALSE(p.augment);
    CHECK(p.seg.aspp_rates == std::vector<int>{1, 3});
    c.set("seg_train.max_epochs=0");
    CHECK_THROWS_AS(c.pipeline(), ConfigError);
    CHECK_THROWS_AS(c.merge(nlohmann::json::array(), "x"), ConfigError);
    CHECK_THROWS_AS(cli::RunConfig("huge"), ConfigError);
    CHECK(cli::RunConfig("full").pipeline().seg.input_rows == 496);
}

TEST_CASE("phantom command is deterministic and echoes its configuration") {
    test::TempDir dir("cli_phantom");
    CHECK(run({"phantom", "--seed", "7", "--frames", "4", "--segments", "2", "--out", (dir / "a").string()}) == 0);
    CHECK(run({"phantom", "--seed", "7", "--frames", "4", "--segments", "2", "--out", (dir / "b").string()}) == 0);
    CHECK(same_tree(dir / "a", dir / "b"));
    auto cfg = read(dir / "a" / "resolved_config.json");
    CHECK(cfg["config"]["seed"] == 7);
    CHECK(cfg["config"]["phantom.n_frames"] == 4);
    CHECK(cfg["command"] == "phantom");
    CHECK(fs::exists(dir / "a" / "seg01" / "truth.json"));

    // Precedence: file < --set < dedicated flag.
    {
        std::ofstream f(dir / "cfg.json");
        f << R"({"phantom.n_frames": 8, "corpus.segments": 1, "seed": 1})";
    }
    CHECK(run({"phantom", "--config", (dir / "cfg.json").string(), "--set", "seed=2", "--set", "phantom.n_frames=6",
               "--frames", "5", "--out", (dir / "c").string()}) == 0);
    auto c = read(dir / "c" / "resolved_config.json")["config"];
    CHECK(c["seed"] == 2);
    CHECK(c["phantom.n_frames"] == 5);
    CHECK(c["corpus.segments"] == 1);

    // Replaying from the echoed configuration reproduces the output.
    {
        std::ofstream f(dir / "replay.json");
        f << c.dump();
    }
    CHECK(run({"phantom", "--config", (dir / "replay.json").string(), "--out", (dir / "d").string()}) == 0);
    fs::remove(dir / "c" / "resolved_config.json");
    fs::remove(dir / "d" / "resolved_config.json");
    CHECK(same_tree(dir / "c", dir / "d"));
}

TEST_CASE("exit codes and untouched outputs") {
    test::TempDir dir("cli_errors");
    CHECK(run({"--bogus", "phantom", "--out", (dir / "x").string()}) == 1);
    CHECK_FALSE(fs::exists(dir / "x"));
    CHECK(run({"phantom", "--out", (dir / "y").string(), "--frames", "2", "--what"}) == 1);
    CHECK_FALSE(fs::exists(dir / "y"));
    CHECK(run({"nosuchcommand"}) == 1);
    CHECK(run({"--set", "bad.key=1", "phantom", "--out", (dir / "z").string()}) == 1);
    CHECK_FALSE(fs::exists(dir / "z"));

    CHECK(run({"phantom", "--frames", "4", "--segments", "1", "--out", (dir / "p").string()}) == 0);
    auto before = slurp(dir / "p" / "seg00" / "frame_00000.pgm");
    CHECK(run({"phantom", "--frames", "4", "--segments", "1", "--seed", "3", "--out", (dir / "p").string()}) == 1);
    CHECK(slurp(dir / "p" / "seg00" / "frame_00000.pgm") == before);
    CHECK(run({"phantom", "--frames", "4", "--segments", "1", "--seed", "3", "--force", "--out",
               (dir / "p").string()}) == 0);
    CHECK(slurp(dir / "p" / "seg00" / "frame_00000.pgm") != before);

    // Output inside an input is refused.
    CHECK(run({"preprocess", "--in", (dir / "p").string(), "--out", (dir / "p" / "pre").string()}) == 1);

    // Corrupt data -> 2.
    {
        std::ofstream f(dir / "p" / "seg00" / "meta.json");
        f << "{ not json";
    }
    CHECK(run({"preprocess", "--in", (dir / "p").string(), "--out", (dir / "q").string()}) == 2);
}

TEST_CASE("training failure exits with 3") {
    test::TempDir dir("cli_train");
    REQUIRE(run({"phantom", "--frames", "4", "--segments", "2", "--out", (dir / "d").string()}) == 0);
    REQUIRE(run({"preprocess", "--in", (dir / "d").string(), "--out", (dir / "p").string()}) == 0);
    CHECK(run({"--set", "seg_train.lr0=1e300", "train-seg", "--epochs", "2", "--data", (dir / "p").string(), "--val",
               "seg01", "--out", (dir / "m").string()}) == 3);
}

TEST_CASE("staged commands chain") {
    test::TempDir dir("cli_stages");
    const auto d = (dir / "d").string(), p = (dir / "p").string();
    REQUIRE(run({"phantom", "--seed", "4", "--frames", "6", "--segments", "3", "--out", d}) == 0);
    REQUIRE(run({"augment", "--in", d, "--out", (dir / "aug").string()}) == 0);
    CHECK(fs::exists(dir / "aug" / "seg00_aug2" / "meta.json"));
    REQUIRE(run({"preprocess", "--in", d, "--out", p}) == 0);
    REQUIRE(run({"train-seg", "--epochs", "1", "--data", p, "--train", "seg00,seg01", "--val", "seg02", "--out",
                 (dir / "s").string()}) == 0);
    CHECK(fs::exists(dir / "s" / "seg_model.ckpt"));
    CHECK(run({"train-seg", "--data", p, "--train", "seg00", "--val", "seg00", "--out", (dir / "bad").string()}) == 1);
    REQUIRE(run({"--set", "clf_train.max_epochs=2", "train-clf", "--data", p, "--seg-model",
                 (dir / "s" / "seg_model.ckpt").string(), "--train", "seg00,seg01", "--val", "seg02", "--out",
                 (dir / "c").string()}) == 0);
    REQUIRE(run({"infer", "--data", p, "--seg-model", (dir / "s" / "seg_model.ckpt").string(), "--clf-model",
                 (dir / "c" / "clf_model.ckpt").string(), "--segments", "seg02", "--out", (dir / "i").string()}) == 0);
    CHECK(fs::exists(dir / "i" / "seg02" / "pred_00005.pgm"));
    CHECK_FALSE(fs::exists(dir / "i" / "seg00"));
    REQUIRE(run({"evaluate", "--pred", (dir / "i").string(), "--truth", d, "--out", (dir / "e").string()}) == 0);
    auto m = read(dir / "e" / "metrics.json");
    CHECK(m.contains("dice"));
    CHECK(m["segments"].contains("seg02"));
    REQUIRE(run({"reconstruct3d", "--pred", (dir / "i").string(), "--data", p, "--out", (dir / "r").string()}) == 0);
    CHECK(fs::exists(dir / "r" / "seg02" / "scene.ply"));
    CHECK(fs::exists(dir / "r" / "seg02" / "tracks.csv"));
    REQUIRE(run({"report", "--in", (dir / "e").string(), "--in", (dir / "e" / "record.json").string(), "--out",
                 (dir / "rep").string()}) == 0);
    auto rep = read(dir / "rep" / "report.json");
    CHECK(rep["folds"].size() == 2);
    CHECK(rep.contains("summary"));
    CHECK(rep.contains("frame_agreement"));
    CHECK(rep.contains("stats"));
}

TEST_CASE("pipeline smoke run") {
    test::TempDir dir("cli_pipeline");
    REQUIRE(run({"--seed", "7", "--set", "clf_train.max_epochs=2", "pipeline", "--frames", "6", "--epochs", "1",
                 "--out", (dir / "w").string()}) == 0);
    auto rep = read(dir / "w" / "report.json");
    REQUIRE(rep["folds"].size() == 5);
    for (const auto& f : rep["folds"]) CHECK(f.contains("dice"));
    CHECK(rep["summary"]["dice"].contains("mean"));
    CHECK(fs::exists(dir / "w" / "resolved_config.json"));
    CHECK(fs::exists(dir / "w" / "folds.csv"));
    for (int k = 1; k <= 5; ++k) {
        const auto fd = dir / "w" / ("fold_" + std::to_string(k));
        CHECK(fs::exists(fd / "seg_model.ckpt"));
        CHECK(fs::exists(fd / "clf_model.ckpt"));
        CHECK(fs::exists(fd / "record.json"));
    }
}
