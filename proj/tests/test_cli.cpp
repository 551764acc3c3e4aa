/*
 * Copyright 2026 The QuarFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "quar/cli.hpp"

using namespace quar;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "quarflow");
    std::vector<const char*> argv;
    for (const auto& a : args)
        argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text)
{
    std::vector<std::string> v;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);)
        v.push_back(l);
    return v;
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        dir_ = fs::temp_directory_path() / "quarflow_cli_test";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write(dir_ / "vec.json", R"({"seed": 3,
  "dataset": {"kind": "eight_gaussians", "heldout_size": 300},
  "model": {"kind": "quar", "flows": 2, "hidden": [8, 8]},
  "train": {"batch_size": 32, "updates": 20}})");
        write(dir_ / "img.json", R"({"seed": 3,
  "dataset": {"kind": "toy_images", "side": 4, "levels": 4, "patterns": 4, "train_size": 64, "heldout_size": 16},
  "model": {"kind": "quar_conv", "flows": 2, "conv_multiplier": 2},
  "train": {"batch_size": 8, "updates": 3}})");
        const auto r = cli({"train", "--config", (dir_ / "vec.json").string(), "--out", model().string(), "--quiet"});
        ASSERT_EQ(r.code, 0) << r.err;
    }

    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }
    static fs::path model() { return dir_ / "vec.qf"; }
    static std::string path(const std::string& name) { return (dir_ / name).string(); }

    static fs::path dir_;
};

fs::path Cli::dir_;

} // namespace

TEST_F(Cli, TrainWritesModelAndMetrics)
{
    ASSERT_TRUE(fs::exists(model()));
    const auto metrics = json::parse(slurp(model().string() + ".metrics.json"));
    for (const char* k : {"config", "seed", "loss_history", "heldout_nll", "bpd", "pass_counts", "timings_ms", "version"})
        EXPECT_TRUE(metrics.contains(k)) << k;
    EXPECT_EQ(metrics["loss_history"].size(), 20u);
    EXPECT_EQ(metrics["seed"], 3);
}

TEST_F(Cli, TrainOverridesAndIsReproducible)
{
    const auto a = cli({"train", "--config", path("vec.json"), "--out", path("a.qf"), "--metrics", path("a.json"),
                        "--updates", "4", "--seed", "11", "--quiet"});
    const auto b = cli({"train", "--config", path("vec.json"), "--out", path("b.qf"), "--metrics", path("b.json"),
                        "--updates", "4", "--seed", "11", "--quiet"});
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(b.code, 0) << b.err;
    const auto ja = json::parse(slurp(path("a.json")));
    const auto jb = json::parse(slurp(path("b.json")));
    EXPECT_EQ(ja["seed"], 11);
    EXPECT_EQ(ja["loss_history"].size(), 4u);
    EXPECT_EQ(ja["loss_history"], jb["loss_history"]);
    EXPECT_EQ(slurp(path("a.qf")), slurp(path("b.qf")));
    const auto base = json::parse(slurp(model().string() + ".metrics.json"));
    EXPECT_NE(ja["loss_history"][0], base["loss_history"][0]);
}

TEST_F(Cli, Eval)
{
    const auto r = cli({"eval", "--model", model().string(), "--out", path("eval.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(slurp(path("eval.json")));
    EXPECT_TRUE(j["nll"].is_number());
    EXPECT_EQ(j["pass_counts"]["residual_forward"], 2);
    EXPECT_EQ(j["pass_counts"]["vjp"], 0);
    EXPECT_EQ(cli({"eval", "--model", model().string(), "--live"}).code, 0);
}

TEST_F(Cli, SampleVectorsAsCsv)
{
    const auto r = cli({"sample", "--model", model().string(), "--n", "25", "--out", path("s.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto l = lines(slurp(path("s.csv")));
    ASSERT_EQ(l.size(), 26u);
    EXPECT_EQ(l[0], "x0,x1");
}

TEST_F(Cli, SampleImagesAsPgm)
{
    const auto t = cli({"train", "--config", path("img.json"), "--out", path("img.qf"), "--quiet"});
    ASSERT_EQ(t.code, 0) << t.err;
    const auto r = cli({"sample", "--model", path("img.qf"), "--n", "3", "--out", path("imgs")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto idx = lines(slurp(path("imgs/index.txt")));
    ASSERT_EQ(idx.size(), 3u);
    for (const auto& name : idx) {
        const auto pgm = slurp(dir_ / "imgs" / name);
        EXPECT_EQ(pgm.substr(0, 3), "P5\n");
        EXPECT_EQ(pgm.size(), std::string("P5\n4 4\n255\n").size() + 16);
    }
    const auto e = json::parse(cli({"eval", "--model", path("img.qf")}).out);
    EXPECT_TRUE(e["bpd"].is_number());
}

TEST_F(Cli, GridCsv)
{
    const auto r = cli({"grid", "--model", model().string(), "--bounds", "-6", "6", "-6", "6", "--res", "200", "--out",
                        path("grid.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto l = lines(slurp(path("grid.csv")));
    ASSERT_EQ(l.size(), 1u + 200u * 200u);
    EXPECT_EQ(l[0], "x,y,logp");
    EXPECT_NE(r.out.find("integral="), std::string::npos);
}

TEST_F(Cli, TraceCsv)
{
    const auto r = cli({"trace", "--model", model().string(), "--points", "2", "--out", path("trace.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto l = lines(slurp(path("trace.csv")));
    EXPECT_EQ(l[0], "label,step,x,y");
    // 5 steps (2 blocks, 3 actnorms) plus the input, 8 modes x 2 points
    EXPECT_EQ(l.size(), 1u + 6u * 16u);
}

TEST_F(Cli, GradCheck)
{
    for (const char* cfg : {"vec.json", "img.json"}) {
        const auto r = cli({"gradcheck", "--config", path(cfg), "--batch", "3"});
        ASSERT_EQ(r.code, 0) << cfg << ": " << r.err << r.out;
        EXPECT_NE(r.out.find("overall max_rel_error="), std::string::npos);
    }
    const auto strict = cli({"gradcheck", "--config", path("vec.json"), "--tol", "0"});
    EXPECT_EQ(strict.code, 2);
    EXPECT_NE(strict.err.find("gradient check failed"), std::string::npos);
}

TEST_F(Cli, Bench)
{
    const auto r = cli({"bench", "--config", path("vec.json"), "--batch", "16", "--terms", "5", "--reps", "1", "--out",
                        path("bench.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(slurp(path("bench.json")));
    EXPECT_EQ(j["pass_counts"]["quar_forward_per_block"], 1.0);
    EXPECT_EQ(j["pass_counts"]["residual_vjp_per_block"], 5.0);
    EXPECT_EQ(cli({"bench", "--config", path("img.json")}).code, 1);
}

TEST_F(Cli, MissingConfigNamesPath)
{
    const auto r = cli({"train", "--config", path("nope.json"), "--out", path("x.qf")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find(path("nope.json")), std::string::npos);
}

TEST_F(Cli, UsageErrors)
{
    auto r = cli({"grid", "--model", model().string(), "--out", path("g.csv"), "--bogus"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("bogus"), std::string::npos);
    EXPECT_EQ(cli({}).code, 1);
    EXPECT_EQ(cli({"eval"}).code, 1);
    EXPECT_EQ(cli({"eval", "--model", path("missing.qf")}).code, 1);
    r = cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("train"), std::string::npos);
}

TEST_F(Cli, CorruptModelFile)
{
    auto bytes = slurp(model());
    write(dir_ / "cut.qf", bytes.substr(0, bytes.size() / 2));
    const auto r = cli({"eval", "--model", path("cut.qf")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("error"), std::string::npos);
}
