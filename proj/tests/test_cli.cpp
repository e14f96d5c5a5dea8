#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "s4mil/checkpoint.hpp"
#include "s4mil/data_io.hpp"
#include "s4mil/heatmap.hpp"
#include "s4mil/model.hpp"

using namespace s4mil;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("s4mil_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunResult run(const std::string& args) {
    static int counter = 0;
    const auto base = fs::temp_directory_path() / ("s4mil_cli_io_" + std::to_string(counter++));
    const std::string cmd = std::string(S4MIL_CLI) + " " + args + " >" + base.string() + ".out 2>" + base.string() +
                            ".err";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(base.string() + ".out");
    r.err = slurp(base.string() + ".err");
    fs::remove(base.string() + ".out");
    fs::remove(base.string() + ".err");
    return r;
}

std::string value_of(const std::string& text, const std::string& key) {
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
    return {};
}

void expect_single_line_error(const RunResult& r, const std::string& category) {
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(r.err.rfind("error[" + category + "]: ", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

// Tiny model and short run so a 10-fold train finishes quickly.
const std::string tiny_train =
    "--set hidden_dim=8 --set state_dim=4 --set max_epochs=2 --set patience=1 --set synth.max_length=160 ";

}  // namespace

TEST(Cli, ParamCountWritesBothTotals) {
    const auto dir = scratch("params");
    const auto r = run("param-count --output " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto text = slurp(dir / "param_count.txt");
    EXPECT_EQ(value_of(text, "closed_form"), "1085954");
    EXPECT_EQ(value_of(text, "instantiated"), "1085954");
    const auto wide = run("param-count --set state_dim=128 --output " + dir.string());
    ASSERT_EQ(wide.code, 0) << wide.err;
    EXPECT_EQ(value_of(slurp(dir / "param_count.txt"), "closed_form"), "1184258");
    EXPECT_TRUE(fs::exists(dir / "resolved_config.txt"));
}

TEST(Cli, KernelCheckPassesFailsUnderFaultAndHandlesZeroTrials) {
    const auto dir = scratch("kernel");
    const auto ok = run("kernel-check --output " + dir.string());
    EXPECT_EQ(ok.code, 0) << ok.err;
    EXPECT_TRUE(fs::exists(dir / "kernel_check.csv"));
    const auto bad = run("kernel-check --inject-fault --trials 5 --output " + dir.string());
    expect_single_line_error(bad, "check");
    const auto none = run("kernel-check --trials 0 --output " + dir.string());
    EXPECT_EQ(none.code, 0) << none.err;
    EXPECT_NE(none.out.find("0 trials"), std::string::npos) << none.out;
}

TEST(Cli, GradCheckPasses) {
    const auto dir = scratch("grad");
    const auto r = run("grad-check --output " + dir.string());
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "grad_check.csv"));
}

TEST(Cli, ErrorsAreSingleLinesWithCategoryPrefix) {
    const auto dir = scratch("errors");
    expect_single_line_error(run("param-count --set no_such_key=1 --output " + dir.string()), "config");
    expect_single_line_error(run("param-count --set state_dim=7 --output " + dir.string()), "config");
    expect_single_line_error(run("stats --manifest /nonexistent/manifest.csv --output " + dir.string()), "io");
    expect_single_line_error(run("--config /nonexistent/run.cfg param-count"), "io");
    const auto usage = run("no-such-command");
    EXPECT_EQ(usage.code, 2);
    EXPECT_EQ(usage.err.rfind("error[usage]: ", 0), 0u) << usage.err;
}

TEST(Cli, ConfigFileAndOverridesResolveInOrder) {
    const auto dir = scratch("config");
    std::ofstream(dir / "run.cfg") << "# comment\nstate_dim = 128\nhidden_dim=512\n";
    const auto r = run("--config " + (dir / "run.cfg").string() + " --set hidden_dim=256 param-count --output " +
                       (dir / "out").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto resolved = slurp(dir / "out" / "resolved_config.txt");
    EXPECT_EQ(value_of(resolved, "state_dim"), "128");
    EXPECT_EQ(value_of(resolved, "hidden_dim"), "256");
    EXPECT_EQ(value_of(resolved, "output"), (dir / "out").string());
}

TEST(Cli, SynthAndStatsRoundTrip) {
    const auto dir = scratch("synth");
    const auto r = run("synth --synthetic needle --set synth.num_bags=12 --seed 4 --output " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto bags = load_manifest(dir / "manifest.csv");
    EXPECT_EQ(bags.size(), 12u);
    const auto s = run("stats --manifest " + (dir / "manifest.csv").string() + " --output " + (dir / "st").string());
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_EQ(value_of(slurp(dir / "st" / "stats.txt"), "count"), "12");
}

TEST(Cli, TrainWritesTenFoldsAndIsDeterministic) {
    const auto dir = scratch("train");
    const std::string common = "train --synthetic needle --folds 10 --seed 3 " + tiny_train;
    const auto a = run(common + "--output " + (dir / "a").string());
    ASSERT_EQ(a.code, 0) << a.err;
    for (int f = 0; f < 10; ++f) {
        std::ostringstream name;
        name << "fold_0" << f;
        EXPECT_TRUE(fs::exists(dir / "a" / name.str() / "checkpoint.s4mc")) << name.str();
        EXPECT_TRUE(fs::exists(dir / "a" / name.str() / "history.csv")) << name.str();
    }
    const auto summary = slurp(dir / "a" / "summary.csv");
    ASSERT_FALSE(summary.empty());
    EXPECT_NE(summary.find("\nmean,"), std::string::npos);

    const auto b = run(common + "--threads 1 --output " + (dir / "b").string());
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(slurp(dir / "b" / "summary.csv"), summary);
    EXPECT_EQ(slurp(dir / "b" / "fold_04" / "checkpoint.s4mc"), slurp(dir / "a" / "fold_04" / "checkpoint.s4mc"));

    // The resolved config alone reproduces the run.
    const auto c = run("--config " + (dir / "a" / "resolved_config.txt").string() + " --output " +
                       (dir / "c").string() + " train");
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_EQ(slurp(dir / "c" / "summary.csv"), summary);

    const auto e = run("evaluate --synthetic needle --seed 3 " + tiny_train + "--checkpoint " +
                       (dir / "a" / "fold_00" / "checkpoint.s4mc").string() + " --output " + (dir / "e").string());
    ASSERT_EQ(e.code, 0) << e.err;
    EXPECT_TRUE(fs::exists(dir / "e" / "predictions.csv"));
    EXPECT_TRUE(fs::exists(dir / "e" / "metrics.csv"));
}

TEST(Cli, TooManyFoldsFailsBeforeTraining) {
    const auto dir = scratch("folds");
    const auto r = run("train --synthetic needle --set synth.num_bags=20 --folds 50 " + tiny_train + "--output " +
                       dir.string());
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(r.err.rfind("error[", 0), 0u) << r.err;
    EXPECT_FALSE(fs::exists(dir / "fold_00"));
}

TEST(Cli, HeatmapSingletonAndHole) {
    const auto dir = scratch("heatmap");
    ModelConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dim = 4;
    cfg.state_dim = 4;
    cfg.multitask = true;
    const auto model = MilModel<float>::initialize(cfg, 9);
    write_checkpoint(dir / "model.s4mc", model);

    Bag one;
    one.id = "one";
    one.features = Tensor<float>::Constant(1, 3, 0.5f);
    one.coords = std::vector<Coord>{{0, 0}};
    Bag two;
    two.id = "two";
    two.slide_label = 1;
    two.features = Tensor<float>::Constant(2, 3, -0.25f);
    two.coords = std::vector<Coord>{{0, 0}, {2, 0}};
    Bag bare;
    bare.id = "bare";
    bare.features = Tensor<float>::Zero(2, 3);
    const std::vector<Bag> bags{one, two, bare};
    const auto manifest = save_dataset(dir / "data", bags);

    const std::string common = "export-heatmap --checkpoint " + (dir / "model.s4mc").string() + " --manifest " +
                               manifest.string() + " --output " + (dir / "out").string() + " --bag-id ";
    ASSERT_EQ(run(common + "one").code, 0);
    std::ifstream f1(dir / "out" / "heatmap_one.txt");
    const auto h1 = parse_heatmap(f1);
    EXPECT_EQ(h1.rows, 1u);
    EXPECT_EQ(h1.cols, 1u);
    const auto p1 = model.forward(one.features).patch_probabilities(0, 1);
    EXPECT_EQ(h1.values[0], static_cast<double>(p1));

    ASSERT_EQ(run(common + "two").code, 0);
    std::ifstream f2(dir / "out" / "heatmap_two.txt");
    const auto h2 = parse_heatmap(f2);
    EXPECT_EQ(h2.rows, 3u);
    EXPECT_EQ(h2.cols, 1u);
    EXPECT_EQ(h2.values[1], heatmap_empty);
    EXPECT_NE(h2.values[0], heatmap_empty);
    EXPECT_NE(h2.values[2], heatmap_empty);

    expect_single_line_error(run(common + "bare"), "contract");

    cfg.multitask = false;
    write_checkpoint(dir / "plain.s4mc", MilModel<float>::initialize(cfg, 9));
    expect_single_line_error(run("export-heatmap --checkpoint " + (dir / "plain.s4mc").string() + " --manifest " +
                                 manifest.string() + " --bag-id one --output " + (dir / "out").string()),
                             "config");
}

TEST(Cli, BenchSingleRepeatReportsZeroSpreadAndLengthOneAgrees) {
    const auto dir = scratch("bench");
    const auto r = run("bench --length 1 --dim 8 --repeats 1 --output " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream csv(dir / "bench.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "mode,length,dim,repeats,mean_seconds,std_seconds");
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
        EXPECT_EQ(line.substr(line.rfind(',') + 1), "0") << line;
    }
    EXPECT_EQ(rows, 4);
    const auto summary = slurp(dir / "bench_summary.txt");
    EXPECT_LE(std::stod(value_of(summary, "max_probability_difference")), 1e-5);
}
