#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "mlfd/pipeline.hpp"
#include "support/temp_dir.hpp"

namespace fs = std::filesystem;
namespace testkit = mlfd::testkit;

namespace {

const std::string kCli = MLFD_CLI_PATH;
const std::string kTiny = (fs::path(MLFD_SOURCE_DIR) / "configs" / "tiny.json").string();

struct Result {
    int code = -1;
    std::string out;
};

Result run(const std::string& args, const std::string& env = "") {
    testkit::TempDir capture;
    const auto file = capture.path() / "out.txt";
    const std::string cmd = env + " \"" + kCli + "\" " + args + " >\"" + file.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(file, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
}

std::string common(const fs::path& out) { return "--config \"" + kTiny + "\" --out \"" + out.string() + "\" -q"; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Cli, ConfigReferenceListsKeys) {
    const auto r = run("config-reference");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("kd.tau"), std::string::npos);
    EXPECT_NE(r.out.find("taps.levels"), std::string::npos);
}

TEST(Cli, UnknownKeyExitsWithConfigCode) {
    testkit::TempDir tmp;
    const auto r = run("gen-data " + common(tmp.path()) + " --set kd.gamma=1");
    EXPECT_EQ(r.code, 2) << r.out;
    EXPECT_NE(r.out.find("kd.gamma"), std::string::npos);
}

TEST(Cli, MissingSubcommandIsUsageError) { EXPECT_EQ(run("").code, 2); }

TEST(Cli, DistillBeforeJointIsPrecondition) {
    testkit::TempDir tmp;
    ASSERT_EQ(run("train-teacher " + common(tmp.path())).code, 0);
    const auto r = run("distill " + common(tmp.path()));
    EXPECT_EQ(r.code, 3) << r.out;
}

TEST(Cli, StagewiseRunThenInspect) {
    testkit::TempDir tmp;
    for (const char* stage : {"gen-data", "train-teacher", "build-cache", "train-joint", "extract-targets", "distill",
                              "baseline"})
        ASSERT_EQ(run(std::string(stage) + " " + common(tmp.path())).code, 0) << stage;

    const auto report = run("report " + common(tmp.path()));
    ASSERT_EQ(report.code, 0) << report.out;
    const auto root = tmp.path() / "tiny";
    const auto first = slurp(root / "report.csv");
    ASSERT_EQ(run("report " + common(tmp.path())).code, 0);
    EXPECT_EQ(slurp(root / "report.csv"), first);
    EXPECT_NE(first.find("student_1"), std::string::npos);

    const auto dest = tmp.path() / "dump";
    const auto dump = run("dump-embeddings " + common(tmp.path()) + " --model student_2 --level hidden1 --dest \"" +
                          dest.string() + "\"");
    ASSERT_EQ(dump.code, 0) << dump.out;
    const auto index = slurp(dest / "index.csv");
    std::size_t rows = 0, files = 0;
    for (char ch : index) rows += ch == '\n';
    for (const auto& e : fs::recursive_directory_iterator(dest)) files += e.path().extension() == ".tnsr";
    const auto fam = mlfd::pipeline::Experiment(mlfd::pipeline::load_config(fs::path(kTiny), {}), {}).config().family;
    const std::size_t test2 = fam.test_samples;
    EXPECT_EQ(files, test2);
    EXPECT_EQ(rows, test2 + 1);

    const auto joint = run("dump-embeddings " + common(tmp.path()) + " --model joint_teacher --level top --dest \"" +
                           (tmp.path() / "jdump").string() + "\"");
    EXPECT_EQ(joint.code, 0) << joint.out;
    EXPECT_EQ(run("dump-embeddings " + common(tmp.path()) + " --model student_2 --level nope").code, 3);

    // Students evaluate from their checkpoints alone; the teacher feature cache is not consulted.
    const auto before = run("eval " + common(tmp.path()) + " --model student_1");
    ASSERT_EQ(before.code, 0) << before.out;
    fs::remove_all(root / "cache");
    const auto after = run("eval " + common(tmp.path()) + " --model student_1",
                           "MLFD_CACHE_DIR=\"" + (tmp.path() / "elsewhere").string() + "\"");
    ASSERT_EQ(after.code, 0) << after.out;
    EXPECT_EQ(before.out, after.out);
    EXPECT_NE(after.out.find("student_1"), std::string::npos);
}

TEST(Cli, RunAllIsByteStableAcrossOutputDirs) {
    testkit::TempDir a, b;
    ASSERT_EQ(run("run-all " + common(a.path())).code, 0);
    ASSERT_EQ(run("run-all " + common(b.path())).code, 0);
    EXPECT_EQ(slurp(a.path() / "tiny" / "report.csv"), slurp(b.path() / "tiny" / "report.csv"));
}
