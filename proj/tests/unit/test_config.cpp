#include <gtest/gtest.h>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"

using namespace mlfd;
using namespace mlfd::pipeline;
using nlohmann::json;

namespace {

ResolvedConfig resolve(const json& user, std::vector<std::string> overrides = {}) {
    return resolve_config(user, overrides, "<test>");
}

std::string config_error(const json& user, std::vector<std::string> overrides = {}) {
    try {
        resolve(user, overrides);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, DefaultsResolveAndValidate) {
    const auto r = resolve(json::object());
    const auto c = r.experiment();
    EXPECT_EQ(c.family.m, 3u);
    EXPECT_EQ(c.seeds.size(), 5u);
    EXPECT_EQ(c.teachers.size(), 3u);
    EXPECT_EQ(c.kd.size(), 3u);
    EXPECT_EQ(c.joint_train.policy.max_epochs, c.teacher_train.policy.max_epochs / 5);
    EXPECT_FALSE(r.defaulted.empty());
}

TEST(Config, HashIndependentOfKeyOrder) {
    const json a = json::parse(R"({"data": {"m": 2, "classes": [3, 4]},
                                   "models": {"teachers": ["mlp-small"], "students": ["mlp-small"]},
                                   "kd": {"alpha": 0.3, "tau": 3}})");
    const json b = json::parse(R"({"kd": {"tau": 3, "alpha": 0.3},
                                   "models": {"students": ["mlp-small"], "teachers": ["mlp-small"]},
                                   "data": {"classes": [3, 4], "m": 2}})");
    EXPECT_EQ(resolve(a).hash(), resolve(b).hash());
    EXPECT_NE(resolve(a).hash(), resolve(json::object()).hash());
}

TEST(Config, HashRoundTripsThroughDump) {
    const auto r = resolve(json::parse(R"({"kd": {"alpha": 0.1}})"));
    const auto again = resolve(json::parse(r.doc.dump()));
    EXPECT_EQ(r.hash(), again.hash());
    EXPECT_TRUE(again.defaulted.empty());
}

TEST(Config, UnknownKeysReportedTogether) {
    const auto msg = config_error(json::parse(R"({"kd": {"alpah": 1}, "bogus": 2, "data": {"mm": 3}})"));
    EXPECT_NE(msg.find("kd.alpah"), std::string::npos) << msg;
    EXPECT_NE(msg.find("bogus"), std::string::npos) << msg;
    EXPECT_NE(msg.find("data.mm"), std::string::npos) << msg;
}

TEST(Config, UnknownOverrideKeyIsReported) {
    const auto msg = config_error(json::object(), {"train.studnet.max_epochs=3"});
    EXPECT_NE(msg.find("train.studnet.max_epochs"), std::string::npos) << msg;
}

TEST(Config, TypeMismatchIsConfigError) {
    const auto msg = config_error(json::parse(R"({"kd": {"alpha": "high"}})"));
    EXPECT_NE(msg.find("kd.alpha"), std::string::npos) << msg;
    EXPECT_FALSE(config_error(json::parse(R"({"data": {"classes": 5}})")).empty());
}

TEST(Config, OverridesParseJsonOrString) {
    const auto r = resolve(json::object(), {"train.student.max_epochs=27", "kd.betas=[0.5, 0.1]",
                                            "experiment.variant=same-arch", "experiment.id=\"abc\""});
    const auto c = r.experiment();
    EXPECT_EQ(c.student_train.policy.max_epochs, 27u);
    EXPECT_EQ(c.kd[1].betas, (std::vector<double>{0.5, 0.1}));
    EXPECT_EQ(c.variant, Variant::SameArch);
    EXPECT_EQ(c.id, "abc");
    EXPECT_THROW(resolve(json::object(), {"novalue"}), ConfigError);
}

TEST(Config, OverrideWinsOverFile) {
    const auto r = resolve(json::parse(R"({"kd": {"tau": 4}})"), {"kd.tau=1.5"});
    EXPECT_EQ(r.experiment().kd[0].tau, 1.5);
}

TEST(Config, SingleEntryListsBroadcast) {
    const auto c = resolve(json::parse(R"({"data": {"classes": [6]}, "models": {"teachers": ["mlp-small"]}})"))
                       .experiment();
    EXPECT_EQ(c.family.classes, (std::vector<std::size_t>{6, 6, 6}));
    EXPECT_EQ(c.teachers.size(), 3u);
    EXPECT_FALSE(config_error(json::parse(R"({"models": {"teachers": ["mlp-small", "cnn-se"]}})")).empty());
}

TEST(Config, PerDatasetKdOverrides) {
    const auto c =
        resolve(json::parse(R"({"kd": {"per_dataset": [{"alpha": 0.1}, {}, {"tau": 5}]}})")).experiment();
    EXPECT_EQ(c.kd[0].alpha, 0.1);
    EXPECT_EQ(c.kd[1].alpha, 0.6);
    EXPECT_EQ(c.kd[2].tau, 5.0);
    EXPECT_FALSE(config_error(json::parse(R"({"kd": {"per_dataset": [{"gamma": 1}, {}, {}]}})")).empty());
}

TEST(Config, InvalidValuesRejected) {
    EXPECT_FALSE(config_error(json::parse(R"({"experiment": {"variant": "nope"}})")).empty());
    EXPECT_FALSE(config_error(json::parse(R"({"kd": {"tau": 0}})")).empty());
    EXPECT_FALSE(config_error(json::parse(R"({"kd": {"alpha": -0.5}})")).empty());
    EXPECT_FALSE(config_error(json::parse(R"({"data": {"render": "svg"}})")).empty());
    EXPECT_THROW(resolve(json::array()), ConfigError);
}

TEST(Config, JobSeedsDependOnJobAndReplicate) {
    const auto c = resolve(json::object()).experiment();
    EXPECT_EQ(c.job_seed("model_1", 1), c.job_seed("model_1", 1));
    EXPECT_NE(c.job_seed("model_1", 1), c.job_seed("model_2", 1));
    EXPECT_NE(c.job_seed("model_1", 1), c.job_seed("model_1", 2));
}

TEST(Config, ReferenceListsEveryKey) {
    const auto ref = config_reference();
    for (const char* key : {"kd.alpha", "taps.levels", "train.joint", "fusion.dropout", "vary_m.values"})
        EXPECT_NE(ref.find(key), std::string::npos) << key;
}

TEST(CsvHelpers, QuotingAndFixedFormat) {
    EXPECT_EQ(csv_field("plain"), "plain");
    EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    EXPECT_EQ(format_fixed(12.34567), "12.3457");
    EXPECT_EQ(format_fixed(0.0), "0.0000");
}
