#include <map>

#include <gtest/gtest.h>

#include "mlfd/error.hpp"
#include "mlfd/fusion.hpp"
#include "mlfd/rng.hpp"
#include "support/fixtures.hpp"
#include "support/temp_dir.hpp"

using namespace mlfd;
using namespace mlfd::fusion;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = standard_normal(rng);
    return t;
}

void set_identity(Adaptor& a) {
    Tensor& w = a.weight().value;
    w.fill(0.0);
    // Square (in,out) matrix or (O,C,1,1) kernel: both put the diagonal at i * c + i.
    const std::size_t c = a.out_shape()[0];
    for (std::size_t i = 0; i < c; ++i) w[i * c + i] = 1.0;
    a.bias().value.fill(0.0);
}

// Channel block [begin, end) of an (N,C,H,W) tensor.
Tensor channel_block(const Tensor& t, std::size_t begin, std::size_t end) {
    const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
    Tensor out({n, end - begin, t.dim(2), t.dim(3)});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = begin; k < end; ++k)
            for (std::size_t p = 0; p < hw; ++p) out[(i * (end - begin) + k - begin) * hw + p] = t[(i * c + k) * hw + p];
    return out;
}

struct Rig {
    std::vector<data::LabeledDataset> fam;
    std::vector<models::Model> teachers;
    JointTeacher jt;
};

Rig make_rig(double noise = 0.3, std::size_t teacher_epochs = 4) {
    Rig r;
    r.fam = data::gen_synthetic_family(testkit::tiny_family_spec(noise));
    r.teachers = testkit::trained_teachers(r.fam, teacher_epochs);
    r.jt = build_joint_teacher(testkit::joint_spec_for(r.fam, r.teachers), r.teachers, 5);
    return r;
}

}  // namespace

TEST(Fuse, ChannelCountsAdd) {
    std::vector<Adaptor> adaptors{Adaptor(0, {4, 2, 2}, {4, 2, 2}, 1), Adaptor(1, {6, 2, 2}, {6, 2, 2}, 2)};
    Tape tape(false);
    std::vector<Var> e{tape.constant(random_tensor({3, 4, 2, 2}, 1)), tape.constant(random_tensor({3, 6, 2, 2}, 2))};
    EXPECT_EQ(fuse_embeddings(tape, adaptors, e).shape(), (Shape{3, 10, 2, 2}));
    std::vector<Var> missing{e[0]};
    EXPECT_THROW(fuse_embeddings(tape, adaptors, missing), PreconditionError);
}

TEST(Fuse, SingleIdentityAdaptorIsIdentity) {
    std::vector<Adaptor> spatial{Adaptor(0, {3, 4, 4}, {3, 4, 4}, 1)};
    std::vector<Adaptor> vec{Adaptor(0, {5}, {5}, 1)};
    set_identity(spatial[0]);
    set_identity(vec[0]);
    Tape tape(false);
    const Tensor xs = random_tensor({2, 3, 4, 4}, 3), xv = random_tensor({2, 5}, 4);
    std::vector<Var> es{tape.constant(xs)}, ev{tape.constant(xv)};
    EXPECT_TRUE(bitwise_equal(fuse_embeddings(tape, spatial, es).value(), xs));
    EXPECT_TRUE(bitwise_equal(fuse_embeddings(tape, vec, ev).value(), xv));
}

TEST(Fuse, PermutingTeachersPermutesChannelBlocks) {
    Adaptor a(0, {4, 4, 4}, {4, 2, 2}, 7), b(1, {6, 2, 2}, {6, 2, 2}, 8);
    const Tensor ea = random_tensor({2, 4, 4, 4}, 5), eb = random_tensor({2, 6, 2, 2}, 6);
    Tape tape(false);
    std::vector<Adaptor> ab{a, b}, ba{b, a};
    std::vector<Var> xab{tape.constant(ea), tape.constant(eb)}, xba{tape.constant(eb), tape.constant(ea)};
    const Tensor f1 = fuse_embeddings(tape, ab, xab).value();
    const Tensor f2 = fuse_embeddings(tape, ba, xba).value();
    EXPECT_TRUE(bitwise_equal(channel_block(f1, 0, 4), channel_block(f2, 6, 10)));
    EXPECT_TRUE(bitwise_equal(channel_block(f1, 4, 10), channel_block(f2, 0, 6)));
    EXPECT_TRUE(bitwise_equal(channel_block(f1, 0, 4), a.apply(tape, tape.constant(ea)).value()));
}

TEST(Fuse, AdaptorsShareSpatialExtent) {
    std::vector<models::Model> teachers{models::Model(models::library_spec("cnn-small", {1, 16, 16}, 3), 1),
                                        models::Model(models::library_spec("cnn-se", {1, 16, 16}, 4), 2)};
    fusion::JointTeacherSpec s;
    for (const auto& t : teachers) s.teachers.push_back(t.spec());
    s.datasets = {"a", "b"};
    s.classes = {3, 4};
    s.levels = {"spatial2", "spatial1", "top"};
    JointTeacher jt(s, teachers, 3);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(jt.adaptor(i).out_shape(), (Shape{8, 8, 8}));
    EXPECT_EQ(jt.fused_shape(), (Shape{16, 8, 8}));
    EXPECT_EQ(jt.level_shape("spatial1"), (Shape{16, 4, 4}));
}

TEST(JointTeacher, CachedAndRawPathsAgreeBitwise) {
    testkit::TempDir tmp;
    auto rig = make_rig();
    EmbeddingCache cache(tmp.path(), rig.jt.teacher_hash());
    precompute_teacher_embeddings(rig.jt, rig.fam, cache);
    const std::vector<std::string> levels{"hidden1", "top"};
    for (std::size_t d = 0; d < rig.fam.size(); ++d) {
        const auto& ds = rig.fam[d];
        const Tensor x = ds.inputs.rows(ds.test);
        Tape t1(false), t2(false);
        auto raw = rig.jt.forward_raw(t1, t1.constant(x), d, levels, models::RunContext{});
        std::vector<Var> feats;
        for (std::size_t i = 0; i < rig.jt.teacher_count(); ++i)
            feats.push_back(t2.constant(cache.get(ds.name, data::Split::Test, teacher_level_id(i))));
        auto cached = rig.jt.forward_cached(t2, feats, d, levels, models::RunContext{});
        EXPECT_TRUE(bitwise_equal(raw.logits.value(), cached.logits.value()));
        EXPECT_EQ(raw.logits.value().dim(1), ds.num_classes);
        for (const auto& l : levels)
            EXPECT_TRUE(bitwise_equal(raw.embeddings.at(l).value(), cached.embeddings.at(l).value())) << l;
    }
    Tape t(false);
    EXPECT_THROW(rig.jt.forward_raw(t, t.constant(rig.fam[0].inputs.rows(rig.fam[0].test)), 7, levels,
                                    models::RunContext{}),
                 QueryError);
    EXPECT_THROW(rig.jt.dataset_index("nope"), QueryError);
}

TEST(JointTeacher, IdentityCompositionReproducesTeacherEmbedding) {
    auto fam = data::gen_synthetic_family(testkit::tiny_family_spec());
    std::vector<models::Model> one{models::Model(testkit::mlp_spec(fam[0]), 3)};
    auto spec = testkit::joint_spec_for({fam[0]}, one, {"top"});
    JointTeacher jt(spec, one, 1);
    EXPECT_TRUE(jt.trunk().layers().empty());
    set_identity(jt.adaptor(0));
    const Tensor x = fam[0].inputs.rows(fam[0].train);
    Tape tape(false);
    const std::vector<std::string> levels{"top"};
    auto out = jt.forward_raw(tape, tape.constant(x), 0, levels, models::RunContext{});
    EXPECT_TRUE(bitwise_equal(out.embeddings.at("top").value(), one[0].embed(x, "top")));
}

TEST(Cache, RoundTripAndFreshForwardBitwise) {
    testkit::TempDir tmp;
    auto rig = make_rig();
    EmbeddingCache cache(tmp.path(), rig.jt.teacher_hash());
    const Tensor values = random_tensor({1100, 3, 2, 2}, 9);
    std::vector<std::size_t> ids(1100);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 5000 - i;
    cache.put("x", data::Split::Val, "lvl", ids, values);
    EXPECT_TRUE(bitwise_equal(cache.get("x", data::Split::Val, "lvl"), values));
    EXPECT_EQ(cache.samples("x", data::Split::Val, "lvl"), ids);
    EXPECT_TRUE(bitwise_equal(cache.get_sample("x", data::Split::Val, "lvl", ids[700]),
                              values.row_range(700, 701).reshaped({3, 2, 2})));

    precompute_teacher_embeddings(rig.jt, rig.fam, cache);
    for (std::size_t i = 0; i < rig.jt.teacher_count(); ++i)
        for (const auto& d : rig.fam) {
            const Tensor fresh = rig.jt.teacher(i).embed(d.inputs.rows(d.train), "hidden1");
            EXPECT_TRUE(bitwise_equal(cache.get(d.name, data::Split::Train, teacher_level_id(i)), fresh));
        }
}

TEST(Cache, EntryCountPerTeacherAndSample) {
    testkit::TempDir tmp;
    auto spec = testkit::tiny_family_spec();
    spec.m = 1;
    spec.classes = {4};
    spec.train_samples = 70;
    spec.test_samples = 30;
    auto fam = data::gen_synthetic_family(spec);
    std::vector<models::Model> teachers;
    for (std::size_t i = 0; i < 3; ++i) teachers.emplace_back(testkit::mlp_spec(fam[0]), 10 + i);
    auto jt = build_joint_teacher(testkit::joint_spec_for(fam, teachers), teachers, 2);
    EmbeddingCache cache(tmp.path(), jt.teacher_hash());
    precompute_teacher_embeddings(jt, fam, cache);
    EXPECT_EQ(cache.entry_count(), 300u);
}

TEST(Cache, RerunIsNoOp) {
    testkit::TempDir tmp;
    auto rig = make_rig();
    EmbeddingCache cache(tmp.path(), rig.jt.teacher_hash());
    precompute_teacher_embeddings(rig.jt, rig.fam, cache);
    std::map<std::string, std::pair<std::filesystem::file_time_type, std::uint64_t>> before;
    for (const auto& e : std::filesystem::recursive_directory_iterator(cache.dir()))
        if (e.is_regular_file()) before[e.path().string()] = {e.last_write_time(), file_checksum(e.path())};
    precompute_teacher_embeddings(rig.jt, rig.fam, cache);
    std::size_t files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(cache.dir()))
        if (e.is_regular_file()) {
            ++files;
            const auto it = before.find(e.path().string());
            ASSERT_NE(it, before.end()) << e.path();
            EXPECT_EQ(it->second.first, e.last_write_time()) << e.path();
            EXPECT_EQ(it->second.second, file_checksum(e.path())) << e.path();
        }
    EXPECT_EQ(files, before.size());
}

TEST(Cache, StaleOwnerIsRefused) {
    testkit::TempDir tmp;
    auto rig = make_rig();
    const std::string old_hash = rig.jt.teacher_hash();
    EmbeddingCache cache(tmp.path(), old_hash);
    precompute_teacher_embeddings(rig.jt, rig.fam, cache);

    // Any change to a teacher changes the owner hash, and the old cache is refused.
    auto changed = rig.teachers;
    changed[1].head_bias().value[0] += 1e-9;
    auto jt2 = build_joint_teacher(testkit::joint_spec_for(rig.fam, changed), changed, 5);
    EXPECT_NE(jt2.teacher_hash(), old_hash);
    EXPECT_THROW(train_joint_teacher(jt2, rig.fam, cache, testkit::quick_train(1), 1), StaleCacheError);
    EXPECT_THROW(precompute_teacher_embeddings(jt2, rig.fam, cache), StaleCacheError);

    // A directory whose manifest names another owner is refused on open.
    std::filesystem::rename(cache.dir(), tmp.path() / jt2.teacher_hash());
    EXPECT_THROW(EmbeddingCache(tmp.path(), jt2.teacher_hash()), StaleCacheError);
}

TEST(TrainJoint, FrozenBackbonesAndSeparableLoss) {
    testkit::TempDir tmp;
    auto fam = data::gen_synthetic_family(testkit::tiny_family_spec(0.0));
    auto teachers = testkit::trained_teachers(fam, 6);
    auto spec = testkit::joint_spec_for(fam, teachers);
    spec.dropout = 0.0;
    spec.dense_dropout = 0.0;
    auto jt = build_joint_teacher(spec, teachers, 3);
    std::vector<Tensor> before;
    for (auto* p : jt.backbone_parameters()) before.push_back(p->value);
    EmbeddingCache cache(tmp.path(), jt.teacher_hash());
    precompute_teacher_embeddings(jt, fam, cache);
    auto cfg = testkit::quick_train(40, 1e-2);
    const auto log = train_joint_teacher(jt, fam, cache, cfg, 4);
    const auto after = jt.backbone_parameters();
    for (std::size_t i = 0; i < after.size(); ++i) EXPECT_TRUE(bitwise_equal(after[i]->value, before[i]));

    ASSERT_EQ(log.epochs.size(), 40u);
    for (const auto& e : log.epochs)
        for (const auto& t : e.tasks) {
            EXPECT_LE(t.test_acc1, t.test_acc5);
            EXPECT_TRUE(std::isfinite(t.components.at(0)));
        }
    for (const auto& t : log.epochs.back().tasks) EXPECT_LT(t.components.at(0), 0.01);
}

TEST(TrainJoint, SaveLoadRoundTrip) {
    testkit::TempDir tmp;
    auto rig = make_rig();
    EmbeddingCache cache(tmp.path() / "cache", rig.jt.teacher_hash());
    precompute_teacher_embeddings(rig.jt, rig.fam, cache);
    train_joint_teacher(rig.jt, rig.fam, cache, testkit::quick_train(2), 4);
    save_joint_teacher(rig.jt, tmp.path() / "jt");
    auto back = load_joint_teacher(tmp.path() / "jt");
    EXPECT_EQ(back.fingerprint(), rig.jt.fingerprint());
    EXPECT_EQ(back.teacher_hash(), rig.jt.teacher_hash());
    EXPECT_THROW(load_joint_teacher(tmp.path() / "missing"), PreconditionError);
}
