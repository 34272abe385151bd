#include <random>

#include <gtest/gtest.h>

#include "dedup3d/evaluation.hpp"
#include "oracles.hpp"

using namespace dedup3d;

namespace {

QueryScore pos(const char* q, double c, const char* top1, const char* gt) {
    return {CaseId(q), c, 1, CaseId(top1), QueryLabel::duplicate(CaseId(gt))};
}

QueryScore neg(const char* q, double c, const char* top1 = "x") {
    return {CaseId(q), c, 1, CaseId(top1), QueryLabel::non_duplicate()};
}

ManifestEntry entry(const std::string& id, const std::string& task) {
    return ManifestEntry{CaseId(id), id + ".medb", Bucket::UNASSIGNED, std::nullopt, task};
}

std::vector<std::string> names(const std::vector<CaseId>& ids) {
    std::vector<std::string> out;
    for (const auto& id : ids) out.push_back(id.str());
    return out;
}

}  // namespace

TEST(Stage1, ClassifyClosedRule) {
    EXPECT_EQ(stage1_classify(neg("q", 1.0), 0.7711), Prediction::PredictedDuplicate);
    EXPECT_EQ(stage1_classify(neg("q", 0.0), 0.1), Prediction::PredictedNonDuplicate);
    EXPECT_EQ(stage1_classify(neg("q", 0.25), 0.25), Prediction::PredictedDuplicate);
}

TEST(Stage2, HandExample) {
    const std::vector<QueryScore> s = {pos("p1", 0.8, "g1", "g1"), pos("p2", 0.8, "zz", "g2"), neg("n1", 0.3)};
    const auto m = stage2_confusion(s, 0.5);
    EXPECT_DOUBLE_EQ(m.stage1_sensitivity, 1.0);
    EXPECT_DOUBLE_EQ(m.stage1_specificity, 1.0);
    EXPECT_DOUBLE_EQ(m.stage2_sensitivity, 0.5);
    EXPECT_DOUBLE_EQ(m.stage2_spec_strict, 1.0);
    EXPECT_DOUBLE_EQ(m.stage2_spec_folded, 0.5);
    EXPECT_EQ(m.id_mismatches, 1u);
    EXPECT_EQ(m.stage2, (ConfusionCounts{1, 1, 1, 0}));
    EXPECT_EQ(m.stage1, (ConfusionCounts{2, 0, 1, 0}));
    ASSERT_TRUE(m.auc.has_value());
    EXPECT_DOUBLE_EQ(*m.auc, 1.0);
}

TEST(Stage2, AllCorrect) {
    const std::vector<QueryScore> s = {pos("p1", 1.0, "a", "a"), pos("p2", 0.9, "b", "b"), neg("n1", 0.1), neg("n2", 0.2)};
    const auto m = stage2_confusion(s, 0.5);
    EXPECT_DOUBLE_EQ(m.stage1_sensitivity, 1.0);
    EXPECT_DOUBLE_EQ(m.stage2_sensitivity, 1.0);
    EXPECT_DOUBLE_EQ(m.stage1_specificity, 1.0);
    EXPECT_DOUBLE_EQ(m.stage2_spec_strict, 1.0);
    EXPECT_DOUBLE_EQ(m.stage2_spec_folded, 1.0);
}

TEST(Stage2, ThresholdAboveEverything) {
    const std::vector<QueryScore> s = {pos("p1", 1.0, "a", "a"), neg("n1", 0.9)};
    const auto m = stage2_confusion(s, 1.5);
    EXPECT_DOUBLE_EQ(m.stage1_sensitivity, 0.0);
    EXPECT_DOUBLE_EQ(m.stage1_specificity, 1.0);
    EXPECT_DOUBLE_EQ(m.stage2_sensitivity, 0.0);
    EXPECT_DOUBLE_EQ(m.stage2_spec_strict, 1.0);
}

TEST(Stage2, OneClassOnlyHasNoAuc) {
    const std::vector<QueryScore> s = {pos("p1", 1.0, "a", "a")};
    const auto m = stage2_confusion(s, 0.5);
    EXPECT_FALSE(m.auc.has_value());
    EXPECT_DOUBLE_EQ(m.stage1_specificity, 0.0);
}

TEST(Stage2, MissingTop1IsMismatch) {
    QueryScore q{CaseId("p"), 1.0, 1, std::nullopt, QueryLabel::duplicate(CaseId("a"))};
    const auto m = stage2_confusion(std::vector<QueryScore>{q}, 0.5);
    EXPECT_EQ(m.id_mismatches, 1u);
}

TEST(Stage2, RandomInvariants) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<QueryScore> s;
        const int n = 2 + static_cast<int>(rng() % 30);
        for (int i = 0; i < n; ++i) {
            const double c = static_cast<double>(rng() % 11) / 10.0;
            const auto q = oracle::case_name(static_cast<std::size_t>(i));
            if (rng() % 2)
                s.push_back({CaseId(q), c, 1, CaseId(rng() % 3 ? "g" : "h"), QueryLabel::duplicate(CaseId("g"))});
            else
                s.push_back({CaseId(q), c, 1, CaseId("g"), QueryLabel::non_duplicate()});
        }
        const double t = static_cast<double>(rng() % 12) / 10.0;
        const auto m = stage2_confusion(s, t);
        EXPECT_LE(m.stage2_sensitivity, m.stage1_sensitivity);
        EXPECT_LE(m.stage2_spec_folded, m.stage2_spec_strict);
        EXPECT_EQ(m.stage2.tp + m.id_mismatches, m.stage1.tp);
        EXPECT_EQ(m.stage1.tn, m.stage2.tn);
        EXPECT_EQ(m.stage1.tp + m.stage1.fp + m.stage1.tn + m.stage1.fn, static_cast<std::uint32_t>(n));

        // Stage-1 counts agree with the calibration module's ROC machinery.
        const auto set = to_scored_set("s", s);
        EXPECT_EQ(m.stage1, confusion_at(set, t));
        const bool both = m.stage1.tp + m.stage1.fn > 0 && m.stage1.tn + m.stage1.fp > 0;
        if (both) {
            const auto roc = roc_curve(set);
            for (const auto& p : roc.points) {
                const auto mp = stage2_confusion(s, p.threshold);
                EXPECT_EQ(mp.stage1, p.counts);
                EXPECT_DOUBLE_EQ(mp.stage1_sensitivity, p.sensitivity);
                EXPECT_DOUBLE_EQ(mp.stage1_specificity, p.specificity);
            }
        }

        auto shuffled = s;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const auto ms = stage2_confusion(shuffled, t);
        EXPECT_EQ(ms.stage1, m.stage1);
        EXPECT_EQ(ms.stage2, m.stage2);
        EXPECT_EQ(ms.auc, m.auc);
    }
}

TEST(EvaluateQuerySet, SelfQueriesAreAllCorrect) {
    std::mt19937_64 rng(2);
    std::vector<EmbeddingSet> db;
    for (int c = 0; c < 6; ++c) db.push_back(oracle::random_set(oracle::case_name(c), 5, 4, rng));
    const auto idx = Index::build(db, ExactParams{});
    std::vector<LabeledQuery> queries;
    for (const auto& es : db) queries.push_back({es, QueryLabel::duplicate(es.case_id)});
    for (int c = 0; c < 4; ++c) queries.push_back({oracle::random_set("n" + std::to_string(c), 5, 4, rng), QueryLabel::non_duplicate()});
    for (const double t : {0.0, 0.3, 0.7711, 1.0}) {
        const auto m = evaluate_query_set("dup", queries, idx, 1, t);
        EXPECT_EQ(m.name, "dup");
        EXPECT_DOUBLE_EQ(m.stage1_sensitivity, 1.0);
        EXPECT_DOUBLE_EQ(m.stage2_sensitivity, 1.0);
        EXPECT_EQ(m.id_mismatches, 0u);
    }
}

TEST(Buckets, EvenSplit) {
    std::vector<ManifestEntry> m = {entry("a", "T"), entry("b", "T"), entry("c", "T"), entry("d", "T")};
    const auto b = split_buckets(m);
    ASSERT_EQ(b.tasks.size(), 1u);
    EXPECT_EQ(names(b.tasks[0].a), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(names(b.tasks[0].c), (std::vector<std::string>{"c", "d"}));
}

TEST(Buckets, OddSplitFloorsIntoA) {
    std::vector<ManifestEntry> m;
    for (const char* id : {"e", "d", "c", "b", "a"}) m.push_back(entry(id, "T"));
    const auto b = split_buckets(m);
    EXPECT_EQ(names(b.tasks[0].a), (std::vector<std::string>{"e", "d"}));
    EXPECT_EQ(names(b.tasks[0].c), (std::vector<std::string>{"c", "b", "a"}));
    const auto lex = split_buckets(m, CaseOrder::Lexicographic);
    EXPECT_EQ(names(lex.tasks[0].a), (std::vector<std::string>{"a", "b"}));
}

TEST(Buckets, PerTaskSplitsSum) {
    std::vector<ManifestEntry> m;
    for (int i = 0; i < 7; ++i) m.push_back(entry("x" + std::to_string(i), "T1"));
    for (int i = 0; i < 4; ++i) m.push_back(entry("y" + std::to_string(i), "T2"));
    m.push_back(entry("z0", "T3"));
    const auto b = split_buckets(m);
    ASSERT_EQ(b.tasks.size(), 3u);
    EXPECT_EQ(b.tasks[0].task, "T1");
    EXPECT_EQ(b.all_a().size(), 3u + 2u + 0u);
    EXPECT_EQ(b.all_c().size(), 4u + 2u + 1u);
    for (const auto& t : b.tasks)
        for (const auto& id : t.a) EXPECT_EQ(std::count(t.c.begin(), t.c.end(), id), 0);
}

TEST(Buckets, EmptyManifest) {
    try {
        split_buckets({});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::EmptyTask);
    }
}

TEST(Buckets, AssignWritesBucketsAndLabels) {
    std::vector<ManifestEntry> m = {entry("a", "T"), entry("b", "T"), entry("c", "T")};
    assign_buckets(m, 2);
    EXPECT_EQ(m[0].bucket, Bucket::DB_2A);
    EXPECT_EQ(m[0].label, QueryLabel::duplicate(CaseId("a")));
    EXPECT_EQ(m[1].bucket, Bucket::NONDUP_2C);
    EXPECT_EQ(m[2].label, QueryLabel::non_duplicate());
    assign_buckets(m, 1);
    EXPECT_EQ(m[0].bucket, Bucket::DB_1A);
    EXPECT_EQ(m[2].bucket, Bucket::NONDUP_1C);
    EXPECT_THROW(assign_buckets(m, 3), Error);
}
