#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "aggvpr/manifest.hpp"
#include "aggvpr/retrieval.hpp"
#include "aggvpr/rng.hpp"
#include "oracles.hpp"

using namespace aggvpr;

namespace {

std::string temp_file(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

Tensor unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::zeros({n, d});
    double* p = t.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            p[i * d + j] = rng.next_gaussian();
            sq += p[i * d + j] * p[i * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) p[i * d + j] /= std::sqrt(sq);
    }
    return t;
}

}  // namespace

TEST(Manifest, EmptyFileIsSchemaError) {
    const std::string path = temp_file("empty.jsonl");
    std::ofstream(path).close();
    EXPECT_THROW(load_manifest(path), SchemaError);
}

TEST(Manifest, TwoLineUtmManifest) {
    const std::string path = temp_file("two.jsonl");
    std::ofstream(path) << "#threshold_m=25\n"
                        << R"({"id":0,"path":"a.ppm","role":"query","easting_m":1.5,"northing_m":2.5})"
                        << "\n"
                        << R"({"id":1,"path":"b.ppm","role":"database","easting_m":3.0,"northing_m":4.0})"
                        << "\n";
    const PlaceManifest m = load_manifest(path);
    ASSERT_EQ(m.records.size(), 2u);
    EXPECT_EQ(m.kind, PositionKind::kMeters);
    EXPECT_DOUBLE_EQ(m.threshold_m, 25.0);
    EXPECT_EQ(m.records[0].role, Role::kQuery);
    EXPECT_DOUBLE_EQ(m.records[1].easting_m, 3.0);
}

TEST(Manifest, RoundTripEquality) {
    PlaceManifest m;
    m.kind = PositionKind::kFrames;
    m.threshold_frames = 10;
    for (int i = 0; i < 4; ++i) {
        PlaceRecord r;
        r.id = i;
        r.path = "img" + std::to_string(i) + ".ppm";
        r.role = i == 0 ? Role::kQuery : Role::kDatabase;
        r.frame = 100 + i;
        m.records.push_back(r);
    }
    const std::string path = temp_file("frames.jsonl");
    save_manifest(m, path);
    const PlaceManifest loaded = load_manifest(path);
    ASSERT_EQ(loaded.records.size(), m.records.size());
    EXPECT_EQ(loaded.kind, PositionKind::kFrames);
    EXPECT_EQ(loaded.threshold_frames, 10);
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        EXPECT_EQ(loaded.records[i].id, m.records[i].id);
        EXPECT_EQ(loaded.records[i].path, m.records[i].path);
        EXPECT_EQ(loaded.records[i].role, m.records[i].role);
        EXPECT_EQ(loaded.records[i].frame, m.records[i].frame);
    }
}

TEST(Manifest, MalformedLineReportsLineNumber) {
    const std::string path = temp_file("bad.jsonl");
    std::ofstream(path) << R"({"id":0,"path":"a.ppm","role":"query","frame":1})"
                        << "\n{not json\n";
    try {
        load_manifest(path);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
    }
}

TEST(Manifest, MixedPositionKindsRejected) {
    const std::string path = temp_file("mixed.jsonl");
    std::ofstream(path) << R"({"id":0,"path":"a.ppm","role":"query","frame":1})" << "\n"
                        << R"({"id":1,"path":"b.ppm","role":"database","easting_m":1,"northing_m":2})"
                        << "\n";
    EXPECT_THROW(load_manifest(path), SchemaError);
}

TEST(Manifest, DuplicateIdsRejected) {
    const std::string path = temp_file("dup.jsonl");
    std::ofstream(path) << R"({"id":7,"path":"a.ppm","role":"query","frame":1})" << "\n"
                        << R"({"id":7,"path":"b.ppm","role":"database","frame":2})" << "\n";
    EXPECT_THROW(load_manifest(path), SchemaError);
}

// --- index -------------------------------------------------------------------

TEST(Index, SingleRowAlwaysReturned) {
    const Tensor db = unit_rows(1, 8, 1);
    const Index index = build_index(db);
    const auto hits = index.top_n(db.data(), 5);
    ASSERT_EQ(hits.size(), 1u);
    EXPECT_EQ(hits[0].row, 0);
    EXPECT_NEAR(hits[0].score, 1.0, 1e-12);
}

TEST(Index, SelfQueryRanksItselfFirst) {
    const Tensor db = unit_rows(20, 16, 2);
    const Index index = build_index(db);
    for (std::size_t r = 0; r < 20; ++r) {
        const auto hits = index.top_n({db.data().data() + r * 16, 16}, 3);
        EXPECT_EQ(hits[0].row, static_cast<int>(r));
    }
}

TEST(Index, TopFiveMatchesArgsortOracle) {
    const Tensor db = unit_rows(100, 16, 3);
    const Tensor queries = unit_rows(7, 16, 4);
    const Index index = build_index(db);
    for (std::size_t qi = 0; qi < 7; ++qi) {
        std::span<const double> q{queries.data().data() + qi * 16, 16};
        const auto hits = index.top_n(q, 5);
        // full argsort oracle
        std::vector<std::pair<double, int>> all;
        for (int r = 0; r < 100; ++r) {
            double s = 0.0;
            for (int c = 0; c < 16; ++c) s += db.at2(r, c) * q[c];
            all.push_back({s, r});
        }
        std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        ASSERT_EQ(hits.size(), 5u);
        for (int k = 0; k < 5; ++k) {
            EXPECT_EQ(hits[k].row, all[k].second);
            EXPECT_DOUBLE_EQ(hits[k].score, all[k].first);
        }
    }
}

TEST(Index, TiesBrokenByAscendingRow) {
    // Three identical rows tie exactly; ranks follow the row order.
    std::vector<double> data;
    for (int r = 0; r < 3; ++r) {
        data.push_back(1.0);
        data.push_back(0.0);
    }
    const Index index = build_index(Tensor::from_data({3, 2}, data));
    const std::vector<double> q = {1.0, 0.0};
    const auto hits = index.top_n(q, 3);
    EXPECT_EQ(hits[0].row, 0);
    EXPECT_EQ(hits[1].row, 1);
    EXPECT_EQ(hits[2].row, 2);
}

// --- recall ------------------------------------------------------------------

namespace {

PlaceManifest planted_manifest(int queries, int db, double spacing = 100.0) {
    PlaceManifest m;
    m.kind = PositionKind::kMeters;
    m.threshold_m = 25.0;
    for (int q = 0; q < queries; ++q) {
        PlaceRecord r;
        r.id = static_cast<std::uint64_t>(q);
        r.path = "q.ppm";
        r.role = Role::kQuery;
        r.easting_m = spacing * q;
        m.records.push_back(r);
    }
    for (int d = 0; d < db; ++d) {
        PlaceRecord r;
        r.id = static_cast<std::uint64_t>(1000 + d);
        r.path = "d.ppm";
        r.role = Role::kDatabase;
        r.easting_m = spacing * (d % queries);  // within threshold of query d%queries
        m.records.push_back(r);
    }
    return m;
}

}  // namespace

TEST(Recall, DuplicateDatabaseGivesPerfectRecall) {
    const Tensor q = unit_rows(6, 8, 5);
    const PlaceManifest m = planted_manifest(6, 6);
    const EvalReport report = recall_at_n(q, q, m, {1, 5});
    EXPECT_DOUBLE_EQ(report.recall_at.at(1), 1.0);
    EXPECT_DOUBLE_EQ(report.recall_at.at(5), 1.0);
}

TEST(Recall, ThirtyMetersMissesAtTwentyFiveThreshold) {
    PlaceManifest m;
    m.kind = PositionKind::kMeters;
    m.threshold_m = 25.0;
    PlaceRecord q;
    q.id = 0;
    q.role = Role::kQuery;
    q.easting_m = 0.0;
    m.records.push_back(q);
    PlaceRecord d;
    d.id = 1;
    d.role = Role::kDatabase;
    d.easting_m = 30.0;
    m.records.push_back(d);

    const Tensor desc = unit_rows(1, 8, 6);
    const EvalReport report =
        recall_at_n(desc, desc, m, {1, 5, 10}, NoPositivePolicy::kCountAsFail);
    for (const auto& [n, r] : report.recall_at) EXPECT_DOUBLE_EQ(r, 0.0);

    // With the exclusion policy the query drops out of the denominator.
    const EvalReport excluded = recall_at_n(desc, desc, m, {1});
    EXPECT_EQ(excluded.num_excluded, 1);
    EXPECT_EQ(excluded.num_queries, 0);
}

TEST(Recall, MatchesScalarEvaluatorOnPlantedInstances) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor q = unit_rows(5, 16, 100 + seed);
        const Tensor db = unit_rows(20, 16, 200 + seed);
        const PlaceManifest m = planted_manifest(5, 20);

        const EvalReport report = recall_at_n(q, db, m, {1, 5, 10});

        oracle::RecallCase rc;
        rc.q.assign(q.data().begin(), q.data().end());
        rc.db.assign(db.data().begin(), db.data().end());
        const auto queries = m.with_role(Role::kQuery);
        const auto database = m.with_role(Role::kDatabase);
        rc.positive.resize(5 * 20);
        for (int qi = 0; qi < 5; ++qi)
            for (int di = 0; di < 20; ++di)
                rc.positive[qi * 20 + di] = m.within_threshold(*queries[qi], *database[di]);
        const auto expect = oracle::recall_scalar(rc, 5, 20, 16, {1, 5, 10});
        EXPECT_DOUBLE_EQ(report.recall_at.at(1), expect[0]) << "seed " << seed;
        EXPECT_DOUBLE_EQ(report.recall_at.at(5), expect[1]);
        EXPECT_DOUBLE_EQ(report.recall_at.at(10), expect[2]);
    }
}

TEST(Recall, MonotoneInN) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Tensor q = unit_rows(8, 8, 300 + seed);
        const Tensor db = unit_rows(30, 8, 400 + seed);
        const PlaceManifest m = planted_manifest(8, 30);
        const EvalReport r = recall_at_n(q, db, m, {1, 5, 10, 20});
        EXPECT_LE(r.recall_at.at(1), r.recall_at.at(5));
        EXPECT_LE(r.recall_at.at(5), r.recall_at.at(10));
        EXPECT_LE(r.recall_at.at(10), r.recall_at.at(20));
    }
}

TEST(Recall, PositiveScalingLeavesRankingsUnchanged) {
    const Tensor q = unit_rows(5, 8, 500);
    const Tensor db = unit_rows(20, 8, 501);
    const PlaceManifest m = planted_manifest(5, 20);
    const EvalReport base = recall_at_n(q, db, m, {1, 5, 10});

    Tensor scaled_db = Tensor::zeros({20, 8});
    for (std::size_t i = 0; i < db.numel(); ++i) scaled_db.mutable_data()[i] = 3.7 * db.at(i);
    testing::internal::CaptureStderr();  // scaling trips the normalization warning
    const EvalReport scaled = recall_at_n(q, scaled_db, m, {1, 5, 10});
    testing::internal::GetCapturedStderr();
    EXPECT_EQ(base.recall_at, scaled.recall_at);
    for (std::size_t i = 0; i < base.per_query.size(); ++i)
        EXPECT_EQ(base.per_query[i].ranked_ids, scaled.per_query[i].ranked_ids);
}

TEST(Recall, ReportSerializesToJson) {
    const Tensor q = unit_rows(3, 8, 600);
    const PlaceManifest m = planted_manifest(3, 3);
    const EvalReport report = recall_at_n(q, q, m, {1});
    const std::string path = temp_file("report.json");
    write_eval_report(report, path);
    std::ifstream is(path);
    nlohmann::json j;
    is >> j;
    EXPECT_DOUBLE_EQ(j["recall_at"]["1"].get<double>(), 1.0);
    EXPECT_EQ(j["num_queries"].get<int>(), 3);
    EXPECT_EQ(j["per_query"].size(), 3u);
}

TEST(Recall, CountMismatchThrows) {
    const Tensor q = unit_rows(2, 8, 700);
    const Tensor db = unit_rows(3, 8, 701);
    const PlaceManifest m = planted_manifest(3, 3);
    EXPECT_THROW(recall_at_n(q, db, m, {1}), DimError);
}
