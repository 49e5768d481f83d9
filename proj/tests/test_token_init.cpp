#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "aggvpr/kmeans.hpp"
#include "aggvpr/rng.hpp"
#include "aggvpr/synth.hpp"
#include "aggvpr/token_init.hpp"
#include "oracles.hpp"

using namespace aggvpr;

namespace {

Tensor random_points(std::size_t s, std::size_t d, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t = Tensor::zeros({s, d});
    for (double& v : t.mutable_data()) v = scale * (2.0 * rng.next_double() - 1.0);
    return t;
}

// A tiny corpus on disk for the collection/initialization paths.
struct CorpusFixture {
    SynthResult result;
    std::string dir;

    CorpusFixture() {
        dir = (std::filesystem::temp_directory_path() / "aggvpr_tokeninit_corpus").string();
        std::filesystem::remove_all(dir);
        SynthSpec spec;
        spec.num_places = 6;
        spec.views_per_place = 3;
        spec.image_size = 28;
        spec.confuser_pairs = 1;
        spec.max_shift_px = 4;
        spec.max_brightness_delta = 10;
        spec.noise_sigma = 4.0;
        spec.seed = 5;
        result = generate(spec, dir);
    }
};

const CorpusFixture& corpus() {
    static CorpusFixture fixture;
    return fixture;
}

}  // namespace

TEST(KMeans, DistinctPointsEqualKGiveZeroInertia) {
    const Tensor pts = Tensor::from_data({3, 2}, {0, 0, 10, 0, 0, 10});
    const KMeansResult res = kmeans(pts, 3, 50, 1e-9, 1);
    EXPECT_EQ(res.inertia, 0.0);
    std::set<std::pair<double, double>> centers;
    for (int j = 0; j < 3; ++j) centers.insert({res.centers.at2(j, 0), res.centers.at2(j, 1)});
    EXPECT_EQ(centers, (std::set<std::pair<double, double>>{{0, 0}, {10, 0}, {0, 10}}));
}

TEST(KMeans, IdenticalPointsAreHandled) {
    const Tensor pts = Tensor::from_data({5, 2}, {1, 2, 1, 2, 1, 2, 1, 2, 1, 2});
    const KMeansResult res = kmeans(pts, 2, 50, 1e-9, 2);
    EXPECT_EQ(res.inertia, 0.0);
    for (int j = 0; j < 2; ++j) {
        EXPECT_DOUBLE_EQ(res.centers.at2(j, 0), 1.0);
        EXPECT_DOUBLE_EQ(res.centers.at2(j, 1), 2.0);
    }
}

TEST(KMeans, MatchesIndependentLloydFromSameSeeding) {
    const Tensor pts = random_points(20, 2, 3, 5.0);
    Rng rng(mix_seed(7, "kmeans++"));
    const Tensor seeds = kmeans_plus_plus_seed(pts, 3, rng);

    const KMeansResult mine = kmeans_from_centers(pts, seeds, 100, 1e-9);
    const auto expect = oracle::lloyd_scalar({pts.data().begin(), pts.data().end()}, 20, 2,
                                             {seeds.data().begin(), seeds.data().end()}, 3, 100,
                                             1e-9);
    EXPECT_NEAR(mine.inertia, expect.inertia, 1e-9);
    EXPECT_EQ(mine.assignments, expect.assignments);
    for (std::size_t i = 0; i < mine.centers.numel(); ++i)
        EXPECT_NEAR(mine.centers.at(i), expect.centers[i], 1e-9);
}

TEST(KMeans, LloydInertiaIsMonotone) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Tensor pts = random_points(24, 3, seed + 1000, 2.0);
        const KMeansResult res = kmeans(pts, 4, 40, 0.0, seed);
        for (std::size_t i = 1; i < res.inertia_history.size(); ++i)
            ASSERT_LE(res.inertia_history[i], res.inertia_history[i - 1] + 1e-12)
                << "seed " << seed << " iteration " << i;
    }
}

TEST(KMeans, PermutationOnlyReordersCenters) {
    const Tensor pts = random_points(30, 2, 8, 3.0);
    Rng rng(mix_seed(9, "kmeans++"));
    const Tensor seeds = kmeans_plus_plus_seed(pts, 3, rng);

    std::vector<double> permuted(pts.data().begin(), pts.data().end());
    // Reverse the point order (a permutation).
    for (std::size_t i = 0; i < 15; ++i)
        for (std::size_t c = 0; c < 2; ++c)
            std::swap(permuted[i * 2 + c], permuted[(29 - i) * 2 + c]);
    const Tensor pts_perm = Tensor::from_data({30, 2}, permuted);

    const KMeansResult a = kmeans_from_centers(pts, seeds, 100, 1e-9);
    const KMeansResult b = kmeans_from_centers(pts_perm, seeds, 100, 1e-9);
    // Final center sets agree within tolerance.
    for (int j = 0; j < 3; ++j) {
        double best = 1e18;
        for (int t = 0; t < 3; ++t) {
            double d = 0.0;
            for (int c = 0; c < 2; ++c) {
                const double diff = a.centers.at2(j, c) - b.centers.at2(t, c);
                d += diff * diff;
            }
            best = std::min(best, d);
        }
        EXPECT_LT(std::sqrt(best), 1e-9);
    }
}

TEST(KMeans, TooFewPointsThrowDataError) {
    EXPECT_THROW(kmeans(random_points(2, 2, 10), 3, 10, 1e-6, 0), DataError);
}

// --- patch-token collection -------------------------------------------------

TEST(CollectPatchTokens, OneImageGivesPatchCountRows) {
    const auto& fix = corpus();
    const VitModel model = VitModel::random_init(BackboneConfig{}, 70);
    AggConfig agg_cfg;
    agg_cfg.num_tokens = 2;
    PlaceManifest one;
    one.kind = fix.result.train_manifest.kind;
    one.records = {fix.result.train_manifest.records[0]};
    const Tensor pts = collect_patch_tokens(one, model, agg_cfg, 8, 0);
    EXPECT_EQ(pts.shape(), (std::vector<std::size_t>{4, 32}));
}

TEST(CollectPatchTokens, DeterministicUnderSeed) {
    const auto& fix = corpus();
    const VitModel model = VitModel::random_init(BackboneConfig{}, 71);
    AggConfig agg_cfg;
    agg_cfg.num_tokens = 2;
    const Tensor a = collect_patch_tokens(fix.result.train_manifest, model, agg_cfg, 5, 33);
    const Tensor b = collect_patch_tokens(fix.result.train_manifest, model, agg_cfg, 5, 33);
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(CollectPatchTokens, RowsMatchManualForward) {
    const auto& fix = corpus();
    const VitModel model = VitModel::random_init(BackboneConfig{}, 72);
    AggConfig agg_cfg;
    agg_cfg.num_tokens = 2;  // junction: insertion block = frozen_prefix = 2
    PlaceManifest two;
    two.kind = fix.result.train_manifest.kind;
    two.records = {fix.result.train_manifest.records[0], fix.result.train_manifest.records[1]};
    const Tensor pts = collect_patch_tokens(two, model, agg_cfg, 99, 0);
    ASSERT_EQ(pts.rows(), 8u);

    for (int i = 0; i < 2; ++i) {
        const Tensor img = image_to_tensor(read_ppm(two.records[i].path));
        const TokenSequence seq = forward_to_block(img, model, 2);
        const Tensor patches = slice_rows(seq.tokens, seq.patch_begin(), seq.total());
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 32; ++c)
                EXPECT_EQ(pts.at2(i * 4 + r, c), patches.at2(r, c));
    }
}

TEST(CollectPatchTokens, EmptyManifestThrows) {
    const VitModel model = VitModel::random_init(BackboneConfig{}, 73);
    AggConfig agg_cfg;
    PlaceManifest empty;
    EXPECT_THROW(collect_patch_tokens(empty, model, agg_cfg, 4, 0), DataError);
}

// --- initialization methods -------------------------------------------------

TEST(InitAggTokens, ZeroMethod) {
    const auto& fix = corpus();
    const VitModel model = VitModel::random_init(BackboneConfig{}, 74);
    AggConfig agg_cfg;
    agg_cfg.num_tokens = 3;
    agg_cfg.init = InitMethod::kZero;
    const AggTokens agg = init_agg_tokens(model, agg_cfg, fix.result.train_manifest, 0);
    EXPECT_EQ(agg.values.shape(), (std::vector<std::size_t>{3, 32}));
    for (double v : agg.values.data()) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(agg.values.requires_grad());
}

TEST(InitAggTokens, NormalMethodStatistics) {
    const auto& fix = corpus();
    const VitModel model = VitModel::random_init(BackboneConfig{}, 75);
    AggConfig agg_cfg;
    agg_cfg.num_tokens = 64;
    agg_cfg.init = InitMethod::kNormal;
    const AggTokens agg = init_agg_tokens(model, agg_cfg, fix.result.train_manifest, 7);
    double mean = 0.0, var = 0.0;
    for (double v : agg.values.data()) mean += v;
    mean /= agg.values.numel();
    for (double v : agg.values.data()) var += (v - mean) * (v - mean);
    var /= agg.values.numel();
    EXPECT_NEAR(mean, 0.0, 0.002);
    EXPECT_NEAR(std::sqrt(var), 0.02, 0.002);

    const AggTokens again = init_agg_tokens(model, agg_cfg, fix.result.train_manifest, 7);
    for (std::size_t i = 0; i < agg.values.numel(); ++i)
        EXPECT_EQ(agg.values.at(i), again.values.at(i));
}

TEST(InitAggTokens, CentersAndNormalizedCentersDifferByRowNorms) {
    const auto& fix = corpus();
    const VitModel model = VitModel::random_init(BackboneConfig{}, 76);
    AggConfig agg_cfg;
    agg_cfg.num_tokens = 3;

    agg_cfg.init = InitMethod::kCenters;
    const AggTokens raw = init_agg_tokens(model, agg_cfg, fix.result.train_manifest, 11);
    agg_cfg.init = InitMethod::kCentersL2n;
    const AggTokens l2n = init_agg_tokens(model, agg_cfg, fix.result.train_manifest, 11);

    for (std::size_t r = 0; r < 3; ++r) {
        double norm = 0.0, norm_l2n = 0.0;
        for (std::size_t c = 0; c < 32; ++c) {
            norm += raw.values.at2(r, c) * raw.values.at2(r, c);
            norm_l2n += l2n.values.at2(r, c) * l2n.values.at2(r, c);
        }
        norm = std::sqrt(norm);
        EXPECT_NEAR(std::sqrt(norm_l2n), 1.0, 1e-9);
        ASSERT_GT(norm, 0.0);
        for (std::size_t c = 0; c < 32; ++c)
            EXPECT_NEAR(l2n.values.at2(r, c), raw.values.at2(r, c) / norm, 1e-12);
    }
}

TEST(L2NormalizeRows, ZeroRowsAreCountedNotScaled) {
    Tensor t = Tensor::from_data({2, 2}, {3, 4, 0, 0});
    EXPECT_EQ(l2_normalize_rows(t), 1);
    EXPECT_DOUBLE_EQ(t.at2(0, 0), 0.6);
    EXPECT_DOUBLE_EQ(t.at2(1, 0), 0.0);
}
