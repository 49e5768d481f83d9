#pragma once

#include <cstdint>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "aggvpr/aggregation.hpp"
#include "aggvpr/image_io.hpp"
#include "aggvpr/kmeans.hpp"
#include "aggvpr/manifest.hpp"
#include "aggvpr/vit.hpp"

namespace aggvpr {

struct TokenInitOptions {
    int sample_images = 64;
    int kmeans_max_iter = 100;
    double kmeans_tol = 1e-6;
};

/// Pools the patch tokens that the insertion block would see, across a
/// seeded uniform sample of manifest images, into one [S×D] matrix.
inline Tensor collect_patch_tokens(const PlaceManifest& manifest, const VitModel& model,
                                   const AggConfig& agg_cfg, int sample_count, std::uint64_t seed) {
    if (manifest.records.empty()) throw DataError("collect_patch_tokens: empty manifest");
    const int available = static_cast<int>(manifest.records.size());
    std::vector<int> order(available);
    std::iota(order.begin(), order.end(), 0);
    int take = available;
    if (sample_count < available) {
        Rng rng(mix_seed(seed, "collect"));
        for (int i = 0; i < sample_count; ++i) {
            const int j = i + static_cast<int>(rng.next_below(available - i));
            std::swap(order[i], order[j]);
        }
        take = sample_count;
    }

    InferenceScope inference;
    const int stop = agg_cfg.first_insertion_block(model.cfg);
    const std::size_t n = static_cast<std::size_t>(model.cfg.patches());
    const std::size_t d = static_cast<std::size_t>(model.cfg.embed_dim);
    Tensor out = Tensor::zeros({static_cast<std::size_t>(take) * n, d});
    double* po = out.mutable_data().data();
    for (int i = 0; i < take; ++i) {
        const PlaceRecord& rec = manifest.records[order[i]];
        const Tensor img = image_to_tensor(read_ppm(rec.path));
        const TokenSequence seq = forward_to_block(img, model, stop);
        const Tensor patches = slice_rows(seq.tokens, seq.patch_begin(), seq.total());
        std::copy(patches.data().begin(), patches.data().end(), po + static_cast<std::size_t>(i) * n * d);
    }
    return out;
}

/// Normalizes center rows in place; rows with norm <= 1e-12 are left as-is
/// and counted.
inline int l2_normalize_rows(Tensor& t) {
    const std::size_t m = t.rows(), d = t.cols();
    double* p = t.mutable_data().data();
    int degenerate = 0;
    for (std::size_t i = 0; i < m; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += p[i * d + j] * p[i * d + j];
        const double norm = std::sqrt(sq);
        if (norm <= 1e-12) {
            ++degenerate;
            continue;
        }
        for (std::size_t j = 0; j < d; ++j) p[i * d + j] /= norm;
    }
    return degenerate;
}

inline AggTokens init_agg_tokens(const VitModel& model, const AggConfig& agg_cfg,
                                 const PlaceManifest& manifest, std::uint64_t seed,
                                 const TokenInitOptions& opts = {}) {
    const std::size_t m = static_cast<std::size_t>(agg_cfg.num_tokens);
    const std::size_t d = static_cast<std::size_t>(model.cfg.embed_dim);
    switch (agg_cfg.init) {
        case InitMethod::kZero:
            return make_agg_tokens(Tensor::zeros({m, d}));
        case InitMethod::kNormal: {
            Rng rng(mix_seed(seed, "agg_normal"));
            return make_agg_tokens(Tensor::gaussian({m, d}, rng, 0.02));
        }
        case InitMethod::kCenters:
        case InitMethod::kCentersL2n: {
            const Tensor points =
                collect_patch_tokens(manifest, model, agg_cfg, opts.sample_images, seed);
            KMeansResult km = kmeans(points, agg_cfg.num_tokens, opts.kmeans_max_iter,
                                     opts.kmeans_tol, mix_seed(seed, "agg_kmeans"));
            Tensor centers = km.centers;
            if (agg_cfg.init == InitMethod::kCentersL2n) {
                const int degenerate = l2_normalize_rows(centers);
                if (degenerate > 0)
                    std::cerr << "warning: " << degenerate
                              << " zero-norm cluster centers left unnormalized\n";
            }
            return make_agg_tokens(std::move(centers));
        }
    }
    throw ContractError("unknown init method");
}

}  // namespace aggvpr
