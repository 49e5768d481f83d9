#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aggvpr/errors.hpp"
#include "aggvpr/image_io.hpp"
#include "aggvpr/tensor.hpp"
#include "aggvpr/vit.hpp"

namespace aggvpr {

/// Where aggregation tokens join the sequence.
///   kFrontFrozen       before block 0, frozen prefix kept frozen
///   kFrontAllTrainable before block 0, every block trainable
///   kJunction          at the frozen/trainable junction (the default)
///   kDeep              before the penultimate block
///   kProgressive       spread over the last four blocks
enum class InsertStrategy : int { kFrontFrozen, kFrontAllTrainable, kJunction, kDeep, kProgressive };

enum class InitMethod : int { kZero, kNormal, kCenters, kCentersL2n };

enum class DescriptorSource : int { kAggTokens, kClassToken, kMeanPatch };

inline const char* to_string(InsertStrategy s) {
    switch (s) {
        case InsertStrategy::kFrontFrozen: return "a";
        case InsertStrategy::kFrontAllTrainable: return "a_hat";
        case InsertStrategy::kJunction: return "b";
        case InsertStrategy::kDeep: return "c";
        case InsertStrategy::kProgressive: return "d";
    }
    return "?";
}

inline const char* to_string(InitMethod m) {
    switch (m) {
        case InitMethod::kZero: return "zero";
        case InitMethod::kNormal: return "normal";
        case InitMethod::kCenters: return "centers";
        case InitMethod::kCentersL2n: return "centers_l2n";
    }
    return "?";
}

struct AggConfig {
    int num_tokens = 8;
    InsertStrategy strategy = InsertStrategy::kJunction;
    InitMethod init = InitMethod::kCentersL2n;

    /// The insertion schedule as (block index, tokens added) pairs, in
    /// ascending block order. Counts sum to num_tokens.
    std::vector<std::pair<int, int>> insertion_blocks(const BackboneConfig& cfg) const {
        validate(cfg);
        const int L = cfg.num_blocks;
        switch (strategy) {
            case InsertStrategy::kFrontFrozen:
            case InsertStrategy::kFrontAllTrainable:
                return {{0, num_tokens}};
            case InsertStrategy::kJunction:
                return {{cfg.frozen_prefix, num_tokens}};
            case InsertStrategy::kDeep:
                return {{L - 2, num_tokens}};
            case InsertStrategy::kProgressive: {
                // Spread across the last four blocks, earlier blocks taking
                // the remainder (2,2,2,2 for the default of 8 tokens).
                const int span = std::min(4, std::min(L, num_tokens));
                std::vector<std::pair<int, int>> out;
                const int base = num_tokens / span, rem = num_tokens % span;
                for (int i = 0; i < span; ++i)
                    out.emplace_back(L - span + i, base + (i < rem ? 1 : 0));
                return out;
            }
        }
        throw ContractError("unknown insertion strategy");
    }

    /// First block whose input contains aggregation tokens; also the block
    /// whose input patch tokens seed the k-means initialization.
    int first_insertion_block(const BackboneConfig& cfg) const {
        return insertion_blocks(cfg).front().first;
    }

    bool all_blocks_trainable() const { return strategy == InsertStrategy::kFrontAllTrainable; }

    void validate(const BackboneConfig& cfg) const {
        if (num_tokens <= 0) throw ContractError("agg: num_tokens must be positive");
        if (strategy == InsertStrategy::kDeep && cfg.num_blocks < 2)
            throw ContractError("agg: deep insertion needs at least 2 blocks");
    }
};

struct AggTokens {
    Tensor values;  // [M×D], requires_grad

    int count() const { return static_cast<int>(values.rows()); }
};

inline AggTokens make_agg_tokens(Tensor values) {
    values.set_requires_grad(true);
    return AggTokens{std::move(values)};
}

/// Prepends the next `count` unused rows of `agg` to the sequence. Rows
/// already inserted keep their positions, so progressive insertion leaves
/// earlier tokens in earlier descriptor slots.
inline TokenSequence insert_tokens(const TokenSequence& seq, const AggTokens& agg, int count,
                                   const VitModel* model_for_pos = nullptr) {
    if (count < 0 || seq.agg_count + count > agg.count())
        throw ContractError("insert_tokens: requested " + std::to_string(count) + " of " +
                            std::to_string(agg.count() - seq.agg_count) + " remaining tokens");
    if (count == 0) return seq;
    Tensor rows = slice_rows(agg.values, seq.agg_count, seq.agg_count + count);
    if (model_for_pos && model_for_pos->cfg.pos_embed_on_agg)
        rows = add(rows, slice_rows(model_for_pos->pos_agg, seq.agg_count, seq.agg_count + count));
    TokenSequence out = seq;
    if (seq.agg_count == 0) {
        out.tokens = concat_rows({rows, seq.tokens});
    } else {
        out.tokens = concat_rows({slice_rows(seq.tokens, 0, seq.agg_count), rows,
                                  slice_rows(seq.tokens, seq.agg_count, seq.tokens.rows())});
    }
    out.agg_count = seq.agg_count + count;
    return out;
}

inline Tensor assemble_descriptor(const TokenSequence& seq, DescriptorSource source) {
    switch (source) {
        case DescriptorSource::kAggTokens: {
            if (seq.agg_count == 0)
                throw ContractError("descriptor: sequence has no aggregation tokens");
            const Tensor rows = slice_rows(seq.tokens, 0, seq.agg_count);
            return l2_normalize(reshape(rows, {rows.numel()}));
        }
        case DescriptorSource::kClassToken: {
            if (!seq.has_class) throw ContractError("descriptor: sequence has no class token");
            const Tensor row = slice_rows(seq.tokens, seq.class_index(), seq.class_index() + 1);
            return l2_normalize(reshape(row, {row.numel()}));
        }
        case DescriptorSource::kMeanPatch: {
            if (seq.patch_count == 0) throw ContractError("descriptor: sequence has no patch tokens");
            return l2_normalize(mean_rows(
                slice_rows(seq.tokens, seq.patch_begin(), seq.total())));
        }
    }
    throw ContractError("unknown descriptor source");
}

struct ForwardOutput {
    Tensor descriptor;
    TokenSequence sequence;
    std::optional<AttentionMaps> last_block_maps;
};

/// Full image-to-descriptor pass under the configured insertion schedule.
inline ForwardOutput forward_image(const Tensor& image, const VitModel& model,
                                   const AggConfig& agg_cfg, const AggTokens& agg,
                                   DescriptorSource source = DescriptorSource::kAggTokens,
                                   bool want_last_block_maps = false) {
    const auto schedule = agg_cfg.insertion_blocks(model.cfg);
    TokenSequence seq = patch_embed(image, model);
    std::size_t next = 0;
    ForwardOutput out;
    AttentionMaps maps;
    const int L = model.cfg.num_blocks;
    for (int b = 0; b < L; ++b) {
        while (next < schedule.size() && schedule[next].first == b) {
            seq = insert_tokens(seq, agg, schedule[next].second, &model);
            ++next;
        }
        TapeTagScope tag(b);
        seq = encoder_block(seq, model.blocks[b], model.cfg.num_heads,
                            (want_last_block_maps && b == L - 1) ? &maps : nullptr);
    }
    seq = apply_final_ln(seq, model);
    out.descriptor = assemble_descriptor(seq, source);
    out.sequence = seq;
    if (want_last_block_maps) out.last_block_maps = std::move(maps);
    return out;
}

/// Class-token baseline: a plain forward pass with no aggregation tokens.
inline Tensor class_token_descriptor(const Tensor& image, const VitModel& model) {
    TokenSequence seq = apply_final_ln(forward_to_block(image, model, model.cfg.num_blocks), model);
    return assemble_descriptor(seq, DescriptorSource::kClassToken);
}

/// Mean-pooled patch baseline.
inline Tensor mean_pool_descriptor(const Tensor& image, const VitModel& model) {
    TokenSequence seq = apply_final_ln(forward_to_block(image, model, model.cfg.num_blocks), model);
    return assemble_descriptor(seq, DescriptorSource::kMeanPatch);
}

// ---------------------------------------------------------------------------
// Attention decomposition
// ---------------------------------------------------------------------------

/// The agg-row part of the unnormalized single-head attention product,
/// split into the agg-to-agg and agg-to-rest terms. The joint product is
/// evaluated block-wise over the same split, so `identity_gap` is exactly
/// zero; `straight_sum_gap` reports the rounding distance to a single-pass
/// evaluation of the same product.
struct DecompositionReport {
    Tensor agg_agg;        // [M×D]
    Tensor agg_patch;      // [M×D]
    Tensor joint_agg;      // [M×D]
    double fro_agg_agg = 0.0;
    double fro_agg_patch = 0.0;
    double identity_gap = 0.0;
    double straight_sum_gap = 0.0;
    // Softmax-normalized mass each agg token places on patch columns
    // (single head, scaled product); the quantity the attention maps show.
    std::vector<double> softmax_patch_mass;
};

inline DecompositionReport attention_decomposition(const TokenSequence& seq,
                                                   const BlockParams& params) {
    if (seq.agg_count < 1 || seq.patch_count < 1)
        throw ContractError("attention_decomposition: need at least one agg and one patch token");
    InferenceScope inference;
    const std::size_t d_model = seq.tokens.cols();
    const std::size_t m_agg = static_cast<std::size_t>(seq.agg_count);
    const std::size_t total = seq.tokens.rows();

    const Tensor qkv = detail::affine(seq.tokens, params.qkv_w, params.qkv_b);
    const Tensor q = slice_cols(qkv, 0, d_model);
    const Tensor k = slice_cols(qkv, d_model, 2 * d_model);
    const Tensor v = slice_cols(qkv, 2 * d_model, 3 * d_model);

    // scores = Q Kᵀ; the agg-row block of it is shared by every term below.
    const Tensor scores = matmul(q, transpose(k));

    auto product_over = [&](std::size_t t0, std::size_t t1) {
        Tensor out = Tensor::zeros({m_agg, d_model});
        double* po = out.mutable_data().data();
        const double* ps = scores.data().data();
        const double* pv = v.data().data();
        for (std::size_t i = 0; i < m_agg; ++i)
            for (std::size_t t = t0; t < t1; ++t) {
                const double s = ps[i * total + t];
                for (std::size_t j = 0; j < d_model; ++j)
                    po[i * d_model + j] += s * pv[t * d_model + j];
            }
        return out;
    };

    DecompositionReport rep;
    rep.agg_agg = product_over(0, m_agg);
    rep.agg_patch = product_over(m_agg, total);
    rep.joint_agg = add(rep.agg_agg, rep.agg_patch);
    const Tensor straight = product_over(0, total);

    double fro_aa = 0.0, fro_ap = 0.0, gap = 0.0, sgap = 0.0;
    for (std::size_t i = 0; i < rep.joint_agg.numel(); ++i) {
        fro_aa += rep.agg_agg.at(i) * rep.agg_agg.at(i);
        fro_ap += rep.agg_patch.at(i) * rep.agg_patch.at(i);
        gap = std::max(gap, std::abs(rep.joint_agg.at(i) -
                                     (rep.agg_agg.at(i) + rep.agg_patch.at(i))));
        sgap = std::max(sgap, std::abs(rep.joint_agg.at(i) - straight.at(i)));
    }
    rep.fro_agg_agg = std::sqrt(fro_aa);
    rep.fro_agg_patch = std::sqrt(fro_ap);
    rep.identity_gap = gap;
    rep.straight_sum_gap = sgap;

    // Softmax diagnostic: single-head scaled attention, agg rows, patch mass.
    const Tensor probs = softmax_rows(scale(scores, 1.0 / std::sqrt(static_cast<double>(d_model))));
    rep.softmax_patch_mass.resize(m_agg, 0.0);
    const std::size_t patch0 = static_cast<std::size_t>(seq.patch_begin());
    for (std::size_t i = 0; i < m_agg; ++i)
        for (std::size_t t = patch0; t < total; ++t)
            rep.softmax_patch_mass[i] += probs.at2(i, t);
    return rep;
}

// ---------------------------------------------------------------------------
// Attention map dumps
// ---------------------------------------------------------------------------

/// Head-averaged last-block attention of each agg token over the patch
/// grid, written as 16-bit PGM maps plus one merged (elementwise max) map
/// and a CSV of the raw weights. Returns the head-averaged full rows.
inline std::vector<std::vector<double>> dump_attention_maps(
    const Tensor& image, const VitModel& model, const AggConfig& agg_cfg, const AggTokens& agg,
    const std::string& out_dir, bool per_head = false) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    InferenceScope inference;
    ForwardOutput fwd = forward_image(image, model, agg_cfg, agg, DescriptorSource::kAggTokens,
                                      /*want_last_block_maps=*/true);
    const AttentionMaps& maps = *fwd.last_block_maps;
    const int m_agg = fwd.sequence.agg_count;
    const int total = fwd.sequence.total();
    const int patch0 = fwd.sequence.patch_begin();
    const int gh = model.cfg.grid_h(), gw = model.cfg.grid_w();
    const int heads = static_cast<int>(maps.head_probs.size());

    auto write_map = [&](const std::string& name, const std::vector<double>& patch_w) {
        std::vector<std::uint16_t> px(patch_w.size());
        for (std::size_t i = 0; i < patch_w.size(); ++i) {
            const double clamped = std::min(1.0, std::max(0.0, patch_w[i]));
            px[i] = static_cast<std::uint16_t>(std::lround(clamped * 65535.0));
        }
        write_pgm16(out_dir + "/" + name, gw, gh, px);
    };

    std::vector<std::vector<double>> rows(m_agg, std::vector<double>(total, 0.0));
    for (int i = 0; i < m_agg; ++i) {
        for (int h = 0; h < heads; ++h)
            for (int t = 0; t < total; ++t) rows[i][t] += maps.head_probs[h].at2(i, t);
        for (int t = 0; t < total; ++t) rows[i][t] /= heads;
    }

    std::ofstream csv(out_dir + "/weights.csv");
    if (!csv) throw IoError("cannot open " + out_dir + "/weights.csv for writing");
    csv << "token_index,patch_row,patch_col,weight\n";
    std::vector<double> merged(static_cast<std::size_t>(gh) * gw, 0.0);
    for (int i = 0; i < m_agg; ++i) {
        std::vector<double> patch_w(static_cast<std::size_t>(gh) * gw);
        for (int t = 0; t < gh * gw; ++t) {
            patch_w[t] = rows[i][patch0 + t];
            merged[t] = std::max(merged[t], patch_w[t]);
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.17g\n", i, t / gw, t % gw, patch_w[t]);
            csv << buf;
        }
        char name[64];
        std::snprintf(name, sizeof(name), "agg_token%02d.pgm", i);
        write_map(name, patch_w);
        if (per_head) {
            for (int h = 0; h < heads; ++h) {
                std::vector<double> hw(static_cast<std::size_t>(gh) * gw);
                for (int t = 0; t < gh * gw; ++t) hw[t] = maps.head_probs[h].at2(i, patch0 + t);
                std::snprintf(name, sizeof(name), "agg_token%02d_head%d.pgm", i, h);
                write_map(name, hw);
            }
        }
    }
    write_map("merged.pgm", merged);
    return rows;
}

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

/// Marks the trainable set implied by the insertion strategy: suffix blocks
/// plus the final LayerNorm (plus everything for the all-trainable
/// strategy). The embedding stage belongs to the prefix.
inline void apply_strategy_freeze(VitModel& model, const AggConfig& agg_cfg) {
    const bool all = agg_cfg.all_blocks_trainable();
    const int l1 = all ? 0 : model.cfg.frozen_prefix;
    for (int b = 0; b < model.cfg.num_blocks; ++b) model.blocks[b].set_frozen(b < l1);
    model.embed_w.set_requires_grad(all);
    model.embed_b.set_requires_grad(all);
    model.pos.set_requires_grad(all);
    model.cls.set_requires_grad(all);
    model.ln_f_w.set_requires_grad(true);
    model.ln_f_b.set_requires_grad(true);
    if (model.pos_agg.numel() > 0) model.pos_agg.set_requires_grad(true);
}

}  // namespace aggvpr
