#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aggvpr/errors.hpp"
#include "aggvpr/rng.hpp"
#include "aggvpr/tensor.hpp"
#include "aggvpr/tensor_io.hpp"

namespace aggvpr {

// Tape tag used by the patch embedding; encoder blocks tag nodes with
// their own index.
inline constexpr int kTagEmbed = -2;

struct BackboneConfig {
    int image_h = 28;
    int image_w = 28;
    int patch_size = 14;
    int embed_dim = 32;
    int num_blocks = 6;
    int num_heads = 4;
    int frozen_prefix = 2;
    int mlp_ratio = 4;
    // Positional embeddings for aggregation tokens are off by default; when
    // enabled the model carries an extra learnable table for them.
    bool pos_embed_on_agg = false;
    // Final LayerNorm over all tokens after the last block.
    bool final_layer_norm = true;

    int patches() const { return (image_h / patch_size) * (image_w / patch_size); }
    int grid_h() const { return image_h / patch_size; }
    int grid_w() const { return image_w / patch_size; }
    int head_dim() const { return embed_dim / num_heads; }
    int trainable_suffix() const { return num_blocks - frozen_prefix; }

    void validate() const {
        if (image_h <= 0 || image_w <= 0 || patch_size <= 0)
            throw ContractError("backbone: image and patch sizes must be positive");
        if (image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ContractError("backbone: image " + std::to_string(image_h) + "x" +
                                std::to_string(image_w) + " not divisible by patch size " +
                                std::to_string(patch_size));
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
            throw ContractError("backbone: embed_dim " + std::to_string(embed_dim) +
                                " must be a positive multiple of num_heads " +
                                std::to_string(num_heads));
        if (num_blocks <= 0) throw ContractError("backbone: num_blocks must be positive");
        if (frozen_prefix < 0 || frozen_prefix > num_blocks)
            throw ContractError("backbone: frozen_prefix out of [0, num_blocks]");
        if (mlp_ratio <= 0) throw ContractError("backbone: mlp_ratio must be positive");
    }
};

/// Token matrix partitioned as [agg | class | patch]; boundaries are
/// tracked through every operation that changes the sequence.
struct TokenSequence {
    Tensor tokens;  // [(agg_count + has_class + patch_count) × D]
    int agg_count = 0;
    bool has_class = true;
    int patch_count = 0;

    int class_index() const { return agg_count; }
    int patch_begin() const { return agg_count + (has_class ? 1 : 0); }
    int total() const { return patch_begin() + patch_count; }
};

struct BlockParams {
    Tensor ln1_w, ln1_b;
    Tensor qkv_w, qkv_b;    // [D×3D], [3D]
    Tensor proj_w, proj_b;  // [D×D], [D]
    Tensor ln2_w, ln2_b;
    Tensor fc1_w, fc1_b;    // [D×(ratio·D)]
    Tensor fc2_w, fc2_b;    // [(ratio·D)×D]
    bool frozen = false;

    std::vector<Tensor*> all() {
        return {&ln1_w, &ln1_b, &qkv_w, &qkv_b, &proj_w, &proj_b,
                &ln2_w, &ln2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
    }

    void set_frozen(bool f) {
        frozen = f;
        for (Tensor* t : all()) t->set_requires_grad(!f);
    }
};

struct VitModel {
    BackboneConfig cfg;
    Tensor embed_w, embed_b;  // [(3P²)×D], [D]
    Tensor pos;               // [(1+N)×D], class + patch positions
    Tensor cls;               // [1×D]
    Tensor ln_f_w, ln_f_b;    // final LayerNorm
    Tensor pos_agg;           // [M×D], present only when cfg.pos_embed_on_agg
    std::vector<BlockParams> blocks;

    /// Fan-in-scaled Gaussian weights (the model trains from scratch, so
    /// projections start at unit-ish output scale); embeddings at 0.02.
    static VitModel random_init(const BackboneConfig& cfg, std::uint64_t seed,
                                int agg_tokens_for_pos = 0) {
        cfg.validate();
        Rng rng(mix_seed(seed, "backbone"));
        const auto D = static_cast<std::size_t>(cfg.embed_dim);
        const auto patch_dim = static_cast<std::size_t>(3 * cfg.patch_size * cfg.patch_size);
        const auto n = static_cast<std::size_t>(cfg.patches());
        const auto hidden = static_cast<std::size_t>(cfg.mlp_ratio) * D;
        const double sd_embed = 0.02;
        auto fan_in = [](std::size_t rows) { return 1.0 / std::sqrt(static_cast<double>(rows)); };

        VitModel m;
        m.cfg = cfg;
        m.embed_w = Tensor::gaussian({patch_dim, D}, rng, fan_in(patch_dim), true);
        m.embed_b = Tensor::zeros({D}, true);
        m.pos = Tensor::gaussian({1 + n, D}, rng, sd_embed, true);
        m.cls = Tensor::gaussian({1, D}, rng, sd_embed, true);
        m.ln_f_w = Tensor::full({D}, 1.0, true);
        m.ln_f_b = Tensor::zeros({D}, true);
        if (cfg.pos_embed_on_agg) {
            if (agg_tokens_for_pos <= 0)
                throw ContractError("pos_embed_on_agg requires the aggregation token count");
            m.pos_agg = Tensor::gaussian({static_cast<std::size_t>(agg_tokens_for_pos), D}, rng,
                                         sd_embed, true);
        }
        m.blocks.resize(cfg.num_blocks);
        for (BlockParams& b : m.blocks) {
            b.ln1_w = Tensor::full({D}, 1.0, true);
            b.ln1_b = Tensor::zeros({D}, true);
            b.qkv_w = Tensor::gaussian({D, 3 * D}, rng, fan_in(D), true);
            b.qkv_b = Tensor::zeros({3 * D}, true);
            b.proj_w = Tensor::gaussian({D, D}, rng, fan_in(D), true);
            b.proj_b = Tensor::zeros({D}, true);
            b.ln2_w = Tensor::full({D}, 1.0, true);
            b.ln2_b = Tensor::zeros({D}, true);
            b.fc1_w = Tensor::gaussian({D, hidden}, rng, fan_in(D), true);
            b.fc1_b = Tensor::zeros({hidden}, true);
            b.fc2_w = Tensor::gaussian({hidden, D}, rng, fan_in(hidden), true);
            b.fc2_b = Tensor::zeros({D}, true);
        }
        return m;
    }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        out.reserve(blocks.size() * 12 + 8);
        out.emplace_back("embed.w", &embed_w);
        out.emplace_back("embed.b", &embed_b);
        out.emplace_back("pos", &pos);
        out.emplace_back("cls", &cls);
        out.emplace_back("ln_f.w", &ln_f_w);
        out.emplace_back("ln_f.b", &ln_f_b);
        if (pos_agg.numel() > 0) out.emplace_back("pos_agg", &pos_agg);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i) + ".";
            BlockParams& b = blocks[i];
            out.emplace_back(p + "ln1.w", &b.ln1_w);
            out.emplace_back(p + "ln1.b", &b.ln1_b);
            out.emplace_back(p + "qkv.w", &b.qkv_w);
            out.emplace_back(p + "qkv.b", &b.qkv_b);
            out.emplace_back(p + "proj.w", &b.proj_w);
            out.emplace_back(p + "proj.b", &b.proj_b);
            out.emplace_back(p + "ln2.w", &b.ln2_w);
            out.emplace_back(p + "ln2.b", &b.ln2_b);
            out.emplace_back(p + "fc1.w", &b.fc1_w);
            out.emplace_back(p + "fc1.b", &b.fc1_b);
            out.emplace_back(p + "fc2.w", &b.fc2_w);
            out.emplace_back(p + "fc2.b", &b.fc2_b);
        }
        return out;
    }
};

/// Per-head attention probabilities of one block, each [T×T].
struct AttentionMaps {
    std::vector<Tensor> head_probs;
};

namespace detail {

inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

}  // namespace detail

/// Multi-head self-attention over the full token matrix.
inline Tensor mhsa_tokens(const Tensor& x, const BlockParams& p, int num_heads,
                          AttentionMaps* maps = nullptr) {
    const std::size_t d_model = x.cols();
    if (p.qkv_w.rows() != d_model)
        throw DimError("mhsa: token width " + std::to_string(d_model) + " vs qkv " +
                       detail::shape_str(p.qkv_w.shape()));
    const std::size_t d_head = d_model / static_cast<std::size_t>(num_heads);
    const Tensor qkv = detail::affine(x, p.qkv_w, p.qkv_b);
    const Tensor q = slice_cols(qkv, 0, d_model);
    const Tensor k = slice_cols(qkv, d_model, 2 * d_model);
    const Tensor v = slice_cols(qkv, 2 * d_model, 3 * d_model);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_head));

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(num_heads);
    for (int h = 0; h < num_heads; ++h) {
        const std::size_t c0 = h * d_head, c1 = (h + 1) * d_head;
        const Tensor qh = slice_cols(q, c0, c1);
        const Tensor kh = slice_cols(k, c0, c1);
        const Tensor vh = slice_cols(v, c0, c1);
        const Tensor probs = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d));
        if (maps) maps->head_probs.push_back(probs);
        head_outputs.push_back(matmul(probs, vh));
    }
    const Tensor merged = num_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return detail::affine(merged, p.proj_w, p.proj_b);
}

inline TokenSequence mhsa(const TokenSequence& seq, const BlockParams& p, int num_heads,
                          AttentionMaps* maps = nullptr) {
    TokenSequence out = seq;
    out.tokens = mhsa_tokens(seq.tokens, p, num_heads, maps);
    return out;
}

/// Pre-norm residual block: attention sub-layer then MLP sub-layer.
inline TokenSequence encoder_block(const TokenSequence& seq, const BlockParams& p, int num_heads,
                                   AttentionMaps* maps = nullptr) {
    TokenSequence out = seq;
    const Tensor x = seq.tokens;
    const Tensor attn = mhsa_tokens(layer_norm(x, p.ln1_w, p.ln1_b), p, num_heads, maps);
    const Tensor x1 = add(x, attn);
    const Tensor hidden = gelu(detail::affine(layer_norm(x1, p.ln2_w, p.ln2_b), p.fc1_w, p.fc1_b));
    const Tensor mlp_out = detail::affine(hidden, p.fc2_w, p.fc2_b);
    out.tokens = add(x1, mlp_out);
    return out;
}

/// Patch embedding: non-overlapping patches, linear projection, class token
/// prepended, positional embeddings added to class and patch tokens.
inline TokenSequence patch_embed(const Tensor& image, const VitModel& m) {
    const auto& cfg = m.cfg;
    const auto h = static_cast<std::size_t>(cfg.image_h);
    const auto w = static_cast<std::size_t>(cfg.image_w);
    const auto p = static_cast<std::size_t>(cfg.patch_size);
    if (image.shape() != std::vector<std::size_t>{3, h, w})
        throw DimError("patch_embed: image " + detail::shape_str(image.shape()) + ", expected [3x" +
                       std::to_string(h) + "x" + std::to_string(w) + "]");
    TapeTagScope tag(kTagEmbed);
    const std::size_t gh = h / p, gw = w / p, n = gh * gw, patch_dim = 3 * p * p;

    // Patch pixels are constants; gradients never flow into the image.
    Tensor patches = Tensor::zeros({n, patch_dim});
    const double* img = image.data().data();
    double* pp = patches.mutable_data().data();
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc) {
            double* dst = pp + (pr * gw + pc) * patch_dim;
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx)
                        dst[(c * p + dy) * p + dx] = img[(c * h + pr * p + dy) * w + pc * p + dx];
        }

    const Tensor projected = detail::affine(patches, m.embed_w, m.embed_b);
    const Tensor with_class = concat_rows({m.cls, projected});
    TokenSequence seq;
    seq.tokens = add(with_class, m.pos);
    seq.agg_count = 0;
    seq.has_class = true;
    seq.patch_count = static_cast<int>(n);
    return seq;
}

/// Runs encoder blocks [from, to); optionally captures the attention maps
/// of the final executed block.
inline TokenSequence run_blocks(const VitModel& m, TokenSequence seq, int from, int to,
                                AttentionMaps* last_block_maps = nullptr) {
    if (from < 0 || to < from || to > m.cfg.num_blocks)
        throw ContractError("run_blocks: bad range [" + std::to_string(from) + "," +
                            std::to_string(to) + ") of " + std::to_string(m.cfg.num_blocks));
    for (int b = from; b < to; ++b) {
        TapeTagScope tag(b);
        AttentionMaps* maps = (last_block_maps && b == to - 1) ? last_block_maps : nullptr;
        seq = encoder_block(seq, m.blocks[b], m.cfg.num_heads, maps);
    }
    return seq;
}

inline TokenSequence forward_to_block(const Tensor& image, const VitModel& m, int stop_block) {
    if (stop_block < 0 || stop_block > m.cfg.num_blocks)
        throw ContractError("forward_to_block: stop_block " + std::to_string(stop_block) +
                            " out of [0," + std::to_string(m.cfg.num_blocks) + "]");
    return run_blocks(m, patch_embed(image, m), 0, stop_block);
}

inline TokenSequence apply_final_ln(const TokenSequence& seq, const VitModel& m) {
    if (!m.cfg.final_layer_norm) return seq;
    TokenSequence out = seq;
    out.tokens = layer_norm(seq.tokens, m.ln_f_w, m.ln_f_b);
    return out;
}

// --- checkpointing ---------------------------------------------------------

inline void save_checkpoint(const std::string& path, VitModel& model,
                            const Tensor* agg_tokens = nullptr) {
    std::vector<NamedTensor> entries;
    for (auto& [name, t] : model.named_params()) entries.push_back({name, *t});
    if (agg_tokens) entries.push_back({"agg", *agg_tokens});
    save_tensor_archive(path, entries);
}

/// Rebuilds a model from an archive. Every canonical parameter must be
/// present with the shape the config implies; an "agg" entry is returned
/// separately when present.
inline VitModel load_checkpoint(const std::string& path, const BackboneConfig& cfg,
                                std::optional<Tensor>* agg_out = nullptr,
                                int agg_tokens_for_pos = 0) {
    VitModel m = VitModel::random_init(cfg, 0, agg_tokens_for_pos);
    std::map<std::string, Tensor> by_name;
    for (NamedTensor& nt : load_tensor_archive(path)) by_name.emplace(nt.name, nt.value);
    for (auto& [name, slot] : m.named_params()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw SchemaError(path + ": missing checkpoint entry " + name);
        if (it->second.shape() != slot->shape())
            throw SchemaError(path + ": entry " + name + " has shape " +
                              detail::shape_str(it->second.shape()) + ", expected " +
                              detail::shape_str(slot->shape()));
        Tensor loaded = it->second;
        loaded.set_requires_grad(slot->requires_grad());
        *slot = loaded;
    }
    if (agg_out) {
        auto it = by_name.find("agg");
        if (it != by_name.end()) {
            Tensor agg = it->second;
            agg.set_requires_grad(true);
            *agg_out = agg;
        } else {
            agg_out->reset();
        }
    }
    return m;
}

}  // namespace aggvpr
