#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "aggvpr/aggregation.hpp"
#include "aggvpr/errors.hpp"
#include "aggvpr/image_io.hpp"
#include "aggvpr/manifest.hpp"
#include "aggvpr/retrieval.hpp"
#include "aggvpr/rng.hpp"
#include "aggvpr/tensor.hpp"
#include "aggvpr/vit.hpp"

namespace aggvpr {

struct TrainConfig {
    int places_per_batch = 120;
    int images_per_place = 4;
    double lr = 0.00005;
    int lr_halving_epochs = 3;
    int max_epochs = 20;
    double ms_alpha = 1.0;
    double ms_beta = 50.0;
    double ms_lambda = 0.5;
    double ms_margin = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (places_per_batch < 1 || images_per_place < 2)
            throw ContractError("train: need places_per_batch >= 1 and images_per_place >= 2");
        if (!(lr > 0.0)) throw ContractError("train: lr must be positive");
        if (lr_halving_epochs < 1 || max_epochs < 0)
            throw ContractError("train: bad schedule counts");
    }
};

struct BatchLabels {
    std::vector<int> place_id;  // one per batch row
};

inline double lr_schedule(const TrainConfig& cfg, int epoch) {
    if (epoch < 0) throw ContractError("lr_schedule: negative epoch");
    return cfg.lr * std::pow(0.5, epoch / cfg.lr_halving_epochs);
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

struct Batch {
    std::vector<int> record_indices;  // into manifest.records
    BatchLabels labels;
};

namespace detail {

inline std::vector<int> eligible_groups(const std::vector<PlaceGroup>& groups, int min_images) {
    std::vector<int> out;
    for (int g = 0; g < static_cast<int>(groups.size()); ++g)
        if (static_cast<int>(groups[g].record_indices.size()) >= min_images) out.push_back(g);
    return out;
}

}  // namespace detail

inline int steps_per_epoch(const PlaceManifest& manifest, const TrainConfig& cfg) {
    const auto groups = group_by_place(manifest);
    const auto eligible = detail::eligible_groups(groups, cfg.images_per_place);
    return static_cast<int>(eligible.size()) / cfg.places_per_batch;
}

/// Deterministic place-grouped batch: each epoch permutes the eligible
/// places once and step `s` takes the s-th chunk, so one epoch's batches
/// cover every place when they tile the manifest.
inline Batch sample_batch(const PlaceManifest& manifest, const TrainConfig& cfg, int epoch,
                          int step) {
    cfg.validate();
    const auto groups = group_by_place(manifest);
    const auto eligible = detail::eligible_groups(groups, cfg.images_per_place);
    if (static_cast<int>(eligible.size()) < cfg.places_per_batch)
        throw DataError("sample_batch: " + std::to_string(eligible.size()) +
                        " places with >= " + std::to_string(cfg.images_per_place) +
                        " images, need " + std::to_string(cfg.places_per_batch));

    std::vector<int> perm = eligible;
    Rng perm_rng(mix_seed(cfg.seed, "epoch_perm", static_cast<std::uint64_t>(epoch)));
    for (int i = static_cast<int>(perm.size()) - 1; i > 0; --i)
        std::swap(perm[i], perm[perm_rng.next_below(static_cast<std::uint64_t>(i) + 1)]);

    const int chunks = static_cast<int>(perm.size()) / cfg.places_per_batch;
    const int chunk = step % chunks;
    Batch batch;
    Rng pick_rng(mix_seed(cfg.seed, "batch_pick", static_cast<std::uint64_t>(epoch),
                          static_cast<std::uint64_t>(step)));
    for (int p = 0; p < cfg.places_per_batch; ++p) {
        const int g = perm[chunk * cfg.places_per_batch + p];
        std::vector<int> images = groups[g].record_indices;
        for (int i = 0; i < cfg.images_per_place; ++i) {
            const int j = i + static_cast<int>(pick_rng.next_below(images.size() - i));
            std::swap(images[i], images[j]);
        }
        for (int i = 0; i < cfg.images_per_place; ++i) {
            batch.record_indices.push_back(images[i]);
            batch.labels.place_id.push_back(g);
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Multi-similarity loss
// ---------------------------------------------------------------------------

/// Multi-similarity loss over cosine similarities with margin-based pair
/// mining. For anchor i a positive p survives if S_ip < max_n S_in + margin
/// and a negative n survives if S_in > min_p S_ip - margin, where the
/// extremes run over the anchor's candidate pairs. An anchor with no
/// candidates on one side keeps the other side whole (nothing marks those
/// pairs easy). The result is averaged over all anchors.
inline Tensor ms_loss(const Tensor& descriptors, const BatchLabels& labels,
                      const TrainConfig& cfg) {
    const std::size_t b = descriptors.rows();
    if (b < 2) throw ContractError("ms_loss: batch must contain at least 2 descriptors");
    if (labels.place_id.size() != b)
        throw ContractError("ms_loss: " + std::to_string(labels.place_id.size()) + " labels for " +
                            std::to_string(b) + " rows");

    const Tensor sim = matmul(descriptors, transpose(descriptors));

    // Mining runs on similarity values only; the kept pairs act as
    // constants of the loss.
    const double* s = sim.data().data();
    std::vector<std::uint8_t> keep_pos(b * b, 0), keep_neg(b * b, 0);
    for (std::size_t i = 0; i < b; ++i) {
        double max_neg = -std::numeric_limits<double>::infinity();
        double min_pos = std::numeric_limits<double>::infinity();
        bool has_pos = false, has_neg = false;
        for (std::size_t j = 0; j < b; ++j) {
            if (j == i) continue;
            if (labels.place_id[i] == labels.place_id[j]) {
                has_pos = true;
                min_pos = std::min(min_pos, s[i * b + j]);
            } else {
                has_neg = true;
                max_neg = std::max(max_neg, s[i * b + j]);
            }
        }
        for (std::size_t j = 0; j < b; ++j) {
            if (j == i) continue;
            if (labels.place_id[i] == labels.place_id[j]) {
                if (!has_neg || s[i * b + j] < max_neg + cfg.ms_margin) keep_pos[i * b + j] = 1;
            } else {
                if (!has_pos || s[i * b + j] > min_pos - cfg.ms_margin) keep_neg[i * b + j] = 1;
            }
        }
    }

    const double alpha = cfg.ms_alpha, beta = cfg.ms_beta, lambda = cfg.ms_lambda;
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double pos_sum = 0.0, neg_sum = 0.0;
        for (std::size_t j = 0; j < b; ++j) {
            if (keep_pos[i * b + j]) pos_sum += std::exp(-alpha * (s[i * b + j] - lambda));
            if (keep_neg[i * b + j]) neg_sum += std::exp(beta * (s[i * b + j] - lambda));
        }
        total += std::log1p(pos_sum) / alpha + std::log1p(neg_sum) / beta;
    }
    const double value = total / static_cast<double>(b);
    if (std::isnan(value)) throw NumericError("ms_loss: NaN loss value");

    Tensor out = Tensor::from_data({1}, {value}, detail::will_record(sim.requires_grad()));
    if (out.requires_grad()) {
        auto sn = sim.node(), on = out.node();
        detail::record_node([sn, on, b, alpha, beta, lambda, keep_pos = std::move(keep_pos),
                             keep_neg = std::move(keep_neg)] {
            if (!on->grad_present() || !sn->requires_grad) return;
            const double g = on->grad[0];
            const double* s = sn->data.data();
            double* gs = sn->ensure_grad().data();
            const double inv_b = 1.0 / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i) {
                double pos_sum = 0.0, neg_sum = 0.0;
                for (std::size_t j = 0; j < b; ++j) {
                    if (keep_pos[i * b + j]) pos_sum += std::exp(-alpha * (s[i * b + j] - lambda));
                    if (keep_neg[i * b + j]) neg_sum += std::exp(beta * (s[i * b + j] - lambda));
                }
                const double pos_denom = 1.0 + pos_sum;
                const double neg_denom = 1.0 + neg_sum;
                for (std::size_t j = 0; j < b; ++j) {
                    if (keep_pos[i * b + j])
                        gs[i * b + j] +=
                            g * inv_b * (-std::exp(-alpha * (s[i * b + j] - lambda)) / pos_denom);
                    if (keep_neg[i * b + j])
                        gs[i * b + j] +=
                            g * inv_b * (std::exp(beta * (s[i * b + j] - lambda)) / neg_denom);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam over an explicit parameter list; parameters that received no
/// gradient this step are treated as having zero gradient.
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        state_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            state_[i].m.assign(params_[i].numel(), 0.0);
            state_[i].v.assign(params_[i].numel(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            auto& st = state_[i];
            const bool has_grad = p.grad_present();
            std::span<const double> g = has_grad ? p.grad() : std::span<const double>{};
            double* data = p.mutable_data().data();
            for (std::size_t j = 0; j < p.numel(); ++j) {
                const double gj = has_grad ? g[j] : 0.0;
                st.m[j] = beta1_ * st.m[j] + (1.0 - beta1_) * gj;
                st.v[j] = beta2_ * st.v[j] + (1.0 - beta2_) * gj * gj;
                const double mhat = st.m[j] / bc1;
                const double vhat = st.v[j] / bc2;
                data[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grads() {
        for (Tensor& p : params_) p.clear_grad();
    }

    const std::vector<Tensor>& params() const { return params_; }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Tensor> params_;
    std::vector<Slot> state_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Descriptor pipeline
// ---------------------------------------------------------------------------

/// Loads images once and serves tensors by manifest path.
class ImageCache {
public:
    const Tensor& get(const std::string& path) {
        auto it = cache_.find(path);
        if (it != cache_.end()) return it->second;
        return cache_.emplace(path, image_to_tensor(read_ppm(path))).first->second;
    }

private:
    std::unordered_map<std::string, Tensor> cache_;
};

/// One image-to-descriptor route. The agg route runs the insertion
/// schedule; the class and mean baselines run the plain backbone.
struct DescriptorPipeline {
    const VitModel* model = nullptr;
    const AggConfig* agg_cfg = nullptr;
    const AggTokens* agg = nullptr;
    DescriptorSource source = DescriptorSource::kAggTokens;

    Tensor descriptor(const Tensor& image) const {
        if (source == DescriptorSource::kAggTokens)
            return forward_image(image, *model, *agg_cfg, *agg, source).descriptor;
        const TokenSequence seq =
            apply_final_ln(forward_to_block(image, *model, model->cfg.num_blocks), *model);
        return assemble_descriptor(seq, source);
    }

    bool uses_agg() const { return source == DescriptorSource::kAggTokens; }
};

/// Descriptors for one manifest role in manifest order (inference mode).
inline Tensor extract_descriptors(const PlaceManifest& manifest, Role role,
                                  const DescriptorPipeline& pipeline, ImageCache& cache) {
    InferenceScope inference;
    const auto recs = manifest.with_role(role);
    if (recs.empty()) throw DataError("extract: no records with requested role");
    const Tensor first = pipeline.descriptor(cache.get(recs[0]->path));
    Tensor out = Tensor::zeros({recs.size(), first.numel()});
    double* po = out.mutable_data().data();
    std::copy(first.data().begin(), first.data().end(), po);
    for (std::size_t i = 1; i < recs.size(); ++i) {
        const Tensor d = pipeline.descriptor(cache.get(recs[i]->path));
        std::copy(d.data().begin(), d.data().end(), po + i * first.numel());
    }
    return out;
}

inline double validation_recall1(const PlaceManifest& val, const DescriptorPipeline& pipeline,
                                 ImageCache& cache) {
    const Tensor q = extract_descriptors(val, Role::kQuery, pipeline, cache);
    const Tensor db = extract_descriptors(val, Role::kDatabase, pipeline, cache);
    return recall_at_n(q, db, val, {1}).recall_at.at(1);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::string out_dir;  // empty: keep everything in memory
    bool write_checkpoints = true;
    DescriptorSource source = DescriptorSource::kAggTokens;
    int validate_every = 1;  // epochs between validation passes
    bool quiet = false;
};

struct TrainingLog {
    struct Row {
        int step;
        int epoch;
        double lr;
        double loss;
    };
    std::vector<Row> rows;
    std::vector<std::pair<int, double>> val_recall1;  // (epoch, R@1)
    int best_epoch = -1;
    double best_recall1 = -1.0;
};

inline void write_training_log(const TrainingLog& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "step,epoch,lr,loss\n";
    char buf[128];
    for (const auto& r : log.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g\n", r.step, r.epoch, r.lr, r.loss);
        os << buf;
    }
}

/// Every tensor the strategy marks trainable, in a stable order.
inline std::vector<Tensor> trainable_params(VitModel& model, AggTokens& agg, bool include_agg) {
    std::vector<Tensor> out;
    for (auto& [name, t] : model.named_params())
        if (t->requires_grad()) out.push_back(*t);
    if (include_agg) out.push_back(agg.values);
    return out;
}

/// Metric-learning fine-tuning: place-grouped batches, multi-similarity
/// loss, Adam with the halving schedule, frozen prefix per strategy.
inline TrainingLog train(VitModel& model, AggTokens& agg, const PlaceManifest& train_manifest,
                         const PlaceManifest* val_manifest, TrainConfig cfg,
                         const AggConfig& agg_cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    apply_strategy_freeze(model, agg_cfg);
    agg.values.set_requires_grad(true);

    const DescriptorPipeline pipeline{&model, &agg_cfg, &agg, opts.source};
    AdamOptimizer optimizer(trainable_params(model, agg, pipeline.uses_agg()));
    ImageCache cache;
    TrainingLog log;
    const int spe = steps_per_epoch(train_manifest, cfg);
    if (spe < 1 && cfg.max_epochs > 0)
        throw DataError("train: manifest too small for one batch per epoch");
    if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);

    int global_step = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_schedule(cfg, epoch);
        for (int step = 0; step < spe; ++step) {
            const Batch batch = sample_batch(train_manifest, cfg, epoch, step);
            Tape tape;
            double loss_value;
            {
                TapeScope scope(tape);
                std::vector<Tensor> rows;
                rows.reserve(batch.record_indices.size());
                for (int idx : batch.record_indices) {
                    const Tensor d = pipeline.descriptor(cache.get(train_manifest.records[idx].path));
                    rows.push_back(reshape(d, {1, d.numel()}));
                }
                const Tensor descriptors = concat_rows(rows);
                const Tensor loss = ms_loss(descriptors, batch.labels, cfg);
                loss_value = loss.at(0);
                if (std::isnan(loss_value))
                    throw NumericError("train: NaN loss at epoch " + std::to_string(epoch) +
                                       " step " + std::to_string(step));
                backward(loss, tape);
            }
            optimizer.step(lr);
            optimizer.zero_grads();
            ++global_step;
            log.rows.push_back({global_step, epoch, lr, loss_value});
        }

        if (!opts.out_dir.empty() && opts.write_checkpoints)
            save_checkpoint(opts.out_dir + "/ckpt_epoch" + std::to_string(epoch) + ".imgt", model,
                            &agg.values);
        if (val_manifest && (epoch % opts.validate_every == 0 || epoch == cfg.max_epochs - 1)) {
            const double r1 = validation_recall1(*val_manifest, pipeline, cache);
            log.val_recall1.emplace_back(epoch, r1);
            if (r1 > log.best_recall1) {
                log.best_recall1 = r1;
                log.best_epoch = epoch;
                if (!opts.out_dir.empty() && opts.write_checkpoints)
                    save_checkpoint(opts.out_dir + "/ckpt_best.imgt", model, &agg.values);
            }
            if (!opts.quiet)
                std::cerr << "epoch " << epoch << " lr " << lr << " val R@1 " << r1 << "\n";
        }
    }
    if (!opts.out_dir.empty()) write_training_log(log, opts.out_dir + "/training_log.csv");
    return log;
}

}  // namespace aggvpr
