#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "aggvpr/aggregation.hpp"
#include "aggvpr/errors.hpp"
#include "aggvpr/synth.hpp"
#include "aggvpr/token_init.hpp"
#include "aggvpr/training.hpp"
#include "aggvpr/vit.hpp"

namespace aggvpr {

namespace detail {

/// Flat UTF-8 key=value file: one pair per line, '#' starts a comment,
/// blank lines ignored, unknown keys rejected. Values round-trip exactly
/// (doubles are written with 17 significant digits).
class KvFile {
public:
    void bind_int(const std::string& key, int* slot) {
        setters_[key] = [slot, key](const std::string& v) { *slot = parse_ll(v, key); };
        getters_.emplace_back(key, [slot] { return std::to_string(*slot); });
    }
    void bind_u64(const std::string& key, std::uint64_t* slot) {
        setters_[key] = [slot, key](const std::string& v) {
            try {
                *slot = std::stoull(v);
            } catch (const std::exception&) {
                throw ParseError("bad integer for " + key + ": " + v);
            }
        };
        getters_.emplace_back(key, [slot] { return std::to_string(*slot); });
    }
    void bind_double(const std::string& key, double* slot) {
        setters_[key] = [slot, key](const std::string& v) {
            try {
                std::size_t used = 0;
                *slot = std::stod(v, &used);
                if (used != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
                throw ParseError("bad real for " + key + ": " + v);
            }
        };
        getters_.emplace_back(key, [slot] {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", *slot);
            return std::string(buf);
        });
    }
    void bind_bool(const std::string& key, bool* slot) {
        setters_[key] = [slot, key](const std::string& v) {
            if (v == "true")
                *slot = true;
            else if (v == "false")
                *slot = false;
            else
                throw ParseError("bad bool for " + key + ": " + v);
        };
        getters_.emplace_back(key, [slot] { return std::string(*slot ? "true" : "false"); });
    }
    void bind_string(const std::string& key, std::string* slot) {
        setters_[key] = [slot](const std::string& v) { *slot = v; };
        getters_.emplace_back(key, [slot] { return *slot; });
    }
    void bind_enum(const std::string& key, const std::vector<std::string>& names, int* slot) {
        setters_[key] = [slot, names, key](const std::string& v) {
            for (std::size_t i = 0; i < names.size(); ++i)
                if (names[i] == v) {
                    *slot = static_cast<int>(i);
                    return;
                }
            throw ParseError("bad value for " + key + ": " + v);
        };
        getters_.emplace_back(key, [slot, names] { return names[*slot]; });
    }

    void set(const std::string& key, const std::string& value) {
        auto it = setters_.find(key);
        if (it == setters_.end()) throw ParseError("unknown config key: " + key);
        it->second(value);
    }

    void apply_line(const std::string& raw, const std::string& where) {
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') return;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(where + ": expected key=value, got " + line);
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }

    void load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open " + path);
        std::string line;
        std::size_t ln = 0;
        while (std::getline(is, line)) {
            ++ln;
            apply_line(line, path + ":" + std::to_string(ln));
        }
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot open " + path + " for writing");
        for (const auto& [key, get] : getters_) os << key << "=" << get() << "\n";
        if (!os) throw IoError("write failed: " + path);
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        std::size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? "" : s.substr(a, b - a + 1);
    }
    static long long parse_ll(const std::string& v, const std::string& key) {
        try {
            std::size_t used = 0;
            const long long r = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ParseError("bad integer for " + key + ": " + v);
        }
    }

    std::map<std::string, std::function<void(const std::string&)>> setters_;
    std::vector<std::pair<std::string, std::function<std::string()>>> getters_;
};

}  // namespace detail

/// The complete experiment configuration: backbone, aggregation, training,
/// token initialization and paths, one flat key space.
struct RunConfig {
    BackboneConfig backbone;
    AggConfig agg;
    TrainConfig train;
    TokenInitOptions token_init;
    DescriptorSource descriptor_source = DescriptorSource::kAggTokens;
    int threads = 1;
    std::uint64_t seed = 0;
    std::string train_manifest;
    std::string val_manifest;
    std::string model_checkpoint;
    std::string agg_checkpoint;
    std::string out_dir;

    RunConfig() {
        // Desk-scale defaults; the toy test configuration overrides these.
        backbone.image_h = 56;
        backbone.image_w = 56;
        backbone.patch_size = 8;
        backbone.embed_dim = 64;
        backbone.num_blocks = 8;
        backbone.num_heads = 4;
        backbone.frozen_prefix = 4;
    }

    static RunConfig from_file(const std::string& path) {
        RunConfig cfg;
        auto kv = cfg.bind();
        kv.load(path);
        cfg.backbone.validate();
        return cfg;
    }

    void to_file(const std::string& path) const {
        auto kv = const_cast<RunConfig*>(this)->bind();
        kv.save(path);
    }

    void apply_override(const std::string& key_eq_value) {
        auto kv = bind();
        kv.apply_line(key_eq_value, "--set");
    }

    detail::KvFile bind() {
        detail::KvFile kv;
        kv.bind_int("image_h", &backbone.image_h);
        kv.bind_int("image_w", &backbone.image_w);
        kv.bind_int("patch_size", &backbone.patch_size);
        kv.bind_int("embed_dim", &backbone.embed_dim);
        kv.bind_int("num_blocks", &backbone.num_blocks);
        kv.bind_int("num_heads", &backbone.num_heads);
        kv.bind_int("frozen_prefix", &backbone.frozen_prefix);
        kv.bind_int("mlp_ratio", &backbone.mlp_ratio);
        kv.bind_bool("pos_embed_on_agg", &backbone.pos_embed_on_agg);
        kv.bind_bool("final_layer_norm", &backbone.final_layer_norm);
        kv.bind_int("agg_tokens", &agg.num_tokens);
        kv.bind_enum("strategy", {"a", "a_hat", "b", "c", "d"},
                     reinterpret_cast<int*>(&agg.strategy));
        kv.bind_enum("init_method", {"zero", "normal", "centers", "centers_l2n"},
                     reinterpret_cast<int*>(&agg.init));
        kv.bind_enum("descriptor_source", {"agg", "class", "mean"},
                     reinterpret_cast<int*>(&descriptor_source));
        kv.bind_int("places_per_batch", &train.places_per_batch);
        kv.bind_int("images_per_place", &train.images_per_place);
        kv.bind_double("lr", &train.lr);
        kv.bind_int("lr_halving_epochs", &train.lr_halving_epochs);
        kv.bind_int("max_epochs", &train.max_epochs);
        kv.bind_double("ms_alpha", &train.ms_alpha);
        kv.bind_double("ms_beta", &train.ms_beta);
        kv.bind_double("ms_lambda", &train.ms_lambda);
        kv.bind_double("ms_margin", &train.ms_margin);
        kv.bind_int("kmeans_sample_images", &token_init.sample_images);
        kv.bind_int("kmeans_max_iter", &token_init.kmeans_max_iter);
        kv.bind_double("kmeans_tol", &token_init.kmeans_tol);
        kv.bind_int("threads", &threads);
        kv.bind_u64("seed", &seed);
        kv.bind_string("train_manifest", &train_manifest);
        kv.bind_string("val_manifest", &val_manifest);
        kv.bind_string("model_checkpoint", &model_checkpoint);
        kv.bind_string("agg_checkpoint", &agg_checkpoint);
        kv.bind_string("out_dir", &out_dir);
        return kv;
    }
};

inline SynthSpec synth_spec_from_file(const std::string& path) {
    SynthSpec spec;
    detail::KvFile kv;
    kv.bind_int("num_places", &spec.num_places);
    kv.bind_int("views_per_place", &spec.views_per_place);
    kv.bind_int("image_size", &spec.image_size);
    kv.bind_int("confuser_pairs", &spec.confuser_pairs);
    kv.bind_int("max_shift_px", &spec.max_shift_px);
    kv.bind_int("max_brightness_delta", &spec.max_brightness_delta);
    kv.bind_double("noise_sigma", &spec.noise_sigma);
    kv.bind_double("grid_spacing_m", &spec.grid_spacing_m);
    kv.bind_u64("seed", &spec.seed);
    kv.load(path);
    spec.validate();
    return spec;
}

inline void synth_spec_to_file(const SynthSpec& spec_in, const std::string& path) {
    SynthSpec spec = spec_in;
    detail::KvFile kv;
    kv.bind_int("num_places", &spec.num_places);
    kv.bind_int("views_per_place", &spec.views_per_place);
    kv.bind_int("image_size", &spec.image_size);
    kv.bind_int("confuser_pairs", &spec.confuser_pairs);
    kv.bind_int("max_shift_px", &spec.max_shift_px);
    kv.bind_int("max_brightness_delta", &spec.max_brightness_delta);
    kv.bind_double("noise_sigma", &spec.noise_sigma);
    kv.bind_double("grid_spacing_m", &spec.grid_spacing_m);
    kv.bind_u64("seed", &spec.seed);
    kv.save(path);
}

}  // namespace aggvpr
