#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggvpr/errors.hpp"
#include "aggvpr/image_io.hpp"
#include "aggvpr/manifest.hpp"
#include "aggvpr/rng.hpp"

namespace aggvpr {

/// Parameters of the synthetic place-image corpus.
///
/// Each place is a low-frequency texture carrying a few high-frequency
/// landmark patches; confuser pairs share everything except the content of
/// one landmark slot, reproducing the look-alike failure mode retrieval
/// has to survive. Views are shifted crops with brightness offset and
/// pixel noise. The pixel path is integer-only, so a given spec produces
/// the same bytes on any platform.
struct SynthSpec {
    int num_places = 64;
    int views_per_place = 6;
    int image_size = 56;
    int confuser_pairs = 8;
    int max_shift_px = 10;
    int max_brightness_delta = 25;
    double noise_sigma = 10.0;
    double grid_spacing_m = 100.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_places < 1 || views_per_place < 1 || image_size < 8)
            throw ContractError("synth: num_places, views_per_place, image_size too small");
        if (confuser_pairs < 0 || confuser_pairs * 2 > num_places)
            throw ContractError("synth: confuser_pairs*2 must not exceed num_places");
        if (max_shift_px < 0 || max_shift_px >= image_size / 4)
            throw ContractError("synth: shifts must be below image_size/4");
        if (max_brightness_delta < 0 || noise_sigma < 0)
            throw ContractError("synth: negative jitter");
        if (grid_spacing_m <= 0) throw ContractError("synth: grid spacing must be positive");
    }
};

namespace detail {

struct LandmarkRect {
    int x, y, w, h;  // canvas coordinates
};

// Low-frequency value noise: coarse random lattice, integer bilinear
// interpolation with 8-bit fixed-point weights.
inline void fill_base_texture(ImageU8& canvas, std::uint64_t texture_seed) {
    constexpr int kCell = 8;
    const int gw = canvas.width / kCell + 2, gh = canvas.height / kCell + 2;
    Rng rng(texture_seed);
    std::vector<std::uint8_t> lattice(static_cast<std::size_t>(gw) * gh * 3);
    for (auto& v : lattice) v = static_cast<std::uint8_t>(rng.next_below(256));
    for (int y = 0; y < canvas.height; ++y) {
        const int cy = y / kCell, wy = (y % kCell) * 256 / kCell;
        for (int x = 0; x < canvas.width; ++x) {
            const int cx = x / kCell, wx = (x % kCell) * 256 / kCell;
            for (int c = 0; c < 3; ++c) {
                const int n00 = lattice[(cy * gw + cx) * 3 + c];
                const int n01 = lattice[(cy * gw + cx + 1) * 3 + c];
                const int n10 = lattice[((cy + 1) * gw + cx) * 3 + c];
                const int n11 = lattice[((cy + 1) * gw + cx + 1) * 3 + c];
                const int top = n00 * (256 - wx) + n01 * wx;
                const int bot = n10 * (256 - wx) + n11 * wx;
                canvas.at(y, x, c) =
                    static_cast<std::uint8_t>((top * (256 - wy) + bot * wy) >> 16);
            }
        }
    }
}

// A small high-contrast patch: checkerboard, stripes or random blocks in
// two strong colors drawn from the content stream.
inline void stamp_landmark(ImageU8& canvas, const LandmarkRect& r, std::uint64_t content_seed) {
    Rng rng(content_seed);
    std::uint8_t col_a[3], col_b[3];
    for (int c = 0; c < 3; ++c) {
        col_a[c] = static_cast<std::uint8_t>(rng.next_below(96));         // dark
        col_b[c] = static_cast<std::uint8_t>(160 + rng.next_below(96));   // bright
    }
    const int pattern = static_cast<int>(rng.next_below(3));
    const int cell = 2 + static_cast<int>(rng.next_below(3));
    std::vector<std::uint8_t> block_choice;
    if (pattern == 2) {
        const int cells = ((r.w + cell - 1) / cell) * ((r.h + cell - 1) / cell);
        block_choice.resize(cells);
        for (auto& b : block_choice) b = static_cast<std::uint8_t>(rng.next_below(2));
    }
    for (int dy = 0; dy < r.h; ++dy)
        for (int dx = 0; dx < r.w; ++dx) {
            bool use_a;
            if (pattern == 0) {  // checkerboard
                use_a = ((dx / cell) + (dy / cell)) % 2 == 0;
            } else if (pattern == 1) {  // stripes
                use_a = (dx / cell) % 2 == 0;
            } else {  // random blocks
                const int bw = (r.w + cell - 1) / cell;
                use_a = block_choice[(dy / cell) * bw + (dx / cell)] != 0;
            }
            const std::uint8_t* col = use_a ? col_a : col_b;
            for (int c = 0; c < 3; ++c) canvas.at(r.y + dy, r.x + dx, c) = col[c];
        }
}

inline std::uint8_t clamp_u8(int v) {
    return static_cast<std::uint8_t>(std::min(255, std::max(0, v)));
}

}  // namespace detail

/// Generation metadata sidecar, enough to locate each landmark in each
/// written view.
struct SynthLayout {
    struct Place {
        int base_id;  // places sharing a base texture share this
        std::vector<detail::LandmarkRect> landmarks;
        int confuser_with = -1;
        int diff_slot = -1;
    };
    struct View {
        int dx, dy, brightness;
    };
    std::vector<Place> places;
    std::vector<View> views;
};

inline void write_layout(const SynthLayout& layout, const std::string& path) {
    nlohmann::json j;
    auto& places = j["places"] = nlohmann::json::array();
    for (const auto& p : layout.places) {
        nlohmann::json e;
        e["base_id"] = p.base_id;
        e["confuser_with"] = p.confuser_with;
        e["diff_slot"] = p.diff_slot;
        auto& lms = e["landmarks"] = nlohmann::json::array();
        for (const auto& r : p.landmarks)
            lms.push_back({{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}});
        places.push_back(std::move(e));
    }
    auto& views = j["views"] = nlohmann::json::array();
    for (const auto& v : layout.views)
        views.push_back({{"dx", v.dx}, {"dy", v.dy}, {"brightness", v.brightness}});
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
}

struct SynthResult {
    PlaceManifest eval_manifest;
    PlaceManifest train_manifest;
    SynthLayout layout;
};

/// Writes the corpus under out_dir: images/, eval.jsonl, train.jsonl and
/// layout.json. View 0 of each place is the evaluation query and the
/// remaining views form the database; the train manifest lists exactly the
/// database views, keeping the query set unseen during training.
inline SynthResult generate(const SynthSpec& spec, const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir + "/images", ec);
    if (ec) throw IoError("cannot create " + out_dir + "/images: " + ec.message());

    const int canvas_size = spec.image_size + 2 * spec.max_shift_px;
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.num_places))));
    const int noise_amp = static_cast<int>(std::lround(spec.noise_sigma * 1.7320508075688772));

    SynthResult result;
    result.eval_manifest.kind = PositionKind::kMeters;
    result.eval_manifest.threshold_m = 25.0;
    result.train_manifest.kind = PositionKind::kMeters;
    result.train_manifest.threshold_m = 25.0;

    // View jitter is keyed by view index alone: view v of any two places
    // shares shift, brightness and noise, so images of a confuser pair
    // differ only where their canvases differ.
    result.layout.views.resize(spec.views_per_place);
    for (int v = 0; v < spec.views_per_place; ++v) {
        Rng jitter(mix_seed(spec.seed, "jitter", static_cast<std::uint64_t>(v)));
        auto& view = result.layout.views[v];
        view.dx = static_cast<int>(jitter.next_between(-spec.max_shift_px, spec.max_shift_px));
        view.dy = static_cast<int>(jitter.next_between(-spec.max_shift_px, spec.max_shift_px));
        view.brightness = static_cast<int>(
            jitter.next_between(-spec.max_brightness_delta, spec.max_brightness_delta));
    }

    result.layout.places.resize(spec.num_places);
    for (int p = 0; p < spec.num_places; ++p) {
        auto& place = result.layout.places[p];
        const bool in_pair = p < 2 * spec.confuser_pairs;
        const int pair_index = in_pair ? p / 2 : -1;
        place.base_id = in_pair ? -(pair_index + 1) : p;
        place.confuser_with = in_pair ? (p % 2 == 0 ? p + 1 : p - 1) : -1;
        const std::uint64_t base_key =
            mix_seed(spec.seed, "base", static_cast<std::uint64_t>(place.base_id + spec.num_places));

        ImageU8 canvas;
        canvas.width = canvas.height = canvas_size;
        canvas.pixels.resize(static_cast<std::size_t>(canvas_size) * canvas_size * 3);
        detail::fill_base_texture(canvas, mix_seed(base_key, "texture"));

        // Layout is shared within a pair; the differing slot is always
        // fully inside every crop so the pair stays distinguishable in
        // every view.
        Rng layout_rng(mix_seed(base_key, "layout"));
        const int count = static_cast<int>(layout_rng.next_between(2, 4));
        place.diff_slot = in_pair ? static_cast<int>(layout_rng.next_below(count)) : -1;
        const int common0 = 2 * spec.max_shift_px;  // region visible in all crops
        for (int l = 0; l < count; ++l) {
            detail::LandmarkRect r;
            r.w = static_cast<int>(layout_rng.next_between(10, 14));
            r.h = static_cast<int>(layout_rng.next_between(10, 14));
            if (in_pair && l == place.diff_slot) {
                r.x = common0 + static_cast<int>(layout_rng.next_below(canvas_size - common0 - r.w));
                r.y = common0 + static_cast<int>(layout_rng.next_below(canvas_size - common0 - r.h));
            } else {
                r.x = static_cast<int>(layout_rng.next_below(canvas_size - r.w));
                r.y = static_cast<int>(layout_rng.next_below(canvas_size - r.h));
            }
            place.landmarks.push_back(r);
            const bool differs = in_pair && l == place.diff_slot;
            const std::uint64_t content_seed =
                differs ? mix_seed(spec.seed, "lm_diff", static_cast<std::uint64_t>(p),
                                   static_cast<std::uint64_t>(l))
                        : mix_seed(base_key, "lm", static_cast<std::uint64_t>(l));
            detail::stamp_landmark(canvas, r, content_seed);
        }

        const double easting = (p % side) * spec.grid_spacing_m;
        const double northing = (p / side) * spec.grid_spacing_m;

        for (int v = 0; v < spec.views_per_place; ++v) {
            const auto& view = result.layout.views[v];
            ImageU8 img;
            img.width = img.height = spec.image_size;
            img.pixels.resize(static_cast<std::size_t>(spec.image_size) * spec.image_size * 3);
            Rng noise(mix_seed(spec.seed, "noise", static_cast<std::uint64_t>(v)));
            const int ox = spec.max_shift_px + view.dx, oy = spec.max_shift_px + view.dy;
            for (int y = 0; y < spec.image_size; ++y)
                for (int x = 0; x < spec.image_size; ++x)
                    for (int c = 0; c < 3; ++c) {
                        int value = canvas.at(oy + y, ox + x, c) + view.brightness;
                        if (noise_amp > 0)
                            value += static_cast<int>(noise.next_between(-noise_amp, noise_amp));
                        img.at(y, x, c) = detail::clamp_u8(value);
                    }
            char name[64];
            std::snprintf(name, sizeof(name), "images/p%03d_v%d.ppm", p, v);
            const std::string rel = name;
            write_ppm(out_dir + "/" + rel, img);

            PlaceRecord rec;
            rec.id = static_cast<std::uint64_t>(p) * spec.views_per_place + v;
            rec.path = out_dir + "/" + rel;
            rec.role = v == 0 ? Role::kQuery : Role::kDatabase;
            rec.easting_m = easting;
            rec.northing_m = northing;
            result.eval_manifest.records.push_back(rec);
            if (v != 0) {
                rec.role = Role::kDatabase;
                result.train_manifest.records.push_back(rec);
            }
        }
    }

    save_manifest(result.eval_manifest, out_dir + "/eval.jsonl");
    save_manifest(result.train_manifest, out_dir + "/train.jsonl");
    write_layout(result.layout, out_dir + "/layout.json");
    return result;
}

}  // namespace aggvpr
