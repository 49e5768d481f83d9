#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggvpr/errors.hpp"

namespace aggvpr {

enum class Role { kQuery, kDatabase };

enum class PositionKind { kMeters, kFrames };

struct PlaceRecord {
    std::uint64_t id = 0;
    std::string path;
    Role role = Role::kDatabase;
    double easting_m = 0.0;
    double northing_m = 0.0;
    std::int64_t frame = 0;
};

/// Dataset records plus the ground-truth threshold. All records share one
/// position kind and ids are unique.
struct PlaceManifest {
    std::vector<PlaceRecord> records;
    PositionKind kind = PositionKind::kMeters;
    double threshold_m = 25.0;
    std::int64_t threshold_frames = 10;

    std::vector<const PlaceRecord*> with_role(Role r) const {
        std::vector<const PlaceRecord*> out;
        for (const PlaceRecord& rec : records)
            if (rec.role == r) out.push_back(&rec);
        return out;
    }

    /// Ground distance between two records under the manifest's kind.
    double ground_distance(const PlaceRecord& a, const PlaceRecord& b) const {
        if (kind == PositionKind::kMeters) {
            const double de = a.easting_m - b.easting_m;
            const double dn = a.northing_m - b.northing_m;
            return std::sqrt(de * de + dn * dn);
        }
        return static_cast<double>(a.frame > b.frame ? a.frame - b.frame : b.frame - a.frame);
    }

    bool within_threshold(const PlaceRecord& a, const PlaceRecord& b) const {
        if (kind == PositionKind::kMeters) return ground_distance(a, b) <= threshold_m;
        return std::llabs(a.frame - b.frame) <= threshold_frames;
    }
};

inline PlaceManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    PlaceManifest m;
    bool kind_known = false;
    std::set<std::uint64_t> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                const std::string key = line.substr(1, eq - 1);
                const std::string value = line.substr(eq + 1);
                try {
                    if (key == "threshold_m") {
                        m.threshold_m = std::stod(value);
                        m.kind = PositionKind::kMeters;
                        kind_known = true;
                    } else if (key == "threshold_frames") {
                        m.threshold_frames = std::stoll(value);
                        m.kind = PositionKind::kFrames;
                        kind_known = true;
                    }
                } catch (const std::exception&) {
                    throw ParseError(path + ":" + std::to_string(line_no) + ": bad header value");
                }
            }
            continue;  // other comment lines are ignored
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        PlaceRecord rec;
        try {
            rec.id = j.at("id").get<std::uint64_t>();
            rec.path = j.at("path").get<std::string>();
            const std::string role = j.at("role").get<std::string>();
            if (role == "query")
                rec.role = Role::kQuery;
            else if (role == "database")
                rec.role = Role::kDatabase;
            else
                throw ParseError(path + ":" + std::to_string(line_no) + ": unknown role " + role);
            const bool has_meters = j.contains("easting_m") || j.contains("northing_m");
            const bool has_frame = j.contains("frame");
            if (has_meters == has_frame)
                throw SchemaError(path + ":" + std::to_string(line_no) +
                                  ": record needs either easting_m/northing_m or frame");
            const PositionKind rec_kind = has_meters ? PositionKind::kMeters : PositionKind::kFrames;
            if (kind_known && rec_kind != m.kind)
                throw SchemaError(path + ":" + std::to_string(line_no) +
                                  ": mixed position kinds in one manifest");
            m.kind = rec_kind;
            kind_known = true;
            if (has_meters) {
                rec.easting_m = j.at("easting_m").get<double>();
                rec.northing_m = j.at("northing_m").get<double>();
            } else {
                rec.frame = j.at("frame").get<std::int64_t>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!seen_ids.insert(rec.id).second)
            throw SchemaError(path + ":" + std::to_string(line_no) + ": duplicate id " +
                              std::to_string(rec.id));
        m.records.push_back(std::move(rec));
    }
    if (m.records.empty()) throw SchemaError(path + ": manifest has no records");
    return m;
}

inline void save_manifest(const PlaceManifest& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    if (m.kind == PositionKind::kMeters) {
        os << "#threshold_m=" << m.threshold_m << "\n";
    } else {
        os << "#threshold_frames=" << m.threshold_frames << "\n";
    }
    for (const PlaceRecord& rec : m.records) {
        nlohmann::json j;
        j["id"] = rec.id;
        j["path"] = rec.path;
        j["role"] = rec.role == Role::kQuery ? "query" : "database";
        if (m.kind == PositionKind::kMeters) {
            j["easting_m"] = rec.easting_m;
            j["northing_m"] = rec.northing_m;
        } else {
            j["frame"] = rec.frame;
        }
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

/// Groups records that share an exact position; views of one place carry
/// identical coordinates, which is what training batches sample over.
struct PlaceGroup {
    std::vector<int> record_indices;  // into manifest.records
};

inline std::vector<PlaceGroup> group_by_place(const PlaceManifest& m) {
    std::map<std::pair<double, double>, std::vector<int>> meters;
    std::map<std::int64_t, std::vector<int>> frames;
    for (int i = 0; i < static_cast<int>(m.records.size()); ++i) {
        const PlaceRecord& r = m.records[i];
        if (m.kind == PositionKind::kMeters)
            meters[{r.easting_m, r.northing_m}].push_back(i);
        else
            frames[r.frame].push_back(i);
    }
    std::vector<PlaceGroup> out;
    if (m.kind == PositionKind::kMeters)
        for (auto& [pos, idx] : meters) out.push_back({std::move(idx)});
    else
        for (auto& [pos, idx] : frames) out.push_back({std::move(idx)});
    return out;
}

}  // namespace aggvpr
