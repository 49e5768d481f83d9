#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "aggvpr/errors.hpp"
#include "aggvpr/manifest.hpp"
#include "aggvpr/tensor.hpp"

namespace aggvpr {

/// Exact inner-product index over L2-normalized descriptor rows; the scan
/// is blocked but returns exactly what a full scan would.
class Index {
public:
    explicit Index(Tensor descriptors) : descriptors_(std::move(descriptors)) {
        if (descriptors_.rank() != 2) throw ContractError("index: descriptors must be [n×d]");
    }

    std::size_t size() const { return descriptors_.rows(); }
    std::size_t dim() const { return descriptors_.cols(); }

    struct Hit {
        double score;
        int row;
    };

    /// Top-n rows by inner product, ties broken by ascending row index.
    std::vector<Hit> top_n(std::span<const double> query, std::size_t n) const {
        if (query.size() != dim()) throw DimError("index: query dim mismatch");
        const std::size_t rows = size(), d = dim();
        const double* base = descriptors_.data().data();
        std::vector<Hit> best;
        best.reserve(n + 1);
        auto better = [](const Hit& a, const Hit& b) {
            return a.score > b.score || (a.score == b.score && a.row < b.row);
        };
        constexpr std::size_t kBlock = 256;
        for (std::size_t b0 = 0; b0 < rows; b0 += kBlock) {
            const std::size_t b1 = std::min(rows, b0 + kBlock);
            for (std::size_t r = b0; r < b1; ++r) {
                const double* row = base + r * d;
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += row[j] * query[j];
                const Hit h{s, static_cast<int>(r)};
                if (best.size() < n) {
                    best.push_back(h);
                    std::push_heap(best.begin(), best.end(), better);
                } else if (!best.empty() && better(h, best.front())) {
                    std::pop_heap(best.begin(), best.end(), better);
                    best.back() = h;
                    std::push_heap(best.begin(), best.end(), better);
                }
            }
        }
        std::sort_heap(best.begin(), best.end(), better);
        return best;
    }

private:
    Tensor descriptors_;
};

inline Index build_index(const Tensor& descriptors) {
    const std::size_t rows = descriptors.rows(), d = descriptors.cols();
    const double* p = descriptors.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += p[r * d + j] * p[r * d + j];
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
            std::cerr << "warning: index row " << r << " is not L2-normalized (norm "
                      << std::sqrt(sq) << ")\n";
            break;
        }
    }
    return Index(descriptors);
}

enum class NoPositivePolicy { kExclude, kCountAsFail };

struct QueryOutcome {
    std::uint64_t query_id = 0;
    std::vector<std::uint64_t> ranked_ids;
    std::vector<double> scores;
    bool has_positive = false;
    int first_correct_rank = -1;  // 1-based, -1 if none in the ranked list
};

struct EvalReport {
    std::map<int, double> recall_at;
    std::vector<QueryOutcome> per_query;
    int num_queries = 0;   // evaluated queries (after exclusion policy)
    int num_excluded = 0;  // queries with no in-threshold database record
    int num_db = 0;
    double wall_time_s = 0.0;
};

/// Recall@N over exact retrieval. Query/database descriptor rows follow
/// the manifest order of their role. A prediction at rank <= N succeeds
/// when its ground distance is within the manifest threshold.
inline EvalReport recall_at_n(const Tensor& query_desc, const Tensor& db_desc,
                              const PlaceManifest& manifest, std::vector<int> ns = {1, 5, 10, 20},
                              NoPositivePolicy policy = NoPositivePolicy::kExclude) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto queries = manifest.with_role(Role::kQuery);
    const auto db = manifest.with_role(Role::kDatabase);
    if (queries.empty() || db.empty())
        throw DataError("recall_at_n: need at least one query and one database record");
    if (query_desc.rows() != queries.size())
        throw DimError("recall_at_n: " + std::to_string(query_desc.rows()) +
                       " query descriptors for " + std::to_string(queries.size()) + " query records");
    if (db_desc.rows() != db.size())
        throw DimError("recall_at_n: " + std::to_string(db_desc.rows()) +
                       " database descriptors for " + std::to_string(db.size()) + " database records");
    std::sort(ns.begin(), ns.end());
    const int max_n = ns.back();

    const Index index = build_index(db_desc);
    EvalReport report;
    report.num_db = static_cast<int>(db.size());
    std::map<int, int> successes;
    for (int n : ns) successes[n] = 0;

    const double* qp = query_desc.data().data();
    const std::size_t d = query_desc.cols();
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const PlaceRecord& q = *queries[qi];
        bool any_positive = false;
        for (const PlaceRecord* rec : db)
            if (manifest.within_threshold(q, *rec)) {
                any_positive = true;
                break;
            }

        QueryOutcome outcome;
        outcome.query_id = q.id;
        outcome.has_positive = any_positive;
        const auto hits = index.top_n({qp + qi * d, d}, static_cast<std::size_t>(max_n));
        for (const auto& h : hits) {
            outcome.ranked_ids.push_back(db[h.row]->id);
            outcome.scores.push_back(h.score);
            if (outcome.first_correct_rank < 0 && manifest.within_threshold(q, *db[h.row]))
                outcome.first_correct_rank = static_cast<int>(outcome.ranked_ids.size());
        }
        if (!any_positive && policy == NoPositivePolicy::kExclude) {
            ++report.num_excluded;
            report.per_query.push_back(std::move(outcome));
            continue;
        }
        ++report.num_queries;
        if (outcome.first_correct_rank > 0)
            for (int n : ns)
                if (outcome.first_correct_rank <= n) ++successes[n];
        report.per_query.push_back(std::move(outcome));
    }

    for (int n : ns)
        report.recall_at[n] =
            report.num_queries == 0 ? 0.0 : static_cast<double>(successes[n]) / report.num_queries;
    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

inline void write_eval_report(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    for (const auto& [n, r] : report.recall_at) j["recall_at"][std::to_string(n)] = r;
    j["num_queries"] = report.num_queries;
    j["num_excluded"] = report.num_excluded;
    j["num_db"] = report.num_db;
    j["wall_time_s"] = report.wall_time_s;
    auto& per_query = j["per_query"] = nlohmann::json::array();
    for (const QueryOutcome& q : report.per_query) {
        nlohmann::json e;
        e["id"] = q.query_id;
        e["ranked_ids"] = q.ranked_ids;
        e["scores"] = q.scores;
        e["has_positive"] = q.has_positive;
        e["first_correct_rank"] = q.first_correct_rank;
        per_query.push_back(std::move(e));
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
}

inline void print_eval_report(const EvalReport& report, std::ostream& os = std::cout) {
    os << "queries evaluated: " << report.num_queries << " (excluded " << report.num_excluded
       << "), database size: " << report.num_db << "\n";
    char buf[64];
    for (const auto& [n, r] : report.recall_at) {
        std::snprintf(buf, sizeof(buf), "R@%d=%.3f\n", n, r);
        os << buf;
    }
}

}  // namespace aggvpr
