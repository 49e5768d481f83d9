#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "aggvpr/errors.hpp"
#include "aggvpr/rng.hpp"
#include "aggvpr/tensor.hpp"

namespace aggvpr {

struct KMeansResult {
    Tensor centers;  // [k×D]
    std::vector<int> assignments;
    double inertia = 0.0;
    int iterations_run = 0;
    std::vector<double> inertia_history;  // one entry per assignment step
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double c = a[j] - b[j];
        s += c * c;
    }
    return s;
}

}  // namespace detail

/// k-means++ seeding: first center uniform, remaining centers sampled with
/// probability proportional to squared distance from the chosen set.
inline Tensor kmeans_plus_plus_seed(const Tensor& points, int k, Rng& rng) {
    const std::size_t s = points.rows(), d = points.cols();
    const double* p = points.data().data();
    std::vector<std::size_t> chosen;
    chosen.push_back(rng.next_below(s));
    std::vector<double> dist2(s);
    for (std::size_t i = 0; i < s; ++i)
        dist2[i] = detail::sq_dist(p + i * d, p + chosen[0] * d, d);
    while (static_cast<int>(chosen.size()) < k) {
        double total = 0.0;
        for (double v : dist2) total += v;
        std::size_t pick;
        if (total <= 0.0) {
            pick = rng.next_below(s);  // all remaining points coincide with centers
        } else {
            const double target = rng.next_double() * total;
            double acc = 0.0;
            pick = s - 1;
            for (std::size_t i = 0; i < s; ++i) {
                acc += dist2[i];
                if (acc > target) {
                    pick = i;
                    break;
                }
            }
        }
        chosen.push_back(pick);
        for (std::size_t i = 0; i < s; ++i)
            dist2[i] = std::min(dist2[i], detail::sq_dist(p + i * d, p + pick * d, d));
    }
    Tensor centers = Tensor::zeros({static_cast<std::size_t>(k), d});
    double* c = centers.mutable_data().data();
    for (int j = 0; j < k; ++j)
        for (std::size_t t = 0; t < d; ++t) c[j * d + t] = p[chosen[j] * d + t];
    return centers;
}

/// Lloyd iterations from explicit starting centers. Assignment ties go to
/// the lowest center index; a cluster left empty by the update step is
/// re-seeded at the point farthest from its assigned center.
inline KMeansResult kmeans_from_centers(const Tensor& points, Tensor centers, int max_iter,
                                        double tol) {
    const std::size_t s = points.rows(), d = points.cols();
    const int k = static_cast<int>(centers.rows());
    if (centers.cols() != d) throw DimError("kmeans: center width mismatch");
    const double* p = points.data().data();

    KMeansResult res;
    res.assignments.assign(s, 0);
    std::vector<double> next(static_cast<std::size_t>(k) * d);
    std::vector<std::size_t> member_count(k);

    for (int iter = 0; iter < max_iter; ++iter) {
        // Assignment step.
        const double* c = centers.data().data();
        double inertia = 0.0;
        for (std::size_t i = 0; i < s; ++i) {
            int best = 0;
            double best_d = detail::sq_dist(p + i * d, c, d);
            for (int j = 1; j < k; ++j) {
                const double dj = detail::sq_dist(p + i * d, c + static_cast<std::size_t>(j) * d, d);
                if (dj < best_d) {
                    best_d = dj;
                    best = j;
                }
            }
            res.assignments[i] = best;
            inertia += best_d;
        }
        res.inertia = inertia;
        res.inertia_history.push_back(inertia);
        res.iterations_run = iter + 1;

        // Update step: means of members.
        std::fill(next.begin(), next.end(), 0.0);
        std::fill(member_count.begin(), member_count.end(), 0);
        for (std::size_t i = 0; i < s; ++i) {
            const int a = res.assignments[i];
            ++member_count[a];
            double* row = next.data() + static_cast<std::size_t>(a) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += p[i * d + j];
        }
        for (int j = 0; j < k; ++j)
            if (member_count[j] > 0) {
                double* row = next.data() + static_cast<std::size_t>(j) * d;
                for (std::size_t t = 0; t < d; ++t) row[t] /= static_cast<double>(member_count[j]);
            }

        // Empty clusters: re-seed at the point farthest from its center.
        for (int j = 0; j < k; ++j) {
            if (member_count[j] > 0) continue;
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < s; ++i) {
                const double di = detail::sq_dist(
                    p + i * d, next.data() + static_cast<std::size_t>(res.assignments[i]) * d, d);
                if (di > far_d) {
                    far_d = di;
                    far = i;
                }
            }
            std::copy(p + far * d, p + (far + 1) * d,
                      next.begin() + static_cast<std::size_t>(j) * d);
            res.assignments[far] = j;  // keeps later empty clusters from re-picking it
            member_count[j] = 1;
        }

        // Convergence: largest center movement below tol.
        double max_move = 0.0;
        double* c_mut = centers.mutable_data().data();
        for (std::size_t i = 0; i < next.size(); i += d) {
            const double move = detail::sq_dist(c_mut + i, next.data() + i, d);
            max_move = std::max(max_move, move);
        }
        std::copy(next.begin(), next.end(), c_mut);
        if (std::sqrt(max_move) < tol) break;
    }

    // Final assignment/inertia against the settled centers.
    const double* c = centers.data().data();
    double inertia = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
        int best = 0;
        double best_d = detail::sq_dist(p + i * d, c, d);
        for (int j = 1; j < k; ++j) {
            const double dj = detail::sq_dist(p + i * d, c + static_cast<std::size_t>(j) * d, d);
            if (dj < best_d) {
                best_d = dj;
                best = j;
            }
        }
        res.assignments[i] = best;
        inertia += best_d;
    }
    res.inertia = inertia;
    res.inertia_history.push_back(inertia);
    res.centers = std::move(centers);
    for (double v : res.centers.data())
        if (std::isnan(v)) throw NumericError("kmeans produced NaN centers");
    return res;
}

inline KMeansResult kmeans(const Tensor& points, int k, int max_iter, double tol,
                           std::uint64_t seed) {
    if (points.rank() != 2) throw ContractError("kmeans: points must be [S×D]");
    if (k <= 0) throw ContractError("kmeans: k must be positive");
    if (points.rows() < static_cast<std::size_t>(k))
        throw DataError("kmeans: " + std::to_string(points.rows()) + " points for k=" +
                        std::to_string(k));
    Rng rng(mix_seed(seed, "kmeans++"));
    Tensor centers = kmeans_plus_plus_seed(points, k, rng);
    return kmeans_from_centers(points, std::move(centers), max_iter, tol);
}

}  // namespace aggvpr
