#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace rme {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace proj {

/// Euclidean projection onto the nonnegative orthant.
inline VectorXd onto_orthant(const VectorXd& v) { return v.cwiseMax(0.0); }

/// Euclidean projection onto the hyperplane {x : a·x = c}.
inline VectorXd onto_hyperplane(const VectorXd& v, const VectorXd& a, double c) {
    const double an2 = a.squaredNorm();
    if (an2 == 0.0) return v;
    return v - ((a.dot(v) - c) / an2) * a;
}

/// Euclidean projection onto the halfspace {x : a·x >= c}.
inline VectorXd onto_halfspace(const VectorXd& v, const VectorXd& a, double c) {
    const double an2 = a.squaredNorm();
    if (an2 == 0.0) return v;
    const double gap = c - a.dot(v);
    if (gap <= 0.0) return v;
    return v + (gap / an2) * a;
}

/// Euclidean projection onto the l2 ball {x : ||x - center|| <= radius}.
inline VectorXd onto_l2_ball(const VectorXd& v, const VectorXd& center, double radius) {
    VectorXd d = v - center;
    const double n = d.norm();
    if (n <= radius) return v;
    if (n == 0.0) return center;
    return center + (radius / n) * d;
}

/// Threshold tau such that sum_i max(y_i - tau, 0) = cap, for cap > 0 and
/// sum_i max(y_i, 0) >= cap. Sorted-threshold computation, O(n log n).
inline double simplex_threshold(const VectorXd& y, double cap) {
    std::vector<double> u(y.data(), y.data() + y.size());
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cum = 0.0;
    double tau = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
        cum += u[k];
        const double cand = (cum - cap) / static_cast<double>(k + 1);
        if (k + 1 == u.size() || u[k + 1] <= cand) {
            tau = cand;
            break;
        }
    }
    return tau;
}

/// Euclidean projection onto {x >= 0, sum(x) <= cap}.
///
/// If clipping already satisfies the budget, the clip is the projection;
/// otherwise the sum constraint is active and the projection is the
/// sorted-threshold projection onto the scaled simplex {x >= 0, sum(x) = cap}.
inline VectorXd onto_capped_simplex(const VectorXd& y, double cap) {
    VectorXd x = y.cwiseMax(0.0);
    if (x.sum() <= cap) return x;
    const double tau = simplex_threshold(y, cap);
    return (y.array() - tau).cwiseMax(0.0).matrix();
}

/// Euclidean projection onto the l1 ball {x : ||x - center||_1 <= radius},
/// via the sign-split reduction to a simplex projection.
inline VectorXd onto_l1_ball(const VectorXd& v, const VectorXd& center, double radius) {
    VectorXd w = v - center;
    if (w.lpNorm<1>() <= radius) return v;
    if (radius <= 0.0) return center;
    VectorXd a = w.cwiseAbs();
    const double tau = simplex_threshold(a, radius);
    VectorXd u = (a.array() - tau).cwiseMax(0.0).matrix();
    for (int i = 0; i < w.size(); ++i) w[i] = (w[i] < 0.0 ? -u[i] : u[i]);
    return center + w;
}

/// Projection onto the p-norm ball, p in {1, 2}.
inline VectorXd onto_p_ball(const VectorXd& v, const VectorXd& center, double radius, int p) {
    return p == 1 ? onto_l1_ball(v, center, radius) : onto_l2_ball(v, center, radius);
}

}  // namespace proj

/// Dykstra's alternating projections onto an intersection of convex sets.
///
/// Each entry of `project` replaces its argument with the projection onto one
/// component set; `violation` returns the largest constraint violation of a
/// point across all components. Iterates carry one correction vector per set,
/// which makes the limit the true Euclidean projection of the input onto the
/// intersection (plain cyclic projection would not).
struct DykstraResult {
    VectorXd point;
    int cycles = 0;
    double violation = 0.0;
    bool converged = false;
};

inline DykstraResult dykstra_project(
    VectorXd x,
    std::span<const std::function<void(VectorXd&)>> project,
    const std::function<double(const VectorXd&)>& violation,
    double feas_tol = 1e-10,
    int max_cycles = 10000,
    double move_tol = std::numeric_limits<double>::infinity()) {
    const auto sets = project.size();
    std::vector<VectorXd> corr(sets, VectorXd::Zero(x.size()));
    DykstraResult out;
    VectorXd y(x.size());
    VectorXd prev(x.size());
    for (int cycle = 1; cycle <= max_cycles; ++cycle) {
        prev = x;
        for (std::size_t k = 0; k < sets; ++k) {
            y = x + corr[k];
            x = y;
            project[k](x);
            corr[k] = y - x;
        }
        out.cycles = cycle;
        const double viol = violation(x);
        out.violation = viol;
        const double shift = (x - prev).lpNorm<Eigen::Infinity>();
        // Feasibility alone is not convergence: iterates can enter the set
        // well before they reach the projection, so also require the cycle
        // movement to settle when the caller asked for projection accuracy.
        if (viol <= feas_tol && shift <= move_tol) {
            out.converged = true;
            break;
        }
        // No measurable movement and still infeasible: numerically stalled.
        if (shift <= 1e-17 * (1.0 + x.lpNorm<Eigen::Infinity>())) break;
    }
    out.point = std::move(x);
    return out;
}

}  // namespace rme
