#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rme/market.hpp"
#include "rme/projections.hpp"
#include "rme/rng.hpp"

namespace rme {

enum class SetFamily { direct, buyerside, joint_outer };

inline const char* family_name(SetFamily f) {
    switch (f) {
        case SetFamily::direct: return "direct";
        case SetFamily::buyerside: return "buyerside";
        default: return "joint_outer";
    }
}

/// Per-buyer valuation uncertainty sets.
///
/// Every member set lives in the nonnegative orthant and conserves total
/// utility about the all-ones bundle (v . 1 = vhat_i . 1):
///   direct      {v : ||v - vhat_i||_p <= eps ||vhat_i||_p}
///   buyerside   {theta Phi^T : ||theta - thetahat_i||_p <= eps ||thetahat_i||_p}
///   joint_outer outer approximation of joint buyer/item embedding
///               uncertainty with radii eps1 (buyer side) and eps2 (item side)
struct UncertaintyModel {
    SetFamily family = SetFamily::direct;
    int p_norm = 2;            // 1 or 2; used by direct and buyerside
    double eps = 0.0;          // direct/buyerside relative radius
    double eps1 = 0.0;         // joint_outer buyer-embedding radius
    double eps2 = 0.0;         // joint_outer item-embedding radius
    MatrixXd vhat;             // n x m nominal valuations
    MatrixXd theta;            // n x d buyer embeddings (factored families)
    MatrixXd phi;              // m x d good embeddings (factored families)
    bool large_radius = false; // set when a relative radius >= 1 was accepted

    int buyers() const { return static_cast<int>(vhat.rows()); }
    int goods() const { return static_cast<int>(vhat.cols()); }

    static UncertaintyModel direct(const Market& market, int p_norm, double eps) {
        check_radius(eps, "eps");
        check_norm(p_norm);
        UncertaintyModel model;
        model.family = SetFamily::direct;
        model.p_norm = p_norm;
        model.eps = eps;
        model.vhat = market.values;
        model.large_radius = eps >= 1.0;
        return model;
    }

    static UncertaintyModel buyerside(const Market& market, int p_norm, double eps) {
        check_radius(eps, "eps");
        check_norm(p_norm);
        if (!market.factors)
            throw std::invalid_argument("buyerside requires factored valuations");
        UncertaintyModel model;
        model.family = SetFamily::buyerside;
        model.p_norm = p_norm;
        model.eps = eps;
        model.vhat = market.values;
        model.theta = market.factors->theta;
        model.phi = market.factors->phi;
        model.large_radius = eps >= 1.0;
        return model;
    }

    static UncertaintyModel joint_outer(const Market& market, double eps1, double eps2) {
        check_radius(eps1, "eps1");
        check_radius(eps2, "eps2");
        if (!market.factors)
            throw std::invalid_argument("joint_outer requires factored valuations");
        UncertaintyModel model;
        model.family = SetFamily::joint_outer;
        model.eps1 = eps1;
        model.eps2 = eps2;
        model.vhat = market.values;
        model.theta = market.factors->theta;
        model.phi = market.factors->phi;
        model.large_radius = eps1 >= 1.0 || eps2 >= 1.0;
        return model;
    }

private:
    static void check_radius(double e, const char* name) {
        if (!(e >= 0.0))
            throw std::invalid_argument(std::string(name) + " must be nonnegative");
    }
    static void check_norm(int p) {
        if (p != 1 && p != 2) throw std::invalid_argument("p norm must be 1 or 2");
    }
};

/// Certified evaluation of u_i(z) = min{v . z : v in V_i}.
struct RobustUtilityResult {
    double value = 0.0;        // bracket midpoint
    double lower_bound = 0.0;  // dual certificate
    double upper_bound = 0.0;  // worst_v . z at the best feasible point
    VectorXd worst_v;          // witnessing worst-case valuation
    int iterations = 0;
    bool converged = true;     // bracket width <= tol
};

/// Evaluates robust utilities by primal-dual bracketing.
///
/// The upper bound is v . z at the best primal-feasible point found by
/// projected subgradient steps over V_i (projection by Dykstra composition of
/// the ball / hyperplane / orthant pieces). The lower bound is the Lagrangian
/// dual
///     max over lambda >= 0, mu of  vhat_i . (z - lambda) - S(z - lambda + mu 1)
/// where S is the support term of the centered set:
///     direct      S(y) = eps ||vhat_i||_p ||y||_p*
///     buyerside   S(y) = eps ||thetahat_i||_p ||Phi^T y||_p*
///     joint_outer S(y) = eps1 ||thetahat_i||_2 ||Phi^T y||_2
///                        + (eps2 + eps1 eps2) ||thetahat_i||_2 ||Phi||_F ||y||_2
/// Any (lambda >= 0, mu) yields a valid bound, so all acceleration below
/// (single far-out projected step, multiplier recovery from the active set,
/// Polyak refinement) only ever tightens a certified bracket.
///
/// Holds the model by reference; keep the model alive while evaluating.
class RobustUtilityEvaluator {
public:
    explicit RobustUtilityEvaluator(const UncertaintyModel& model) : model_(model) {
        const int n = model.buyers();
        conservation_.resize(n);
        for (int i = 0; i < n; ++i) conservation_[i] = model_.vhat.row(i).sum();
        radius_.resize(n);
        if (model_.family == SetFamily::direct) {
            for (int i = 0; i < n; ++i)
                radius_[i] = model_.eps * pnorm(model_.vhat.row(i).transpose(), model_.p_norm);
        } else {
            for (int i = 0; i < n; ++i) {
                const double tn = pnorm(model_.theta.row(i).transpose(),
                                        model_.family == SetFamily::joint_outer ? 2 : model_.p_norm);
                radius_[i] = (model_.family == SetFamily::joint_outer ? model_.eps1 : model_.eps) * tn;
            }
            phi_fro_ = model_.phi.norm();
            Eigen::JacobiSVD<MatrixXd> svd(model_.phi);
            phi_sigma_max_ = svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
            phi_row_norm2_max_ = 0.0;
            phi_abs_max_ = 0.0;
            for (int j = 0; j < model_.phi.rows(); ++j) {
                phi_row_norm2_max_ = std::max(phi_row_norm2_max_, model_.phi.row(j).norm());
                phi_abs_max_ = std::max(phi_abs_max_, model_.phi.row(j).cwiseAbs().maxCoeff());
            }
            phi_abs_colsum_max_ = model_.phi.cwiseAbs().colwise().sum().maxCoeff();
            cons_normal_ = model_.phi.transpose() * VectorXd::Ones(model_.phi.rows());
        }
        if (model_.family == SetFamily::joint_outer) {
            radius2_.resize(n);
            for (int i = 0; i < n; ++i) {
                const double tn = model_.theta.row(i).norm();
                radius2_[i] = (model_.eps2 + model_.eps1 * model_.eps2) * tn * phi_fro_;
            }
        }
    }

    const UncertaintyModel& model() const { return model_; }

    /// Support term S(y) of the centered set for one buyer.
    double support(int buyer, const VectorXd& y) const {
        switch (model_.family) {
            case SetFamily::direct:
                return radius_[buyer] * dual_pnorm(y, model_.p_norm);
            case SetFamily::buyerside:
                return radius_[buyer] * dual_pnorm(model_.phi.transpose() * y, model_.p_norm);
            default:
                return radius_[buyer] * (model_.phi.transpose() * y).norm() +
                       radius2_[buyer] * y.norm();
        }
    }

    /// Lower bound vhat_i . (z - lambda) - S(z - lambda + mu 1); valid for any
    /// lambda >= 0 and mu by weak duality.
    double dual_lower_bound(int buyer, const VectorXd& z, const VectorXd& lambda, double mu) const {
        VectorXd y = z - lambda;
        const double base = model_.vhat.row(buyer).dot(y);
        y.array() += mu;
        return base - support(buyer, y);
    }

    /// Upper bound on max{||v - v'||_1 : v, v' in V_i}.
    double l1_width_upper_bound(int buyer) const {
        const double sqm = std::sqrt(static_cast<double>(model_.goods()));
        switch (model_.family) {
            case SetFamily::direct:
                return model_.p_norm == 1 ? 2.0 * radius_[buyer] : 2.0 * radius_[buyer] * sqm;
            case SetFamily::buyerside:
                return model_.p_norm == 1 ? 2.0 * radius_[buyer] * phi_abs_colsum_max_
                                          : 2.0 * radius_[buyer] * phi_sigma_max_ * sqm;
            default:
                return 2.0 * sqm * (radius2_[buyer] + radius_[buyer] * phi_sigma_max_);
        }
    }

    /// Upper bound on max{|v_j - v'_j| : v, v' in V_i, j in [m]}.
    double elementwise_range_bound(int buyer) const {
        switch (model_.family) {
            case SetFamily::direct:
                return 2.0 * radius_[buyer];
            case SetFamily::buyerside:
                return 2.0 * radius_[buyer] *
                       (model_.p_norm == 1 ? phi_abs_max_ : phi_row_norm2_max_);
            default:
                return 2.0 * (radius2_[buyer] + radius_[buyer] * phi_row_norm2_max_);
        }
    }

    double radius(int buyer) const { return radius_[buyer]; }
    double conservation(int buyer) const { return conservation_[buyer]; }

    RobustUtilityResult evaluate(int buyer, const VectorXd& z, double tol = 1e-6,
                                 int max_dual_steps = 2000) const {
        if (buyer < 0 || buyer >= model_.buyers())
            throw std::out_of_range("invalid buyer index " + std::to_string(buyer));
        if (z.size() != model_.goods())
            throw std::invalid_argument("bundle dimension does not match good count");
        const VectorXd vhat = model_.vhat.row(buyer).transpose();

        RobustUtilityResult res;
        const bool degenerate = radius_[buyer] <= 0.0 &&
                                (model_.family != SetFamily::joint_outer || radius2_[buyer] <= 0.0);
        if (degenerate || z.lpNorm<Eigen::Infinity>() == 0.0) {
            res.worst_v = vhat;
            res.value = res.lower_bound = res.upper_bound = vhat.dot(z);
            if (z.lpNorm<Eigen::Infinity>() == 0.0)
                res.value = res.lower_bound = res.upper_bound = 0.0;
            return res;
        }

        Primal prim = make_primal(buyer, z);
        if (prim.grad_norm == 0.0) {
            // Objective constant over the set (z orthogonal to every member).
            res.worst_v = vhat;
            res.value = res.lower_bound = res.upper_bound = vhat.dot(z);
            return res;
        }

        // Primal side: feasible points only enter through a Dykstra projection
        // (move-tolerance stop, so the output is the projection and not just
        // the first feasible iterate).
        double upper = std::numeric_limits<double>::infinity();
        VectorXd best_x = prim.start;
        const double move_tol = 1e-10 * prim.diam;
        auto push_primal = [&](const VectorXd& cand) {
            DykstraResult pr = dykstra_project(cand, prim.projections, prim.violation, 1e-11,
                                               4000, move_tol);
            res.iterations += pr.cycles;
            if (pr.violation <= 1e-8) {
                const double val = prim.offset + prim.grad.dot(pr.point);
                if (val < upper) {
                    upper = val;
                    best_x = pr.point;
                }
            }
        };
        push_primal(prim.start);

        // Dual side: seed with the exact 1-D scan (direct l1) and multiplier
        // recovery, then refine with Polyak supergradient ascent. Every
        // candidate passes through dual_lower_bound, so the bracket stays
        // certified no matter how a candidate was produced.
        VectorXd lambda = VectorXd::Zero(model_.goods());
        double mu = remax_mu(buyer, z, lambda);
        double lower = dual_lower_bound(buyer, z, lambda, mu);
        VectorXd lam_best = lambda;
        double mu_best = mu;
        auto consider = [&](const VectorXd& lam, double m_) {
            const double val = dual_lower_bound(buyer, z, lam, m_);
            if (val > lower) {
                lower = val;
                lam_best = lam;
                mu_best = m_;
            }
        };
        if (model_.family == SetFamily::direct && model_.p_norm == 1) {
            VectorXd lam = direct_l1_dual_lambda(buyer, z);
            consider(lam, remax_mu(buyer, z, lam));
            push_primal(direct_l1_primal(buyer, z));
        }
        if (model_.family == SetFamily::buyerside && model_.p_norm == 1) {
            VertexInfo info = buyerside_l1_vertex_minimum(buyer, z);
            if (info.found) {
                push_primal(info.th);
                VectorXd lam;
                if (buyerside_l1_vertex_dual(buyer, z, info, &lam))
                    consider(lam, remax_mu(buyer, z, lam));
            }
        }
        if (model_.family == SetFamily::joint_outer &&
            model_.goods() + model_.phi.cols() <= 96 && upper - lower > tol) {
            for (double thr : {1e-7, 1e-4})
                joint_kkt_polish(buyer, z, thr, best_x, push_primal, consider);
        }
        // One far-out projected subgradient step when the fast candidates did
        // not already close the bracket; the projection of x - s g for large
        // s lands near the minimizing face.
        if (upper - lower > tol)
            push_primal(best_x - (32.0 * prim.diam / prim.grad_norm) * prim.grad);
        if (std::isfinite(upper)) {
            VectorXd lam = recover_lambda(buyer, z, best_x, prim);
            consider(lam, remax_mu(buyer, z, lam));
        }
        // The best dual point indicates the minimizing ball face; its ball
        // argmin, projected back into the set, is a near-optimal witness.
        push_primal(primal_from_dual(buyer, z, lam_best, mu_best, prim));
        if (model_.family == SetFamily::direct && model_.p_norm == 2) {
            for (double thr : {1e-7, 1e-4})
                direct_kkt_polish(buyer, z, thr, best_x, push_primal, consider);
        }

        // Smoothing continuation for the infinity-norm dual (buyerside l1):
        // log-sum-exp overestimates the max, so the smoothed dual value is
        // still a valid lower bound, while its softmax weights resolve the
        // tie structure that defeats plain subgradient steps.
        if (model_.family == SetFamily::buyerside && model_.p_norm == 1 &&
            upper - lower > tol) {
            VectorXd lam = lam_best;
            double mm = mu_best;
            const double scale0 = 1.0 + z.lpNorm<Eigen::Infinity>();
            for (double tau = 0.25 * scale0; tau > 1e-14 * scale0; tau *= 0.2) {
                for (int step = 0; step < 30; ++step) {
                    ++res.iterations;
                    VectorXd y = z - lam;
                    y.array() += mm;
                    const VectorXd c = model_.phi.transpose() * y;
                    VectorXd w = softmax_signed(c, tau);
                    VectorXd grad_lam = radius_[buyer] * (model_.phi * w) - vhat;
                    const double grad_mu = -radius_[buyer] * w.dot(cons_normal_);
                    const double gs = smooth_dual_value(buyer, z, lam, mm, tau);
                    const double sn2 = grad_lam.squaredNorm() + grad_mu * grad_mu;
                    if (sn2 <= 0.0) break;
                    const double st = std::max(upper - gs, 0.0) / sn2;
                    if (st <= 0.0) break;
                    lam = (lam + st * grad_lam).cwiseMax(0.0);
                    mm += st * grad_mu;
                }
                mm = remax_mu(buyer, z, lam);
                consider(lam, mm);
                // softmax-weighted witness candidate at this temperature
                {
                    VectorXd y = z - lam;
                    y.array() += mm;
                    const VectorXd c = model_.phi.transpose() * y;
                    VectorXd th = model_.theta.row(buyer).transpose() -
                                  radius_[buyer] * softmax_signed(c, tau);
                    push_primal(th);
                    push_primal(crispen_buyerside(buyer, best_x));
                }
                if (upper - lower <= tol) break;
            }
        }

        double rho = 1.0;
        int stall = 0;
        lambda = lam_best;
        mu = mu_best;
        for (int it = 0; it < max_dual_steps && upper - lower > tol; ++it) {
            ++res.iterations;
            VectorXd y = z - lambda;
            y.array() += mu;
            VectorXd sg = support_subgrad(buyer, y);
            VectorXd slam = sg - vhat;
            const double smu = -sg.sum();
            const double snorm2 = slam.squaredNorm() + smu * smu;
            if (snorm2 <= 0.0) break;
            const double gcur = dual_lower_bound(buyer, z, lambda, mu);
            const double step = rho * std::max(upper - gcur, 0.25 * (upper - lower)) / snorm2;
            lambda = (lambda + step * slam).cwiseMax(0.0);
            mu += step * smu;
            mu = remax_mu(buyer, z, lambda);
            const double before = lower;
            consider(lambda, mu);
            if (lower > before + 1e-16 * (1.0 + std::abs(lower))) {
                stall = 0;
            } else if (++stall >= 20) {
                rho *= 0.5;
                lambda = lam_best;
                mu = mu_best;
                stall = 0;
                if (rho < 1e-6) break;
            }
            if ((it + 1) % 24 == 0) {
                push_primal(primal_from_dual(buyer, z, lam_best, mu_best, prim));
                if (model_.family == SetFamily::buyerside)
                    push_primal(crispen_buyerside(buyer, best_x));
                VectorXd lam = recover_lambda(buyer, z, best_x, prim);
                consider(lam, remax_mu(buyer, z, lam));
            }
            // Alternate in primal descent once the dual has mostly settled:
            // diminishing-step projected subgradient from the incumbent.
            if (stall == 0 && it > 48 && (it + 1) % 8 == 0) {
                const double alpha = prim.diam / std::sqrt(static_cast<double>(it));
                push_primal(best_x - (alpha / prim.grad_norm) * prim.grad);
            }
        }
        // Last-mile polish for near-degenerate geometry: the right active set
        // is ambiguous near the boundary, so sweep classification thresholds
        // and redo the projections at tighter movement tolerance.
        for (int polish = 0; polish < 3 && upper - lower > tol; ++polish) {
            for (double thr : {1e-7, 3e-5, 1e-3}) {
                VectorXd lam = recover_lambda(buyer, z, best_x, prim, thr);
                consider(lam, remax_mu(buyer, z, lam));
                if (model_.family == SetFamily::joint_outer &&
                    model_.goods() + model_.phi.cols() <= 96) {
                    joint_kkt_polish(buyer, z, thr, best_x, push_primal, consider);
                }
            }
            DykstraResult pr = dykstra_project(
                primal_from_dual(buyer, z, lam_best, mu_best, prim), prim.projections,
                prim.violation, 1e-12, 20000, 1e-14 * prim.diam);
            res.iterations += pr.cycles;
            if (pr.violation <= 1e-8) {
                const double val = prim.offset + prim.grad.dot(pr.point);
                if (val < upper) {
                    upper = val;
                    best_x = pr.point;
                }
            }
        }

        res.worst_v = prim.to_valuation(best_x);
        res.upper_bound = res.worst_v.dot(z);
        res.lower_bound = std::min(lower, res.upper_bound);
        res.value = 0.5 * (res.lower_bound + res.upper_bound);
        res.converged = res.upper_bound - res.lower_bound <= tol;
        return res;
    }

    /// Draws a member of V_i: a ball sample pushed into the set by Dykstra.
    VectorXd sample_member(int buyer, Rng& rng) const {
        Primal prim = make_primal_geometry(buyer);
        VectorXd x = prim.start + sample_offset(buyer, rng);
        DykstraResult pr = dykstra_project(x, prim.projections, prim.violation, 1e-11, 4000);
        return prim.to_valuation(pr.point);
    }

private:
    struct Primal {
        VectorXd grad;        // objective gradient in solver coordinates
        double grad_norm = 0.0;
        double offset = 0.0;  // value = offset + grad . x
        VectorXd start;       // feasible-by-construction center
        double diam = 1.0;
        std::vector<std::function<void(VectorXd&)>> projections;
        std::function<double(const VectorXd&)> violation;
        std::function<VectorXd(const VectorXd&)> to_valuation;
    };

    static double pnorm(const VectorXd& v, int p) {
        return p == 1 ? v.lpNorm<1>() : v.norm();
    }
    static double dual_pnorm(const VectorXd& v, int p) {
        return p == 1 ? v.lpNorm<Eigen::Infinity>() : v.norm();
    }

    Primal make_primal_geometry(int buyer) const {
        Primal prim;
        const int m = model_.goods();
        const double cons = conservation_[buyer];
        if (model_.family == SetFamily::direct) {
            const VectorXd center = model_.vhat.row(buyer).transpose();
            const double r = radius_[buyer];
            const int p = model_.p_norm;
            prim.start = center;
            prim.diam = 2.0 * r + 1e-12;
            prim.projections = {
                [center, r, p](VectorXd& v) { v = proj::onto_p_ball(v, center, r, p); },
                [cons](VectorXd& v) { v = proj::onto_hyperplane(v, VectorXd::Ones(v.size()), cons); },
                [](VectorXd& v) { v = v.cwiseMax(0.0); }};
            prim.violation = [center, r, p, cons](const VectorXd& v) {
                double viol = pnorm(v - center, p) - r;
                viol = std::max(viol, std::abs(v.sum() - cons));
                viol = std::max(viol, -v.minCoeff());
                return viol;
            };
            prim.to_valuation = [](const VectorXd& v) { return v; };
        } else if (model_.family == SetFamily::buyerside) {
            const VectorXd center = model_.theta.row(buyer).transpose();
            const double r = radius_[buyer];
            const int p = model_.p_norm;
            const VectorXd h = cons_normal_;
            prim.start = center;
            prim.diam = 2.0 * r + 1e-12;
            prim.projections.push_back(
                [center, r, p](VectorXd& th) { th = proj::onto_p_ball(th, center, r, p); });
            prim.projections.push_back(
                [h, cons](VectorXd& th) { th = proj::onto_hyperplane(th, h, cons); });
            for (int j = 0; j < m; ++j) {
                VectorXd a = model_.phi.row(j).transpose();
                const double an2 = a.squaredNorm();
                if (an2 <= 0.0) continue;
                prim.projections.push_back([a, an2](VectorXd& th) {
                    const double gap = -a.dot(th);
                    if (gap > 0.0) th += (gap / an2) * a;
                });
            }
            prim.violation = [this, center, r, p, h, cons](const VectorXd& th) {
                double viol = pnorm(th - center, p) - r;
                viol = std::max(viol, std::abs(th.dot(h) - cons));
                viol = std::max(viol, -(model_.phi * th).minCoeff());
                return viol;
            };
            prim.to_valuation = [this](const VectorXd& th) { return VectorXd(model_.phi * th); };
        } else {
            // x = [a; delta]: v = vhat + a + Phi delta, ||a|| <= r2, ||delta|| <= r1.
            const int d = static_cast<int>(model_.phi.cols());
            const VectorXd vhat = model_.vhat.row(buyer).transpose();
            const double r1 = radius_[buyer];
            const double r2 = radius2_[buyer];
            const VectorXd h = cons_normal_;
            prim.start = VectorXd::Zero(m + d);
            prim.diam = 2.0 * (r1 + r2) + 1e-12;
            prim.projections.push_back([m, r2](VectorXd& x) {
                const double n = x.head(m).norm();
                if (n > r2) x.head(m) *= (n > 0 ? r2 / n : 0.0);
            });
            prim.projections.push_back([m, d, r1](VectorXd& x) {
                const double n = x.tail(d).norm();
                if (n > r1) x.tail(d) *= (n > 0 ? r1 / n : 0.0);
            });
            {
                VectorXd normal(m + d);
                normal.head(m).setOnes();
                normal.tail(d) = h;
                const double nn2 = normal.squaredNorm();
                prim.projections.push_back([normal, nn2](VectorXd& x) {
                    x -= (normal.dot(x) / nn2) * normal;
                });
            }
            for (int j = 0; j < m; ++j) {
                // halfspace a_j + phi_j . delta >= -vhat_j
                VectorXd nj = VectorXd::Zero(m + d);
                nj[j] = 1.0;
                nj.tail(d) = model_.phi.row(j).transpose();
                const double nn2 = nj.squaredNorm();
                const double off = -vhat[j];
                prim.projections.push_back([nj, nn2, off](VectorXd& x) {
                    const double gap = off - nj.dot(x);
                    if (gap > 0.0) x += (gap / nn2) * nj;
                });
            }
            prim.violation = [this, vhat, m, d, r1, r2, h](const VectorXd& x) {
                double viol = x.head(m).norm() - r2;
                viol = std::max(viol, x.tail(d).norm() - r1);
                viol = std::max(viol, std::abs(x.head(m).sum() + h.dot(x.tail(d))));
                const VectorXd v = vhat + x.head(m) + model_.phi * x.tail(d);
                viol = std::max(viol, -v.minCoeff());
                return viol;
            };
            prim.to_valuation = [this, vhat, m, d](const VectorXd& x) {
                return VectorXd(vhat + x.head(m) + model_.phi * x.tail(d));
            };
        }
        return prim;
    }

    Primal make_primal(int buyer, const VectorXd& z) const {
        Primal prim = make_primal_geometry(buyer);
        if (model_.family == SetFamily::direct) {
            prim.grad = z;
        } else if (model_.family == SetFamily::buyerside) {
            prim.grad = model_.phi.transpose() * z;
        } else {
            const int m = model_.goods();
            const int d = static_cast<int>(model_.phi.cols());
            prim.grad.resize(m + d);
            prim.grad.head(m) = z;
            prim.grad.tail(d) = model_.phi.transpose() * z;
            prim.offset = model_.vhat.row(buyer).dot(z);
        }
        prim.grad_norm = prim.grad.norm();
        return prim;
    }

    /// Softmax weights of the smoothed infinity norm
    ///   S_tau(c) = tau log( sum_k exp(c_k/tau) + exp(-c_k/tau) ) >= ||c||_inf,
    /// returned as the signed weight vector (w+ - w-), the gradient of S_tau.
    static VectorXd softmax_signed(const VectorXd& c, double tau) {
        const double top = c.cwiseAbs().maxCoeff();
        VectorXd w(c.size());
        double zsum = 0.0;
        for (int k = 0; k < c.size(); ++k) {
            const double ep = std::exp((c[k] - top) / tau);
            const double en = std::exp((-c[k] - top) / tau);
            w[k] = ep - en;
            zsum += ep + en;
        }
        return w / zsum;
    }

    double smooth_dual_value(int buyer, const VectorXd& z, const VectorXd& lam, double mu,
                             double tau) const {
        VectorXd y = z - lam;
        const double base = model_.vhat.row(buyer).dot(y);
        y.array() += mu;
        const VectorXd c = model_.phi.transpose() * y;
        const double top = c.cwiseAbs().maxCoeff();
        double zsum = 0.0;
        for (int k = 0; k < c.size(); ++k)
            zsum += std::exp((c[k] - top) / tau) + std::exp((-c[k] - top) / tau);
        return base - radius_[buyer] * (top + tau * std::log(zsum));
    }

    /// Averaged subgradient of ||.||_inf over the (near-)tie set; exact at
    /// ties and a mild smoothing otherwise, which damps Polyak zigzag.
    static VectorXd linf_subgrad(const VectorXd& c) {
        const double top = c.cwiseAbs().maxCoeff();
        VectorXd g = VectorXd::Zero(c.size());
        if (top <= 0.0) return g;
        int ties = 0;
        for (int k = 0; k < c.size(); ++k) {
            if (std::abs(c[k]) >= (1.0 - 1e-9) * top) {
                g[k] = c[k] >= 0 ? 1.0 : -1.0;
                ++ties;
            }
        }
        return g / static_cast<double>(ties);
    }

    /// Subgradient of S at y.
    VectorXd support_subgrad(int buyer, const VectorXd& y) const {
        const int m = model_.goods();
        switch (model_.family) {
            case SetFamily::direct: {
                if (model_.p_norm == 2) {
                    const double n = y.norm();
                    return n > 0 ? VectorXd((radius_[buyer] / n) * y) : VectorXd::Zero(m);
                }
                return VectorXd(radius_[buyer] * linf_subgrad(y));
            }
            case SetFamily::buyerside: {
                const VectorXd c = model_.phi.transpose() * y;
                if (model_.p_norm == 2) {
                    const double n = c.norm();
                    return n > 0 ? VectorXd((radius_[buyer] / n) * (model_.phi * c))
                                 : VectorXd::Zero(m);
                }
                return VectorXd(radius_[buyer] * (model_.phi * linf_subgrad(c)));
            }
            default: {
                const VectorXd c = model_.phi.transpose() * y;
                VectorXd g = VectorXd::Zero(m);
                const double nc = c.norm();
                if (nc > 0) g += (radius_[buyer] / nc) * (model_.phi * c);
                const double ny = y.norm();
                if (ny > 0) g += (radius2_[buyer] / ny) * y;
                return g;
            }
        }
    }

    /// Exact inner maximization over mu of -S(z - lambda + mu 1).
    double remax_mu(int buyer, const VectorXd& z, const VectorXd& lambda) const {
        const VectorXd y0 = z - lambda;
        switch (model_.family) {
            case SetFamily::direct:
                if (model_.p_norm == 2) return -y0.mean();
                return -0.5 * (y0.maxCoeff() + y0.minCoeff());
            case SetFamily::buyerside: {
                const VectorXd c0 = model_.phi.transpose() * y0;
                const VectorXd& h = cons_normal_;
                if (model_.p_norm == 2) {
                    const double hn2 = h.squaredNorm();
                    return hn2 > 0 ? -h.dot(c0) / hn2 : 0.0;
                }
                return minimize_mu_bisect(
                    [&](double mu) {
                        // subderivative of ||c0 + mu h||_inf
                        VectorXd c = c0 + mu * h;
                        int k = 0;
                        c.cwiseAbs().maxCoeff(&k);
                        return (c[k] >= 0 ? 1.0 : -1.0) * h[k];
                    },
                    1.0 + y0.lpNorm<Eigen::Infinity>());
            }
            default: {
                const VectorXd c0 = model_.phi.transpose() * y0;
                const VectorXd& h = cons_normal_;
                const double r1 = radius_[buyer];
                const double r2 = radius2_[buyer];
                const double m = static_cast<double>(model_.goods());
                return minimize_mu_bisect(
                    [&](double mu) {
                        double der = 0.0;
                        const VectorXd c = c0 + mu * h;
                        const double nc = c.norm();
                        if (nc > 0) der += r1 * h.dot(c) / nc;
                        const double ny = std::sqrt(y0.squaredNorm() + 2.0 * mu * y0.sum() +
                                                    mu * mu * m);
                        if (ny > 0) der += r2 * (y0.sum() + mu * m) / ny;
                        return der;
                    },
                    1.0 + y0.lpNorm<Eigen::Infinity>());
            }
        }
    }

    template <class Deriv>
    static double minimize_mu_bisect(Deriv&& deriv, double scale) {
        double lo = -scale, hi = scale;
        int guard = 0;
        while (deriv(lo) > 0.0 && guard++ < 80) lo *= 2.0;
        guard = 0;
        while (deriv(hi) < 0.0 && guard++ < 80) hi *= 2.0;
        for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + std::abs(lo) + std::abs(hi)); ++it) {
            const double mid = 0.5 * (lo + hi);
            (deriv(mid) < 0.0 ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
    }

    /// Exact dual for the direct l1 model: eliminating (lambda, mu) leaves a
    /// concave piecewise-linear scan over hi = max(z - lambda); the maximum
    /// sits at a breakpoint hi in {z_j}.
    VectorXd direct_l1_dual_lambda(int buyer, const VectorXd& z) const {
        const int m = model_.goods();
        const VectorXd vhat = model_.vhat.row(buyer).transpose();
        const double r = radius_[buyer];
        std::vector<int> idx(m);
        for (int j = 0; j < m; ++j) idx[j] = j;
        std::sort(idx.begin(), idx.end(), [&](int a, int b) { return z[a] < z[b]; });
        const double zmin = z[idx.front()];
        double below_vz = 0.0;   // sum of vhat_j z_j over z_j <= hi
        double above_w = vhat.sum();  // vhat weight of z_j > hi
        double best = -std::numeric_limits<double>::infinity();
        double best_hi = zmin;
        for (int t = 0; t < m; ++t) {
            const int j = idx[t];
            below_vz += vhat[j] * z[j];
            above_w -= vhat[j];
            if (t + 1 < m && z[idx[t + 1]] == z[j]) continue;
            const double hi = z[j];
            const double val = below_vz + hi * above_w - 0.5 * r * (hi - zmin);
            if (val > best) {
                best = val;
                best_hi = hi;
            }
        }
        return (z.array() - best_hi).cwiseMax(0.0).matrix();
    }

    /// Exact minimizer for the direct l1 model by greedy mass transfer:
    /// every unit moved from a donor coordinate to the cheapest coordinate
    /// costs 2 units of l1 budget, so at most r/2 total mass moves, taken
    /// from the most expensive coordinates first.
    VectorXd direct_l1_primal(int buyer, const VectorXd& z) const {
        const int m = model_.goods();
        VectorXd v = model_.vhat.row(buyer).transpose();
        int recv = 0;
        z.minCoeff(&recv);
        std::vector<int> idx(m);
        for (int j = 0; j < m; ++j) idx[j] = j;
        std::sort(idx.begin(), idx.end(), [&](int a, int b) { return z[a] > z[b]; });
        double budget = 0.5 * radius_[buyer];
        double moved = 0.0;
        for (int j : idx) {
            if (budget <= 0.0) break;
            if (j == recv || z[j] <= z[recv]) break;
            const double take = std::min(budget, v[j]);
            v[j] -= take;
            moved += take;
            budget -= take;
        }
        v[recv] += moved;
        return v;
    }

    /// Ball argmin of the dual direction y = z - lambda + mu 1: at a dual
    /// optimum this is the worst-case valuation itself, so projecting it into
    /// the set yields a near-optimal feasible witness.
    VectorXd primal_from_dual(int buyer, const VectorXd& z, const VectorXd& lambda, double mu,
                              const Primal& prim) const {
        VectorXd y = z - lambda;
        y.array() += mu;
        const double r = radius_[buyer];
        switch (model_.family) {
            case SetFamily::direct: {
                VectorXd v = model_.vhat.row(buyer).transpose();
                if (model_.p_norm == 2) {
                    const double n = y.norm();
                    if (n > 0) v -= (r / n) * y;
                } else {
                    int k = 0;
                    y.cwiseAbs().maxCoeff(&k);
                    v[k] -= r * (y[k] >= 0 ? 1.0 : -1.0);
                }
                return v;
            }
            case SetFamily::buyerside: {
                VectorXd th = model_.theta.row(buyer).transpose();
                const VectorXd c = model_.phi.transpose() * y;
                if (model_.p_norm == 2) {
                    const double n = c.norm();
                    if (n > 0) th -= (r / n) * c;
                } else {
                    int k = 0;
                    c.cwiseAbs().maxCoeff(&k);
                    th[k] -= r * (c[k] >= 0 ? 1.0 : -1.0);
                }
                return th;
            }
            default: {
                const int m = model_.goods();
                const int d = static_cast<int>(model_.phi.cols());
                VectorXd x = VectorXd::Zero(m + d);
                const double ny = y.norm();
                if (ny > 0) x.head(m) = -(radius2_[buyer] / ny) * y;
                const VectorXd c = model_.phi.transpose() * y;
                const double nc = c.norm();
                if (nc > 0) x.tail(d) = -(r / nc) * c;
                (void)prim;
                return x;
            }
        }
    }

    /// Heuristic multiplier recovery from the active set of a near-optimal
    /// primal point; the returned lambda is only ever used through
    /// dual_lower_bound, so inaccuracy costs tightness, not validity.
    VectorXd recover_lambda(int buyer, const VectorXd& z, const VectorXd& x,
                            const Primal& prim, double act_thr = 1e-7) const {
        const int m = model_.goods();
        VectorXd dir;  // ball-normal direction in valuation space
        VectorXd v = prim.to_valuation(x);
        if (model_.family == SetFamily::direct) {
            dir = v - model_.vhat.row(buyer).transpose();
            if (model_.p_norm == 1) {
                // l1 ball normal cone points along the sign pattern of the face
                const double w_scale = dir.cwiseAbs().maxCoeff();
                for (int j = 0; j < m; ++j)
                    dir[j] = std::abs(dir[j]) > 1e-9 * (w_scale + 1e-300)
                                 ? (dir[j] > 0 ? 1.0 : -1.0)
                                 : 0.0;
            }
        } else if (model_.family == SetFamily::joint_outer) {
            return recover_lambda_joint(buyer, z, x, act_thr);
        } else {
            // theta-space stationarity: Phi^T (z + mu 1 - lambda) + t dir = 0
            return recover_lambda_buyerside(buyer, z, x, act_thr);
        }
        const double dn = dir.norm();
        if (dn > 0) dir /= dn;
        const double scale = std::max(1.0, v.lpNorm<Eigen::Infinity>());
        // least squares for (mu, t) over coordinates with v_j > 0
        double a11 = 0, a12 = 0, a22 = 0, b1 = 0, b2 = 0;
        for (int j = 0; j < m; ++j) {
            if (v[j] <= act_thr * scale) continue;
            a11 += 1.0;
            a12 += dir[j];
            a22 += dir[j] * dir[j];
            b1 -= z[j];
            b2 -= z[j] * dir[j];
        }
        const double det = a11 * a22 - a12 * a12;
        double mu = 0.0, t = 0.0;
        if (std::abs(det) > 1e-14) {
            mu = (b1 * a22 - b2 * a12) / det;
            t = (a11 * b2 - a12 * b1) / det;
        } else if (a11 > 0) {
            mu = b1 / a11;
        }
        t = std::max(t, 0.0);
        return (z.array() + mu + t * dir.array()).cwiseMax(0.0).matrix();
    }

    struct VertexInfo {
        VectorXd th;
        std::vector<int> support;     // nonzero coordinates of w at the vertex
        std::vector<int> halfspaces;  // active nonnegativity rows
        VectorXd sigma;               // facet sign pattern (empty if ball inactive)
        bool found = false;
    };

    /// Exact vertex enumeration for the buyerside l1 polytope in theta space,
    /// viable for small embedding dimension. Every vertex is the intersection
    /// of the conservation plane with ridges w_k = 0, at most one ball facet
    /// sigma . w = r, and active nonnegativity halfspaces; a linear objective
    /// attains its minimum at one of them.
    VertexInfo buyerside_l1_vertex_minimum(int buyer, const VectorXd& z) const {
        const int d = static_cast<int>(model_.phi.cols());
        const int m = model_.goods();
        VertexInfo out;
        if (d > 6 || m > 40) return out;
        const VectorXd th0 = model_.theta.row(buyer).transpose();
        const double r = radius_[buyer];
        const VectorXd zeta = model_.phi.transpose() * z;
        const VectorXd& h = cons_normal_;
        const double cons = conservation_[buyer];
        double best = std::numeric_limits<double>::infinity();
        MatrixXd A(d, d);
        VectorXd b(d);
        VectorXd th(d);
        std::vector<int> cur_support;
        VectorXd cur_sigma;
        auto try_candidate = [&](const std::vector<int>& H) {
            Eigen::FullPivLU<MatrixXd> lu(A);
            if (!lu.isInvertible()) return;
            th = lu.solve(b);
            const VectorXd w = th - th0;
            if (w.lpNorm<1>() > r * (1.0 + 1e-10) + 1e-14) return;
            if (m > 0 && (model_.phi * th).minCoeff() < -1e-10) return;
            const double val = th.dot(zeta);
            if (val < best) {
                best = val;
                out.th = th;
                out.support = cur_support;
                out.halfspaces = H;
                out.sigma = cur_sigma;
                out.found = true;
            }
        };
        std::vector<int> support;
        std::vector<int> halfs(m);
        for (int j = 0; j < m; ++j) halfs[j] = j;
        for (int mask = 0; mask < (1 << d); ++mask) {
            support.clear();
            for (int k = 0; k < d; ++k)
                if (mask & (1 << k)) support.push_back(k);
            const int s = static_cast<int>(support.size());
            cur_support = support;
            if (s == 0) {
                const double val = th0.dot(zeta);  // w = 0; anchor is feasible
                if (val < best) {
                    best = val;
                    out.th = th0;
                    out.support.clear();
                    out.halfspaces.clear();
                    out.sigma.resize(0);
                    out.found = true;
                }
                continue;
            }
            int row = 0;
            A.setZero();
            for (int k = 0; k < d; ++k) {
                if (!(mask & (1 << k))) {
                    A.row(row).setZero();
                    A(row, k) = 1.0;
                    b[row] = th0[k];
                    ++row;
                }
            }
            A.row(row) = h.transpose();
            b[row] = cons;
            ++row;
            // ball-inactive vertices: d-s ridges + conservation + s-1 halfspaces
            cur_sigma.resize(0);
            enumerate_subsets(m, s - 1, [&](const std::vector<int>& H) {
                int rr = row;
                for (int j : H) {
                    A.row(rr) = model_.phi.row(j);
                    b[rr] = 0.0;
                    ++rr;
                }
                try_candidate(H);
            });
            // ball-active vertices: one facet (sign pattern on the support)
            // plus s-2 halfspaces; s == 1 facet vertices are degenerate.
            if (s >= 2) {
                for (int smask = 0; smask < (1 << s); ++smask) {
                    A.row(row).setZero();
                    VectorXd sig = VectorXd::Zero(d);
                    for (int t = 0; t < s; ++t) {
                        const double sv = (smask & (1 << t)) ? 1.0 : -1.0;
                        A(row, support[t]) = sv;
                        sig[support[t]] = sv;
                    }
                    b[row] = A.row(row).dot(th0) + r;
                    cur_sigma = sig;
                    enumerate_subsets(m, s - 2, [&](const std::vector<int>& H) {
                        int rr = row + 1;
                        for (int j : H) {
                            A.row(rr) = model_.phi.row(j);
                            b[rr] = 0.0;
                            ++rr;
                        }
                        try_candidate(H);
                    });
                }
            }
        }
        return out;
    }

    /// Exact multipliers at a buyerside l1 vertex: stationarity on the
    /// support coordinates is a square linear system in (mu, t, lambda_H).
    bool buyerside_l1_vertex_dual(int buyer, const VectorXd& z, const VertexInfo& info,
                                  VectorXd* lambda_out) const {
        const int m = model_.goods();
        const VectorXd zeta = model_.phi.transpose() * z;
        const VectorXd& h = cons_normal_;
        const bool ball_active = info.sigma.size() > 0;
        const int s = static_cast<int>(info.support.size());
        const int nh = static_cast<int>(info.halfspaces.size());
        const int unknowns = (ball_active ? 2 : 1) + nh;
        const int equations = ball_active ? s : static_cast<int>(model_.phi.cols());
        if (equations == 0 || equations != unknowns) return false;
        MatrixXd A(equations, unknowns);
        VectorXd b(equations);
        for (int row = 0; row < equations; ++row) {
            const int k = ball_active ? info.support[row] : row;
            int col = 0;
            A(row, col++) = h[k];
            if (ball_active) A(row, col++) = info.sigma[k];
            for (int j : info.halfspaces) A(row, col++) = -model_.phi(j, k);
            b[row] = -zeta[k];
        }
        Eigen::FullPivLU<MatrixXd> lu(A);
        if (!lu.isInvertible()) return false;
        const VectorXd sol = lu.solve(b);
        VectorXd lam = VectorXd::Zero(m);
        const int base = ball_active ? 2 : 1;
        for (int t = 0; t < nh; ++t) lam[info.halfspaces[t]] = std::max(0.0, sol[base + t]);
        *lambda_out = lam;
        return true;
    }

    template <class Fn>
    static void enumerate_subsets(int m, int k, Fn&& fn) {
        if (k < 0) return;
        std::vector<int> pick(k);
        std::function<void(int, int)> rec = [&](int start, int depth) {
            if (depth == k) {
                fn(pick);
                return;
            }
            for (int j = start; j < m; ++j) {
                pick[depth] = j;
                rec(j + 1, depth + 1);
            }
        };
        if (k == 0) {
            std::vector<int> none;
            fn(none);
            return;
        }
        rec(0, 0);
    }

    /// Snaps a near-optimal buyerside point onto the exact vertex of its
    /// active constraints (l1 facet plane, conservation, touching halfspaces)
    /// by a least-squares correction. The result re-enters through
    /// push_primal, so a wrong active-set guess costs nothing.
    VectorXd crispen_buyerside(int buyer, const VectorXd& th) const {
        const int d = static_cast<int>(model_.phi.cols());
        const int m = model_.goods();
        const VectorXd th0 = model_.theta.row(buyer).transpose();
        const double r = radius_[buyer];
        VectorXd w = th - th0;
        std::vector<VectorXd> rows;
        std::vector<double> rhs;
        rows.push_back(cons_normal_);
        rhs.push_back(conservation_[buyer]);
        const double bn = model_.p_norm == 1 ? w.lpNorm<1>() : w.norm();
        if (bn >= (1.0 - 1e-6) * r && r > 0.0) {
            if (model_.p_norm == 1) {
                VectorXd s(d);
                const double wmax = w.cwiseAbs().maxCoeff();
                for (int k = 0; k < d; ++k)
                    s[k] = std::abs(w[k]) > 1e-7 * (wmax + 1e-300) ? (w[k] > 0 ? 1.0 : -1.0) : 0.0;
                rows.push_back(s);
                rhs.push_back(s.dot(th0) + r);
            } else {
                rows.push_back(w / bn);
                rhs.push_back(w.dot(th0) / bn + r);
            }
        }
        const VectorXd v = model_.phi * th;
        const double vscale = std::max(1.0, v.lpNorm<Eigen::Infinity>());
        for (int j = 0; j < m && static_cast<int>(rows.size()) < d; ++j) {
            if (v[j] <= 1e-6 * vscale) {
                rows.push_back(model_.phi.row(j).transpose());
                rhs.push_back(0.0);
            }
        }
        MatrixXd A(rows.size(), d);
        VectorXd b(rows.size());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            A.row(k) = rows[k].transpose();
            b[k] = rhs[k];
        }
        // minimum-norm correction onto the active equalities
        const VectorXd resid = b - A * th;
        const VectorXd corr = A.transpose() *
                              (A * A.transpose()).ldlt().solve(resid);
        return th + corr;
    }

    /// Joint-outer multiplier recovery: solve both stationarity blocks
    ///   inactive j:  z_j + mu + t1 ahat_j = 0
    ///   delta block: zeta + mu h + t2 dhat - Phi_A^T lambda_A = 0
    /// in least squares over (mu, t1, t2), substituting the a-block formula
    /// lambda_j = z_j + mu + t1 ahat_j on the active set.
    VectorXd recover_lambda_joint(int buyer, const VectorXd& z, const VectorXd& x,
                                  double act_thr) const {
        const int m = model_.goods();
        const int d = static_cast<int>(model_.phi.cols());
        const VectorXd v = prim_to_valuation_joint(buyer, x);
        VectorXd ah = x.head(m);
        const double an = ah.norm();
        ah = an > 0 ? VectorXd(ah / an) : VectorXd::Zero(m);
        VectorXd dh = x.tail(d);
        const double dn = dh.norm();
        dh = dn > 0 ? VectorXd(dh / dn) : VectorXd::Zero(d);
        const VectorXd zeta = model_.phi.transpose() * z;
        const double scale = std::max(1.0, v.lpNorm<Eigen::Infinity>());
        std::vector<int> active;
        std::vector<int> inactive;
        for (int j = 0; j < m; ++j)
            (v[j] <= act_thr * scale ? active : inactive).push_back(j);
        const int rows = static_cast<int>(inactive.size()) + d;
        MatrixXd A = MatrixXd::Zero(rows, 3);
        VectorXd b(rows);
        int row = 0;
        for (int j : inactive) {
            A(row, 0) = 1.0;
            A(row, 1) = ah[j];
            b[row] = -z[j];
            ++row;
        }
        for (int k = 0; k < d; ++k) {
            double hk = cons_normal_[k];
            double c1 = 0.0, c0 = 0.0;
            for (int j : active) {
                const double phijk = model_.phi(j, k);
                c0 += phijk;          // coefficient of mu via lambda_A
                c1 += phijk * ah[j];  // coefficient of t1 via lambda_A
            }
            A(row, 0) = hk - c0;
            A(row, 1) = -c1;
            A(row, 2) = dh[k];
            double rhs = -zeta[k];
            for (int j : active) rhs += model_.phi(j, k) * z[j];
            b[row] = rhs;
            ++row;
        }
        const VectorXd sol = A.colPivHouseholderQr().solve(b);
        const double mu = sol[0];
        const double t1 = std::max(sol[1], 0.0);
        return (z.array() + mu + t1 * ah.array()).cwiseMax(0.0).matrix();
    }

    VectorXd prim_to_valuation_joint(int buyer, const VectorXd& x) const {
        const int m = model_.goods();
        const int d = static_cast<int>(model_.phi.cols());
        return model_.vhat.row(buyer).transpose() + x.head(m) + model_.phi * x.tail(d);
    }

    VectorXd recover_lambda_buyerside(int buyer, const VectorXd& z, const VectorXd& th,
                                      double act_thr = 1e-7) const {
        const int m = model_.goods();
        const int d = static_cast<int>(model_.phi.cols());
        const VectorXd v = model_.phi * th;
        VectorXd w = th - model_.theta.row(buyer).transpose();
        if (model_.p_norm == 1) {
            const double w_scale = w.cwiseAbs().maxCoeff();
            for (int k = 0; k < d; ++k)
                w[k] = std::abs(w[k]) > 1e-9 * (w_scale + 1e-300) ? (w[k] > 0 ? 1.0 : -1.0) : 0.0;
        }
        const double scale = std::max(1.0, v.lpNorm<Eigen::Infinity>());
        std::vector<int> active;
        for (int j = 0; j < m; ++j)
            if (v[j] <= act_thr * scale) active.push_back(j);
        const int cols = 2 + static_cast<int>(active.size());
        MatrixXd A(d, cols);
        A.col(0) = cons_normal_;
        A.col(1) = w;
        for (std::size_t k = 0; k < active.size(); ++k)
            A.col(2 + static_cast<int>(k)) = -model_.phi.row(active[k]).transpose();
        const VectorXd rhs = -(model_.phi.transpose() * z);
        VectorXd sol = A.colPivHouseholderQr().solve(rhs);
        VectorXd lambda = VectorXd::Zero(m);
        for (std::size_t k = 0; k < active.size(); ++k)
            lambda[active[k]] = std::max(0.0, sol[2 + static_cast<int>(k)]);
        return lambda;
    }

    /// Damped Newton on the direct l2 KKT system: variables (v, mu, t, lambda_A),
    ///   z + mu 1 + t w/||w|| = lambda_A  (w = v - vhat),  ||w|| = r,
    ///   v . 1 = cons,  v_A = 0,
    /// with a ball-inactive variant (t dropped, ||w|| = r dropped) for large
    /// radii where the optimum sits at a simplex corner inside the ball.
    template <class PushPrimal, class Consider>
    void direct_kkt_polish(int buyer, const VectorXd& z, double act_thr, const VectorXd& best_v,
                           PushPrimal&& push_primal, Consider&& consider) const {
        for (bool ball_active : {true, false})
            direct_kkt_hypothesis(buyer, z, act_thr, best_v, ball_active, push_primal, consider);
    }

    template <class PushPrimal, class Consider>
    void direct_kkt_hypothesis(int buyer, const VectorXd& z, double act_thr,
                               const VectorXd& best_v, bool ball_active,
                               PushPrimal&& push_primal, Consider&& consider) const {
        const int m = model_.goods();
        const double r = radius_[buyer];
        if (r <= 0.0) return;
        const VectorXd vhat = model_.vhat.row(buyer).transpose();
        const double cons = conservation_[buyer];
        const double vscale = std::max(1.0, best_v.lpNorm<Eigen::Infinity>());
        std::vector<int> A;
        for (int j = 0; j < m; ++j)
            if (best_v[j] <= act_thr * vscale) A.push_back(j);
        const int na = static_cast<int>(A.size());
        const int nt = ball_active ? 1 : 0;
        const int nv = m + 1 + nt + na;
        const int ilam = m + 1 + nt;
        VectorXd w(nv);
        w.head(m) = best_v;
        w[m] = 0.0;  // mu
        if (ball_active) w[m + 1] = 1.0;
        w.tail(na).setZero();
        MatrixXd J(nv, nv);
        VectorXd F(nv);
        auto residual = [&](const VectorXd& wv, VectorXd& out) {
            const VectorXd dv = wv.head(m) - vhat;
            const double nw = dv.norm();
            if (ball_active && nw <= 0.0) return false;
            out.head(m) = z.array() + wv[m];
            if (ball_active) out.head(m) += (wv[m + 1] / nw) * dv;
            for (int k = 0; k < na; ++k) out[A[k]] -= wv[ilam + k];
            int row = m;
            out[row++] = wv.head(m).sum() - cons;
            if (ball_active) out[row++] = nw - r;
            for (int k = 0; k < na; ++k) out[row++] = wv[A[k]];
            return true;
        };
        if (!residual(w, F)) return;
        double fn = F.norm();
        for (int newton = 0; newton < 25 && fn > 1e-13; ++newton) {
            const VectorXd dv = w.head(m) - vhat;
            const double nw = dv.norm();
            J.setZero();
            if (ball_active) {
                const VectorXd wh = dv / nw;
                J.topLeftCorner(m, m) =
                    (w[m + 1] / nw) * (MatrixXd::Identity(m, m) - wh * wh.transpose());
                J.block(0, m + 1, m, 1) = wh;
            }
            J.block(0, m, m, 1).setOnes();
            for (int k = 0; k < na; ++k) J(A[k], ilam + k) = -1.0;
            int row = m;
            J.block(row, 0, 1, m).setOnes();
            ++row;
            if (ball_active) {
                J.block(row, 0, 1, m) = (dv / nw).transpose();
                ++row;
            }
            for (int k = 0; k < na; ++k) {
                J(row, A[k]) = 1.0;
                ++row;
            }
            const VectorXd step = J.colPivHouseholderQr().solve(-F);
            double damp = 1.0;
            VectorXd wn(nv), Fn(nv);
            bool ok = false;
            for (int bt = 0; bt < 12; ++bt) {
                wn = w + damp * step;
                if (residual(wn, Fn) && Fn.norm() < fn) {
                    ok = true;
                    break;
                }
                damp *= 0.5;
            }
            if (!ok) break;
            w = wn;
            F = Fn;
            fn = F.norm();
        }
        if (fn > 1e-9) return;
        push_primal(w.head(m));
        VectorXd lam = VectorXd::Zero(m);
        for (int k = 0; k < na; ++k) lam[A[k]] = std::max(0.0, w[ilam + k]);
        consider(lam, remax_mu(buyer, z, lam));
    }

    /// Damped Newton on the joint-outer KKT system for one active-set guess
    /// and one delta-ball activity hypothesis:
    ///   z + mu 1 + t1 a/||a|| = lambda_A                  (a block)
    ///   Phi^T z + mu h + [t2 d/||d||] = Phi_A^T lambda_A  (delta block)
    ///   ||a|| = r2, [||d|| = r1], 1.a + h.d = 0, (a + Phi d)_j = -vhat_j on A
    /// (bracketed parts only when the delta ball is hypothesized active).
    /// Converged solutions hand a machine-exact witness to push_primal and
    /// exact multipliers to consider; non-convergence is simply discarded.
    template <class PushPrimal, class Consider>
    void joint_kkt_polish(int buyer, const VectorXd& z, double act_thr, const VectorXd& best_x,
                          PushPrimal&& push_primal, Consider&& consider) const {
        joint_kkt_hypothesis(buyer, z, act_thr, best_x, true, push_primal, consider);
        joint_kkt_hypothesis(buyer, z, act_thr, best_x, false, push_primal, consider);
    }

    template <class PushPrimal, class Consider>
    void joint_kkt_hypothesis(int buyer, const VectorXd& z, double act_thr,
                              const VectorXd& best_x, bool delta_active,
                              PushPrimal&& push_primal, Consider&& consider) const {
        const int m = model_.goods();
        const int d = static_cast<int>(model_.phi.cols());
        const double r1 = radius_[buyer];
        const double r2 = radius2_[buyer];
        if (r1 <= 0.0 || r2 <= 0.0) return;
        const VectorXd vhat = model_.vhat.row(buyer).transpose();
        const VectorXd zeta = model_.phi.transpose() * z;
        const VectorXd& h = cons_normal_;
        const VectorXd vcur = vhat + best_x.head(m) + model_.phi * best_x.tail(d);
        const double vscale = std::max(1.0, vcur.lpNorm<Eigen::Infinity>());
        std::vector<int> A;
        for (int j = 0; j < m; ++j)
            if (vcur[j] <= act_thr * vscale) A.push_back(j);
        const int na = static_cast<int>(A.size());
        // variables: a, delta, mu, t1, [t2], lambda_A
        const int nt2 = delta_active ? 1 : 0;
        const int nv = m + d + 2 + nt2 + na;
        const int it2 = m + d + 2;         // index of t2 when present
        const int ilam = m + d + 2 + nt2;  // first lambda index
        VectorXd w(nv);
        w.head(m) = best_x.head(m);
        w.segment(m, d) = best_x.tail(d);
        w[m + d] = 0.0;      // mu
        w[m + d + 1] = 1.0;  // t1
        if (delta_active) w[it2] = 1.0;
        w.tail(na).setZero();
        MatrixXd J(nv, nv);
        VectorXd F(nv);
        auto residual = [&](const VectorXd& wv, VectorXd& out) {
            const auto a = wv.head(m);
            const auto de = wv.segment(m, d);
            const double mu = wv[m + d], t1 = wv[m + d + 1];
            const double t2 = delta_active ? wv[it2] : 0.0;
            const auto lamA = wv.tail(na);
            const double an = a.norm(), dn = de.norm();
            if (an <= 0.0 || (delta_active && dn <= 0.0)) return false;
            out.head(m) = z.array() + mu;
            out.head(m) += (t1 / an) * a;
            for (int k = 0; k < na; ++k) out[A[k]] -= lamA[k];
            out.segment(m, d) = zeta + mu * h;
            if (delta_active) out.segment(m, d) += (t2 / dn) * de;
            for (int k = 0; k < na; ++k)
                out.segment(m, d) -= lamA[k] * model_.phi.row(A[k]).transpose();
            int row = m + d;
            out[row++] = an - r2;
            if (delta_active) out[row++] = dn - r1;
            out[row++] = a.sum() + h.dot(de);
            for (int k = 0; k < na; ++k)
                out[row++] = a[A[k]] + model_.phi.row(A[k]).dot(de) + vhat[A[k]];
            return true;
        };
        if (!residual(w, F)) return;
        double fn = F.norm();
        for (int newton = 0; newton < 25 && fn > 1e-13; ++newton) {
            const auto a = w.head(m);
            const auto de = w.segment(m, d);
            const double t1 = w[m + d + 1];
            const double t2 = delta_active ? w[it2] : 0.0;
            const double an = a.norm(), dn = de.norm();
            J.setZero();
            const VectorXd ah = a / an;
            const VectorXd dh = dn > 0 ? VectorXd(de / dn) : VectorXd::Zero(d);
            J.topLeftCorner(m, m) = (t1 / an) * (MatrixXd::Identity(m, m) - ah * ah.transpose());
            J.block(0, m + d, m, 1).setOnes();
            J.block(0, m + d + 1, m, 1) = ah;
            for (int k = 0; k < na; ++k) J(A[k], ilam + k) = -1.0;
            if (delta_active && dn > 0)
                J.block(m, m, d, d) =
                    (t2 / dn) * (MatrixXd::Identity(d, d) - dh * dh.transpose());
            J.block(m, m + d, d, 1) = h;
            if (delta_active) J.block(m, it2, d, 1) = dh;
            for (int k = 0; k < na; ++k)
                J.block(m, ilam + k, d, 1) = -model_.phi.row(A[k]).transpose();
            int row = m + d;
            J.block(row, 0, 1, m) = ah.transpose();
            ++row;
            if (delta_active) {
                J.block(row, m, 1, d) = dh.transpose();
                ++row;
            }
            J.block(row, 0, 1, m).setOnes();
            J.block(row, m, 1, d) = h.transpose();
            ++row;
            for (int k = 0; k < na; ++k) {
                J(row, A[k]) = 1.0;
                J.block(row, m, 1, d) = model_.phi.row(A[k]);
                ++row;
            }
            const VectorXd step = J.colPivHouseholderQr().solve(-F);
            double damp = 1.0;
            VectorXd wn(nv);
            VectorXd Fn(nv);
            bool ok = false;
            for (int bt = 0; bt < 12; ++bt) {
                wn = w + damp * step;
                if (residual(wn, Fn) && Fn.norm() < fn) {
                    ok = true;
                    break;
                }
                damp *= 0.5;
            }
            if (!ok) break;
            w = wn;
            F = Fn;
            fn = F.norm();
        }
        if (fn > 1e-9) return;
        VectorXd x(m + d);
        x.head(m) = w.head(m);
        x.tail(d) = w.segment(m, d);
        push_primal(x);
        VectorXd lam = VectorXd::Zero(m);
        for (int k = 0; k < na; ++k) lam[A[k]] = std::max(0.0, w[ilam + k]);
        consider(lam, remax_mu(buyer, z, lam));
    }

    /// Random offset inside the centered ball(s) for sampling members.
    VectorXd sample_offset(int buyer, Rng& rng) const {
        auto ball = [&rng](int dim, double r, int p) {
            VectorXd w(dim);
            for (int k = 0; k < dim; ++k) w[k] = rng.normal();
            if (p == 1) {
                // Dirichlet-style |w| with random signs fills the l1 ball.
                for (int k = 0; k < dim; ++k) w[k] = std::abs(w[k]) * (rng.uniform() < 0.5 ? -1 : 1);
                const double n = w.lpNorm<1>();
                if (n > 0) w *= r * std::pow(rng.uniform(), 1.0 / dim) / n;
            } else {
                const double n = w.norm();
                if (n > 0) w *= r * std::pow(rng.uniform(), 1.0 / dim) / n;
            }
            return w;
        };
        switch (model_.family) {
            case SetFamily::direct:
                return ball(model_.goods(), radius_[buyer], model_.p_norm);
            case SetFamily::buyerside:
                return ball(static_cast<int>(model_.phi.cols()), radius_[buyer], model_.p_norm);
            default: {
                const int m = model_.goods();
                const int d = static_cast<int>(model_.phi.cols());
                VectorXd x(m + d);
                x.head(m) = ball(m, radius2_[buyer], 2);
                x.tail(d) = ball(d, radius_[buyer], 2);
                return x;
            }
        }
    }

    const UncertaintyModel& model_;
    VectorXd conservation_;
    VectorXd radius_;
    VectorXd radius2_;
    VectorXd cons_normal_;  // Phi^T 1
    double phi_fro_ = 0.0;
    double phi_sigma_max_ = 0.0;
    double phi_row_norm2_max_ = 0.0;
    double phi_abs_max_ = 0.0;
    double phi_abs_colsum_max_ = 0.0;
};

/// u_i(z) with a certified bracket of width <= tol.
inline RobustUtilityResult robust_utility(const UncertaintyModel& model, int buyer,
                                          const VectorXd& z, double tol = 1e-6) {
    return RobustUtilityEvaluator(model).evaluate(buyer, z, tol);
}

inline double dual_lower_bound(const UncertaintyModel& model, int buyer, const VectorXd& z,
                               const VectorXd& lambda, double mu) {
    return RobustUtilityEvaluator(model).dual_lower_bound(buyer, z, lambda, mu);
}

inline double l1_width_upper_bound(const UncertaintyModel& model, int buyer) {
    return RobustUtilityEvaluator(model).l1_width_upper_bound(buyer);
}

inline double elementwise_range_bound(const UncertaintyModel& model, int buyer) {
    return RobustUtilityEvaluator(model).elementwise_range_bound(buyer);
}

}  // namespace rme
