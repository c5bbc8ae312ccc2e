#include "advcloak/subspace.hpp"

#include <algorithm>
#include <cmath>

#include "advcloak/errors.hpp"

namespace advcloak {

std::string hull_kind_name(HullKind k) {
    switch (k) {
        case HullKind::affine: return "affine";
        case HullKind::center: return "center";
        case HullKind::convex: return "convex";
    }
    return "center";
}

HullKind hull_kind_from_name(const std::string& s) {
    if (s == "affine") return HullKind::affine;
    if (s == "center") return HullKind::center;
    if (s == "convex") return HullKind::convex;
    throw PreconditionError("unknown hull kind: " + s);
}

FeatureHull build_hull(const Eigen::MatrixXd& anchors, HullKind kind,
                       const std::string& identity) {
    if (anchors.rows() < 1) throw PreconditionError("build_hull: empty anchor list");
    FeatureHull h;
    h.anchors = anchors;
    h.kind = kind;
    h.identity = identity;
    h.center = anchors.colwise().mean();
    return h;
}

FeatureHull build_hull(const std::vector<Embedding>& anchors, HullKind kind,
                       const std::string& identity) {
    if (anchors.empty()) throw PreconditionError("build_hull: empty anchor list");
    int n = static_cast<int>(anchors.size());
    int d = static_cast<int>(anchors[0].v.size());
    Eigen::MatrixXd m(n, d);
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(anchors[static_cast<std::size_t>(i)].v.size()) != d)
            throw PreconditionError("build_hull: anchor dimension mismatch");
        for (int j = 0; j < d; ++j) m(i, j) = anchors[static_cast<std::size_t>(i)].v[static_cast<std::size_t>(j)];
    }
    return build_hull(m, kind, identity);
}

Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& u) {
    int n = static_cast<int>(u.size());
    std::vector<double> s(u.data(), u.data() + n);
    std::sort(s.begin(), s.end(), std::greater<double>());
    double cum = 0.0, tau = 0.0;
    int rho = 0;
    for (int j = 0; j < n; ++j) {
        cum += s[static_cast<std::size_t>(j)];
        double t = (cum - 1.0) / (j + 1);
        if (s[static_cast<std::size_t>(j)] - t > 0.0) {
            rho = j + 1;
            tau = t;
        }
    }
    Eigen::VectorXd out(n);
    for (int i = 0; i < n; ++i) out(i) = std::max(0.0, u(i) - tau);
    (void)rho;
    return out;
}

namespace {

HullProjection finish(const FeatureHull& hull, const Eigen::VectorXd& query,
                      Eigen::VectorXd alpha, double kkt, int iters) {
    HullProjection p;
    p.alpha = std::move(alpha);
    p.point = hull.anchors.transpose() * p.alpha;
    p.distance = (p.point - query).norm();
    p.kkt_residual = kkt;
    p.iterations = iters;
    return p;
}

HullProjection affine_projection(const FeatureHull& hull, const Eigen::VectorXd& query) {
    int n = hull.n();
    if (n == 1) return finish(hull, query, Eigen::VectorXd::Ones(1), 0.0, 0);

    // Parameterize alpha = 1/n + Z beta with Z an orthonormal basis of the
    // sum-zero subspace; columns of Z are orthogonal to 1, so the minimum-norm
    // beta from the SVD solve yields the minimum-norm alpha.
    Eigen::MatrixXd ones(n, 1);
    ones.setOnes();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(ones);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd z = q.rightCols(n - 1);

    Eigen::VectorXd alpha0 = Eigen::VectorXd::Constant(n, 1.0 / n);
    Eigen::MatrixXd bmat = hull.anchors.transpose() * z;  // d x (n-1)
    Eigen::VectorXd rhs = query - hull.anchors.transpose() * alpha0;
    Eigen::VectorXd beta =
        bmat.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rhs);
    return finish(hull, query, alpha0 + z * beta, 0.0, 0);
}


HullProjection convex_projection(const FeatureHull& hull, const Eigen::VectorXd& query) {
    int n = hull.n();
    if (n == 1) return finish(hull, query, Eigen::VectorXd::Ones(1), 0.0, 0);

    const Eigen::MatrixXd& a = hull.anchors;
    Eigen::MatrixXd gram = a * a.transpose();  // n x n
    Eigen::VectorXd lin = a * query;           // gradient of f = 2(G alpha - lin)
    double lip = 2.0 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram)
                           .eigenvalues()
                           .maxCoeff();
    lip = std::max(lip, 1e-12);

    const int max_iters = 10000;
    const double target = 1e-9;
    Eigen::VectorXd alpha = project_to_simplex(lin / std::max(lin.cwiseAbs().maxCoeff(), 1.0));
    Eigen::VectorXd prev = alpha;
    double momentum_t = 1.0;
    auto objective = [&](const Eigen::VectorXd& x) {
        return (a.transpose() * x - query).squaredNorm();
    };
    double f_prev = objective(alpha);
    int it = 0;
    double residual = 0.0;
    for (; it < max_iters; ++it) {
        double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum_t * momentum_t));
        double omega = (momentum_t - 1.0) / t_next;
        Eigen::VectorXd y = alpha + omega * (alpha - prev);
        Eigen::VectorXd grad_y = 2.0 * (gram * y - lin);
        Eigen::VectorXd next = project_to_simplex(y - grad_y / lip);
        double f_next = objective(next);
        if (f_next > f_prev) {  // adaptive restart
            momentum_t = 1.0;
            grad_y = 2.0 * (gram * alpha - lin);
            next = project_to_simplex(alpha - grad_y / lip);
            f_next = objective(next);
        } else {
            momentum_t = t_next;
        }
        prev = alpha;
        alpha = next;
        f_prev = f_next;
        residual = (alpha - project_to_simplex(alpha - 2.0 * (gram * alpha - lin)))
                       .lpNorm<Eigen::Infinity>();
        if (residual <= target) break;
    }
    if (residual > 1e-5)
        throw NumericError("convex hull QP did not converge: residual " +
                           std::to_string(residual) + " after " + std::to_string(it) +
                           " iterations");
    return finish(hull, query, alpha, residual, it);
}

}  // namespace

HullProjection hull_distance(const FeatureHull& hull, const Eigen::VectorXd& query) {
    if (static_cast<int>(query.size()) != hull.dim())
        throw PreconditionError("hull_distance: query dimension mismatch");
    switch (hull.kind) {
        case HullKind::center: {
            HullProjection p;
            p.alpha = Eigen::VectorXd::Constant(hull.n(), 1.0 / hull.n());
            p.point = hull.center;
            p.distance = (hull.center - query).norm();
            p.kkt_residual = 0.0;
            p.iterations = 0;
            return p;
        }
        case HullKind::affine: return affine_projection(hull, query);
        case HullKind::convex: return convex_projection(hull, query);
    }
    throw PreconditionError("hull_distance: unknown hull kind");
}

HullProjection hull_distance(const FeatureHull& hull, const Embedding& query) {
    return hull_distance(hull, Eigen::Map<const Eigen::VectorXd>(
                                   query.v.data(), static_cast<Eigen::Index>(query.v.size())));
}

namespace {

// Enumerates alpha over the simplex at resolution 1/steps.
double convex_grid_min(const Eigen::MatrixXd& a, const Eigen::VectorXd& query, int steps) {
    int n = static_cast<int>(a.rows());
    Eigen::VectorXd alpha(n);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(int, int)> rec = [&](int coord, int remaining) {
        if (coord == n - 1) {
            alpha(coord) = static_cast<double>(remaining) / steps;
            best = std::min(best, (a.transpose() * alpha - query).norm());
            return;
        }
        for (int k = 0; k <= remaining; ++k) {
            alpha(coord) = static_cast<double>(k) / steps;
            rec(coord + 1, remaining - k);
        }
    };
    rec(0, steps);
    return best;
}

double affine_grid_min(const Eigen::MatrixXd& a, const Eigen::VectorXd& query, double res) {
    int n = static_cast<int>(a.rows());
    int steps = static_cast<int>(std::lround((kAffineOracleHi - kAffineOracleLo) / res));
    Eigen::VectorXd alpha(n);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(int, double)> rec = [&](int coord, double partial_sum) {
        if (coord == n - 1) {
            alpha(coord) = 1.0 - partial_sum;
            best = std::min(best, (a.transpose() * alpha - query).norm());
            return;
        }
        for (int k = 0; k <= steps; ++k) {
            alpha(coord) = kAffineOracleLo + k * res;
            rec(coord + 1, partial_sum + alpha(coord));
        }
    };
    rec(0, 0.0);
    return best;
}

}  // namespace

double oracle_hull_distance(const FeatureHull& hull, const Eigen::VectorXd& query,
                            double grid_resolution) {
    if (hull.n() > 4)
        throw PreconditionError("oracle_hull_distance supports n <= 4 anchors only");
    if (static_cast<int>(query.size()) != hull.dim())
        throw PreconditionError("oracle_hull_distance: query dimension mismatch");
    if (grid_resolution <= 0.0) throw PreconditionError("grid_resolution must be positive");
    switch (hull.kind) {
        case HullKind::center: return (hull.center - query).norm();
        case HullKind::convex: {
            int steps = std::max(1, static_cast<int>(std::lround(1.0 / grid_resolution)));
            return convex_grid_min(hull.anchors, query, steps);
        }
        case HullKind::affine:
            if (hull.n() == 1) return (hull.anchors.row(0).transpose() - query).norm();
            return affine_grid_min(hull.anchors, query, grid_resolution);
    }
    throw PreconditionError("oracle_hull_distance: unknown hull kind");
}

double oracle_hull_distance(const FeatureHull& hull, const Embedding& query,
                            double grid_resolution) {
    return oracle_hull_distance(
        hull,
        Eigen::Map<const Eigen::VectorXd>(query.v.data(),
                                          static_cast<Eigen::Index>(query.v.size())),
        grid_resolution);
}

}  // namespace advcloak
