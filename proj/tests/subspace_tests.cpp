#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "advcloak/errors.hpp"
#include "advcloak/rng.hpp"
#include "advcloak/subspace.hpp"

using namespace advcloak;

namespace {

Eigen::MatrixXd unit_rows(int n, int d, Rng& rng, double min_separation = 0.0) {
    while (true) {
        Eigen::MatrixXd m(n, d);
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd v(d);
            for (int j = 0; j < d; ++j) v(j) = rng.normal();
            m.row(i) = v.normalized();
        }
        if (min_separation <= 0.0) return m;
        double sep = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                sep = std::min(sep, (m.row(i) - m.row(j)).norm());
        if (sep >= min_separation) return m;
    }
}

Eigen::VectorXd unit_vec(int d, Rng& rng) {
    Eigen::VectorXd v(d);
    for (int j = 0; j < d; ++j) v(j) = rng.normal();
    return v.normalized();
}

// Smallest nonzero singular value of the centered-anchor system; used to keep
// the affine oracle's weight box valid for the sampled instances.
double affine_conditioning(const Eigen::MatrixXd& anchors) {
    int n = static_cast<int>(anchors.rows());
    Eigen::MatrixXd ones(n, 1);
    ones.setOnes();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(ones);
    Eigen::MatrixXd z = Eigen::MatrixXd(qr.householderQ()).rightCols(n - 1);
    Eigen::VectorXd sv = (anchors.transpose() * z).bdcSvd().singularValues();
    double smallest = std::numeric_limits<double>::infinity();
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > 1e-9) smallest = std::min(smallest, sv(i));
    return smallest;
}

}  // namespace

TEST_CASE("center hull: mean and distance") {
    Eigen::MatrixXd anchors(2, 2);
    anchors << 1, 0, 0, 1;
    FeatureHull h = build_hull(anchors, HullKind::center);
    CHECK(h.center(0) == doctest::Approx(0.5));
    CHECK(h.center(1) == doctest::Approx(0.5));
    Eigen::VectorXd q(2);
    q << 0, 0;
    HullProjection p = hull_distance(h, q);
    CHECK(p.distance == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
}

TEST_CASE("affine hull of two points: closed-form line projection") {
    Eigen::MatrixXd anchors(2, 2);
    anchors << 1, 0, 0, 1;
    FeatureHull h = build_hull(anchors, HullKind::affine);
    Eigen::VectorXd q(2);
    q << 0, 0;
    HullProjection p = hull_distance(h, q);
    CHECK(p.distance == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(p.alpha(0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.alpha(1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.alpha.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("affine hull degenerates to the single anchor") {
    Eigen::MatrixXd anchors(1, 3);
    anchors << 0.5, 0.5, std::sqrt(0.5);
    FeatureHull h = build_hull(anchors, HullKind::affine);
    Eigen::VectorXd q(3);
    q << 0, 0, 0;
    HullProjection p = hull_distance(h, q);
    CHECK(p.distance == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.alpha(0) == doctest::Approx(1.0));
}

TEST_CASE("convex hull vertex query and duplicate anchors") {
    Eigen::MatrixXd anchors(2, 2);
    anchors << 1, 0, 0, 1;
    FeatureHull h = build_hull(anchors, HullKind::convex);
    Eigen::VectorXd q(2);
    q << 1, 0;
    HullProjection p = hull_distance(h, q);
    CHECK(p.distance == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(p.alpha(0) == doctest::Approx(1.0).epsilon(1e-6));

    // duplicates make the QP rank-deficient; it must still solve
    Eigen::MatrixXd dup(3, 2);
    dup << 1, 0, 1, 0, 0, 1;
    FeatureHull hd = build_hull(dup, HullKind::convex);
    Eigen::VectorXd q2(2);
    q2 << -1, -1;
    HullProjection pd = hull_distance(hd, q2);
    CHECK(pd.kkt_residual <= 1e-5);
    CHECK(pd.alpha.minCoeff() >= -1e-9);
    CHECK(pd.alpha.sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("convex hull off-simplex query matches brute-force grid") {
    Eigen::MatrixXd anchors(2, 2);
    anchors << 1, 0, 0, 1;
    FeatureHull h = build_hull(anchors, HullKind::convex);
    Eigen::VectorXd q(2);
    q << -1, -1;
    HullProjection p = hull_distance(h, q);
    double oracle = oracle_hull_distance(h, q, 1e-3);
    CHECK(std::abs(p.distance - oracle) <= 1e-3);
}

TEST_CASE("oracle: anchor query and center consistency") {
    Rng rng(5);
    Eigen::MatrixXd anchors = unit_rows(3, 4, rng);
    FeatureHull h = build_hull(anchors, HullKind::convex);
    double d0 = oracle_hull_distance(h, Eigen::VectorXd(anchors.row(1)), 0.01);
    CHECK(d0 <= 0.05);  // within grid error of zero

    FeatureHull hc = build_hull(anchors, HullKind::center, "c");
    Eigen::VectorXd q = unit_vec(4, rng);
    CHECK(oracle_hull_distance(hc, q, 0.01) ==
          doctest::Approx((hc.center - q).norm()).epsilon(1e-12));

    FeatureHull big = build_hull(unit_rows(5, 4, rng), HullKind::convex);
    CHECK_THROWS_AS(oracle_hull_distance(big, q, 0.1), PreconditionError);
}

TEST_CASE("solver agrees with the oracle on random small instances") {
    Rng rng(42);
    int checked = 0;
    while (checked < 100) {
        int n = static_cast<int>(rng.uniform_int(2, 4));
        int d = static_cast<int>(rng.uniform_int(2, 8));
        Eigen::MatrixXd anchors = unit_rows(n, d, rng, 0.35);
        Eigen::VectorXd q = unit_vec(d, rng);

        // convex
        FeatureHull hc = build_hull(anchors, HullKind::convex);
        double res = n == 4 ? 0.02 : 0.005;
        double conv_tol = std::max(1e-3, 2.0 * res * std::sqrt(static_cast<double>(n)));
        CHECK(std::abs(hull_distance(hc, q).distance - oracle_hull_distance(hc, q, res)) <=
              conv_tol);

        // affine (reject instances whose optimum may leave the oracle box)
        if (affine_conditioning(anchors) >= 0.8) {
            FeatureHull ha = build_hull(anchors, HullKind::affine);
            double ares = n == 4 ? 0.1 : (n == 3 ? 0.02 : 0.002);
            double affine_tol = std::max(1e-3, 2.0 * ares * std::sqrt(static_cast<double>(n)));
            HullProjection pa = hull_distance(ha, q);
            CHECK(pa.alpha.cwiseAbs().maxCoeff() < 3.0);  // inside the oracle box
            CHECK(std::abs(pa.distance - oracle_hull_distance(ha, q, ares)) <= affine_tol);
        }
        ++checked;
    }
}

TEST_CASE("hull nesting: affine <= convex <= center") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        int n = static_cast<int>(rng.uniform_int(2, 6));
        int d = static_cast<int>(rng.uniform_int(2, 16));
        Eigen::MatrixXd anchors = unit_rows(n, d, rng);
        Eigen::VectorXd q = unit_vec(d, rng);
        double da = hull_distance(build_hull(anchors, HullKind::affine), q).distance;
        double dc = hull_distance(build_hull(anchors, HullKind::convex), q).distance;
        double dm = hull_distance(build_hull(anchors, HullKind::center), q).distance;
        CHECK(da <= dc + 1e-9);
        CHECK(dc <= dm + 1e-9);
    }
}

TEST_CASE("feasibility and KKT certificates") {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        int n = static_cast<int>(rng.uniform_int(2, 8));
        int d = static_cast<int>(rng.uniform_int(2, 16));
        Eigen::MatrixXd anchors = unit_rows(n, d, rng);
        Eigen::VectorXd q = unit_vec(d, rng);

        HullProjection pa = hull_distance(build_hull(anchors, HullKind::affine), q);
        CHECK(std::abs(pa.alpha.sum() - 1.0) <= 1e-6);

        HullProjection pc = hull_distance(build_hull(anchors, HullKind::convex), q);
        CHECK(std::abs(pc.alpha.sum() - 1.0) <= 1e-6);
        CHECK(pc.alpha.minCoeff() >= -1e-6);
        CHECK(pc.alpha.maxCoeff() <= 1.0 + 1e-6);
        CHECK(pc.kkt_residual <= 1e-5);
    }
}

TEST_CASE("translation equivariance of hull distances") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        int n = static_cast<int>(rng.uniform_int(2, 5));
        int d = static_cast<int>(rng.uniform_int(2, 8));
        Eigen::MatrixXd anchors = unit_rows(n, d, rng);
        Eigen::VectorXd q = unit_vec(d, rng);
        Eigen::VectorXd shift(d);
        for (int j = 0; j < d; ++j) shift(j) = rng.normal();
        Eigen::MatrixXd shifted = anchors;
        shifted.rowwise() += shift.transpose();
        for (HullKind kind : {HullKind::affine, HullKind::center, HullKind::convex}) {
            double base = hull_distance(build_hull(anchors, kind), q).distance;
            double moved = hull_distance(build_hull(shifted, kind),
                                         Eigen::VectorXd(q + shift)).distance;
            CHECK(std::abs(base - moved) <= 1e-9);
        }
    }
}

TEST_CASE("hull error paths") {
    CHECK_THROWS_AS(build_hull(std::vector<Embedding>{}, HullKind::center), PreconditionError);
    Eigen::MatrixXd anchors(2, 3);
    anchors << 1, 0, 0, 0, 1, 0;
    FeatureHull h = build_hull(anchors, HullKind::affine);
    Eigen::VectorXd q(2);
    q << 1, 0;
    CHECK_THROWS_AS(hull_distance(h, q), PreconditionError);
}

TEST_CASE("simplex projection basics") {
    Eigen::VectorXd u(3);
    u << 0.2, 0.3, 0.5;
    Eigen::VectorXd p = project_to_simplex(u);  // already feasible
    CHECK((p - u).norm() <= 1e-12);
    u << 5.0, -1.0, 0.0;
    p = project_to_simplex(u);
    CHECK(p(0) == doctest::Approx(1.0));
    CHECK(p(1) == doctest::Approx(0.0));
    CHECK(std::abs(p.sum() - 1.0) <= 1e-12);
}
