#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "advcloak/embedder.hpp"

namespace advcloak {

enum class HullKind { affine, center, convex };

std::string hull_kind_name(HullKind k);
HullKind hull_kind_from_name(const std::string& s);

// An identity's feature subspace: the anchor embeddings plus the hull kind.
struct FeatureHull {
    Eigen::MatrixXd anchors;  // n x d, one anchor per row
    HullKind kind = HullKind::center;
    std::string identity;
    Eigen::VectorXd center;  // anchor mean, precomputed

    int n() const { return static_cast<int>(anchors.rows()); }
    int dim() const { return static_cast<int>(anchors.cols()); }
};

struct HullProjection {
    Eigen::VectorXd alpha;  // length n; sums to 1 (affine/convex), box [0,1] for convex
    Eigen::VectorXd point;  // anchors^T alpha
    double distance = 0.0;  // Euclidean distance from query to point
    double kkt_residual = 0.0;
    int iterations = 0;
};

FeatureHull build_hull(const Eigen::MatrixXd& anchors, HullKind kind,
                       const std::string& identity = "");
FeatureHull build_hull(const std::vector<Embedding>& anchors, HullKind kind,
                       const std::string& identity = "");

// Euclidean point-to-subspace projection.
//   affine: equality-constrained least squares, minimum-norm alpha on rank
//           deficiency;
//   convex: simplex-constrained QP by accelerated projected gradient with
//           exact simplex projection, stopped on the fixed-point residual;
//   center: direct distance to the mean.
// Throws NumericError carrying the residual if the QP fails to reach 1e-5.
HullProjection hull_distance(const FeatureHull& hull, const Eigen::VectorXd& query);
HullProjection hull_distance(const FeatureHull& hull, const Embedding& query);

// Exhaustive grid-search verification oracle, n <= 4 only. The affine grid
// covers weights in [kAffineOracleLo, kAffineOracleHi] per free coordinate.
inline constexpr double kAffineOracleLo = -3.0;
inline constexpr double kAffineOracleHi = 4.0;
double oracle_hull_distance(const FeatureHull& hull, const Eigen::VectorXd& query,
                            double grid_resolution);
double oracle_hull_distance(const FeatureHull& hull, const Embedding& query,
                            double grid_resolution);

// Euclidean projection onto the probability simplex (sort-based, exact).
Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& u);

}  // namespace advcloak
