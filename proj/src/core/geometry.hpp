#pragma once

// Probe subspaces and principal subspace angles.

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "probe.hpp"

namespace ssch::geometry {

using Eigen::MatrixXd;

struct SubspaceMatrix {
  MatrixXd matrix;  // dim x classes
  std::string source;
  Eigen::Index rank = 0;
  double tolerance = 0.0;
};

// Computes rank with tol = max(rows, cols) * eps * sigma_max.
SubspaceMatrix make_subspace(MatrixXd matrix, std::string source = {});

// Posterior-mean weights mu_z_i * mu_ij as a subspace.
SubspaceMatrix effective_matrix(const probe::ProbeParams& params, std::string source = {});
SubspaceMatrix effective_matrix(const probe::TrainedProbe& probe, std::string source = {});

// Orthonormal basis (dim x rank) of the column space. Empty for rank 0.
MatrixXd orthonormal_basis(const SubspaceMatrix& m);

struct SubspaceAngles {
  std::vector<double> angles;  // degrees, ascending, length min(rank_a, rank_b)
  double mean_angle = 0.0;
};

SubspaceAngles ssa(const SubspaceMatrix& a, const SubspaceMatrix& b);

// sum_i alpha_i * i over layer indices.
double center_of_gravity(const Eigen::VectorXd& alpha);
double center_of_gravity(const probe::ProbeState& state);

}  // namespace ssch::geometry
