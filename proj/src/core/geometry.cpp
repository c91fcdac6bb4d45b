#include "geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "error.hpp"

namespace ssch::geometry {

namespace {

constexpr double kDegrees = 180.0 / std::numbers::pi;

double rank_tolerance(const MatrixXd& m, double sigma_max) {
  return static_cast<double>(std::max(m.rows(), m.cols())) *
         std::numeric_limits<double>::epsilon() * sigma_max;
}

}  // namespace

SubspaceMatrix make_subspace(MatrixXd matrix, std::string source) {
  if (!matrix.allFinite()) throw numeric_error("subspace matrix has non-finite entries");
  SubspaceMatrix s;
  s.source = std::move(source);
  if (matrix.size() > 0) {
    Eigen::JacobiSVD<MatrixXd> svd(matrix);
    const auto& sv = svd.singularValues();
    s.tolerance = sv.size() > 0 ? rank_tolerance(matrix, sv(0)) : 0.0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv(i) > s.tolerance) ++s.rank;
  }
  s.matrix = std::move(matrix);
  return s;
}

SubspaceMatrix effective_matrix(const probe::ProbeParams& params, std::string source) {
  return make_subspace(probe::mean_weights(params), std::move(source));
}

SubspaceMatrix effective_matrix(const probe::TrainedProbe& probe, std::string source) {
  return effective_matrix(probe.state, std::move(source));
}

MatrixXd orthonormal_basis(const SubspaceMatrix& m) {
  if (m.rank == 0) return MatrixXd(m.matrix.rows(), 0);
  Eigen::JacobiSVD<MatrixXd> svd(m.matrix, Eigen::ComputeThinU);
  return svd.matrixU().leftCols(m.rank);
}

SubspaceAngles ssa(const SubspaceMatrix& a, const SubspaceMatrix& b) {
  if (a.matrix.rows() != b.matrix.rows())
    throw invalid_argument("dimension mismatch: subspaces live in R^" +
                           std::to_string(a.matrix.rows()) + " and R^" +
                           std::to_string(b.matrix.rows()));
  if (a.rank == 0 || b.rank == 0) throw invalid_argument("rank-0 subspace");

  const MatrixXd qa = orthonormal_basis(a);
  const MatrixXd qb = orthonormal_basis(b);
  const MatrixXd m = qa.transpose() * qb;
  Eigen::JacobiSVD<MatrixXd> svd(m);
  const auto& sv = svd.singularValues();  // descending

  SubspaceAngles out;
  out.angles.reserve(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    out.angles.push_back(std::acos(std::clamp(sv(i), 0.0, 1.0)) * kDegrees);
  std::sort(out.angles.begin(), out.angles.end());
  double sum = 0.0;
  for (double v : out.angles) sum += v;
  out.mean_angle = out.angles.empty() ? 0.0 : sum / static_cast<double>(out.angles.size());
  return out;
}

double center_of_gravity(const Eigen::VectorXd& alpha) {
  double cog = 0.0;
  for (Eigen::Index i = 0; i < alpha.size(); ++i) cog += alpha(i) * static_cast<double>(i);
  return cog;
}

double center_of_gravity(const probe::ProbeState& state) {
  return center_of_gravity(state.alpha());
}

}  // namespace ssch::geometry
