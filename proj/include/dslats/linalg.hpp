#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dslats/model.hpp"

namespace dslats {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// One additive term U B V of an information-form update.
struct RankUpdateTerm {
    Matrix U;  // n x m
    Matrix B;  // m x m, SPD
    Matrix V;  // m x n

    /// Measurement term H^T R^-1 H.
    static RankUpdateTerm measurement(const Matrix& H, const Matrix& R);
};

/// Returns (P^-1 + sum_j U_j B_j V_j)^-1 by successive applications of the
/// binomial inverse identity. Only m_j x m_j systems are solved.
Matrix binomial_update_chain(const Matrix& prior, std::span<const RankUpdateTerm> terms);

/// Symmetric matrix whose entries outside |a - b| <= L are zero.
class BandedInverse {
public:
    BandedInverse(Matrix dense, int bandwidth);

    int size() const { return int(dense_.rows()); }
    int bandwidth() const { return bandwidth_; }
    const Matrix& dense() const { return dense_; }
    double operator()(int a, int b) const { return dense_(a, b); }

private:
    Matrix dense_;
    int bandwidth_;
};

/// L-banded approximation to P^-1 assembled from the inverses of the
/// overlapping (L+1) x (L+1) principal blocks of P, minus the inverses of
/// their L x L overlaps. Exact when P^-1 is itself L-banded.
BandedInverse lband_approx_inverse(const Matrix& P, int bandwidth);

/// Fills every entry with |a - b| > L from the band entries, in increasing
/// distance from the diagonal. For L = 1 this is
///   p_ab = p_{a,b-1} p_{a+1,b-1}^-1 p_{a+1,b};
/// for wider bands the pivot becomes the L x L block between a and b.
void collapse_fill(Matrix& P, int bandwidth);

struct DiciOrOptions {
    double gamma = 0.6;
    int iters = 10;
    /// Sizes of the diagonal blocks forming M. Empty means M = diag(J).
    std::vector<int> blocks;
};

/// Approximates J^-1 by overrelaxed iterate/collapse passes warm-started
/// from `P_prev`. `observer`, when set, sees the iterate after each pass.
Matrix dici_or_invert(const BandedInverse& J, const Matrix& P_prev, const DiciOrOptions& opt,
                      const std::function<void(int, const Matrix&)>& observer = {});

/// Same iteration for an information matrix that may carry entries outside
/// the band (e.g. a banded prior plus measurement terms). The iterate uses
/// all of `info`; the collapse still assumes `bandwidth`.
Matrix dici_or_invert(const Matrix& info, int bandwidth, const Matrix& P_prev, const DiciOrOptions& opt,
                      const std::function<void(int, const Matrix&)>& observer = {});

Matrix symmetrize(const Matrix& A);
/// Symmetrizes and clamps eigenvalues from below at `floor`.
Matrix floor_eigenvalues(const Matrix& A, double floor = 1e-12);

struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Vec3 translation = Vec3::Zero();
    std::vector<Vec3> aligned;
    double residual = 0.0;  // sum of squared distances after alignment

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

/// Rotation (det +1) and translation, no scaling, minimizing
/// sum |R est_i + t - truth_i|^2.
RigidTransform procrustes_align(std::span<const Vec3> est, std::span<const Vec3> truth);

}  // namespace dslats
