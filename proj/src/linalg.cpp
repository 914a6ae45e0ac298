#include "dslats/linalg.hpp"

#include <cmath>
#include <string>

#include "dslats/error.hpp"

namespace dslats {

RankUpdateTerm RankUpdateTerm::measurement(const Matrix& H, const Matrix& R) {
    Eigen::LDLT<Matrix> ldlt(R);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw NumericalError("measurement covariance is not positive definite");
    return {H.transpose(), ldlt.solve(Matrix::Identity(R.rows(), R.cols())), H};
}

Matrix binomial_update_chain(const Matrix& prior, std::span<const RankUpdateTerm> terms) {
    Matrix Q = prior;
    for (std::size_t j = 0; j < terms.size(); ++j) {
        const RankUpdateTerm& t = terms[j];
        if (t.U.rows() != Q.rows() || t.V.cols() != Q.cols() || t.B.rows() != t.U.cols() ||
            t.B.cols() != t.V.rows())
            throw NumericalError("update term " + std::to_string(j) + " has mismatched dimensions");
        Eigen::FullPivLU<Matrix> b_lu(t.B);
        if (!b_lu.isInvertible()) throw NumericalError("update term " + std::to_string(j) + " has singular B");
        const Matrix QU = Q * t.U;
        const Matrix VQ = t.V * Q;
        const Matrix inner = b_lu.inverse() + t.V * QU;
        Eigen::FullPivLU<Matrix> lu(inner);
        if (!lu.isInvertible())
            throw NumericalError("inner matrix of update term " + std::to_string(j) + " is singular");
        Q -= QU * lu.solve(VQ);
    }
    return Q;
}

BandedInverse::BandedInverse(Matrix dense, int bandwidth) : dense_(std::move(dense)), bandwidth_(bandwidth) {
    if (dense_.rows() != dense_.cols()) throw NumericalError("banded matrix must be square");
    if (bandwidth_ < 0) throw NumericalError("bandwidth must be non-negative");
    const int n = size();
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            if (std::abs(a - b) > bandwidth_) dense_(a, b) = 0.0;
}

namespace {

Matrix spd_inverse(const Matrix& A, const char* what) {
    Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite");
    return llt.solve(Matrix::Identity(A.rows(), A.cols()));
}

}  // namespace

BandedInverse lband_approx_inverse(const Matrix& P, int bandwidth) {
    const int n = int(P.rows());
    if (P.cols() != n) throw NumericalError("lband_approx_inverse needs a square matrix");
    if (n == 0) return BandedInverse(Matrix(0, 0), 0);
    if (bandwidth < 0) throw NumericalError("bandwidth must be non-negative");
    if (bandwidth >= n - 1) return BandedInverse(symmetrize(spd_inverse(P, "covariance")), n - 1);

    const int L = bandwidth;
    Matrix J = Matrix::Zero(n, n);
    for (int i = 0; i + L < n; ++i) J.block(i, i, L + 1, L + 1) += spd_inverse(P.block(i, i, L + 1, L + 1), "principal block");
    if (L > 0)
        for (int i = 1; i + L < n; ++i) J.block(i, i, L, L) -= spd_inverse(P.block(i, i, L, L), "principal block");
    return BandedInverse(symmetrize(J), L);
}

void collapse_fill(Matrix& P, int bandwidth) {
    const int n = int(P.rows());
    const int L = bandwidth;
    if (L < 1) throw NumericalError("collapse needs bandwidth >= 1");
    if (n <= L + 1) return;
    // Row a's coefficients P(a, Z) P(Z, Z)^-1 only touch band entries, which the fill never rewrites.
    Matrix W(n - L - 1, L);
    for (int a = 0; a + L + 1 < n; ++a) {
        Eigen::FullPivLU<Matrix> lu(P.block(a + 1, a + 1, L, L));
        if (!lu.isInvertible()) throw NumericalError("zero pivot in collapse at row " + std::to_string(a));
        W.row(a) = lu.solve(P.block(a + 1, a, L, 1)).transpose();
    }
    for (int dist = L + 1; dist < n; ++dist) {
        for (int a = 0; a + dist < n; ++a) {
            const int b = a + dist;
            const double v = W.row(a).dot(P.block(a + 1, b, L, 1).col(0));
            P(a, b) = v;
            P(b, a) = v;
        }
    }
}

Matrix dici_or_invert(const BandedInverse& J, const Matrix& P_prev, const DiciOrOptions& opt,
                      const std::function<void(int, const Matrix&)>& observer) {
    return dici_or_invert(J.dense(), J.bandwidth(), P_prev, opt, observer);
}

Matrix dici_or_invert(const Matrix& info, int bandwidth, const Matrix& P_prev, const DiciOrOptions& opt,
                      const std::function<void(int, const Matrix&)>& observer) {
    const int n = int(info.rows());
    const int L = bandwidth;
    if (info.cols() != n) throw NumericalError("information matrix must be square");
    if (L < 1 && n > 1) throw NumericalError("bandwidth must be at least 1");
    if (P_prev.rows() != n || P_prev.cols() != n) throw NumericalError("warm start has wrong dimensions");
    if (!(opt.gamma >= 0.0 && opt.gamma <= 1.0)) throw NumericalError("gamma must lie in [0, 1]");
    if (opt.iters < 0) throw NumericalError("iteration count must be non-negative");

    // M^-1, either diag(J)^-1 or the inverse of J's diagonal blocks.
    Matrix m_inv = Matrix::Zero(n, n);
    if (opt.blocks.empty()) {
        for (int a = 0; a < n; ++a) {
            if (info(a, a) == 0.0) throw NumericalError("zero diagonal entry in banded information matrix");
            m_inv(a, a) = 1.0 / info(a, a);
        }
    } else {
        int a = 0;
        for (int w : opt.blocks) {
            if (w < 1 || a + w > n) throw NumericalError("diagonal blocks do not partition the matrix");
            Eigen::LLT<Matrix> llt(info.block(a, a, w, w));
            if (llt.info() != Eigen::Success) throw NumericalError("diagonal block is not positive definite");
            m_inv.block(a, a, w, w) = llt.solve(Matrix::Identity(w, w));
            a += w;
        }
        if (a != n) throw NumericalError("diagonal blocks do not partition the matrix");
    }

    // S = (1 - gamma) I + gamma M^-1 (M - J)
    Matrix S = -opt.gamma * (m_inv * info);
    S.diagonal().array() += 1.0;

    const bool full_band = L >= n - 1;
    Matrix P = symmetrize(P_prev);
    if (!full_band) collapse_fill(P, L);

    for (int t = 0; t < opt.iters; ++t) {
        Matrix next = S * P + opt.gamma * m_inv;
        next = symmetrize(next);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b)
                if (std::abs(a - b) <= L) P(a, b) = next(a, b);
        if (!full_band) collapse_fill(P, L);
        if (observer) observer(t, P);
    }
    return P;
}

Matrix symmetrize(const Matrix& A) { return 0.5 * (A + A.transpose()); }

Matrix floor_eigenvalues(const Matrix& A, double floor) {
    const Matrix sym = symmetrize(A);
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw NumericalError("eigen decomposition failed");
    if (es.eigenvalues().minCoeff() >= floor) return sym;
    const Vector clamped = es.eigenvalues().cwiseMax(floor);
    return symmetrize(es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose());
}

namespace {

int point_rank(const Eigen::Matrix3Xd& centered) {
    Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(centered);
    const Eigen::Vector3d s = svd.singularValues();
    if (s(0) <= 0.0) return 0;
    int rank = 0;
    for (int i = 0; i < 3; ++i)
        if (s(i) > 1e-9 * s(0)) ++rank;
    return rank;
}

}  // namespace

RigidTransform procrustes_align(std::span<const Vec3> est, std::span<const Vec3> truth) {
    const std::size_t n = est.size();
    if (n != truth.size()) throw AlignmentError("point sets differ in size");
    if (n < 3) throw AlignmentError("alignment needs at least three points");

    Eigen::Matrix3Xd A(3, n), B(3, n);
    for (std::size_t i = 0; i < n; ++i) {
        A.col(i) = est[i];
        B.col(i) = truth[i];
    }
    if (!A.allFinite() || !B.allFinite()) throw AlignmentError("non-finite coordinates");
    const Vec3 ca = A.rowwise().mean();
    const Vec3 cb = B.rowwise().mean();
    A.colwise() -= ca;
    B.colwise() -= cb;
    if (point_rank(A) < 2 || point_rank(B) < 2) throw AlignmentError("degenerate (collinear) configuration");

    const Eigen::Matrix3d H = A * B.transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) D(2, 2) = -1.0;

    RigidTransform out;
    out.rotation = svd.matrixV() * D * svd.matrixU().transpose();
    out.translation = cb - out.rotation * ca;
    out.aligned.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.aligned.push_back(out.apply(est[i]));
        out.residual += (out.aligned.back() - truth[i]).squaredNorm();
    }
    return out;
}

}  // namespace dslats
