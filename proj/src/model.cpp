#include "dslats/model.hpp"

#include <cmath>
#include <string>

#include "dslats/error.hpp"

namespace dslats {

namespace {

double require(const std::optional<double>& v, const char* name) {
    if (!v) throw ProtocolError(std::string("exchange record is missing ") + name);
    if (!std::isfinite(*v)) throw ProtocolError(std::string("exchange record has non-finite ") + name);
    return *v;
}

double stamp(const ExchangeRecord& ex, int i) {
    static constexpr const char* kNames[] = {"t0", "t1", "t2", "t3", "t4", "t5"};
    return require(ex.t[i], kNames[i]);
}

void require_finite(const NodeState& x, const char* what) {
    if (!x.finite()) throw ModelError(std::string("non-finite ") + what);
}

struct DsTerms {
    double rnd0, rsp0, rnd1, rsp1;
};

DsTerms ds_terms(const ExchangeRecord& ex) {
    return {require(ex.rnd0, "T_RND0"), require(ex.rsp0, "T_RSP0"), require(ex.rnd1, "T_RND1"),
            require(ex.rsp1, "T_RSP1")};
}

}  // namespace

StateVector NodeState::vector() const {
    StateVector v;
    v << p, o, b;
    return v;
}

NodeState NodeState::from_vector(const StateVector& v) {
    return {v.head<3>(), v(kOffsetIndex), v(kBiasIndex)};
}

bool NodeState::finite() const { return p.allFinite() && std::isfinite(o) && std::isfinite(b); }

void ExchangeRecord::derive_durations() {
    auto diff = [this](int a, int b) -> std::optional<double> {
        if (t[a] && t[b]) return *t[a] - *t[b];
        return std::nullopt;
    };
    rnd0 = diff(3, 0);
    rsp0 = diff(2, 1);
    rnd1 = diff(5, 2);
    rsp1 = diff(4, 3);
}

MeasurementMask MeasurementMask::for_type(int msg_type) {
    if (msg_type < 1 || msg_type > 3) throw ProtocolError("message type must be 1, 2 or 3");
    return {true, msg_type >= 2, msg_type >= 3};
}

Eigen::VectorXd MeasurementVector::stacked(const MeasurementMask& mask) const {
    Eigen::VectorXd out(mask.rows());
    int row = 0;
    auto put = [&](bool on, const std::optional<double>& v, const char* name) {
        if (!on) return;
        if (!v) throw ModelError(std::string("measurement row ") + name + " is absent");
        out(row++) = *v;
    };
    put(mask.d, d, "d");
    put(mask.r, r, "r");
    put(mask.R, R, "R");
    return out;
}

NodeState state_update(const NodeState& x, double delta_t) {
    require_finite(x, "state");
    if (!std::isfinite(delta_t) || delta_t < 0.0) throw ModelError("delta_t must be finite and non-negative");
    return {x.p, x.o + x.b * delta_t, x.b};
}

double counter_difference(const ExchangeRecord& ex) {
    if (ex.msg_type < 1) throw ProtocolError("counter difference needs msg_type >= 1");
    return stamp(ex, 5) - stamp(ex, 4);
}

double ss_twr(const ExchangeRecord& ex, const ModelConstants& k) {
    if (ex.msg_type < 2) throw ProtocolError("single-sided range needs msg_type >= 2");
    const double rnd1 = require(ex.rnd1, "T_RND1");
    const double rsp1 = require(ex.rsp1, "T_RSP1");
    if (rnd1 < rsp1) throw ProtocolError("T_RND1 < T_RSP1");
    return 0.5 * k.c * (rnd1 - rsp1);
}

double ds_twr(const ExchangeRecord& ex, const ModelConstants& k) {
    if (ex.msg_type != 3) throw ProtocolError("double-sided range needs msg_type 3");
    const auto [rnd0, rsp0, rnd1, rsp1] = ds_terms(ex);
    const double den = rnd0 + rnd1 + rsp0 + rsp1;
    if (!(den > 0.0)) throw ProtocolError("double-sided range denominator is not positive");
    return k.c * (rnd0 * rnd1 - rsp0 * rsp1) / den;
}

MeasurementVector measure(const ExchangeRecord& ex, const MeasurementMask& mask, const ModelConstants& k) {
    MeasurementVector y;
    if (mask.d) y.d = counter_difference(ex);
    if (mask.r) y.r = ss_twr(ex, k);
    if (mask.R) y.R = ds_twr(ex, k);
    return y;
}

double ds_bias_term(double b_k, double b_j, const ExchangeRecord& ex) {
    const auto [rnd0, rsp0, rnd1, rsp1] = ds_terms(ex);
    const double db = b_k - b_j;
    const double den = (1.0 + db) * rnd0 + rnd1 + rsp0 + (1.0 + db) * rsp1;
    if (!(den > 0.0)) throw ModelError("bias term denominator is not positive");
    return db * (rnd0 * rnd1 - rsp0 * rsp1) / den;
}

MeasurementVector predict_measurement(const NodeState& xk, const NodeState& xj, const ExchangeRecord& ex,
                                      const MeasurementMask& mask, const ModelConstants& k) {
    require_finite(xk, "sender state");
    require_finite(xj, "receiver state");
    const double dist = (xj.p - xk.p).norm();
    MeasurementVector h;
    if (mask.d) h.d = (xj.o - xk.o) + dist / k.c;
    if (mask.r) h.r = dist + 0.5 * k.c * (xj.b - xk.b) * require(ex.rsp1, "T_RSP1");
    if (mask.R) h.R = dist + k.c * ds_bias_term(xk.b, xj.b, ex);
    return h;
}

StateMatrix jacobian_F(const NodeState& x, double delta_t) {
    require_finite(x, "state");
    StateMatrix F = StateMatrix::Identity();
    F(kOffsetIndex, kBiasIndex) = delta_t;
    return F;
}

StateVector affine_term(const NodeState& x, double delta_t) {
    // f is linear in x, so f(psi) - F psi vanishes identically.
    return state_update(x, delta_t).vector() - jacobian_F(x, delta_t) * x.vector();
}

MeasurementJacobian jacobian_H_pair(const NodeState& xk, const NodeState& xj, const ExchangeRecord& ex,
                                    const MeasurementMask& mask, const ModelConstants& k) {
    require_finite(xk, "sender state");
    require_finite(xj, "receiver state");
    const Vec3 delta = xj.p - xk.p;
    const double dist = delta.norm();
    if (!(dist > 0.0)) throw ModelError("range gradient is singular at coincident positions");
    const Vec3 u = delta / dist;

    MeasurementJacobian J{Eigen::MatrixXd::Zero(mask.rows(), kStateDim),
                          Eigen::MatrixXd::Zero(mask.rows(), kStateDim)};
    int row = 0;
    if (mask.d) {
        J.wrt_sender.block<1, 3>(row, 0) = -u.transpose() / k.c;
        J.wrt_receiver.block<1, 3>(row, 0) = u.transpose() / k.c;
        J.wrt_sender(row, kOffsetIndex) = -1.0;
        J.wrt_receiver(row, kOffsetIndex) = 1.0;
        ++row;
    }
    if (mask.r) {
        const double g = 0.5 * k.c * require(ex.rsp1, "T_RSP1");
        J.wrt_sender.block<1, 3>(row, 0) = -u.transpose();
        J.wrt_receiver.block<1, 3>(row, 0) = u.transpose();
        J.wrt_sender(row, kBiasIndex) = -g;
        J.wrt_receiver(row, kBiasIndex) = g;
        ++row;
    }
    if (mask.R) {
        const auto [rnd0, rsp0, rnd1, rsp1] = ds_terms(ex);
        const double db = xk.b - xj.b;
        const double num = rnd0 * rnd1 - rsp0 * rsp1;
        const double den = (1.0 + db) * rnd0 + rnd1 + rsp0 + (1.0 + db) * rsp1;
        if (!(den > 0.0)) throw ModelError("bias term denominator is not positive");
        const double dterm = num * (rnd0 + rnd1 + rsp0 + rsp1) / (den * den);
        J.wrt_sender.block<1, 3>(row, 0) = -u.transpose();
        J.wrt_receiver.block<1, 3>(row, 0) = u.transpose();
        J.wrt_sender(row, kBiasIndex) = k.c * dterm;
        J.wrt_receiver(row, kBiasIndex) = -k.c * dterm;
    }
    return J;
}

Eigen::MatrixXd jacobian_H(const NodeState& xk, const NodeState& xj, const ExchangeRecord& ex,
                           const MeasurementMask& mask, const ModelConstants& k) {
    return jacobian_H_pair(xk, xj, ex, mask, k).wrt_sender;
}

Eigen::MatrixXd measurement_covariance(const ExchangeRecord& ex, const MeasurementMask& mask,
                                       double timestamp_std, const ModelConstants& k) {
    // Sensitivity of each enabled row to the six raw timestamps.
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(mask.rows(), 6);
    int row = 0;
    if (mask.d) {
        G(row, 4) = -1.0;
        G(row, 5) = 1.0;
        ++row;
    }
    if (mask.r) {
        const double h = 0.5 * k.c;
        G(row, 2) = -h;
        G(row, 3) = h;
        G(row, 4) = -h;
        G(row, 5) = h;
        ++row;
    }
    if (mask.R) {
        const auto [rnd0, rsp0, rnd1, rsp1] = ds_terms(ex);
        const double s = rnd0 + rnd1 + rsp0 + rsp1;
        const double n = rnd0 * rnd1 - rsp0 * rsp1;
        const double g_rnd0 = k.c * (rnd1 * s - n) / (s * s);
        const double g_rnd1 = k.c * (rnd0 * s - n) / (s * s);
        const double g_rsp0 = k.c * (-rsp1 * s - n) / (s * s);
        const double g_rsp1 = k.c * (-rsp0 * s - n) / (s * s);
        G(row, 3) += g_rnd0;
        G(row, 0) -= g_rnd0;
        G(row, 2) += g_rsp0;
        G(row, 1) -= g_rsp0;
        G(row, 5) += g_rnd1;
        G(row, 2) -= g_rnd1;
        G(row, 4) += g_rsp1;
        G(row, 3) -= g_rsp1;
    }
    return timestamp_std * timestamp_std * (G * G.transpose());
}

}  // namespace dslats
