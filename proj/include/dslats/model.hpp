#pragma once

#include <array>
#include <optional>

#include <Eigen/Dense>

namespace dslats {

inline constexpr double kSpeedOfLight = 299'792'458.0;

// Per-node state: 3 position components, clock offset, clock frequency bias.
inline constexpr int kStateDim = 5;
inline constexpr int kOffsetIndex = 3;
inline constexpr int kBiasIndex = 4;

using Vec3 = Eigen::Vector3d;
using StateVector = Eigen::Matrix<double, kStateDim, 1>;
using StateMatrix = Eigen::Matrix<double, kStateDim, kStateDim>;

struct ModelConstants {
    double c = kSpeedOfLight;
};

/// Estimate or truth for one node. Offset `o` (seconds) and bias `b`
/// (dimensionless, 2e-6 == 2 ppm) are both relative to the master clock.
struct NodeState {
    Vec3 p = Vec3::Zero();
    double o = 0.0;
    double b = 0.0;

    StateVector vector() const;
    static NodeState from_vector(const StateVector& v);
    bool finite() const;

    bool operator==(const NodeState&) const = default;
};

/// Timestamps and durations of one initiator/responder exchange.
///
/// Leg layout (per-node local clocks):
///   t0 initiator TX -> t1 responder RX       (type 3 only)
///   t2 responder TX -> t3 initiator RX       (type >= 2)
///   t4 initiator TX -> t5 responder RX       (all types)
/// Durations: T_RND0 = t3 - t0, T_RSP0 = t2 - t1 (type 3),
///            T_RND1 = t5 - t2, T_RSP1 = t4 - t3 (type >= 2).
struct ExchangeRecord {
    int sender_id = 0;    // initiator
    int receiver_id = 0;  // responder
    int msg_type = 1;
    std::array<std::optional<double>, 6> t{};
    std::optional<double> rnd0, rsp0, rnd1, rsp1;

    /// Fills the four durations from whichever stamps are populated.
    void derive_durations();
};

/// Which rows of the measurement vector (d, r, R) are in use.
struct MeasurementMask {
    bool d = true;
    bool r = true;
    bool R = true;

    int rows() const { return int(d) + int(r) + int(R); }
    /// A type-t exchange yields every measurement of types 1..t.
    static MeasurementMask for_type(int msg_type);
    MeasurementMask operator&(const MeasurementMask& o) const { return {d && o.d, r && o.r, R && o.R}; }
    bool operator==(const MeasurementMask&) const = default;
};

struct MeasurementVector {
    std::optional<double> d;  // seconds
    std::optional<double> r;  // meters
    std::optional<double> R;  // meters

    /// Present rows in (d, r, R) order restricted to `mask`.
    Eigen::VectorXd stacked(const MeasurementMask& mask) const;
};

NodeState state_update(const NodeState& x, double delta_t);

double counter_difference(const ExchangeRecord& ex);
double ss_twr(const ExchangeRecord& ex, const ModelConstants& k = {});
double ds_twr(const ExchangeRecord& ex, const ModelConstants& k = {});

/// Applies the three measurement formulas to a record.
MeasurementVector measure(const ExchangeRecord& ex, const MeasurementMask& mask, const ModelConstants& k = {});

/// Bias-induced double-sided ranging term (seconds) for sender bias `b_k`
/// and receiver bias `b_j`.
double ds_bias_term(double b_k, double b_j, const ExchangeRecord& ex);

/// Predicted (d, r, R) for an exchange whose initiator has state `xk` and
/// responder has state `xj`. d = (o_j - o_k) + |p_j - p_k| / c.
MeasurementVector predict_measurement(const NodeState& xk, const NodeState& xj, const ExchangeRecord& ex,
                                      const MeasurementMask& mask, const ModelConstants& k = {});

StateMatrix jacobian_F(const NodeState& x, double delta_t);
StateVector affine_term(const NodeState& x, double delta_t);

struct MeasurementJacobian {
    Eigen::MatrixXd wrt_sender;    // rows x 5
    Eigen::MatrixXd wrt_receiver;  // rows x 5
};

/// Jacobian of the enabled rows with respect to both endpoints. Throws
/// ModelError when the two positions coincide.
MeasurementJacobian jacobian_H_pair(const NodeState& xk, const NodeState& xj, const ExchangeRecord& ex,
                                    const MeasurementMask& mask, const ModelConstants& k = {});

/// Jacobian with respect to the initiator's own state only.
Eigen::MatrixXd jacobian_H(const NodeState& xk, const NodeState& xj, const ExchangeRecord& ex,
                           const MeasurementMask& mask, const ModelConstants& k = {});

/// Covariance of the enabled rows induced by i.i.d. Gaussian timestamp
/// noise of standard deviation `timestamp_std` on every populated stamp.
Eigen::MatrixXd measurement_covariance(const ExchangeRecord& ex, const MeasurementMask& mask,
                                       double timestamp_std, const ModelConstants& k = {});

}  // namespace dslats
