#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "dslats/error.hpp"
#include "dslats/model.hpp"

using namespace dslats;

namespace {

constexpr double c = kSpeedOfLight;

ExchangeRecord ds_record(double tp, double rsp0, double rsp1) {
    ExchangeRecord ex;
    ex.msg_type = 3;
    ex.rnd0 = 2 * tp + rsp0;
    ex.rsp0 = rsp0;
    ex.rnd1 = 2 * tp + rsp1;
    ex.rsp1 = rsp1;
    return ex;
}

NodeState random_state(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> pos(-10.0, 10.0), off(-1e-4, 1e-4), bias(-5e-6, 5e-6);
    return {{pos(rng), pos(rng), pos(rng)}, off(rng), bias(rng)};
}

// Printed double-sided bias term, evaluated independently in long double.
long double printed_bias_term(long double bk, long double bj, long double rnd0, long double rsp0, long double rnd1,
                              long double rsp1) {
    const long double db = bk - bj;
    return db * (rnd0 * rnd1 - rsp0 * rsp1) / ((1 + db) * rnd0 + rnd1 + rsp0 + (1 + db) * rsp1);
}

}  // namespace

TEST(StateUpdate, ZeroBiasIsFixedPoint) {
    const NodeState x{{1, 2, 3}, 0.0, 0.0};
    EXPECT_EQ(state_update(x, 1.0), x);
}

TEST(StateUpdate, OffsetIntegratesBias) {
    const NodeState y = state_update({{0, 0, 0}, 1e-6, 2e-6}, 0.5);
    EXPECT_DOUBLE_EQ(y.o, 2e-6);
    EXPECT_DOUBLE_EQ(y.b, 2e-6);
}

TEST(StateUpdate, ZeroStepIsIdentityAndFlowComposes) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> step(0.0, 2.0);
    for (int i = 0; i < 50; ++i) {
        const NodeState x = random_state(rng);
        EXPECT_EQ(state_update(x, 0.0), x);
        const double a = step(rng), b = step(rng);
        const NodeState twice = state_update(state_update(x, a), b);
        const NodeState once = state_update(x, a + b);
        EXPECT_NEAR(twice.o, once.o, 1e-18);
        EXPECT_EQ(twice.b, once.b);
        EXPECT_EQ(twice.p, once.p);
    }
}

TEST(StateUpdate, RejectsNonFinite) {
    EXPECT_THROW(state_update({{NAN, 0, 0}, 0, 0}, 1.0), ModelError);
    EXPECT_THROW(state_update({}, -1.0), ModelError);
}

TEST(CounterDifference, DirectSubtraction) {
    ExchangeRecord ex;
    ex.t[4] = 10.0;
    ex.t[5] = 10.0;
    EXPECT_EQ(counter_difference(ex), 0.0);
    ex.t[4] = 5.0;
    ex.t[5] = 5.0000001;
    EXPECT_NEAR(counter_difference(ex), 1e-7, 1e-15);
    ex.t[5].reset();
    EXPECT_THROW(counter_difference(ex), ProtocolError);
}

TEST(SingleSidedRange, CollapsesToPropagationDelay) {
    ExchangeRecord ex;
    ex.msg_type = 2;
    ex.rnd1 = 2 * (3.0 / c) + 1e-3;
    ex.rsp1 = 1e-3;
    EXPECT_NEAR(ss_twr(ex), 3.0, 1e-6);
    ex.rnd1 = 1e-3;
    EXPECT_EQ(ss_twr(ex), 0.0);
    ex.rnd1 = 0.5e-3;
    EXPECT_THROW(ss_twr(ex), ProtocolError);
}

TEST(DoubleSidedRange, ReducesToPropagationDelay) {
    EXPECT_NEAR(ds_twr(ds_record(10.0 / c, 0.0, 0.0)), 10.0, 1e-9);
    ExchangeRecord eq;
    eq.msg_type = 3;
    eq.rnd0 = eq.rnd1 = eq.rsp0 = eq.rsp1 = 1e-3;
    EXPECT_EQ(ds_twr(eq), 0.0);
    EXPECT_NEAR(ds_twr(ds_record(4.0 / c, 0.5e-3, 0.7e-3)), 4.0, 1e-9);
}

TEST(DoubleSidedRange, NonPositiveDenominatorIsProtocolError) {
    ExchangeRecord ex;
    ex.msg_type = 3;
    ex.rnd0 = ex.rnd1 = ex.rsp0 = ex.rsp1 = 0.0;
    EXPECT_THROW(ds_twr(ex), ProtocolError);
}

TEST(DoubleSidedRange, SymmetricUnderLegSwap) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(1e-4, 3e-3);
    for (int i = 0; i < 100; ++i) {
        ExchangeRecord a;
        a.msg_type = 3;
        a.rnd0 = u(rng);
        a.rsp0 = u(rng);
        a.rnd1 = u(rng);
        a.rsp1 = u(rng);
        ExchangeRecord b = a;
        b.rnd0 = a.rnd1;
        b.rsp0 = a.rsp1;
        b.rnd1 = a.rnd0;
        b.rsp1 = a.rsp0;
        EXPECT_DOUBLE_EQ(ds_twr(a), ds_twr(b));
    }
}

TEST(PredictMeasurement, EqualClocksGiveGeometry) {
    const NodeState xk{{0, 0, 0}, 1e-5, 1e-6};
    const NodeState xj{{3, 4, 0}, 1e-5, 1e-6};
    const auto h = predict_measurement(xk, xj, ds_record(5.0 / c, 1e-3, 1e-3), MeasurementMask{});
    EXPECT_NEAR(*h.d, 5.0 / c, 1e-20);
    EXPECT_DOUBLE_EQ(*h.r, 5.0);
    EXPECT_DOUBLE_EQ(*h.R, 5.0);
}

TEST(PredictMeasurement, RowsAgreeWhenBiasesMatch) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) {
        NodeState xk = random_state(rng), xj = random_state(rng);
        xj.b = xk.b;
        const auto h = predict_measurement(xk, xj, ds_record(1e-8, 1e-3, 1.5e-3), MeasurementMask{});
        EXPECT_EQ(*h.r, *h.R);
    }
}

TEST(PredictMeasurement, BiasTermMatchesIndependentEvaluation) {
    const double bk = 2e-6, bj = 0.0;
    const double rnd = 2e-8 + 1e-3;
    ExchangeRecord ex;
    ex.msg_type = 3;
    ex.rnd0 = rnd;
    ex.rnd1 = rnd;
    ex.rsp0 = 0.9e-3;
    ex.rsp1 = 1.1e-3;
    const long double expected = printed_bias_term(bk, bj, rnd, 0.9e-3L, rnd, 1.1e-3L);
    EXPECT_NEAR(ds_bias_term(bk, bj, ex), double(expected), 1e-24);

    const NodeState xk{{0, 0, 0}, 0, bk}, xj{{2, 0, 0}, 0, bj};
    const auto h = predict_measurement(xk, xj, ex, MeasurementMask::for_type(3));
    EXPECT_NEAR(*h.R, 2.0 + c * double(expected), 1e-12);
}

TEST(PredictMeasurement, TranslationInvariant) {
    std::mt19937_64 rng(9);
    const auto ex = ds_record(2e-8, 1e-3, 1.7e-3);
    for (int i = 0; i < 50; ++i) {
        NodeState xk = random_state(rng), xj = random_state(rng);
        const auto a = predict_measurement(xk, xj, ex, MeasurementMask{});
        const Vec3 shift{4.0, -7.5, 1.25};
        xk.p += shift;
        xj.p += shift;
        const auto b = predict_measurement(xk, xj, ex, MeasurementMask{});
        EXPECT_NEAR(*a.d, *b.d, 1e-18);
        EXPECT_NEAR(*a.r, *b.r, 1e-12);
        EXPECT_NEAR(*a.R, *b.R, 1e-12);
    }
}

TEST(Jacobian, StateTransition) {
    const StateMatrix F = jacobian_F({{1, 2, 3}, 1e-5, 1e-6}, 0.5);
    StateMatrix expected = StateMatrix::Identity();
    expected(3, 4) = 0.5;
    EXPECT_EQ(F, expected);
    EXPECT_EQ(affine_term({{1, 2, 3}, 1e-5, 1e-6}, 0.5), StateVector::Zero());
}

TEST(Jacobian, UnitVectorGradient) {
    const NodeState xk{{0, 0, 0}, 0, 0}, xj{{1, 0, 0}, 0, 0};
    ExchangeRecord ex;
    ex.msg_type = 1;
    const Eigen::MatrixXd H = jacobian_H(xk, xj, ex, MeasurementMask::for_type(1));
    ASSERT_EQ(H.rows(), 1);
    EXPECT_DOUBLE_EQ(H(0, 0), -1.0 / c);
    EXPECT_EQ(H(0, 1), 0.0);
    EXPECT_EQ(H(0, 2), 0.0);
    EXPECT_EQ(H(0, 3), -1.0);
    EXPECT_EQ(H(0, 4), 0.0);
}

TEST(Jacobian, CoincidentPositionsAreSingular) {
    const NodeState x{{1, 1, 1}, 0, 0};
    EXPECT_THROW(jacobian_H(x, x, ds_record(0, 1e-3, 1e-3), MeasurementMask{}), ModelError);
    // Prediction itself is legal at coincidence.
    EXPECT_EQ(*predict_measurement(x, x, ds_record(0, 1e-3, 1e-3), MeasurementMask{}).r, 0.0);
}

// Central finite differences on both endpoints, all three rows.
TEST(Jacobian, MatchesFiniteDifferences) {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> rsp(0.5e-3, 2e-3);
    const StateVector step = (StateVector() << 1e-4, 1e-4, 1e-4, 1e-9, 1e-9).finished();
    const MeasurementMask mask{};
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const NodeState xk = random_state(rng), xj = random_state(rng);
        const double tp = (xj.p - xk.p).norm() / c;
        const ExchangeRecord ex = ds_record(tp, rsp(rng), rsp(rng));
        const MeasurementJacobian J = jacobian_H_pair(xk, xj, ex, mask);
        for (int side = 0; side < 2; ++side) {
            const Eigen::MatrixXd& analytic = side == 0 ? J.wrt_sender : J.wrt_receiver;
            for (int col = 0; col < kStateDim; ++col) {
                StateVector plus = (side == 0 ? xk : xj).vector(), minus = plus;
                plus(col) += step(col);
                minus(col) -= step(col);
                auto eval = [&](const StateVector& v) {
                    const NodeState s = NodeState::from_vector(v);
                    return side == 0 ? predict_measurement(s, xj, ex, mask).stacked(mask)
                                     : predict_measurement(xk, s, ex, mask).stacked(mask);
                };
                const Eigen::VectorXd fd = (eval(plus) - eval(minus)) / (2 * step(col));
                for (int row = 0; row < 3; ++row) {
                    const double a = analytic(row, col);
                    const double scale = std::max({std::abs(a), std::abs(fd(row)), 1e-300});
                    if (a == 0.0 && std::abs(fd(row)) < 1e-15) continue;
                    EXPECT_LE(std::abs(a - fd(row)) / scale, 1e-5) << "row " << row << " col " << col;
                    ++checked;
                }
            }
        }
    }
    EXPECT_GT(checked, 100 * 2 * 10);
}

TEST(MeasurementCovariance, MatchesTimestampPropagation) {
    ExchangeRecord ex = ds_record(1e-8, 1e-3, 1e-3);
    const Eigen::MatrixXd R = measurement_covariance(ex, MeasurementMask{}, 1e-9);
    EXPECT_NEAR(R(0, 0), 2e-18, 1e-30);             // d: two stamps
    EXPECT_NEAR(R(1, 1), c * c * 1e-18, 1e-6);      // r: four stamps at c/2
    EXPECT_TRUE(R.isApprox(R.transpose()));
    EXPECT_GT(R(2, 2), 0.0);
}
