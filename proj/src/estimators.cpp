#include "dslats/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <thread>

#include "dslats/error.hpp"

namespace dslats {

std::string_view to_string(Algorithm a) {
    switch (a) {
        case Algorithm::kCkal: return "ckal";
        case Algorithm::kDkal: return "dkal";
        case Algorithm::kMkal: return "mkal";
        case Algorithm::kOpt: return "opt";
    }
    return "?";
}

std::optional<Algorithm> parse_algorithm(std::string_view name) {
    for (Algorithm a : {Algorithm::kCkal, Algorithm::kDkal, Algorithm::kMkal, Algorithm::kOpt})
        if (name == to_string(a)) return a;
    return std::nullopt;
}

StateVector to_filter(const NodeState& s, const ModelConstants& k) {
    StateVector v;
    v << s.p, k.c * s.o, k.c * s.b;
    return v;
}

NodeState from_filter(const StateVector& v, const ModelConstants& k) {
    return {v.head<3>(), v(kOffsetIndex) / k.c, v(kBiasIndex) / k.c};
}

int FilterNode::local_index(int global) const {
    auto it = std::lower_bound(scope.begin(), scope.end(), global);
    return it != scope.end() && *it == global ? int(it - scope.begin()) : -1;
}

NodeState FilterNode::state_of(int global, const ModelConstants& k) const {
    const int i = local_index(global);
    if (i < 0) throw TopologyError("node " + std::to_string(global) + " is not monitored by " + std::to_string(node_id));
    return from_filter(x_hat.segment<kStateDim>(kStateDim * i), k);
}

void FilterNode::set_state(int global, const StateVector& filter_state) {
    const int i = local_index(global);
    if (i < 0) throw TopologyError("node " + std::to_string(global) + " is not monitored by " + std::to_string(node_id));
    x_hat.segment<kStateDim>(kStateDim * i) = filter_state;
}

int Subsystem::index_of(int global) const {
    auto it = std::lower_bound(members.begin(), members.end(), global);
    return it != members.end() && *it == global ? int(it - members.begin()) : -1;
}

std::vector<Subsystem> build_subsystems(const Topology& topology) {
    std::vector<Subsystem> out;
    for (int k = 0; k < topology.n_nodes(); ++k) {
        Subsystem s{k, topology.neighbors(k)};
        s.members.insert(std::lower_bound(s.members.begin(), s.members.end(), k), k);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> diffusion_weights(const Topology& topology, int k, const std::vector<int>& peers,
                                      DiffusionWeights kind) {
    std::vector<double> w(peers.size(), 0.0);
    const auto self = std::find(peers.begin(), peers.end(), k);
    if (self == peers.end()) throw TopologyError("diffusion peers must include the node itself");
    const std::size_t ks = std::size_t(self - peers.begin());
    switch (kind) {
        case DiffusionWeights::kUniform:
            std::fill(w.begin(), w.end(), 1.0 / double(peers.size()));
            break;
        case DiffusionWeights::kMetropolis: {
            double sum = 0.0;
            for (std::size_t i = 0; i < peers.size(); ++i) {
                if (i == ks) continue;
                w[i] = 1.0 / (1.0 + std::max(topology.degree(k), topology.degree(peers[i])));
                sum += w[i];
            }
            w[ks] = 1.0 - sum;
            break;
        }
        case DiffusionWeights::kSelfOnly:
            w[ks] = 1.0;
            break;
    }
    return w;
}

namespace {

// Runs fn(k) for k in [0, n). Each call writes only its own slot, so the
// threaded and sequential schedules give identical results.
void for_each_node(int n, bool parallel, const std::function<void(int)>& fn) {
    if (!parallel || n < 2) {
        for (int k = 0; k < n; ++k) fn(k);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    const int workers = std::max(1, std::min<int>(n, int(std::thread::hardware_concurrency())));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (int k = w; k < n; k += workers) {
                try {
                    fn(k);
                } catch (...) {
                    errors[k] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

MeasurementMask effective_mask(const Measurement& m, const EstimatorParams& prm) {
    MeasurementMask mask = prm.mask & MeasurementMask::for_type(m.record.msg_type);
    mask.d = mask.d && m.y.d.has_value();
    mask.r = mask.r && m.y.r.has_value();
    mask.R = mask.R && m.y.R.has_value();
    return mask;
}

// Measurement rows in meters; Jacobians against filter coordinates.
struct Linearized {
    Matrix Hs, Hr;
    Vector innov;
    Matrix R;
};

constexpr double kMeasurementFloor = 1e-8;  // m^2
constexpr double kCoincidentStep = 1e-6;     // m

std::optional<Linearized> linearize(StateVector xs_f, const StateVector& xr_f, const Measurement& m,
                                    const MeasurementMask& mask, const EstimatorParams& prm) {
    if (mask.rows() == 0) return std::nullopt;
    const ModelConstants& k = prm.constants;
    if ((xs_f.head<3>() - xr_f.head<3>()).norm() < 1e-9) xs_f(0) += kCoincidentStep;
    const NodeState xs = from_filter(xs_f, k), xr = from_filter(xr_f, k);

    Vector scale = Vector::Ones(mask.rows());
    if (mask.d) scale(0) = k.c;
    const MeasurementVector h = predict_measurement(xs, xr, m.record, mask, k);
    const MeasurementJacobian J = jacobian_H_pair(xs, xr, m.record, mask, k);

    StateVector col = StateVector::Ones();
    col(kOffsetIndex) = col(kBiasIndex) = 1.0 / k.c;

    Linearized out;
    out.innov = scale.cwiseProduct(m.y.stacked(mask) - h.stacked(mask));
    out.Hs = scale.asDiagonal() * J.wrt_sender * col.asDiagonal();
    out.Hr = scale.asDiagonal() * J.wrt_receiver * col.asDiagonal();
    out.R = scale.asDiagonal() * measurement_covariance(m.record, mask, prm.timestamp_std, k) * scale.asDiagonal();
    out.R.diagonal().array() += kMeasurementFloor;
    return out;
}

void check_batch(const EpochBatch& batch, const Topology& topo) {
    for (const Measurement& m : batch.items)
        if (!topo.has_edge(m.record.sender_id, m.record.receiver_id))
            throw TopologyError("measurement between " + std::to_string(m.record.sender_id) + " and " +
                                std::to_string(m.record.receiver_id) + " is not a topology edge");
}

// Pins the master's offset and bias (value and variance) within a scope.
void pin_master(const std::vector<int>& scope, int master, Vector& x, Matrix* P) {
    for (std::size_t i = 0; i < scope.size(); ++i) {
        if (scope[i] != master) continue;
        for (int c : {kOffsetIndex, kBiasIndex}) {
            const Eigen::Index idx = Eigen::Index(kStateDim * i + c);
            x(idx) = 0.0;
            if (P && P->size()) {
                P->row(idx).setZero();
                P->col(idx).setZero();
            }
        }
    }
}

void time_update(const std::vector<int>& scope, Vector& x, Matrix* P, const EstimatorParams& prm) {
    const double dt = prm.epoch_period;
    const double c = prm.constants.c;
    const double q_o = std::pow(c * prm.offset_density, 2) * dt;
    const double q_b = std::pow(c * prm.bias_density, 2) * dt;
    const double q_p = std::pow(prm.mobile_position_std, 2);
    for (std::size_t i = 0; i < scope.size(); ++i) {
        const Eigen::Index o = Eigen::Index(kStateDim * i + kOffsetIndex), b = o + 1;
        x(o) += dt * x(b);
        if (!P || !P->size()) continue;
        P->row(o) += dt * P->row(b);
        P->col(o) += dt * P->col(b);
        if (scope[i] != prm.master) {
            (*P)(o, o) += q_o;
            (*P)(b, b) += q_b;
        }
        if (prm.is_mobile(scope[i]))
            for (int a = 0; a < 3; ++a) (*P)(kStateDim * i + a, kStateDim * i + a) += q_p;
    }
    if (P && P->size()) *P = symmetrize(*P);
}

// Stacks the rows of every item whose endpoints are both in scope.
struct Stacked {
    Matrix H;
    Vector innov;
    Matrix R;
    std::vector<int> item_rows;  // row count of each exchange, in stacking order
};

Stacked stack_measurements(const std::vector<int>& scope, const Vector& x, const std::vector<const Measurement*>& items,
                           const EstimatorParams& prm) {
    auto local = [&](int g) {
        auto it = std::lower_bound(scope.begin(), scope.end(), g);
        return it != scope.end() && *it == g ? int(it - scope.begin()) : -1;
    };
    std::vector<std::tuple<int, int, Linearized>> rows;
    int m = 0;
    for (const Measurement* meas : items) {
        const int s = local(meas->record.sender_id), r = local(meas->record.receiver_id);
        if (s < 0 || r < 0) continue;
        auto lin = linearize(x.segment<kStateDim>(kStateDim * s), x.segment<kStateDim>(kStateDim * r), *meas,
                             effective_mask(*meas, prm), prm);
        if (!lin) continue;
        m += int(lin->innov.size());
        rows.emplace_back(s, r, std::move(*lin));
    }
    const int n = int(x.size());
    Stacked out{Matrix::Zero(m, n), Vector(m), Matrix::Zero(m, m), {}};
    int row = 0;
    for (auto& [s, r, lin] : rows) {
        const int h = int(lin.innov.size());
        out.H.block(row, kStateDim * s, h, kStateDim) += lin.Hs;
        out.H.block(row, kStateDim * r, h, kStateDim) += lin.Hr;
        out.innov.segment(row, h) = lin.innov;
        out.R.block(row, row, h, h) = lin.R;
        out.item_rows.push_back(h);
        row += h;
    }
    return out;
}

std::vector<const Measurement*> all_items(const EpochBatch& batch) {
    std::vector<const Measurement*> out;
    for (const Measurement& m : batch.items) out.push_back(&m);
    return out;
}

std::vector<const Measurement*> incident_items(const EpochBatch& batch, int k) {
    std::vector<const Measurement*> out;
    for (const Measurement& m : batch.items)
        if (m.record.sender_id == k || m.record.receiver_id == k) out.push_back(&m);
    return out;
}

// Exchanges touching k or any of its peers.
std::vector<const Measurement*> neighborhood_items(const EpochBatch& batch, const std::vector<int>& peers) {
    std::vector<const Measurement*> out;
    auto in = [&](int id) { return std::find(peers.begin(), peers.end(), id) != peers.end(); };
    for (const Measurement& m : batch.items)
        if (in(m.record.sender_id) || in(m.record.receiver_id)) out.push_back(&m);
    return out;
}

std::vector<int> iota_scope(int n) {
    std::vector<int> s(n);
    for (int i = 0; i < n; ++i) s[i] = i;
    return s;
}

Vector scope_state(const std::vector<int>& scope, const std::vector<NodeState>& initial, const ModelConstants& k) {
    Vector x(kStateDim * scope.size());
    for (std::size_t i = 0; i < scope.size(); ++i) {
        NodeState s = initial.at(scope[i]);
        s.o = s.b = 0.0;
        x.segment<kStateDim>(kStateDim * i) = to_filter(s, k);
    }
    return x;
}

Matrix scope_covariance(const std::vector<int>& scope, const EstimatorParams& prm) {
    const double c = prm.constants.c;
    StateVector d;
    d << std::pow(prm.prior_position_std, 2), std::pow(prm.prior_position_std, 2),
        std::pow(prm.prior_position_std, 2), std::pow(c * prm.prior_offset_std, 2), std::pow(c * prm.prior_bias_std, 2);
    Matrix P = Matrix::Zero(kStateDim * scope.size(), kStateDim * scope.size());
    for (std::size_t i = 0; i < scope.size(); ++i) {
        P.block<kStateDim, kStateDim>(kStateDim * i, kStateDim * i) = d.asDiagonal();
        if (scope[i] == prm.master) P(kStateDim * i + kOffsetIndex, kStateDim * i + kOffsetIndex) =
                                        P(kStateDim * i + kBiasIndex, kStateDim * i + kBiasIndex) = 0.0;
    }
    return P;
}

void require_topology(const EstimatorContext& ctx) {
    if (!ctx.topology) throw TopologyError("estimator context has no topology");
}

}  // namespace

Vector initial_state(const std::vector<NodeState>& initial, const EstimatorParams& prm) {
    return scope_state(iota_scope(int(initial.size())), initial, prm.constants);
}

Matrix initial_covariance(int n_nodes, const EstimatorParams& prm) {
    return scope_covariance(iota_scope(n_nodes), prm);
}

void ckal_step(Vector& x_hat, Matrix& P, const EpochBatch& batch, const EstimatorContext& ctx) {
    require_topology(ctx);
    check_batch(batch, *ctx.topology);
    const EstimatorParams& prm = ctx.params;
    const std::vector<int> scope = iota_scope(ctx.topology->n_nodes());
    if (x_hat.size() != kStateDim * Eigen::Index(scope.size()) || P.rows() != x_hat.size())
        throw NumericalError("centralized state has wrong dimensions");

    const Stacked st = stack_measurements(scope, x_hat, all_items(batch), prm);
    if (st.innov.size() > 0) {
        const Matrix PHt = P * st.H.transpose();
        const Matrix S = symmetrize(st.H * PHt + st.R);
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success) throw NumericalError("innovation covariance is singular");
        const Matrix K = llt.solve(PHt.transpose()).transpose();
        x_hat += K * st.innov;
        Matrix IKH = -K * st.H;
        IKH.diagonal().array() += 1.0;
        P = symmetrize(IKH * P * IKH.transpose() + K * st.R * K.transpose());
    }
    pin_master(scope, prm.master, x_hat, &P);
    time_update(scope, x_hat, &P, prm);
    pin_master(scope, prm.master, x_hat, &P);
}

namespace {

std::vector<FilterNode> make_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                   const EstimatorParams& prm, bool full_scope, bool with_covariance) {
    if (int(initial.size()) != topology.n_nodes()) throw TopologyError("initial guess size differs from topology");
    std::vector<FilterNode> nodes;
    const std::vector<Subsystem> subs = build_subsystems(topology);
    for (int k = 0; k < topology.n_nodes(); ++k) {
        FilterNode node;
        node.node_id = k;
        node.peers = subs[k].members;
        node.scope = full_scope ? iota_scope(topology.n_nodes()) : subs[k].members;
        node.weights = diffusion_weights(topology, k, node.peers, prm.weights);
        node.x_hat = scope_state(node.scope, initial, prm.constants);
        if (with_covariance) node.P = scope_covariance(node.scope, prm);
        nodes.push_back(std::move(node));
    }
    return nodes;
}

void check_nodes(const std::vector<FilterNode>& nodes, const EstimatorContext& ctx) {
    require_topology(ctx);
    if (int(nodes.size()) != ctx.topology->n_nodes()) throw TopologyError("node count differs from topology");
}

}  // namespace

std::vector<FilterNode> make_dkal_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                        const EstimatorParams& prm) {
    return make_nodes(topology, initial, prm, true, true);
}

void dkal_step(std::vector<FilterNode>& nodes, const EpochBatch& batch, const EstimatorContext& ctx) {
    check_nodes(nodes, ctx);
    check_batch(batch, *ctx.topology);
    const EstimatorParams& prm = ctx.params;
    const int n = int(nodes.size());

    // Measurement update from exchanges of the closed neighborhood.
    std::vector<Vector> psi(n);
    for_each_node(n, ctx.parallel, [&](int k) {
        FilterNode& node = nodes[k];
        const Stacked st = stack_measurements(node.scope, node.x_hat, neighborhood_items(batch, node.peers), prm);
        psi[k] = node.x_hat;
        if (st.innov.size() == 0) return;
        // One rank update per exchange.
        std::vector<RankUpdateTerm> terms;
        for (int row = 0; const int h : st.item_rows) {
            Eigen::LLT<Matrix> llt(st.R.block(row, row, h, h));
            if (llt.info() != Eigen::Success) throw NumericalError("measurement covariance is singular");
            const Matrix Hi = st.H.middleRows(row, h);
            terms.push_back({Hi.transpose(), llt.solve(Matrix::Identity(h, h)), Hi});
            row += h;
        }
        Matrix post = symmetrize(binomial_update_chain(node.P, terms));
        // Gain P H^T (H P H^T + R)^-1 on the prior side
        const Matrix PHt = node.P * st.H.transpose();
        Eigen::LLT<Matrix> s_llt(symmetrize(st.H * PHt + st.R));
        if (s_llt.info() != Eigen::Success) throw NumericalError("innovation covariance is singular");
        psi[k] += s_llt.solve(PHt.transpose()).transpose() * st.innov;
        node.P = std::move(post);
    });

    // Diffusion over the closed neighborhood.
    for_each_node(n, ctx.parallel, [&](int k) {
        FilterNode& node = nodes[k];
        // Convex combination written as a correction to the node's own estimate.
        Vector x = psi[k];
        for (std::size_t i = 0; i < node.peers.size(); ++i)
            if (node.peers[i] != k) x += node.weights[i] * (psi[node.peers[i]] - psi[k]);
        node.x_hat = x;
        pin_master(node.scope, prm.master, node.x_hat, &node.P);
        time_update(node.scope, node.x_hat, &node.P, prm);
        pin_master(node.scope, prm.master, node.x_hat, &node.P);
    });
}

std::vector<FilterNode> make_mkal_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                        const EstimatorParams& prm) {
    return make_nodes(topology, initial, prm, false, true);
}

namespace {

std::vector<int> free_indices(const std::vector<int>& scope, int master) {
    std::vector<int> f;
    for (std::size_t i = 0; i < scope.size(); ++i)
        for (int c = 0; c < kStateDim; ++c)
            if (scope[i] != master || c < kOffsetIndex) f.push_back(int(kStateDim * i + c));
    return f;
}

// True when every eigenvalue of J^1/2 P J^1/2 lies in [1 - tol, 1 + tol],
// i.e. P is within a factor of the exact inverse in every direction.
bool within_factor(const Matrix& J, const Matrix& P, double tol) {
    Eigen::LLT<Matrix> llt(J);
    if (llt.info() != Eigen::Success) return false;
    const Matrix Lm = llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(Lm.transpose() * P * Lm), Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) return false;
    return es.eigenvalues().minCoeff() >= 1.0 - tol && es.eigenvalues().maxCoeff() <= 1.0 + tol;
}

}  // namespace

void mkal_step(std::vector<FilterNode>& nodes, const EpochBatch& batch, const EstimatorContext& ctx,
               Diagnostics* diagnostics) {
    check_nodes(nodes, ctx);
    check_batch(batch, *ctx.topology);
    const EstimatorParams& prm = ctx.params;
    const int n = int(nodes.size());

    std::vector<Vector> post(n);
    std::vector<char> fallback(n, 0);
    for_each_node(n, ctx.parallel, [&](int k) {
        FilterNode& node = nodes[k];
        const std::vector<int> f = free_indices(node.scope, prm.master);
        const int dim = int(f.size());
        const int L = std::max(1, std::min(prm.bandwidth, dim - 1));
        const Matrix Pf = node.P(f, f);
        if (node.P_post.rows() != dim) node.P_post = Pf;

        const Stacked st = stack_measurements(node.scope, node.x_hat, all_items(batch), prm);
        Matrix info = lband_approx_inverse(Pf, L).dense();
        Vector g = Vector::Zero(dim);
        if (st.innov.size() > 0) {
            Eigen::LLT<Matrix> llt(st.R);
            if (llt.info() != Eigen::Success) throw NumericalError("measurement covariance is singular");
            const Matrix Hf = st.H(Eigen::all, f);
            const Matrix RinvH = llt.solve(Hf);
            info += Hf.transpose() * RinvH;
            g = RinvH.transpose() * st.innov;
        }
        info = symmetrize(info);

        Matrix Ppost;
        bool ok = true;
        try {
            Ppost = floor_eigenvalues(dici_or_invert(info, L, node.P_post, {prm.gamma, prm.dici_iters, {}}), 1e-12);
            ok = within_factor(info, Ppost, prm.dici_tolerance);
        } catch (const NumericalError&) {
            ok = false;
        }
        if (!ok) {
            Eigen::LLT<Matrix> llt(info);
            if (llt.info() != Eigen::Success) throw NumericalError("subsystem information matrix is not positive definite");
            Ppost = symmetrize(llt.solve(Matrix::Identity(dim, dim)));
            fallback[k] = 1;
        }

        post[k] = node.x_hat;
        post[k](f) += Ppost * g;
        node.P.setZero();
        node.P(f, f) = Ppost;
        node.P_post = std::move(Ppost);
    });
    if (diagnostics) {
        diagnostics->dici_solves += n;
        for (char c : fallback) diagnostics->dici_fallbacks += c;
    }

    std::vector<Matrix> own_block(n);
    for (int k = 0; k < n; ++k) {
        const Eigen::Index a = kStateDim * Eigen::Index(nodes[k].local_index(k));
        own_block[k] = nodes[k].P.block<kStateDim, kStateDim>(a, a);
    }

    // Publish: every node's own state and covariance block replace its entry in each subsystem;
    // cross-covariances between published blocks are dropped.
    for_each_node(n, ctx.parallel, [&](int k) {
        FilterNode& node = nodes[k];
        Matrix published = Matrix::Zero(node.P.rows(), node.P.cols());
        for (std::size_t i = 0; i < node.scope.size(); ++i) {
            const int j = node.scope[i];
            const int own = nodes[j].local_index(j);
            const Eigen::Index a = kStateDim * Eigen::Index(i);
            node.x_hat.segment<kStateDim>(a) = post[j].segment<kStateDim>(kStateDim * own);
            published.block<kStateDim, kStateDim>(a, a) = own_block[j];
        }
        node.P = std::move(published);
        pin_master(node.scope, prm.master, node.x_hat, &node.P);
        time_update(node.scope, node.x_hat, &node.P, prm);
        pin_master(node.scope, prm.master, node.x_hat, &node.P);
    });
}

std::vector<FilterNode> make_opt_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                       const EstimatorParams& prm) {
    return make_nodes(topology, initial, prm, false, false);
}

namespace {

// Residuals in meters and their Jacobian with respect to the parameters.
using ResidualFn = std::function<void(const Vector& theta, Vector& r, Matrix& J)>;

struct LsqResult {
    Vector theta;
    Matrix normal;  // J^T J at the solution
    double cost = 0.0;
    int rows = 0;
    bool converged = false;
    std::vector<double> trace;
};

// Levenberg-Marquardt: (J^T J + lambda diag(J^T J)) step = -J^T r, cost never increases.
LsqResult damped_gauss_newton(const ResidualFn& fn, Vector theta, int max_iters, double grad_tol) {
    LsqResult out;
    Vector r;
    Matrix J;
    fn(theta, r, J);
    double cost = 0.5 * r.squaredNorm();
    out.trace.push_back(cost);
    double lambda = 1e-3;
    for (int it = 0; it < max_iters && !out.converged; ++it) {
        const Vector grad = J.transpose() * r;
        if (grad.lpNorm<Eigen::Infinity>() < grad_tol) {
            out.converged = true;
            break;
        }
        const Matrix A = J.transpose() * J;
        const Vector scale = A.diagonal().cwiseMax(1e-12 * std::max(A.diagonal().maxCoeff(), 1e-300) + 1e-300);
        bool accepted = false;
        for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
            Matrix D = A;
            D.diagonal() += lambda * scale;
            const Vector step = -D.ldlt().solve(grad);
            if (!step.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            Vector r_new;
            Matrix J_new;
            const Vector cand = theta + step;
            fn(cand, r_new, J_new);
            const double c_new = 0.5 * r_new.squaredNorm();
            if (std::isfinite(c_new) && c_new <= cost) {
                const double drop = cost - c_new;
                const bool small_step = step.norm() <= 1e-10 * (1.0 + theta.norm());
                theta = cand;
                r = std::move(r_new);
                J = std::move(J_new);
                out.trace.push_back(c_new);
                out.converged = drop <= 1e-10 * cost || small_step;
                cost = c_new;
                lambda = std::max(lambda * 0.1, 1e-12);
                accepted = true;
            } else {
                lambda *= 10.0;
            }
        }
        if (!accepted) out.converged = true;  // no descent direction left at machine precision
    }
    out.theta = theta;
    out.normal = J.transpose() * J;
    out.cost = cost;
    out.rows = int(r.size());
    return out;
}

struct NeighborView {
    const Measurement* m;
    bool k_is_sender;
    StateVector other;  // filter coordinates
};

// Reply leg t3 - t2 = (o_init - o_resp) + |dp| / c - T_RSP1 (b_init - b_resp).
std::optional<double> reply_leg(const ExchangeRecord& ex) {
    if (ex.msg_type < 2 || !ex.t[2] || !ex.t[3]) return std::nullopt;
    return *ex.t[3] - *ex.t[2];
}

}  // namespace

Diagnostics opt_step(std::vector<FilterNode>& nodes, const EpochBatch& batch, const EstimatorContext& ctx) {
    check_nodes(nodes, ctx);
    check_batch(batch, *ctx.topology);
    const EstimatorParams& prm = ctx.params;
    const ModelConstants& kc = prm.constants;
    const double c = kc.c;
    const int n = int(nodes.size());

    std::vector<StateVector> next(n);
    std::vector<Diagnostics> diag(n);
    for_each_node(n, ctx.parallel, [&](int k) {
        const FilterNode& node = nodes[k];
        const int self = node.local_index(k);
        const StateVector own = node.x_hat.segment<kStateDim>(kStateDim * self);
        const bool master = k == prm.master;
        next[k] = own;

        std::vector<NeighborView> views;
        for (const Measurement* m : incident_items(batch, k)) {
            const bool snd = m->record.sender_id == k;
            const int other = snd ? m->record.receiver_id : m->record.sender_id;
            const int li = node.local_index(other);
            if (li < 0) continue;
            views.push_back({m, snd, node.x_hat.segment<kStateDim>(kStateDim * li)});
        }
        if (views.empty()) return;

        // Unknowns: own position when `with_position`, then clock column `clock` when >= 0.
        struct Layout {
            bool with_position;
            int clock;
            int size() const { return (with_position ? 3 : 0) + (clock >= 0 ? 1 : 0); }
            int clock_col() const { return with_position ? 3 : 0; }
        };
        auto unpack = [&](const Layout& lay, const Vector& theta) {
            StateVector x = own;
            if (lay.with_position) x.head<3>() = theta.head<3>();
            if (lay.clock >= 0) x(lay.clock) = theta(lay.clock_col());
            return x;
        };
        auto finish = [](std::vector<double>& rr, std::vector<Eigen::RowVectorXd>& jj, Vector& r, Matrix& J, int cols) {
            r = Eigen::Map<Vector>(rr.data(), Eigen::Index(rr.size()));
            J.resize(Eigen::Index(rr.size()), cols);
            for (std::size_t i = 0; i < jj.size(); ++i) J.row(Eigen::Index(i)) = jj[i];
        };

        // Measurement rows selected by `want`.
        auto make_fn = [&](MeasurementMask want, Layout lay) -> ResidualFn {
            return [&, want, lay](const Vector& theta, Vector& r, Matrix& J) {
                const StateVector x = unpack(lay, theta);
                std::vector<double> rr;
                std::vector<Eigen::RowVectorXd> jj;
                for (const NeighborView& v : views) {
                    const MeasurementMask mask = effective_mask(*v.m, prm) & want;
                    if (mask.rows() == 0) continue;
                    const StateVector& xs = v.k_is_sender ? x : v.other;
                    const StateVector& xr = v.k_is_sender ? v.other : x;
                    const auto lin = linearize(xs, xr, *v.m, mask, prm);
                    if (!lin) continue;
                    const Matrix& H = v.k_is_sender ? lin->Hs : lin->Hr;
                    for (Eigen::Index i = 0; i < lin->innov.size(); ++i) {
                        rr.push_back(lin->innov(i));
                        Eigen::RowVectorXd row(lay.size());
                        if (lay.with_position) row.head<3>() = -H.row(i).head<3>();
                        if (lay.clock >= 0) row(lay.clock_col()) = -H(i, lay.clock);
                        jj.push_back(row);
                    }
                }
                if (lay.clock == kBiasIndex && !rr.empty()) {
                    // Weak pull toward the current bias; range rows barely observe it.
                    const double w = prm.timestamp_std / prm.prior_bias_std;
                    rr.push_back(w * (own(kBiasIndex) - x(kBiasIndex)));
                    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(lay.size());
                    row(lay.clock_col()) = -w;
                    jj.push_back(row);
                }
                finish(rr, jj, r, J, lay.size());
            };
        };

        // Reply leg with biases held at their current estimates.
        auto reply_fn = [&](const Vector& theta, Vector& r, Matrix& J) {
            std::vector<double> rr;
            std::vector<Eigen::RowVectorXd> jj;
            for (const NeighborView& v : views) {
                const auto y = reply_leg(v.m->record);
                if (!y || !v.m->record.rsp1) continue;
                const double dist = (own.head<3>() - v.other.head<3>()).norm();
                const double sgn = v.k_is_sender ? 1.0 : -1.0;  // +1 when k initiated
                const double rsp1 = *v.m->record.rsp1;
                const double pred = sgn * (theta(0) - v.other(kOffsetIndex)) + dist -
                                    sgn * rsp1 * (own(kBiasIndex) - v.other(kBiasIndex));
                rr.push_back(c * *y - pred);
                jj.push_back(Eigen::RowVectorXd::Constant(1, -sgn));
            }
            finish(rr, jj, r, J, 1);
        };

        struct Solved {
            LsqResult res;
            Layout lay;
        };
        std::vector<Solved> solved;
        auto run = [&](const ResidualFn& fn, Layout lay) {
            if (lay.size() == 0) return;
            Vector theta(lay.size());
            if (lay.with_position) theta.head<3>() = own.head<3>();
            if (lay.clock >= 0) theta(lay.clock_col()) = own(lay.clock);
            Vector r;
            Matrix J;
            fn(theta, r, J);
            if (r.size() == 0) return;
            LsqResult res = damped_gauss_newton(fn, theta, prm.opt_max_iters, prm.opt_grad_tol);
            Diagnostics& d = diag[k];
            ++d.problems_solved;
            if (!res.converged) ++d.non_converged;
            for (std::size_t i = 1; i < res.trace.size(); ++i)
                if (res.trace[i] > res.trace[i - 1]) ++d.cost_increases;
            if (ctx.record_traces) d.cost_traces.push_back(res.trace);
            solved.push_back({std::move(res), lay});
        };

        const int oc = master ? -1 : kOffsetIndex;
        const int bc = master ? -1 : kBiasIndex;
        run(make_fn({true, false, false}, {false, oc}), {false, oc});
        if (!master) run(reply_fn, {false, kOffsetIndex});
        if (prm.opt_variant == OptVariant::kType3)
            run(make_fn({false, false, true}, {true, bc}), {true, bc});
        else
            run(make_fn({false, true, false}, {true, bc}), {true, bc});

        // Non-converged problems keep the previous estimate.
        double off_sum = 0.0;
        double off_w = 0.0;
        for (const Solved& s : solved) {
            if (!s.res.converged) continue;
            if (s.lay.with_position) next[k].head<3>() = s.res.theta.head<3>();
            if (s.lay.clock == kBiasIndex) next[k](kBiasIndex) = s.res.theta(s.lay.clock_col());
            if (s.lay.clock == kOffsetIndex) {
                double w = 1.0;
                if (prm.opt_combine == OptCombine::kWeighted) {
                    // A-posteriori variance of the single offset unknown.
                    const double sigma2 = 2.0 * s.res.cost / double(std::max(1, s.res.rows - 1)) + 1e-12;
                    w = s.res.normal(0, 0) / sigma2;
                }
                off_sum += w * s.res.theta(0);
                off_w += w;
            }
        }
        if (off_w > 0.0 && std::isfinite(off_w)) next[k](kOffsetIndex) = off_sum / off_w;
        if (master) next[k](kOffsetIndex) = next[k](kBiasIndex) = 0.0;
    });

    // Broadcast.
    for_each_node(n, ctx.parallel, [&](int k) {
        FilterNode& node = nodes[k];
        for (std::size_t i = 0; i < node.scope.size(); ++i)
            node.x_hat.segment<kStateDim>(kStateDim * i) = next[node.scope[i]];
    });

    Diagnostics total;
    for (Diagnostics& d : diag) {
        total.problems_solved += d.problems_solved;
        total.non_converged += d.non_converged;
        total.cost_increases += d.cost_increases;
        for (auto& t : d.cost_traces) total.cost_traces.push_back(std::move(t));
    }
    return total;
}

namespace {

class CkalEstimator final : public Estimator {
public:
    CkalEstimator(const Topology& topo, const std::vector<NodeState>& init, const EstimatorParams& prm, bool parallel)
        : topo_(topo), ctx_{&topo_, prm, parallel}, x_(initial_state(init, prm)),
          P_(initial_covariance(topo.n_nodes(), prm)), filtered_(x_) {}

    Algorithm algorithm() const override { return Algorithm::kCkal; }

    void step(const EpochBatch& batch) override {
        ckal_step(x_, P_, batch, ctx_);
        filtered_ = x_;
        for (int i = 0; i < topo_.n_nodes(); ++i)
            filtered_(kStateDim * i + kOffsetIndex) -= ctx_.params.epoch_period * x_(kStateDim * i + kBiasIndex);
    }

    std::vector<NodeState> estimates() const override {
        std::vector<NodeState> out;
        for (int i = 0; i < topo_.n_nodes(); ++i)
            out.push_back(from_filter(filtered_.segment<kStateDim>(kStateDim * i), ctx_.params.constants));
        return out;
    }

private:
    Topology topo_;
    EstimatorContext ctx_;
    Vector x_;
    Matrix P_;
    Vector filtered_;
};

class NodeEstimator final : public Estimator {
public:
    NodeEstimator(Algorithm a, const Topology& topo, const std::vector<NodeState>& init, const EstimatorParams& prm,
                  bool parallel)
        : algorithm_(a), topo_(topo), ctx_{&topo_, prm, parallel} {
        switch (a) {
            case Algorithm::kDkal: nodes_ = make_dkal_nodes(topo_, init, prm); break;
            case Algorithm::kMkal: nodes_ = make_mkal_nodes(topo_, init, prm); break;
            case Algorithm::kOpt: nodes_ = make_opt_nodes(topo_, init, prm); break;
            case Algorithm::kCkal: throw Error("centralized filter has its own estimator");
        }
        snapshot();
    }

    Algorithm algorithm() const override { return algorithm_; }

    void step(const EpochBatch& batch) override {
        switch (algorithm_) {
            case Algorithm::kDkal: dkal_step(nodes_, batch, ctx_); break;
            case Algorithm::kMkal: mkal_step(nodes_, batch, ctx_, &diag_); break;
            case Algorithm::kOpt: {
                const Diagnostics d = opt_step(nodes_, batch, ctx_);
                diag_.problems_solved += d.problems_solved;
                diag_.non_converged += d.non_converged;
                diag_.cost_increases += d.cost_increases;
                break;
            }
            case Algorithm::kCkal: break;
        }
        snapshot();
    }

    std::vector<NodeState> estimates() const override { return filtered_; }
    Diagnostics diagnostics() const override { return diag_; }

private:
    void snapshot() {
        // Filter steps end with the time update; undo its offset drift so
        // estimates refer to the epoch just processed.
        const double dt = algorithm_ == Algorithm::kOpt ? 0.0 : ctx_.params.epoch_period;
        filtered_.clear();
        for (const FilterNode& node : nodes_) {
            NodeState s = node.state_of(node.node_id, ctx_.params.constants);
            s.o -= dt * s.b;
            filtered_.push_back(s);
        }
    }

    Algorithm algorithm_;
    Topology topo_;
    EstimatorContext ctx_;
    std::vector<FilterNode> nodes_;
    std::vector<NodeState> filtered_;
    Diagnostics diag_;
};

}  // namespace

std::unique_ptr<Estimator> make_estimator(Algorithm algorithm, const Topology& topology,
                                          const std::vector<NodeState>& initial, const EstimatorParams& prm,
                                          bool parallel) {
    if (int(initial.size()) != topology.n_nodes()) throw TopologyError("initial guess size differs from topology");
    if (prm.master < 0 || prm.master >= topology.n_nodes()) throw TopologyError("master index out of range");
    if (algorithm == Algorithm::kCkal) return std::make_unique<CkalEstimator>(topology, initial, prm, parallel);
    return std::make_unique<NodeEstimator>(algorithm, topology, initial, prm, parallel);
}

}  // namespace dslats
