#include "dslats/simnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <queue>
#include <string>

#include "dslats/csv.hpp"
#include "dslats/error.hpp"

namespace dslats {

bool is_connected(int n_nodes, std::span<const std::pair<int, int>> edges) {
    if (n_nodes <= 1) return true;
    std::vector<std::vector<int>> adj(n_nodes);
    for (auto [a, b] : edges) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    std::vector<bool> seen(n_nodes, false);
    std::queue<int> frontier;
    frontier.push(0);
    seen[0] = true;
    int count = 1;
    while (!frontier.empty()) {
        const int v = frontier.front();
        frontier.pop();
        for (int w : adj[v]) {
            if (!seen[w]) {
                seen[w] = true;
                ++count;
                frontier.push(w);
            }
        }
    }
    return count == n_nodes;
}

Topology::Topology(int n_nodes, std::vector<std::pair<int, int>> edges) : n_nodes_(n_nodes) {
    if (n_nodes < 1) throw TopologyError("topology needs at least one node");
    for (auto& [a, b] : edges) {
        if (a < 0 || b < 0 || a >= n_nodes || b >= n_nodes)
            throw TopologyError("edge (" + std::to_string(a) + ", " + std::to_string(b) + ") out of range");
        if (a == b) throw TopologyError("self-loop at node " + std::to_string(a));
        if (a > b) std::swap(a, b);
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    if (!is_connected(n_nodes, edges)) throw TopologyError("topology is disconnected");
    edges_ = std::move(edges);
    neighbors_.assign(n_nodes, {});
    for (auto [a, b] : edges_) {
        neighbors_[a].push_back(b);
        neighbors_[b].push_back(a);
    }
    for (auto& nb : neighbors_) std::sort(nb.begin(), nb.end());
}

bool Topology::has_edge(int a, int b) const {
    if (a > b) std::swap(a, b);
    return std::binary_search(edges_.begin(), edges_.end(), std::pair{a, b});
}

Topology build_full_topology(int n_nodes) {
    if (n_nodes < 2) throw TopologyError("topology needs n >= 2");
    std::vector<std::pair<int, int>> edges;
    for (int a = 0; a < n_nodes; ++a)
        for (int b = a + 1; b < n_nodes; ++b) edges.emplace_back(a, b);
    return Topology(n_nodes, std::move(edges));
}

Topology build_k_nearest_topology(std::span<const Vec3> positions, int k) {
    const int n = int(positions.size());
    if (n < 2) throw TopologyError("topology needs n >= 2");
    if (k < 1) throw TopologyError("k-nearest topology needs k >= 1");
    std::vector<std::pair<int, int>> edges;
    for (int a = 0; a < n; ++a) {
        std::vector<int> order;
        for (int b = 0; b < n; ++b)
            if (b != a) order.push_back(b);
        // Ties broken by index so the graph is a pure function of the layout.
        std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
            return (positions[x] - positions[a]).squaredNorm() < (positions[y] - positions[a]).squaredNorm();
        });
        const int take = std::min(k, n - 1);
        for (int i = 0; i < take; ++i) edges.emplace_back(a, order[i]);
    }
    return Topology(n, std::move(edges));
}

std::vector<Vec3> default_static_layout() {
    // x, z span the 10 x 9 m floor; y is height.
    return {
        {0.5, 2.5, 0.5}, {9.5, 2.5, 0.8}, {9.2, 2.5, 8.5}, {0.8, 2.5, 8.7},
        {5.0, 2.5, 0.3}, {4.6, 2.5, 8.8}, {2.0, 1.0, 4.0}, {8.0, 1.0, 5.2},
    };
}

double Trajectory::path_length() const {
    double len = 0.0;
    for (std::size_t i = 1; i < waypoints.size(); ++i) len += (waypoints[i] - waypoints[i - 1]).norm();
    if (loop && waypoints.size() > 1) len += (waypoints.front() - waypoints.back()).norm();
    return len;
}

Vec3 Trajectory::position_at(double t) const {
    if (waypoints.empty()) throw ModelError("trajectory has no waypoints");
    if (is_static()) return waypoints.front();
    const double total = path_length();
    if (!(total > 0.0)) return waypoints.front();
    double s = speed * std::max(t, 0.0);
    s = loop ? std::fmod(s, total) : std::min(s, total);
    const std::size_t segments = loop ? waypoints.size() : waypoints.size() - 1;
    for (std::size_t i = 0; i < segments; ++i) {
        const Vec3& a = waypoints[i];
        const Vec3& b = waypoints[(i + 1) % waypoints.size()];
        const double seg = (b - a).norm();
        if (s <= seg || i + 1 == segments) {
            if (seg <= 0.0) return a;
            return a + (b - a) * std::min(s / seg, 1.0);
        }
        s -= seg;
    }
    return waypoints.back();
}

TruthWorld make_world(const std::vector<Trajectory>& trajectories, int master, const SimParams& params, Rng& rng) {
    const int n = int(trajectories.size());
    if (master < 0 || master >= n) throw ModelError("master index out of range");
    TruthWorld w;
    w.master = master;
    w.trajectories = trajectories;
    w.params = params;
    w.states.resize(n);
    std::uniform_real_distribution<double> offset(-params.offset_range, params.offset_range);
    std::uniform_real_distribution<double> bias(-params.bias_range, params.bias_range);
    for (int k = 0; k < n; ++k) {
        w.states[k].p = trajectories[k].position_at(0.0);
        const double o = offset(rng);
        const double b = bias(rng);
        if (k != master) {
            w.states[k].o = o;
            w.states[k].b = b;
        }
    }
    return w;
}

TruthWorld advance_world(TruthWorld world, double dt, Rng& rng) {
    if (!(dt > 0.0)) throw ModelError("advance_world needs dt > 0");
    std::normal_distribution<double> unit(0.0, 1.0);
    const double so = world.params.offset_density * std::sqrt(dt);
    const double sb = world.params.bias_density * std::sqrt(dt);
    world.time += dt;
    for (int k = 0; k < world.n_nodes(); ++k) {
        NodeState& s = world.states[k];
        const double no = unit(rng);
        const double nb = unit(rng);
        if (k != world.master) {
            s.o += s.b * dt + so * no;
            s.b += sb * nb;
        }
        s.p = world.trajectories[k].position_at(world.time);
    }
    return world;
}

ExchangeRecord simulate_exchange(const TruthWorld& world, const Topology& topology, int initiator, int responder,
                                 int msg_type, Rng& rng) {
    if (!topology.has_edge(initiator, responder))
        throw TopologyError("nodes " + std::to_string(initiator) + " and " + std::to_string(responder) +
                            " are not neighbors");
    if (msg_type < 1 || msg_type > 3) throw ProtocolError("message type must be 1, 2 or 3");
    const SimParams& prm = world.params;
    const NodeState& si = world.states[initiator];
    const NodeState& sr = world.states[responder];
    const double tp = (sr.p - si.p).norm() / prm.constants.c;

    std::uniform_real_distribution<double> turnaround(prm.turnaround_min, prm.turnaround_max);
    const double rsp0 = msg_type >= 3 ? turnaround(rng) : 0.0;  // responder, true time
    const double rsp1 = msg_type >= 2 ? turnaround(rng) : 0.0;  // initiator, true time

    // True (global) event times, anchored so that t4 leaves at world.time.
    std::array<double, 6> T{};
    T[4] = world.time;
    T[5] = T[4] + tp;
    T[3] = T[4] - rsp1;
    T[2] = T[3] - tp;
    T[1] = T[2] - rsp0;
    T[0] = T[1] - tp;

    const int first = msg_type == 3 ? 0 : (msg_type == 2 ? 2 : 4);
    std::normal_distribution<double> noise(0.0, prm.timestamp_std);
    ExchangeRecord ex;
    ex.sender_id = initiator;
    ex.receiver_id = responder;
    ex.msg_type = msg_type;
    for (int i = first; i < 6; ++i) {
        // Even stamps are taken on the initiator for legs 0/4 and on the
        // responder for leg 2; odd stamps mirror that.
        const bool on_initiator = (i == 0 || i == 3 || i == 4);
        const NodeState& s = on_initiator ? si : sr;
        const double local = T[i] + s.o + s.b * (T[i] - world.time);
        ex.t[i] = local + (prm.timestamp_std > 0.0 ? noise(rng) : 0.0);
    }
    ex.derive_durations();
    return ex;
}

Schedule::Schedule(const Topology& topology, double period, int msg_type)
    : period_(period), msg_type_(msg_type), edges_(topology.edges()) {
    if (!(period > 0.0)) throw ModelError("epoch period must be positive");
    if (msg_type < 1 || msg_type > 3) throw ProtocolError("message type must be 1, 2 or 3");
}

std::vector<ScheduledExchange> Schedule::exchanges_for_epoch(long epoch) const {
    std::vector<ScheduledExchange> out;
    out.reserve(edges_.size());
    const bool flip = epoch % 2 != 0;
    for (auto [a, b] : edges_) {
        if (flip)
            out.push_back({b, a, msg_type_});
        else
            out.push_back({a, b, msg_type_});
    }
    return out;
}

void write_exchange_log_header(std::ostream& os) {
    os << "epoch,initiator,responder,msg_type,t0,t1,t2,t3,t4,t5,T_RND0,T_RSP0,T_RND1,T_RSP1\n";
}

void write_exchange_log_row(std::ostream& os, long epoch, const ExchangeRecord& ex) {
    auto cell = [&](const std::optional<double>& v) {
        os << ',';
        if (v) os << format_double(*v);
    };
    os << epoch << ',' << ex.sender_id << ',' << ex.receiver_id << ',' << ex.msg_type;
    for (const auto& t : ex.t) cell(t);
    cell(ex.rnd0);
    cell(ex.rsp0);
    cell(ex.rnd1);
    cell(ex.rsp1);
    os << '\n';
}

}  // namespace dslats
