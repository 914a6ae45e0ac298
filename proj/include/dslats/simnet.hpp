#pragma once

#include <iosfwd>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "dslats/model.hpp"

namespace dslats {

using Rng = std::mt19937_64;

/// Undirected connectivity graph. Edges are stored as (a, b) with a < b,
/// sorted lexicographically.
class Topology {
public:
    Topology() = default;
    /// Validates indices, rejects self-loops and disconnected graphs.
    Topology(int n_nodes, std::vector<std::pair<int, int>> edges);

    int n_nodes() const { return n_nodes_; }
    const std::vector<std::pair<int, int>>& edges() const { return edges_; }
    /// Sorted neighbor list of node k (excluding k).
    const std::vector<int>& neighbors(int k) const { return neighbors_.at(k); }
    bool has_edge(int a, int b) const;
    int degree(int k) const { return int(neighbors(k).size()); }

    bool operator==(const Topology&) const = default;

private:
    int n_nodes_ = 0;
    std::vector<std::pair<int, int>> edges_;
    std::vector<std::vector<int>> neighbors_;
};

bool is_connected(int n_nodes, std::span<const std::pair<int, int>> edges);

Topology build_full_topology(int n_nodes);
/// Links every node to its k geometrically nearest peers, then symmetrizes.
Topology build_k_nearest_topology(std::span<const Vec3> positions, int k);

/// Eight anchors in a 10 x 9 m footprint; y is vertical. Six at ceiling
/// height 2.5 m, two at waist height 1.0 m.
std::vector<Vec3> default_static_layout();

/// Piecewise-linear waypoint path traversed at constant speed. A single
/// waypoint (or zero speed) is a static node.
struct Trajectory {
    std::vector<Vec3> waypoints;
    double speed = 0.0;  // m/s
    bool loop = true;

    static Trajectory stationary(const Vec3& p) { return {{p}, 0.0, true}; }
    bool is_static() const { return waypoints.size() < 2 || speed <= 0.0; }
    Vec3 position_at(double t) const;
    double path_length() const;
};

struct SimParams {
    double timestamp_std = 0.3e-9;    // s
    double turnaround_min = 0.5e-3;   // s
    double turnaround_max = 2.0e-3;   // s
    double bias_range = 2e-6;         // initial |b| bound
    double offset_range = 100e-6;     // initial |o| bound, s
    double offset_density = 1e-10;    // offset random walk, s / sqrt(s)
    double bias_density = 1e-10;      // bias random walk, 1 / sqrt(s)
    ModelConstants constants{};
};

/// Ground truth. `time` is the master-clock (global) time.
struct TruthWorld {
    double time = 0.0;
    int master = 0;
    std::vector<NodeState> states;
    std::vector<Trajectory> trajectories;
    SimParams params;

    int n_nodes() const { return int(states.size()); }
};

/// Places nodes at t = 0 and draws initial offsets and biases (master
/// pinned at zero).
TruthWorld make_world(const std::vector<Trajectory>& trajectories, int master, const SimParams& params, Rng& rng);

/// Integrates clocks (offset += bias dt plus random walks) and moves mobile
/// nodes along their trajectories.
TruthWorld advance_world(TruthWorld world, double dt, Rng& rng);

/// Runs one exchange of the given type. The final initiator transmission
/// (t4) leaves at the current world time; earlier legs precede it.
ExchangeRecord simulate_exchange(const TruthWorld& world, const Topology& topology, int initiator, int responder,
                                 int msg_type, Rng& rng);

struct ScheduledExchange {
    int initiator = 0;
    int responder = 0;
    int msg_type = 3;
};

/// One exchange per topology edge per epoch. Initiator and responder roles
/// alternate between even and odd epochs.
class Schedule {
public:
    Schedule(const Topology& topology, double period, int msg_type);

    double period() const { return period_; }
    std::vector<ScheduledExchange> exchanges_for_epoch(long epoch) const;

private:
    double period_;
    int msg_type_;
    std::vector<std::pair<int, int>> edges_;
};

/// Raw exchange log: header plus one row per record.
void write_exchange_log_header(std::ostream& os);
void write_exchange_log_row(std::ostream& os, long epoch, const ExchangeRecord& ex);

}  // namespace dslats
