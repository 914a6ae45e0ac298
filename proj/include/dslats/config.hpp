#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dslats/estimators.hpp"
#include "dslats/simnet.hpp"

namespace dslats {

inline constexpr int kSchemaVersion = 1;

enum class TopologyKind { kFull, kNearest, kExplicit };
enum class InitMode { kPerturbed, kBoundingBox };

struct TopologySpec {
    TopologyKind kind = TopologyKind::kFull;
    int k = 4;                                // nearest-neighbor count
    std::vector<std::pair<int, int>> edges;   // explicit edges

    bool operator==(const TopologySpec&) const = default;
};

struct MobileSpec {
    std::vector<Vec3> waypoints{{3, 1.5, 3}, {7, 1.5, 3}, {7, 1.5, 6}, {3, 1.5, 6}};
    double speed = 0.5;  // m/s
    bool loop = true;

    bool operator==(const MobileSpec&) const = default;
};

struct ScenarioConfig {
    int schema_version = kSchemaVersion;
    std::string name = "scenario";
    std::string layout = "paper8";  // preset name, or "custom" with `anchors`
    std::vector<Vec3> anchors;
    TopologySpec topology;
    Algorithm algorithm = Algorithm::kDkal;
    std::vector<int> msg_types{3};
    double rate_hz = 2.0;
    double duration_s = 300.0;
    std::uint64_t seed = 0;
    int master = 0;
    SimParams noise;
    EstimatorParams estimator;  // mask, epoch period and mobility are derived
    InitMode init_mode = InitMode::kPerturbed;
    double init_position_std = 1.0;  // m
    std::optional<MobileSpec> mobile;
    bool parallel = false;

    /// Static anchor positions (preset or explicit).
    std::vector<Vec3> anchor_positions() const;
    int n_nodes() const { return int(anchor_positions().size()) + (mobile ? 1 : 0); }
    long n_epochs() const;
    int exchange_type() const;
    MeasurementMask mask() const;
    Topology build_topology() const;
    std::vector<Trajectory> trajectories() const;
    /// Estimator parameters with mask, epoch period, master and mobility filled in.
    EstimatorParams effective_estimator() const;

    bool operator==(const ScenarioConfig&) const;
};

/// Parses JSON text; empty or whitespace-only input yields the defaults.
/// Errors carry the offending key path, e.g. `estimator.gamma`.
ScenarioConfig parse_config(const std::string& text);
ScenarioConfig load_config(const std::string& path);
/// Throws ConfigError with a key path on invalid values.
void validate(const ScenarioConfig& cfg);
std::string to_json(const ScenarioConfig& cfg);

std::string_view to_string(TopologyKind kind);
/// Parses `full` or `k:<n>`.
TopologySpec parse_topology_flag(const std::string& flag);
/// Parses `1,2,3`.
std::vector<int> parse_msg_types(const std::string& flag);

}  // namespace dslats
