#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dslats/config.hpp"
#include "dslats/estimators.hpp"
#include "dslats/linalg.hpp"

namespace dslats {

/// Per-node errors with their summary statistics (population std).
struct ErrorStats {
    std::vector<int> nodes;
    std::vector<double> values;
    double mean = 0.0;
    double std = 0.0;
};

ErrorStats make_stats(std::vector<int> nodes, std::vector<double> values);

/// Procrustes-aligned distance per node. Also returns the transform.
ErrorStats localization_error(std::span<const Vec3> est, std::span<const Vec3> truth, RigidTransform* transform = nullptr);
/// |o_est - o_true| in seconds for every node except the master.
ErrorStats sync_error(std::span<const NodeState> est, std::span<const NodeState> truth, int master);

/// Distance of each mobile position from the centroid of the anchors.
std::vector<double> centroid_distance_series(std::span<const Vec3> mobile, std::span<const Vec3> anchors);

struct EpochRecord {
    long epoch = 0;
    double time = 0.0;
    std::vector<NodeState> estimate;
    std::vector<NodeState> truth;
    std::vector<double> loc_error;   // anchors aligned this epoch; mobile via the same transform
    std::vector<double> sync_error;  // master entry is 0
};

struct MobileReport {
    int node = 0;
    std::vector<Vec3> axis_error;  // est (final anchor alignment) minus truth, per epoch
    std::vector<double> error;     // norm of axis_error
    std::vector<double> centroid_distance;
    double rmse = 0.0;
};

struct ErrorReport {
    Algorithm algorithm = Algorithm::kDkal;
    long epochs = 0;  // completed epochs
    ErrorStats localization;  // steady-state window mean per anchor
    ErrorStats sync;          // steady-state window mean per non-master node
    std::vector<double> loc_curve;   // mean anchor localization error per epoch
    std::vector<double> sync_curve;  // mean sync error per epoch
    std::optional<MobileReport> mobile;
    std::optional<long> failure_epoch;
    std::string failure;
    Diagnostics diagnostics;
};

struct RunResult {
    ErrorReport report;
    std::vector<EpochRecord> series;
};

/// Fraction of final epochs averaged for steady-state figures.
inline constexpr double kSteadyStateFraction = 0.2;

struct RunHooks {
    std::ostream* exchange_log = nullptr;  // raw exchange CSV rows, header included
    Vec3 initial_shift = Vec3::Zero();     // added to every initial position guess
};

RunResult run_experiment(const ScenarioConfig& cfg, const RunHooks& hooks = {});

/// First epoch from which the curve stays within `factor` times its
/// steady-state mean. Returns the curve length when it never settles.
long settling_epoch(const std::vector<double>& curve, double factor = 2.0);

void write_series_csv(std::ostream& os, const std::vector<EpochRecord>& series);
void write_summary_header(std::ostream& os);
void write_summary_rows(std::ostream& os, const std::string& label, const ErrorReport& report);
/// Human-readable table for standard output.
void print_summary(std::ostream& os, const std::string& label, const ErrorReport& report);

}  // namespace dslats
