#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dslats/linalg.hpp"
#include "dslats/model.hpp"
#include "dslats/simnet.hpp"

namespace dslats {

enum class Algorithm { kCkal, kDkal, kMkal, kOpt };

std::string_view to_string(Algorithm a);
std::optional<Algorithm> parse_algorithm(std::string_view name);

enum class DiffusionWeights { kUniform, kMetropolis, kSelfOnly };
enum class OptVariant { kType3, kType2 };
enum class OptCombine { kWeighted, kMean };

struct EstimatorParams {
    int master = 0;
    double epoch_period = 0.5;  // s
    MeasurementMask mask{};
    double timestamp_std = 0.3e-9;  // s, drives the measurement covariance

    // Prior covariance diagonal.
    double prior_position_std = 3.0;  // m
    double prior_offset_std = 1e-4;   // s
    double prior_bias_std = 1e-5;

    // Process noise, matched to the simulated clocks.
    double offset_density = 1e-10;  // s / sqrt(s)
    double bias_density = 1e-10;    // 1 / sqrt(s)
    double mobile_position_std = 0.5;  // m per epoch
    std::vector<bool> mobile;          // per node; empty means all static

    // Subsystem Kalman filter.
    int bandwidth = 5;
    double gamma = 0.6;
    int dici_iters = 10;
    double dici_tolerance = 0.5;

    DiffusionWeights weights = DiffusionWeights::kUniform;

    // Jacobi least squares.
    OptVariant opt_variant = OptVariant::kType3;
    OptCombine opt_combine = OptCombine::kMean;
    int opt_max_iters = 25;
    double opt_grad_tol = 1e-10;

    ModelConstants constants{};

    bool is_mobile(int k) const { return k < int(mobile.size()) && mobile[k]; }
};

struct Measurement {
    ExchangeRecord record;
    MeasurementVector y;
};

struct EpochBatch {
    long epoch = 0;
    std::vector<Measurement> items;
};

/// Filter coordinates: per node [x, y, z, c*o, c*b], i.e. meters, meters and
/// meters per second. Covariances are expressed in the same units.
StateVector to_filter(const NodeState& s, const ModelConstants& k = {});
NodeState from_filter(const StateVector& v, const ModelConstants& k = {});

/// One node's view in a distributed estimator.
struct FilterNode {
    int node_id = 0;
    std::vector<int> scope;   // monitored global node indices, ascending
    Vector x_hat;             // 5 * scope.size(), filter coordinates
    Matrix P;                 // empty for OPT
    Matrix P_post;            // subsystem filter: last posterior (warm start)
    std::vector<int> peers;   // closed neighborhood used for diffusion
    std::vector<double> weights;  // diffusion weight per peer

    int local_index(int global) const;  // -1 when not in scope
    NodeState state_of(int global, const ModelConstants& k = {}) const;
    void set_state(int global, const StateVector& filter_state);
};

struct Subsystem {
    int owner = 0;
    std::vector<int> members;  // owner plus its neighbors, ascending

    int index_of(int global) const;  // -1 when absent
};

std::vector<Subsystem> build_subsystems(const Topology& topology);

/// Diffusion weights over the closed neighborhood of `k`, aligned with
/// `peers` (ascending). Nonnegative, sum to one.
std::vector<double> diffusion_weights(const Topology& topology, int k, const std::vector<int>& peers,
                                      DiffusionWeights kind);

struct EstimatorContext {
    const Topology* topology = nullptr;
    EstimatorParams params;
    bool parallel = false;       // run per-node phases on worker threads
    bool record_traces = false;  // keep per-problem cost traces (least squares)
};

struct Diagnostics {
    // Least-squares subproblems.
    int problems_solved = 0;
    int non_converged = 0;
    int cost_increases = 0;  // inner iterations whose accepted step raised the cost
    std::vector<std::vector<double>> cost_traces;
    // Subsystem covariance recoveries and how many needed the dense fallback.
    int dici_solves = 0;
    int dici_fallbacks = 0;
};

/// Prior over the whole network in filter coordinates.
Vector initial_state(const std::vector<NodeState>& initial, const EstimatorParams& prm);
Matrix initial_covariance(int n_nodes, const EstimatorParams& prm);

/// Each step runs the measurement update, then the time update.
void ckal_step(Vector& x_hat, Matrix& P, const EpochBatch& batch, const EstimatorContext& ctx);

std::vector<FilterNode> make_dkal_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                        const EstimatorParams& prm);
void dkal_step(std::vector<FilterNode>& nodes, const EpochBatch& batch, const EstimatorContext& ctx);

std::vector<FilterNode> make_mkal_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                        const EstimatorParams& prm);
/// Subsystem filter. When the iterative covariance recovery is not within
/// `dici_tolerance` of the subsystem inverse, the dense inverse is used and
/// counted in `diagnostics`.
void mkal_step(std::vector<FilterNode>& nodes, const EpochBatch& batch, const EstimatorContext& ctx,
               Diagnostics* diagnostics = nullptr);


std::vector<FilterNode> make_opt_nodes(const Topology& topology, const std::vector<NodeState>& initial,
                                       const EstimatorParams& prm);
Diagnostics opt_step(std::vector<FilterNode>& nodes, const EpochBatch& batch, const EstimatorContext& ctx);

/// Common driver over the four algorithms.
class Estimator {
public:
    virtual ~Estimator() = default;
    virtual Algorithm algorithm() const = 0;
    virtual void step(const EpochBatch& batch) = 0;
    /// Each node's current filtered estimate of itself.
    virtual std::vector<NodeState> estimates() const = 0;
    virtual Diagnostics diagnostics() const { return {}; }
};

std::unique_ptr<Estimator> make_estimator(Algorithm algorithm, const Topology& topology,
                                          const std::vector<NodeState>& initial, const EstimatorParams& prm,
                                          bool parallel = false);

}  // namespace dslats
