#include "dslats/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dslats/csv.hpp"
#include "dslats/error.hpp"

namespace dslats {

ErrorStats make_stats(std::vector<int> nodes, std::vector<double> values) {
    ErrorStats s{std::move(nodes), std::move(values)};
    if (s.values.empty()) return s;
    for (double v : s.values) s.mean += v;
    s.mean /= double(s.values.size());
    for (double v : s.values) s.std += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(s.std / double(s.values.size()));
    return s;
}

ErrorStats localization_error(std::span<const Vec3> est, std::span<const Vec3> truth, RigidTransform* transform) {
    RigidTransform t = procrustes_align(est, truth);
    std::vector<int> nodes;
    std::vector<double> err;
    for (std::size_t i = 0; i < est.size(); ++i) {
        nodes.push_back(int(i));
        err.push_back((t.aligned[i] - truth[i]).norm());
    }
    if (transform) *transform = std::move(t);
    return make_stats(std::move(nodes), std::move(err));
}

ErrorStats sync_error(std::span<const NodeState> est, std::span<const NodeState> truth, int master) {
    if (est.size() != truth.size()) throw ModelError("estimate and truth sizes differ");
    std::vector<int> nodes;
    std::vector<double> err;
    for (std::size_t i = 0; i < est.size(); ++i) {
        if (int(i) == master) continue;
        nodes.push_back(int(i));
        err.push_back(std::abs(est[i].o - truth[i].o));
    }
    return make_stats(std::move(nodes), std::move(err));
}

std::vector<double> centroid_distance_series(std::span<const Vec3> mobile, std::span<const Vec3> anchors) {
    if (anchors.empty()) throw AlignmentError("centroid needs at least one anchor");
    Vec3 c = Vec3::Zero();
    for (const Vec3& a : anchors) c += a;
    c /= double(anchors.size());
    std::vector<double> out;
    for (const Vec3& p : mobile) out.push_back((p - c).norm());
    return out;
}

namespace {

std::vector<Vec3> initial_guess(const ScenarioConfig& cfg, const TruthWorld& world, Rng& rng) {
    std::vector<Vec3> out;
    if (cfg.init_mode == InitMode::kPerturbed) {
        std::normal_distribution<double> g(0.0, 1.0);
        for (const NodeState& s : world.states) {
            Vec3 p = s.p;
            for (int a = 0; a < 3; ++a) p(a) += cfg.init_position_std * g(rng);
            out.push_back(p);
        }
        return out;
    }
    Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
    for (const Vec3& p : cfg.anchor_positions()) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < world.states.size(); ++i) {
        Vec3 p;
        for (int a = 0; a < 3; ++a) p(a) = lo(a) + (hi(a) - lo(a)) * u(rng);
        out.push_back(p);
    }
    return out;
}

std::vector<Vec3> positions(const std::vector<NodeState>& s, const std::vector<int>& idx) {
    std::vector<Vec3> out;
    for (int i : idx) out.push_back(s[i].p);
    return out;
}

bool all_finite(const std::vector<NodeState>& s) {
    return std::all_of(s.begin(), s.end(), [](const NodeState& x) { return x.finite(); });
}

}  // namespace

RunResult run_experiment(const ScenarioConfig& cfg, const RunHooks& hooks) {
    validate(cfg);
    RunResult out;
    ErrorReport& rep = out.report;
    rep.algorithm = cfg.algorithm;

    const Topology topo = cfg.build_topology();
    const EstimatorParams prm = cfg.effective_estimator();
    const MeasurementMask mask = cfg.mask();
    const int n = topo.n_nodes();
    std::vector<int> anchors, all;
    for (int i = 0; i < n; ++i) {
        all.push_back(i);
        if (!prm.is_mobile(i)) anchors.push_back(i);
    }
    const int mobile = cfg.mobile ? n - 1 : -1;

    Rng rng(cfg.seed);
    TruthWorld world = make_world(cfg.trajectories(), cfg.master, cfg.noise, rng);
    std::vector<NodeState> init;
    for (const Vec3& p : initial_guess(cfg, world, rng)) init.push_back({p + hooks.initial_shift, 0.0, 0.0});
    auto est = make_estimator(cfg.algorithm, topo, init, prm, cfg.parallel);
    const Schedule schedule(topo, 1.0 / cfg.rate_hz, cfg.exchange_type());
    if (hooks.exchange_log) write_exchange_log_header(*hooks.exchange_log);

    auto record = [&](long epoch, const std::vector<NodeState>& e) {
        EpochRecord r{epoch, world.time, e, world.states, {}, {}};
        RigidTransform t;
        const ErrorStats loc = localization_error(positions(e, anchors), positions(world.states, anchors), &t);
        r.loc_error.assign(n, 0.0);
        for (int i = 0; i < n; ++i) r.loc_error[i] = (t.apply(e[i].p) - world.states[i].p).norm();
        const ErrorStats sync = sync_error(e, world.states, cfg.master);
        r.sync_error.assign(n, 0.0);
        for (std::size_t i = 0; i < sync.nodes.size(); ++i) r.sync_error[sync.nodes[i]] = sync.values[i];
        rep.loc_curve.push_back(loc.mean);
        rep.sync_curve.push_back(sync.mean);
        out.series.push_back(std::move(r));
    };

    const long n_epochs = cfg.n_epochs();
    for (long e = 0; e < n_epochs; ++e) {
        try {
            EpochBatch batch{e, {}};
            for (const ScheduledExchange& s : schedule.exchanges_for_epoch(e)) {
                ExchangeRecord ex = simulate_exchange(world, topo, s.initiator, s.responder, s.msg_type, rng);
                if (hooks.exchange_log) write_exchange_log_row(*hooks.exchange_log, e, ex);
                batch.items.push_back({ex, measure(ex, mask, cfg.noise.constants)});
            }
            est->step(batch);
            const std::vector<NodeState> x = est->estimates();
            if (!all_finite(x)) throw NumericalError("non-finite estimate");
            record(e, x);
        } catch (const Error& err) {
            rep.failure_epoch = e;
            rep.failure = err.what();
            break;
        }
        rep.epochs = e + 1;
        world = advance_world(std::move(world), 1.0 / cfg.rate_hz, rng);
    }
    rep.diagnostics = est->diagnostics();

    // Steady-state window, or the initial guess when nothing ran.
    std::vector<const EpochRecord*> window;
    EpochRecord initial;
    if (out.series.empty()) {
        initial = {0, world.time, init, world.states, {}, {}};
        const ErrorStats loc = localization_error(positions(init, anchors), positions(world.states, anchors));
        initial.loc_error.assign(n, 0.0);
        for (std::size_t i = 0; i < loc.nodes.size(); ++i) initial.loc_error[anchors[i]] = loc.values[i];
        const ErrorStats sync = sync_error(init, world.states, cfg.master);
        initial.sync_error.assign(n, 0.0);
        for (std::size_t i = 0; i < sync.nodes.size(); ++i) initial.sync_error[sync.nodes[i]] = sync.values[i];
        window.push_back(&initial);
    } else {
        const std::size_t len = std::max<std::size_t>(1, std::size_t(std::ceil(kSteadyStateFraction * double(out.series.size()))));
        for (std::size_t i = out.series.size() - len; i < out.series.size(); ++i) window.push_back(&out.series[i]);
    }
    std::vector<double> loc(anchors.size(), 0.0), sync;
    std::vector<int> sync_nodes;
    for (int i : all)
        if (i != cfg.master) sync_nodes.push_back(i);
    sync.assign(sync_nodes.size(), 0.0);
    for (const EpochRecord* r : window) {
        for (std::size_t i = 0; i < anchors.size(); ++i) loc[i] += r->loc_error[anchors[i]] / double(window.size());
        for (std::size_t i = 0; i < sync_nodes.size(); ++i) sync[i] += r->sync_error[sync_nodes[i]] / double(window.size());
    }
    rep.localization = make_stats(anchors, loc);
    rep.sync = make_stats(sync_nodes, sync);

    if (mobile >= 0 && !out.series.empty()) {
        MobileReport m;
        m.node = mobile;
        const EpochRecord& last = out.series.back();
        RigidTransform t;
        localization_error(positions(last.estimate, anchors), positions(last.truth, anchors), &t);
        const std::vector<Vec3> anchor_truth = positions(last.truth, anchors);
        std::vector<Vec3> mobile_truth;
        double sum = 0.0;
        for (const EpochRecord& r : out.series) {
            const Vec3 d = t.apply(r.estimate[m.node].p) - r.truth[m.node].p;
            m.axis_error.push_back(d);
            m.error.push_back(d.norm());
            sum += d.squaredNorm();
            mobile_truth.push_back(r.truth[m.node].p);
        }
        m.rmse = std::sqrt(sum / double(out.series.size()));
        m.centroid_distance = centroid_distance_series(mobile_truth, anchor_truth);
        rep.mobile = std::move(m);
    }
    return out;
}

long settling_epoch(const std::vector<double>& curve, double factor) {
    if (curve.empty()) return 0;
    const std::size_t len = std::max<std::size_t>(1, std::size_t(std::ceil(kSteadyStateFraction * double(curve.size()))));
    double steady = 0.0;
    for (std::size_t i = curve.size() - len; i < curve.size(); ++i) steady += curve[i];
    steady /= double(len);
    long settle = long(curve.size());
    for (long i = long(curve.size()) - 1; i >= 0 && curve[i] <= factor * steady; --i) settle = i;
    return settle;
}

void write_series_csv(std::ostream& os, const std::vector<EpochRecord>& series) {
    os << "epoch,node,err_loc_m,err_sync_s,x_est,y_est,z_est,x_true,y_true,z_true\n";
    for (const EpochRecord& r : series)
        for (std::size_t i = 0; i < r.estimate.size(); ++i) {
            const Vec3& e = r.estimate[i].p;
            const Vec3& t = r.truth[i].p;
            os << r.epoch << ',' << i << ',' << format_double(r.loc_error[i]) << ',' << format_double(r.sync_error[i])
               << ',' << format_double(e.x()) << ',' << format_double(e.y()) << ',' << format_double(e.z()) << ','
               << format_double(t.x()) << ',' << format_double(t.y()) << ',' << format_double(t.z()) << '\n';
        }
}

void write_summary_header(std::ostream& os) { os << "run,node,loc_err_m,sync_err_us\n"; }

void write_summary_rows(std::ostream& os, const std::string& label, const ErrorReport& rep) {
    std::vector<int> nodes = rep.localization.nodes;
    for (int s : rep.sync.nodes)
        if (std::find(nodes.begin(), nodes.end(), s) == nodes.end()) nodes.push_back(s);
    std::sort(nodes.begin(), nodes.end());
    auto cell = [](const ErrorStats& st, int node, double scale) -> std::string {
        for (std::size_t i = 0; i < st.nodes.size(); ++i)
            if (st.nodes[i] == node) return format_double(st.values[i] * scale);
        return "";
    };
    for (int k : nodes)
        os << label << ',' << k << ',' << cell(rep.localization, k, 1.0) << ',' << cell(rep.sync, k, 1e6) << '\n';
    os << label << ",mean," << format_double(rep.localization.mean) << ',' << format_double(rep.sync.mean * 1e6) << '\n';
    os << label << ",std," << format_double(rep.localization.std) << ',' << format_double(rep.sync.std * 1e6) << '\n';
}

void print_summary(std::ostream& os, const std::string& label, const ErrorReport& rep) {
    std::ostringstream ss;
    ss.imbue(std::locale::classic());
    ss << std::setprecision(3);
    ss << label << " (" << to_string(rep.algorithm) << ", " << rep.epochs << " epochs)\n";
    ss << "  node   loc [m]   sync [us]\n";
    std::vector<int> nodes = rep.localization.nodes;
    for (int s : rep.sync.nodes)
        if (std::find(nodes.begin(), nodes.end(), s) == nodes.end()) nodes.push_back(s);
    std::sort(nodes.begin(), nodes.end());
    for (int k : nodes) {
        ss << "  " << std::setw(4) << k;
        auto put = [&](const ErrorStats& st, double scale, auto notation) {
            for (std::size_t i = 0; i < st.nodes.size(); ++i)
                if (st.nodes[i] == k) {
                    ss << notation << std::setw(10) << st.values[i] * scale;
                    return;
                }
            ss << std::setw(10) << "-";
        };
        put(rep.localization, 1.0, std::fixed);
        ss << "  ";
        put(rep.sync, 1e6, std::scientific);
        ss << '\n';
    }
    ss << "  mean" << std::fixed << std::setw(10) << rep.localization.mean << "  " << std::scientific << std::setw(10)
       << rep.sync.mean * 1e6 << '\n';
    ss << "  std " << std::fixed << std::setw(10) << rep.localization.std << "  " << std::scientific << std::setw(10)
       << rep.sync.std * 1e6 << '\n' << std::fixed;
    if (rep.mobile) ss << "  mobile node " << rep.mobile->node << " RMSE " << std::setprecision(3) << rep.mobile->rmse << " m\n";
    if (rep.diagnostics.dici_solves > 0)
        ss << "  covariance recovery: " << rep.diagnostics.dici_fallbacks << " of " << rep.diagnostics.dici_solves
           << " used the dense fallback\n";
    if (rep.diagnostics.non_converged > 0)
        ss << "  least squares: " << rep.diagnostics.non_converged << " of " << rep.diagnostics.problems_solved
           << " subproblems did not converge\n";
    if (rep.failure_epoch) ss << "  FAILED at epoch " << *rep.failure_epoch << ": " << rep.failure << '\n';
    os << ss.str();
}

}  // namespace dslats
