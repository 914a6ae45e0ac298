#include <optional>
#include <sstream>
#include <tuple>
#include <vector>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dslats/config.hpp"
#include "dslats/error.hpp"
#include "dslats/eval.hpp"
#include "dslats/linalg.hpp"
#include "dslats/model.hpp"

namespace py = pybind11;
using namespace dslats;

namespace {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

NodeState state_of(const StateVector& v) { return NodeState::from_vector(v); }

std::vector<Vec3> points_of(const Points& m) {
    std::vector<Vec3> out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(m.row(i).transpose());
    return out;
}

ExchangeRecord exchange_of(int msg_type, std::optional<double> rnd0, std::optional<double> rsp0,
                           std::optional<double> rnd1, std::optional<double> rsp1) {
    ExchangeRecord ex;
    ex.msg_type = msg_type;
    ex.rnd0 = rnd0;
    ex.rsp0 = rsp0;
    ex.rnd1 = rnd1;
    ex.rsp1 = rsp1;
    return ex;
}

py::dict stats_dict(const ErrorStats& s) {
    py::dict d;
    d["nodes"] = s.nodes;
    d["values"] = s.values;
    d["mean"] = s.mean;
    d["std"] = s.std;
    return d;
}

py::dict report_dict(const ErrorReport& r) {
    py::dict d;
    d["algorithm"] = std::string(to_string(r.algorithm));
    d["epochs"] = r.epochs;
    d["localization"] = stats_dict(r.localization);
    d["sync"] = stats_dict(r.sync);
    d["loc_curve"] = r.loc_curve;
    d["sync_curve"] = r.sync_curve;
    if (r.mobile) {
        py::dict m;
        m["node"] = r.mobile->node;
        m["error"] = r.mobile->error;
        m["centroid_distance"] = r.mobile->centroid_distance;
        m["rmse"] = r.mobile->rmse;
        d["mobile"] = m;
    } else {
        d["mobile"] = py::none();
    }
    d["failure_epoch"] = r.failure_epoch ? py::cast(*r.failure_epoch) : py::none();
    d["failure"] = r.failure;
    py::dict diag;
    diag["problems_solved"] = r.diagnostics.problems_solved;
    diag["non_converged"] = r.diagnostics.non_converged;
    diag["dici_solves"] = r.diagnostics.dici_solves;
    diag["dici_fallbacks"] = r.diagnostics.dici_fallbacks;
    d["diagnostics"] = diag;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Joint localization and clock synchronization estimators";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

    m.def(
        "effective_config", [](const std::string& text) {
            const ScenarioConfig c = parse_config(text);
            validate(c);
            return to_json(c);
        },
        py::arg("config_json") = "", "Validated configuration with every default filled in, as JSON.");

    m.def(
        "run",
        [](const std::string& text) {
            const ScenarioConfig c = parse_config(text);
            validate(c);
            RunResult r;
            {
                py::gil_scoped_release release;
                r = run_experiment(c);
            }
            std::ostringstream series;
            write_series_csv(series, r.series);
            py::dict out;
            out["report"] = report_dict(r.report);
            out["series_csv"] = series.str();
            out["config"] = to_json(c);
            return out;
        },
        py::arg("config_json") = "", "Runs one scenario and returns its error report and per-epoch series CSV.");

    m.def(
        "binomial_update_chain",
        [](const Matrix& prior, const std::vector<std::tuple<Matrix, Matrix, Matrix>>& terms) {
            std::vector<RankUpdateTerm> t;
            for (const auto& [U, B, V] : terms) t.push_back({U, B, V});
            return binomial_update_chain(prior, t);
        },
        py::arg("prior"), py::arg("terms"), "Applies Q <- Q - Q U (B^-1 + V Q U)^-1 V Q for each (U, B, V).");

    m.def(
        "lband_approx_inverse", [](const Matrix& P, int L) { return lband_approx_inverse(P, L).dense(); },
        py::arg("P"), py::arg("bandwidth"));

    m.def(
        "dici_or_invert",
        [](const Matrix& J, int L, const Matrix& P_prev, double gamma, int iters) {
            DiciOrOptions opt;
            opt.gamma = gamma;
            opt.iters = iters;
            return dici_or_invert(BandedInverse(J, L), P_prev, opt);
        },
        py::arg("J"), py::arg("bandwidth"), py::arg("P_prev"), py::arg("gamma") = 0.6, py::arg("iters") = 10);

    m.def(
        "predict_measurement",
        [](const StateVector& xk, const StateVector& xj, int msg_type, std::optional<double> rnd0,
           std::optional<double> rsp0, std::optional<double> rnd1, std::optional<double> rsp1) {
            const MeasurementMask mask = MeasurementMask::for_type(msg_type);
            const MeasurementVector h =
                predict_measurement(state_of(xk), state_of(xj), exchange_of(msg_type, rnd0, rsp0, rnd1, rsp1), mask);
            return h.stacked(mask);
        },
        py::arg("xk"), py::arg("xj"), py::arg("msg_type") = 3, py::arg("rnd0") = py::none(),
        py::arg("rsp0") = py::none(), py::arg("rnd1") = py::none(), py::arg("rsp1") = py::none(),
        "Rows (d, r, R) enabled by the message type; states are [x, y, z, offset, bias].");

    m.def(
        "jacobian_H_pair",
        [](const StateVector& xk, const StateVector& xj, int msg_type, std::optional<double> rnd0,
           std::optional<double> rsp0, std::optional<double> rnd1, std::optional<double> rsp1) {
            const MeasurementJacobian J =
                jacobian_H_pair(state_of(xk), state_of(xj), exchange_of(msg_type, rnd0, rsp0, rnd1, rsp1),
                                MeasurementMask::for_type(msg_type));
            return std::make_pair(J.wrt_sender, J.wrt_receiver);
        },
        py::arg("xk"), py::arg("xj"), py::arg("msg_type") = 3, py::arg("rnd0") = py::none(),
        py::arg("rsp0") = py::none(), py::arg("rnd1") = py::none(), py::arg("rsp1") = py::none());

    m.def(
        "procrustes_align",
        [](const Points& est, const Points& truth) {
            const auto e = points_of(est), t = points_of(truth);
            const RigidTransform T = procrustes_align(e, t);
            return std::make_pair(Eigen::Matrix3d(T.rotation), Vec3(T.translation));
        },
        py::arg("est"), py::arg("truth"), "Rotation and translation mapping est onto truth.");

    m.def(
        "localization_error",
        [](const Points& est, const Points& truth) {
            const auto e = points_of(est), t = points_of(truth);
            return localization_error(e, t).values;
        },
        py::arg("est"), py::arg("truth"), "Per-point distance after rigid alignment.");
}
