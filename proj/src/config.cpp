#include "dslats/config.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dslats/error.hpp"

namespace dslats {

using json = nlohmann::ordered_json;

std::vector<Vec3> ScenarioConfig::anchor_positions() const {
    if (layout == "paper8") return default_static_layout();
    return anchors;
}

long ScenarioConfig::n_epochs() const { return std::lround(std::floor(duration_s * rate_hz + 1e-9)); }

int ScenarioConfig::exchange_type() const { return *std::max_element(msg_types.begin(), msg_types.end()); }

MeasurementMask ScenarioConfig::mask() const {
    MeasurementMask m{false, false, false};
    for (int t : msg_types) {
        const MeasurementMask f = MeasurementMask::for_type(t);
        m = {m.d || f.d, m.r || f.r, m.R || f.R};
    }
    return m;
}

Topology ScenarioConfig::build_topology() const {
    const int n = n_nodes();
    switch (topology.kind) {
        case TopologyKind::kFull: return build_full_topology(n);
        case TopologyKind::kNearest: {
            std::vector<Vec3> pts = anchor_positions();
            if (mobile) pts.push_back(mobile->waypoints.front());
            return build_k_nearest_topology(pts, topology.k);
        }
        case TopologyKind::kExplicit: return Topology(n, topology.edges);
    }
    throw ConfigError("topology: unknown kind");
}

std::vector<Trajectory> ScenarioConfig::trajectories() const {
    std::vector<Trajectory> out;
    for (const Vec3& p : anchor_positions()) out.push_back(Trajectory::stationary(p));
    if (mobile) out.push_back({mobile->waypoints, mobile->speed, mobile->loop});
    return out;
}

EstimatorParams ScenarioConfig::effective_estimator() const {
    EstimatorParams p = estimator;
    p.master = master;
    p.epoch_period = 1.0 / rate_hz;
    p.mask = mask();
    p.timestamp_std = noise.timestamp_std;
    p.offset_density = noise.offset_density;
    p.bias_density = noise.bias_density;
    p.constants = noise.constants;
    p.mobile.assign(std::size_t(n_nodes()), false);
    const std::vector<Trajectory> tr = trajectories();
    for (std::size_t i = 0; i < tr.size(); ++i) p.mobile[i] = !tr[i].is_static();
    return p;
}

bool ScenarioConfig::operator==(const ScenarioConfig& o) const { return to_json(*this) == to_json(o); }

std::string_view to_string(TopologyKind kind) {
    switch (kind) {
        case TopologyKind::kFull: return "full";
        case TopologyKind::kNearest: return "nearest";
        case TopologyKind::kExplicit: return "explicit";
    }
    return "?";
}

namespace {

std::string_view to_string(DiffusionWeights w) {
    switch (w) {
        case DiffusionWeights::kUniform: return "uniform";
        case DiffusionWeights::kMetropolis: return "metropolis";
        case DiffusionWeights::kSelfOnly: return "self";
    }
    return "?";
}

std::string_view to_string(OptVariant v) { return v == OptVariant::kType3 ? "type3" : "type2"; }
std::string_view to_string(OptCombine v) { return v == OptCombine::kWeighted ? "weighted" : "mean"; }
std::string_view to_string(InitMode m) { return m == InitMode::kPerturbed ? "perturbed" : "bbox"; }

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

// Walks one JSON object, rejecting keys not consumed by the caller.
class Object {
public:
    Object(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
    }

    ~Object() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) fail(join(path_, it.key()), "unknown key");
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const std::string& key) const { return join(path_, key); }

    template <class T>
    void read(const std::string& key, T& out) {
        const json* v = find(key);
        if (!v) return;
        convert(*v, path(key), out);
    }

    static void convert(const json& v, const std::string& path, double& out) {
        if (!v.is_number()) fail(path, "expected a number");
        out = v.get<double>();
        if (!std::isfinite(out)) fail(path, "must be finite");
    }
    static void convert(const json& v, const std::string& path, int& out) {
        if (!v.is_number_integer()) fail(path, "expected an integer");
        out = v.get<int>();
    }
    static void convert(const json& v, const std::string& path, std::uint64_t& out) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
            fail(path, "expected a non-negative integer");
        out = v.get<std::uint64_t>();
    }
    static void convert(const json& v, const std::string& path, bool& out) {
        if (!v.is_boolean()) fail(path, "expected true or false");
        out = v.get<bool>();
    }
    static void convert(const json& v, const std::string& path, std::string& out) {
        if (!v.is_string()) fail(path, "expected a string");
        out = v.get<std::string>();
    }
    static void convert(const json& v, const std::string& path, Vec3& out) {
        if (!v.is_array() || v.size() != 3) fail(path, "expected [x, y, z]");
        for (int i = 0; i < 3; ++i) convert(v[i], path + "[" + std::to_string(i) + "]", out(i));
    }
    template <class T>
    static void convert(const json& v, const std::string& path, std::vector<T>& out) {
        if (!v.is_array()) fail(path, "expected an array");
        out.assign(v.size(), T{});
        for (std::size_t i = 0; i < v.size(); ++i) convert(v[i], path + "[" + std::to_string(i) + "]", out[i]);
    }
    static void convert(const json& v, const std::string& path, std::pair<int, int>& out) {
        if (!v.is_array() || v.size() != 2) fail(path, "expected [a, b]");
        convert(v[0], path + "[0]", out.first);
        convert(v[1], path + "[1]", out.second);
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class E>
E choose(const std::string& path, const std::string& value, std::initializer_list<std::pair<const char*, E>> options) {
    std::string allowed;
    for (const auto& [name, e] : options) {
        if (value == name) return e;
        allowed += (allowed.empty() ? "" : ", ") + std::string(name);
    }
    fail(path, "unknown value '" + value + "' (allowed: " + allowed + ")");
}

void require(bool ok, const std::string& path, const std::string& msg) {
    if (!ok) fail(path, msg);
}

json vec3_json(const Vec3& p) { return json::array({p.x(), p.y(), p.z()}); }

}  // namespace

void validate(const ScenarioConfig& c) {
    require(c.schema_version == kSchemaVersion, "schema_version", "unsupported version " + std::to_string(c.schema_version));
    require(c.layout == "paper8" || c.layout == "custom", "layout.preset", "unknown preset '" + c.layout + "' (allowed: paper8, custom)");
    const std::vector<Vec3> anchors = c.anchor_positions();
    require(anchors.size() >= 3, "layout.anchors", "at least three anchors are required");
    require(!c.msg_types.empty(), "msg_types", "at least one message type is required");
    for (int t : c.msg_types) require(t >= 1 && t <= 3, "msg_types", "types must lie in {1, 2, 3}");
    require(c.rate_hz > 0.0, "rate_hz", "must be positive");
    require(c.duration_s >= 0.0, "duration_s", "must be non-negative");
    require(c.master >= 0 && c.master < c.n_nodes(), "master", "index out of range");
    require(c.noise.timestamp_std >= 0.0, "noise.timestamp_std_s", "must be non-negative");
    require(c.noise.turnaround_min > 0.0, "noise.turnaround_min_s", "must be positive");
    require(c.noise.turnaround_max >= c.noise.turnaround_min, "noise.turnaround_max_s", "must be at least the minimum");
    require(c.noise.bias_range >= 0.0, "noise.bias_range", "must be non-negative");
    require(c.noise.offset_range >= 0.0, "noise.offset_range_s", "must be non-negative");
    require(c.noise.offset_density >= 0.0, "noise.offset_density", "must be non-negative");
    require(c.noise.bias_density >= 0.0, "noise.bias_density", "must be non-negative");
    const EstimatorParams& e = c.estimator;
    require(e.bandwidth >= 1, "estimator.bandwidth", "must be at least 1");
    require(e.gamma > 0.0 && e.gamma <= 1.0, "estimator.gamma", "must lie in (0, 1]");
    require(e.dici_iters >= 1, "estimator.dici_iters", "must be at least 1");
    require(e.dici_tolerance > 0.0 && e.dici_tolerance < 1.0, "estimator.dici_tolerance", "must lie in (0, 1)");
    require(e.opt_max_iters >= 1, "estimator.opt_max_iters", "must be at least 1");
    require(e.opt_grad_tol > 0.0, "estimator.opt_grad_tol", "must be positive");
    require(e.prior_position_std > 0.0, "estimator.prior_position_std_m", "must be positive");
    require(e.prior_offset_std > 0.0, "estimator.prior_offset_std_s", "must be positive");
    require(e.prior_bias_std > 0.0, "estimator.prior_bias_std", "must be positive");
    require(e.mobile_position_std >= 0.0, "estimator.mobile_position_std_m", "must be non-negative");
    require(c.init_position_std >= 0.0, "init.position_std_m", "must be non-negative");
    if (c.mobile) {
        require(!c.mobile->waypoints.empty(), "mobile.waypoints", "at least one waypoint is required");
        require(c.mobile->speed >= 0.0, "mobile.speed_mps", "must be non-negative");
    }
    if (c.topology.kind == TopologyKind::kNearest)
        require(c.topology.k >= 1 && c.topology.k < c.n_nodes(), "topology.k", "must lie in [1, n_nodes - 1]");
    try {
        (void)c.build_topology();
    } catch (const TopologyError& err) {
        fail("topology", err.what());
    }
}

ScenarioConfig parse_config(const std::string& text) {
    ScenarioConfig c;
    if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); })) return c;
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& err) {
        throw ConfigError(std::string("<root>: malformed JSON: ") + err.what());
    }
    {
        Object r(root, "");
        r.read("schema_version", c.schema_version);
        r.read("name", c.name);

        std::optional<int> n_nodes;
        if (const json* v = r.find("n_nodes")) {
            int n = 0;
            Object::convert(*v, "n_nodes", n);
            n_nodes = n;
        }

        if (const json* v = r.find("layout")) {
            Object o(*v, "layout");
            const bool has_preset = o.find("preset") != nullptr;
            o.read("preset", c.layout);
            if (const json* a = o.find("anchors")) {
                if (has_preset && c.layout != "custom") fail("layout.anchors", "explicit anchors require preset 'custom'");
                Object::convert(*a, o.path("anchors"), c.anchors);
                c.layout = "custom";
            }
        }

        if (const json* v = r.find("topology")) {
            Object o(*v, "topology");
            std::string kind = "full";
            o.read("kind", kind);
            c.topology.kind = choose<TopologyKind>(o.path("kind"), kind,
                                                   {{"full", TopologyKind::kFull},
                                                    {"nearest", TopologyKind::kNearest},
                                                    {"explicit", TopologyKind::kExplicit}});
            o.read("k", c.topology.k);
            o.read("edges", c.topology.edges);
            if (c.topology.kind == TopologyKind::kExplicit && c.topology.edges.empty())
                fail("topology.edges", "explicit topology needs edges");
        }

        if (const json* v = r.find("algorithm")) {
            std::string name;
            Object::convert(*v, "algorithm", name);
            c.algorithm = choose<Algorithm>("algorithm", name,
                                            {{"ckal", Algorithm::kCkal},
                                             {"dkal", Algorithm::kDkal},
                                             {"mkal", Algorithm::kMkal},
                                             {"opt", Algorithm::kOpt}});
        }
        r.read("msg_types", c.msg_types);
        r.read("rate_hz", c.rate_hz);
        r.read("duration_s", c.duration_s);
        r.read("seed", c.seed);
        r.read("master", c.master);

        if (const json* v = r.find("noise")) {
            Object o(*v, "noise");
            o.read("timestamp_std_s", c.noise.timestamp_std);
            o.read("turnaround_min_s", c.noise.turnaround_min);
            o.read("turnaround_max_s", c.noise.turnaround_max);
            o.read("bias_range", c.noise.bias_range);
            o.read("offset_range_s", c.noise.offset_range);
            o.read("offset_density", c.noise.offset_density);
            o.read("bias_density", c.noise.bias_density);
        }

        if (const json* v = r.find("estimator")) {
            Object o(*v, "estimator");
            EstimatorParams& e = c.estimator;
            o.read("bandwidth", e.bandwidth);
            o.read("gamma", e.gamma);
            o.read("dici_iters", e.dici_iters);
            o.read("dici_tolerance", e.dici_tolerance);
            std::string s;
            if (const json* w = o.find("weights")) {
                Object::convert(*w, o.path("weights"), s);
                e.weights = choose<DiffusionWeights>(o.path("weights"), s,
                                                     {{"uniform", DiffusionWeights::kUniform},
                                                      {"metropolis", DiffusionWeights::kMetropolis},
                                                      {"self", DiffusionWeights::kSelfOnly}});
            }
            if (const json* w = o.find("opt_variant")) {
                Object::convert(*w, o.path("opt_variant"), s);
                e.opt_variant = choose<OptVariant>(o.path("opt_variant"), s,
                                                   {{"type3", OptVariant::kType3}, {"type2", OptVariant::kType2}});
            }
            if (const json* w = o.find("opt_combine")) {
                Object::convert(*w, o.path("opt_combine"), s);
                e.opt_combine = choose<OptCombine>(o.path("opt_combine"), s,
                                                   {{"weighted", OptCombine::kWeighted}, {"mean", OptCombine::kMean}});
            }
            o.read("opt_max_iters", e.opt_max_iters);
            o.read("opt_grad_tol", e.opt_grad_tol);
            o.read("prior_position_std_m", e.prior_position_std);
            o.read("prior_offset_std_s", e.prior_offset_std);
            o.read("prior_bias_std", e.prior_bias_std);
            o.read("mobile_position_std_m", e.mobile_position_std);
            o.read("parallel", c.parallel);
        }

        if (const json* v = r.find("init")) {
            Object o(*v, "init");
            std::string mode;
            if (const json* m = o.find("mode")) {
                Object::convert(*m, o.path("mode"), mode);
                c.init_mode = choose<InitMode>(o.path("mode"), mode,
                                               {{"perturbed", InitMode::kPerturbed}, {"bbox", InitMode::kBoundingBox}});
            }
            o.read("position_std_m", c.init_position_std);
        }

        if (const json* v = r.find("mobile"); v && !v->is_null()) {
            Object o(*v, "mobile");
            MobileSpec m;
            o.read("waypoints", m.waypoints);
            o.read("speed_mps", m.speed);
            o.read("loop", m.loop);
            c.mobile = m;
        }

        if (n_nodes && *n_nodes != c.n_nodes())
            fail("n_nodes", std::to_string(*n_nodes) + " does not match the layout (" + std::to_string(c.n_nodes()) + ")");
    }
    validate(c);
    return c;
}

ScenarioConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& err) {
        throw ConfigError(path + ": " + err.what());
    }
}

std::string to_json(const ScenarioConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["name"] = c.name;
    j["n_nodes"] = c.n_nodes();
    json layout;
    layout["preset"] = c.layout;
    if (c.layout != "paper8") {
        layout["anchors"] = json::array();
        for (const Vec3& p : c.anchors) layout["anchors"].push_back(vec3_json(p));
    }
    j["layout"] = layout;
    json topo;
    topo["kind"] = std::string(to_string(c.topology.kind));
    topo["k"] = c.topology.k;
    topo["edges"] = json::array();
    for (const auto& [a, b] : c.topology.edges) topo["edges"].push_back(json::array({a, b}));
    j["topology"] = topo;
    j["algorithm"] = std::string(to_string(c.algorithm));
    j["msg_types"] = c.msg_types;
    j["rate_hz"] = c.rate_hz;
    j["duration_s"] = c.duration_s;
    j["seed"] = c.seed;
    j["master"] = c.master;
    j["noise"] = {{"timestamp_std_s", c.noise.timestamp_std},   {"turnaround_min_s", c.noise.turnaround_min},
                  {"turnaround_max_s", c.noise.turnaround_max}, {"bias_range", c.noise.bias_range},
                  {"offset_range_s", c.noise.offset_range},     {"offset_density", c.noise.offset_density},
                  {"bias_density", c.noise.bias_density}};
    const EstimatorParams& e = c.estimator;
    j["estimator"] = {{"bandwidth", e.bandwidth},
                      {"gamma", e.gamma},
                      {"dici_iters", e.dici_iters},
                      {"dici_tolerance", e.dici_tolerance},
                      {"weights", std::string(to_string(e.weights))},
                      {"opt_variant", std::string(to_string(e.opt_variant))},
                      {"opt_combine", std::string(to_string(e.opt_combine))},
                      {"opt_max_iters", e.opt_max_iters},
                      {"opt_grad_tol", e.opt_grad_tol},
                      {"prior_position_std_m", e.prior_position_std},
                      {"prior_offset_std_s", e.prior_offset_std},
                      {"prior_bias_std", e.prior_bias_std},
                      {"mobile_position_std_m", e.mobile_position_std},
                      {"parallel", c.parallel}};
    j["init"] = {{"mode", std::string(to_string(c.init_mode))}, {"position_std_m", c.init_position_std}};
    if (c.mobile) {
        json m;
        m["waypoints"] = json::array();
        for (const Vec3& p : c.mobile->waypoints) m["waypoints"].push_back(vec3_json(p));
        m["speed_mps"] = c.mobile->speed;
        m["loop"] = c.mobile->loop;
        j["mobile"] = m;
    } else {
        j["mobile"] = nullptr;
    }
    return j.dump(2) + "\n";
}

TopologySpec parse_topology_flag(const std::string& flag) {
    TopologySpec t;
    if (flag == "full") return t;
    if (flag.rfind("k:", 0) == 0) {
        try {
            std::size_t used = 0;
            t.k = std::stoi(flag.substr(2), &used);
            if (used == flag.size() - 2 && t.k >= 1) {
                t.kind = TopologyKind::kNearest;
                return t;
            }
        } catch (const std::exception&) {
        }
    }
    throw ConfigError("--topology: expected 'full' or 'k:<n>', got '" + flag + "'");
}

std::vector<int> parse_msg_types(const std::string& flag) {
    std::vector<int> out;
    std::stringstream ss(flag);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.size() != 1 || item[0] < '1' || item[0] > '3')
            throw ConfigError("--msg-types: expected a comma list of 1, 2, 3, got '" + flag + "'");
        const int t = item[0] - '0';
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    }
    if (out.empty()) throw ConfigError("--msg-types: at least one type is required");
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace dslats
