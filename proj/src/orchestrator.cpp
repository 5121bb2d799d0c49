#include "mimic/orchestrator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "mimic/util.hpp"

namespace mimic::orchestrator {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed tags for the independent random streams of a run.
constexpr std::uint64_t kTagPredictorInit = 0x5e1;
constexpr std::uint64_t kTagPolicyInit = 0x901;
constexpr std::uint64_t kTagValueInit = 0x7a1;
constexpr std::uint64_t kTagPretrainPairs = 0x97e;
constexpr std::uint64_t kTagPretrainTrain = 0x9e;
constexpr std::uint64_t kTagSplit = 0x5b1;
constexpr std::uint64_t kTagRefresh = 0x7e;
constexpr std::uint64_t kTagCollect = 0xc011;
constexpr std::uint64_t kTagUpdate = 0x7290;
constexpr std::uint64_t kTagOnlinePair = 0xc1b;

constexpr const char* kStateFile = "state.json";
constexpr const char* kRolloutsFile = "rollouts.bin";
constexpr const char* kAnnotationsFile = "annotations.log";
constexpr const char* kMetricsFile = "metrics.csv";
constexpr const char* kConfigFile = "config.json";
constexpr const char* kDemoFile = "demo.vdm";
constexpr char kRolloutMagic[4] = {'R', 'O', 'L', '1'};

std::string predictor_dir_name(std::uint64_t version) { return "checkpoints/predictor_v" + std::to_string(version); }
std::string policy_dir_name(std::size_t update) { return "checkpoints/policy_u" + std::to_string(update); }

json to_json(const RunConfig& c) {
    json j;
    j["demo_path"] = c.demo_path.string();
    j["run_dir"] = c.run_dir.string();
    j["rater"] = std::string(to_string(c.rater));
    j["mode"] = std::string(to_string(c.mode));
    j["pretrain_annotations"] = c.pretrain_annotations;
    j["online_annotations"] = c.online_annotations;
    j["pairs_per_update"] = c.pairs_per_update;
    j["n_updates"] = c.n_updates;
    j["clip_length"] = c.clip_length;
    j["variant"] = std::string(simpred::to_string(c.variant));
    j["pretrain_epochs"] = c.pretrain_epochs;
    j["refresh_epochs"] = c.refresh_epochs;
    j["validation_fraction"] = c.validation_fraction;
    j["sgd"] = {{"learning_rate", c.sgd.learning_rate}, {"batch_size", c.sgd.batch_size}};
    j["trpo"] = {{"kl_delta", c.trpo.kl_delta},
                 {"gamma", c.trpo.gamma},
                 {"gae_lambda", c.trpo.gae_lambda},
                 {"cg_iters", c.trpo.cg_iters},
                 {"cg_damping", c.trpo.cg_damping},
                 {"backtrack_ratio", c.trpo.backtrack_ratio},
                 {"max_backtracks", c.trpo.max_backtracks},
                 {"steps_per_update", c.trpo.steps_per_update},
                 {"value_epochs", c.trpo.value_epochs},
                 {"value_learning_rate", c.trpo.value_learning_rate},
                 {"value_batch_size", c.trpo.value_batch_size}};
    j["init_log_std"] = c.init_log_std;
    j["value_return_scale"] = c.value_return_scale;
    j["seed"] = c.seed;
    j["checkpoint_every"] = c.checkpoint_every;
    j["init_predictor"] = c.init_predictor ? json(c.init_predictor->string()) : json(nullptr);
    const auto& e = c.env;
    j["env"] = {{"dt", e.dt},
                {"g", e.g},
                {"mass", e.mass},
                {"inertia", e.inertia},
                {"leg_min", e.leg_min},
                {"leg_max", e.leg_max},
                {"torque_max", e.torque_max},
                {"thrust_max", e.thrust_max},
                {"ground_stiffness", e.ground_stiffness},
                {"ground_damping", e.ground_damping},
                {"ground_friction", e.ground_friction},
                {"ground_tangent_damping", e.ground_tangent_damping},
                {"leg_stiffness", e.leg_stiffness},
                {"leg_damping", e.leg_damping},
                {"body_radius", e.body_radius},
                {"angular_damping", e.angular_damping},
                {"y_alive_max", e.y_alive_max}};
    j["oracle"] = {{"weights", c.oracle.weights}, {"sigma", c.oracle.sigma}, {"thresholds", c.oracle.thresholds}};
    return j;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

RunConfig from_json(const json& j) {
    RunConfig c;
    c.demo_path = j.at("demo_path").get<std::string>();
    c.run_dir = j.at("run_dir").get<std::string>();
    c.rater = rater_from_string(j.at("rater").get<std::string>());
    c.mode = mode_from_string(j.at("mode").get<std::string>());
    read_field(j, "pretrain_annotations", c.pretrain_annotations);
    read_field(j, "online_annotations", c.online_annotations);
    read_field(j, "pairs_per_update", c.pairs_per_update);
    read_field(j, "n_updates", c.n_updates);
    read_field(j, "clip_length", c.clip_length);
    if (j.contains("variant")) {
        c.variant = simpred::variant_from_string(j.at("variant").get<std::string>());
    }
    read_field(j, "pretrain_epochs", c.pretrain_epochs);
    read_field(j, "refresh_epochs", c.refresh_epochs);
    read_field(j, "validation_fraction", c.validation_fraction);
    if (j.contains("sgd")) {
        read_field(j["sgd"], "learning_rate", c.sgd.learning_rate);
        read_field(j["sgd"], "batch_size", c.sgd.batch_size);
    }
    if (j.contains("trpo")) {
        const json& t = j["trpo"];
        read_field(t, "kl_delta", c.trpo.kl_delta);
        read_field(t, "gamma", c.trpo.gamma);
        read_field(t, "gae_lambda", c.trpo.gae_lambda);
        read_field(t, "cg_iters", c.trpo.cg_iters);
        read_field(t, "cg_damping", c.trpo.cg_damping);
        read_field(t, "backtrack_ratio", c.trpo.backtrack_ratio);
        read_field(t, "max_backtracks", c.trpo.max_backtracks);
        read_field(t, "steps_per_update", c.trpo.steps_per_update);
        read_field(t, "value_epochs", c.trpo.value_epochs);
        read_field(t, "value_learning_rate", c.trpo.value_learning_rate);
        read_field(t, "value_batch_size", c.trpo.value_batch_size);
    }
    read_field(j, "init_log_std", c.init_log_std);
    read_field(j, "value_return_scale", c.value_return_scale);
    read_field(j, "seed", c.seed);
    read_field(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("init_predictor") && !j["init_predictor"].is_null()) {
        c.init_predictor = fs::path(j["init_predictor"].get<std::string>());
    }
    if (j.contains("env")) {
        const json& e = j["env"];
        auto& p = c.env;
        read_field(e, "dt", p.dt);
        read_field(e, "g", p.g);
        read_field(e, "mass", p.mass);
        read_field(e, "inertia", p.inertia);
        read_field(e, "leg_min", p.leg_min);
        read_field(e, "leg_max", p.leg_max);
        read_field(e, "torque_max", p.torque_max);
        read_field(e, "thrust_max", p.thrust_max);
        read_field(e, "ground_stiffness", p.ground_stiffness);
        read_field(e, "ground_damping", p.ground_damping);
        read_field(e, "ground_friction", p.ground_friction);
        read_field(e, "ground_tangent_damping", p.ground_tangent_damping);
        read_field(e, "leg_stiffness", p.leg_stiffness);
        read_field(e, "leg_damping", p.leg_damping);
        read_field(e, "body_radius", p.body_radius);
        read_field(e, "angular_damping", p.angular_damping);
        read_field(e, "y_alive_max", p.y_alive_max);
    }
    if (j.contains("oracle")) {
        read_field(j["oracle"], "weights", c.oracle.weights);
        read_field(j["oracle"], "sigma", c.oracle.sigma);
        read_field(j["oracle"], "thresholds", c.oracle.thresholds);
    }
    return c;
}

void write_rollouts(const std::map<std::uint64_t, env::Trajectory>& rollouts, const fs::path& path) {
    std::ostringstream out;
    out.write(kRolloutMagic, 4);
    io::put<std::uint64_t>(out, rollouts.size());
    for (const auto& [id, traj] : rollouts) {
        io::put<std::uint64_t>(out, id);
        io::put<std::uint64_t>(out, traj.seed);
        io::put<std::uint64_t>(out, traj.steps.size());
        for (const auto& st : traj.steps) {
            for (double v : st.state.to_array()) {
                io::put<double>(out, v);
            }
            io::put<double>(out, st.action.torque);
            io::put<double>(out, st.action.thrust);
        }
    }
    io::write_file_atomic(path, out.str());
}

std::map<std::uint64_t, env::Trajectory> read_rollouts(const fs::path& path) {
    std::istringstream in(io::read_file(path));
    char magic[4];
    io::get_bytes(in, magic, 4, "rollouts header");
    if (!std::equal(magic, magic + 4, kRolloutMagic)) {
        throw FormatError("rollouts header: bad magic");
    }
    const auto count = io::get<std::uint64_t>(in, "rollouts header");
    std::map<std::uint64_t, env::Trajectory> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto id = io::get<std::uint64_t>(in, "rollout record");
        env::Trajectory traj;
        traj.seed = io::get<std::uint64_t>(in, "rollout record");
        const auto n = io::get<std::uint64_t>(in, "rollout record");
        if (n > (std::uint64_t{1} << 32)) {
            throw FormatError("rollout record: implausible step count");
        }
        traj.steps.resize(n);
        for (auto& st : traj.steps) {
            std::array<double, env::kStateDim> v{};
            for (double& x : v) {
                x = io::get<double>(in, "rollout steps");
            }
            st.state = env::EnvState::from_array(v);
            st.action.torque = io::get<double>(in, "rollout steps");
            st.action.thrust = io::get<double>(in, "rollout steps");
        }
        out.emplace(id, std::move(traj));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("rollouts trailer: unexpected bytes after the last rollout");
    }
    return out;
}

std::string annotation_text(const std::vector<feedback::AnnotationRecord>& records) {
    std::string text;
    for (const auto& r : records) {
        text += feedback::to_line(r);
        text += '\n';
    }
    return text;
}

bool same_samples(const simpred::Dataset& a, const simpred::Dataset& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a[i].frame == b[i].frame) || !(a[i].observation == b[i].observation) || a[i].rating != b[i].rating) {
            return false;
        }
    }
    return true;
}

simpred::Dataset expand_all(const render::DemoVideo& demo, const std::map<std::uint64_t, env::Trajectory>& rollouts,
                            const std::vector<feedback::AnnotationRecord>& records) {
    simpred::Dataset out;
    for (const auto& r : records) {
        const auto it = rollouts.find(r.pair.agent_rollout_id);
        if (it == rollouts.end()) {
            throw FormatError("annotation for pair " + std::to_string(r.pair.pair_id) + " references unknown rollout " +
                              std::to_string(r.pair.agent_rollout_id));
        }
        auto s = feedback::expand(demo, it->second, r);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

}  // namespace

std::string_view to_string(RaterKind k) { return k == RaterKind::Oracle ? "oracle" : "human"; }
std::string_view to_string(Mode m) { return m == Mode::Sync ? "sync" : "async"; }

RaterKind rater_from_string(std::string_view s) {
    if (s == "oracle") return RaterKind::Oracle;
    if (s == "human") return RaterKind::Human;
    throw std::invalid_argument("unknown rater '" + std::string(s) + "' (expected oracle|human)");
}

Mode mode_from_string(std::string_view s) {
    if (s == "sync") return Mode::Sync;
    if (s == "async") return Mode::Async;
    throw std::invalid_argument("unknown mode '" + std::string(s) + "' (expected sync|async)");
}

void RunConfig::validate() const {
    if (demo_path.empty()) throw std::invalid_argument("RunConfig: demo_path is required");
    if (run_dir.empty()) throw std::invalid_argument("RunConfig: run_dir is required");
    if (clip_length < 1) throw std::invalid_argument("RunConfig: clip_length must be >= 1");
    if (online_annotations > 0 && pairs_per_update == 0)
        throw std::invalid_argument("RunConfig: pairs_per_update must be >= 1 when online annotations are requested");
    if (pretrain_epochs < 0 || refresh_epochs < 0) throw std::invalid_argument("RunConfig: epochs must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
        throw std::invalid_argument("RunConfig: validation_fraction must be in [0, 1)");
    if (!std::isfinite(init_log_std)) throw std::invalid_argument("RunConfig: init_log_std must be finite");
    if (!(value_return_scale > 0.0)) throw std::invalid_argument("RunConfig: value_return_scale must be > 0");
    sgd.validate();
    trpo.validate();
    env.validate();
    oracle.validate();
}

std::string to_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig config_from_text(std::string_view text) {
    try {
        return from_json(json::parse(text));
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
}

std::string to_csv_line(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%d,%llu", r.update, r.mean_reward, r.kl,
                  r.surrogate_improvement, r.backtracks, static_cast<unsigned long long>(r.predictor_version));
    return buf;
}

bool RunState::operator==(const RunState& o) const {
    return predictor_version == o.predictor_version && predictor == o.predictor && policy == o.policy &&
           value == o.value && rollouts == o.rollouts && records == o.records && same_samples(dataset, o.dataset) &&
           metrics == o.metrics && rl_updates == o.rl_updates && pretrain_done == o.pretrain_done &&
           online_done == o.online_done && next_id == o.next_id;
}

void checkpoint(const RunState& state, const fs::path& run_dir) {
    fs::create_directories(run_dir / "checkpoints");
    const std::string pred_dir = predictor_dir_name(state.predictor_version);
    const std::string pol_dir = policy_dir_name(state.rl_updates);
    simpred::save_predictor(state.predictor, run_dir / pred_dir);
    trpo::save_policy(state.policy, state.value, run_dir / pol_dir);
    write_rollouts(state.rollouts, run_dir / kRolloutsFile);

    const fs::path log = run_dir / kAnnotationsFile;
    const std::string expected = annotation_text(state.records);
    const std::string existing = fs::exists(log) ? io::read_file(log) : std::string();
    if (existing.compare(0, expected.size(), expected) != 0) {
        io::write_file_atomic(log, expected);
    }

    json metrics = json::array();
    for (const auto& m : state.metrics) {
        metrics.push_back({m.update, m.mean_reward, m.kl, m.surrogate_improvement, m.backtracks, m.predictor_version});
    }
    json manifest = {{"format", "mimic-run-state"},
                     {"format_version", 1},
                     {"predictor_version", state.predictor_version},
                     {"predictor_dir", pred_dir},
                     {"policy_dir", pol_dir},
                     {"rl_updates", state.rl_updates},
                     {"pretrain_done", state.pretrain_done},
                     {"online_done", state.online_done},
                     {"next_id", state.next_id},
                     {"annotation_count", state.records.size()},
                     {"rollouts_file", kRolloutsFile},
                     {"metrics", metrics}};
    io::write_file_atomic(run_dir / kStateFile, manifest.dump(2) + "\n");
}

namespace {

fs::path manifest_entry(const fs::path& run_dir, const char* key) {
    const fs::path manifest_path = run_dir / kStateFile;
    if (!fs::exists(manifest_path)) {
        throw FormatError(run_dir.string() + ": missing " + kStateFile + " (run-state manifest)");
    }
    try {
        return run_dir / json::parse(io::read_file(manifest_path)).at(key).get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string(kStateFile) + ": " + e.what());
    }
}

}  // namespace

fs::path latest_predictor_dir(const fs::path& run_dir) {
    return manifest_entry(run_dir, "predictor_dir");
}

fs::path latest_policy_dir(const fs::path& run_dir) {
    return manifest_entry(run_dir, "policy_dir");
}

RunState resume(const fs::path& run_dir) {
    const fs::path manifest_path = run_dir / kStateFile;
    if (!fs::exists(manifest_path)) {
        throw FormatError("resume " + run_dir.string() + ": missing " + kStateFile + " (run-state manifest)");
    }
    json m;
    try {
        m = json::parse(io::read_file(manifest_path));
    } catch (const json::exception& e) {
        throw FormatError(std::string(kStateFile) + ": " + e.what());
    }
    RunState s;
    std::size_t annotation_count = 0;
    fs::path pred_dir;
    fs::path pol_dir;
    try {
        if (m.at("format").get<std::string>() != "mimic-run-state") {
            throw FormatError(std::string(kStateFile) + ": not a run-state manifest");
        }
        s.predictor_version = m.at("predictor_version").get<std::uint64_t>();
        s.rl_updates = m.at("rl_updates").get<std::size_t>();
        s.pretrain_done = m.at("pretrain_done").get<std::size_t>();
        s.online_done = m.at("online_done").get<std::size_t>();
        s.next_id = m.at("next_id").get<std::uint64_t>();
        annotation_count = m.at("annotation_count").get<std::size_t>();
        pred_dir = run_dir / m.at("predictor_dir").get<std::string>();
        pol_dir = run_dir / m.at("policy_dir").get<std::string>();
        for (const auto& row : m.at("metrics")) {
            s.metrics.push_back({row.at(0).get<std::size_t>(), row.at(1).get<double>(), row.at(2).get<double>(),
                                 row.at(3).get<double>(), row.at(4).get<int>(), row.at(5).get<std::uint64_t>()});
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string(kStateFile) + ": " + e.what());
    }
    for (const auto& [path, what] : {std::pair{pred_dir, "predictor checkpoint"}, std::pair{pol_dir, "policy checkpoint"},
                                     std::pair{run_dir / kRolloutsFile, "rollouts file"},
                                     std::pair{run_dir / kDemoFile, "demo copy"}}) {
        if (!fs::exists(path)) {
            throw FormatError("resume " + run_dir.string() + ": missing " + what + " " + path.string());
        }
    }
    s.predictor = simpred::load_predictor(pred_dir);
    std::tie(s.policy, s.value) = trpo::load_policy(pol_dir);
    s.rollouts = read_rollouts(run_dir / kRolloutsFile);
    if (annotation_count > 0) {
        auto records = feedback::load_annotations(run_dir / kAnnotationsFile);
        if (records.size() < annotation_count) {
            throw FormatError(std::string(kAnnotationsFile) + ": holds " + std::to_string(records.size()) +
                              " records, manifest expects " + std::to_string(annotation_count));
        }
        records.resize(annotation_count);
        s.records = std::move(records);
    }
    const render::DemoVideo demo = render::read_demo(run_dir / kDemoFile);
    s.dataset = expand_all(demo, s.rollouts, s.records);
    return s;
}

Run::Run(RunConfig config, feedback::Clock clock)
    : config_(std::move(config)), queue_(std::move(clock)) {
    config_.validate();
    try {
        demo_ = render::read_demo(config_.demo_path);
    } catch (const std::exception& e) {
        throw std::runtime_error("demo " + config_.demo_path.string() + ": " + e.what());
    }
    if (demo_.size() < config_.clip_length) {
        throw std::invalid_argument("demo " + config_.demo_path.string() + " is shorter than one clip");
    }
    if (config_.rater == RaterKind::Oracle && !demo_.has_states()) {
        throw feedback::OracleUnavailable();
    }
    const fs::path& dir = config_.run_dir;
    if (fs::exists(dir / kStateFile) || (fs::exists(dir / kAnnotationsFile) && fs::file_size(dir / kAnnotationsFile) > 0)) {
        throw std::runtime_error("run directory " + dir.string() + " already holds a run; resume it instead");
    }
    fs::create_directories(dir / "checkpoints");
    io::write_file_atomic(dir / kConfigFile, to_text(config_));
    render::write_demo(demo_, dir / kDemoFile);
    store_ = std::make_unique<feedback::AnnotationStore>(dir / kAnnotationsFile);
    init_fresh();
    write_metrics_file();
}

Run::Run(RunConfig config, RunState state, feedback::Clock clock)
    : config_(std::move(config)), queue_(std::move(clock)), state_(std::move(state)) {
    const fs::path& dir = config_.run_dir;
    demo_ = render::read_demo(dir / kDemoFile);
    // Drop anything logged after the checkpoint so the log matches the state.
    io::write_file_atomic(dir / kAnnotationsFile, annotation_text(state_.records));
    store_ = std::make_unique<feedback::AnnotationStore>(dir / kAnnotationsFile);
    for (const auto& r : state_.records) {
        rated_ids_.insert(r.pair.pair_id);
    }
    published_ = std::make_shared<const simpred::SimilarityPredictor>(state_.predictor);
    published_version_ = state_.predictor_version;
    trained_records_ = state_.records.size();
    resumed_ = true;
    write_metrics_file();
}

std::unique_ptr<Run> Run::resume_from(const fs::path& run_dir, feedback::Clock clock) {
    const fs::path cfg_path = run_dir / kConfigFile;
    if (!fs::exists(cfg_path)) {
        throw FormatError("resume " + run_dir.string() + ": missing " + kConfigFile);
    }
    RunConfig cfg = config_from_text(io::read_file(cfg_path));
    cfg.run_dir = run_dir;
    cfg.validate();
    RunState state = resume(run_dir);
    return std::unique_ptr<Run>(new Run(std::move(cfg), std::move(state), std::move(clock)));
}

Run::~Run() {
    request_stop();
}

void Run::init_fresh() {
    const std::uint64_t seed = config_.seed;
    if (config_.init_predictor) {
        state_.predictor = simpred::load_predictor(*config_.init_predictor);
        const auto reference = simpred::SimilarityPredictor::create(config_.variant, 0, simpred::kObservationDim);
        if (!state_.predictor.same_architecture(reference)) {
            throw nn::ShapeError("initial predictor " + config_.init_predictor->string() +
                                 " does not match the configured variant's architecture");
        }
        state_.predictor.variant = config_.variant;
    } else {
        state_.predictor =
            simpred::SimilarityPredictor::create(config_.variant, derive_seed(seed, kTagPredictorInit));
        if (demo_.has_states()) {
            simpred::fit_observation_scaling(state_.predictor, demo_.states);
        }
    }
    state_.policy = trpo::GaussianPolicy::hopper(derive_seed(seed, kTagPolicyInit), config_.init_log_std);
    state_.value = trpo::ValueFunction::hopper(derive_seed(seed, kTagValueInit), config_.value_return_scale);
    published_ = std::make_shared<const simpred::SimilarityPredictor>(state_.predictor);
    published_version_ = 0;
}

void Run::write_metrics_file() const {
    std::string text = std::string(kMetricsHeader) + "\n";
    for (const auto& row : state_.metrics) {
        text += to_csv_line(row) + "\n";
    }
    io::write_file_atomic(config_.run_dir / kMetricsFile, text);
}

void Run::append_metrics(const MetricsRow& row) const {
    std::ofstream out(config_.run_dir / kMetricsFile, std::ios::app);
    out << to_csv_line(row) << '\n';
    if (!out) {
        throw std::runtime_error("cannot append to " + (config_.run_dir / kMetricsFile).string());
    }
}

std::shared_ptr<const simpred::SimilarityPredictor> Run::current_predictor() const {
    std::lock_guard lock(mutex_);
    return published_;
}

RunState Run::snapshot() const {
    std::lock_guard lock(mutex_);
    return state_;
}

RunStatus Run::status() const {
    RunStatus s;
    {
        std::lock_guard lock(mutex_);
        s.annotations = state_.records.size();
        for (const auto& r : state_.records) {
            (r.source == feedback::RaterSource::Human ? s.human_annotations : s.oracle_annotations) += 1;
        }
        s.predictor_version = state_.predictor_version;
        s.rl_updates = state_.rl_updates;
        s.phase = phase_;
        s.waiting_for_rater = waiting_;
    }
    s.human_mode = human_mode();
    s.queue_depth = queue_.depth();
    s.outstanding = queue_.outstanding();
    s.enqueued = queue_.enqueued();
    s.rated = queue_.completed();
    return s;
}

void Run::request_stop() {
    stop_ = true;
    queue_.close();
    cv_.notify_all();
}

bool Run::budget_done() const {
    std::lock_guard lock(mutex_);
    return state_.rl_updates >= config_.n_updates && state_.online_done >= config_.online_annotations;
}

std::optional<feedback::ClipPair> Run::lease_pair() {
    if (!human_mode()) {
        return std::nullopt;
    }
    return queue_.lease();
}

std::optional<env::Trajectory> Run::rollout(std::uint64_t id) const {
    std::lock_guard lock(mutex_);
    const auto it = state_.rollouts.find(id);
    if (it == state_.rollouts.end()) {
        return std::nullopt;
    }
    return it->second;
}

Run::Submit Run::submit_rating(std::uint64_t pair_id, int rating) {
    if (rating < 1 || rating > 5) {
        return Submit::BadRating;
    }
    const auto pair = queue_.outstanding_pair(pair_id);
    if (!pair || queue_.complete(pair_id) != feedback::PairQueue::Completion::Accepted) {
        return Submit::Gone;
    }
    accept_record({*pair, rating, feedback::RaterSource::Human, feedback::wall_clock()});
    return Submit::Accepted;
}

void Run::accept_record(const feedback::AnnotationRecord& rec) {
    std::lock_guard lock(mutex_);
    if (rated_ids_.count(rec.pair.pair_id) != 0) {
        return;
    }
    const auto it = state_.rollouts.find(rec.pair.agent_rollout_id);
    if (it == state_.rollouts.end()) {
        throw std::logic_error("rating for unregistered rollout " + std::to_string(rec.pair.agent_rollout_id));
    }
    auto samples = feedback::expand(demo_, it->second, rec);
    store_->append(rec);
    state_.records.push_back(rec);
    state_.dataset.insert(state_.dataset.end(), samples.begin(), samples.end());
    if (rec.pair.pair_id < config_.pretrain_annotations) {
        ++state_.pretrain_done;
    } else {
        ++state_.online_done;
    }
    rated_ids_.insert(rec.pair.pair_id);
    cv_.notify_all();
}

void Run::rate_pending(std::vector<feedback::PendingClip> pending, bool online) {
    std::vector<std::uint64_t> ids;
    {
        std::lock_guard lock(mutex_);
        for (auto& p : pending) {
            ids.push_back(p.pair.pair_id);
            state_.rollouts.emplace(p.pair.agent_rollout_id, std::move(p.rollout));
        }
    }
    const bool inline_oracle = config_.rater == RaterKind::Oracle && !(online && config_.mode == Mode::Async);
    if (inline_oracle) {
        for (const auto& p : pending) {
            const auto traj = rollout(p.pair.agent_rollout_id);
            const int r = feedback::oracle_rate_pair(demo_, *traj, p.pair, config_.oracle);
            accept_record({p.pair, r, feedback::RaterSource::Oracle, feedback::wall_clock()});
        }
        return;
    }
    for (const auto& p : pending) {
        queue_.push(p.pair);
    }
    if (online && config_.mode == Mode::Async) {
        return;
    }
    std::unique_lock lock(mutex_);
    waiting_ = true;
    cv_.wait(lock, [&] {
        return stop_ || std::all_of(ids.begin(), ids.end(), [&](std::uint64_t id) { return rated_ids_.count(id) != 0; });
    });
    waiting_ = false;
}

void Run::pretrain() {
    {
        std::lock_guard lock(mutex_);
        phase_ = "pretrain";
    }
    const std::size_t n = config_.pretrain_annotations;
    if (n == 0) {
        return;
    }
    const std::uint64_t first_id = snapshot().next_id;
    auto pending = feedback::pretrain_pairs(demo_, config_.env, n, derive_seed(config_.seed, kTagPretrainPairs),
                                            config_.clip_length, first_id);
    {
        std::lock_guard lock(mutex_);
        state_.next_id = first_id + n;
    }
    rate_pending(std::move(pending), false);
    if (stop_) {
        return;
    }

    const RunState s = snapshot();
    const std::uint64_t train_seed = derive_seed(config_.seed, kTagPretrainTrain);
    simpred::SimilarityPredictor trained;
    if (config_.init_predictor) {
        trained = simpred::fine_tune(s.predictor, s.dataset, config_.sgd, config_.pretrain_epochs, train_seed);
    } else {
        // Validation holds out whole clips so per-step samples of one clip never straddle the split.
        std::vector<std::size_t> clips(s.records.size());
        std::iota(clips.begin(), clips.end(), std::size_t{0});
        Rng rng(derive_seed(config_.seed, kTagSplit));
        std::shuffle(clips.begin(), clips.end(), rng);
        const auto n_val = static_cast<std::size_t>(std::floor(config_.validation_fraction * clips.size()));
        std::vector<bool> is_val(clips.size(), false);
        for (std::size_t i = 0; i < n_val; ++i) {
            is_val[clips[i]] = true;
        }
        simpred::Dataset train_set;
        simpred::Dataset val_set;
        std::size_t offset = 0;
        for (std::size_t c = 0; c < s.records.size(); ++c) {
            const std::size_t len = s.records[c].pair.length;
            auto& dst = is_val[c] ? val_set : train_set;
            dst.insert(dst.end(), s.dataset.begin() + offset, s.dataset.begin() + offset + len);
            offset += len;
        }
        trained = simpred::train(s.predictor, train_set, val_set, config_.variant, config_.sgd,
                                 config_.pretrain_epochs, train_seed)
                      .predictor;
    }
    {
        std::lock_guard lock(mutex_);
        state_.predictor = std::move(trained);
        state_.predictor_version += 1;
        published_ = std::make_shared<const simpred::SimilarityPredictor>(state_.predictor);
        published_version_ = state_.predictor_version;
        trained_records_ = s.records.size();
    }
    maybe_checkpoint(true);
}

std::vector<feedback::PendingClip> Run::online_pairs(const std::vector<env::Trajectory>& fresh, std::size_t count) {
    std::vector<feedback::PendingClip> out;
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t id = state_.next_id++;
        const env::Trajectory& traj = fresh[i % fresh.size()];
        feedback::ClipPair pair =
            feedback::sample_clip_pair(demo_, traj, config_.clip_length, derive_seed(config_.seed, kTagOnlinePair, id));
        pair.pair_id = id;
        pair.agent_rollout_id = id;
        out.push_back({pair, traj});
    }
    return out;
}

void Run::rl_update() {
    std::shared_ptr<const simpred::SimilarityPredictor> pred;
    std::uint64_t version = 0;
    trpo::GaussianPolicy policy;
    trpo::ValueFunction value;
    std::size_t u = 0;
    {
        std::lock_guard lock(mutex_);
        pred = published_;
        version = published_version_;
        policy = state_.policy;
        value = state_.value;
        u = state_.rl_updates;
    }
    const simpred::DemoRewardModel model(pred, demo_);
    const env::RewardFn reward = [&model](std::size_t t, const env::EnvState& s, const env::EnvAction& a) {
        return model.reward(t, s, a);
    };
    auto collected = trpo::collect_batch(policy, value, config_.env, reward, demo_.size(), config_.trpo,
                                         derive_seed(config_.seed, kTagCollect, u));
    const auto stats =
        trpo::trpo_update(policy, value, collected.batch, config_.trpo, derive_seed(config_.seed, kTagUpdate, u));
    const MetricsRow row{u + 1, stats.mean_reward, stats.kl, stats.surrogate_improvement, stats.backtracks, version};
    std::size_t issued = 0;
    {
        std::lock_guard lock(mutex_);
        state_.policy = std::move(policy);
        state_.value = std::move(value);
        state_.metrics.push_back(row);
        state_.rl_updates = u + 1;
        issued = static_cast<std::size_t>(state_.next_id) - config_.pretrain_annotations;
    }
    append_metrics(row);
    const std::size_t remaining = config_.online_annotations - std::min(config_.online_annotations, issued);
    const std::size_t k = std::min(config_.pairs_per_update, remaining);
    if (k > 0) {
        rate_pending(online_pairs(collected.trajectories, k), true);
    }
}

void Run::refresh_predictor(const simpred::Dataset& data, std::size_t n_records) {
    simpred::SimilarityPredictor current;
    std::uint64_t next_version = 0;
    {
        std::lock_guard lock(mutex_);
        current = state_.predictor;
        next_version = state_.predictor_version + 1;
    }
    const std::uint64_t seed = derive_seed(config_.seed, kTagRefresh, next_version);
    simpred::SimilarityPredictor refreshed =
        config_.init_predictor
            ? simpred::fine_tune(current, data, config_.sgd, config_.refresh_epochs, seed)
            : simpred::train(current, data, {}, config_.variant, config_.sgd, config_.refresh_epochs, seed).predictor;
    std::lock_guard lock(mutex_);
    state_.predictor = std::move(refreshed);
    state_.predictor_version = next_version;
    published_ = std::make_shared<const simpred::SimilarityPredictor>(state_.predictor);
    published_version_ = next_version;
    trained_records_ = n_records;
}

void Run::maybe_checkpoint(bool force) {
    const RunState s = snapshot();
    if (force || (config_.checkpoint_every > 0 && s.rl_updates % config_.checkpoint_every == 0)) {
        checkpoint(s, config_.run_dir);
    }
}

void Run::run_sync() {
    while (!stop_ && !budget_done()) {
        rl_update();
        simpred::Dataset data;
        std::size_t n_records = 0;
        {
            std::lock_guard lock(mutex_);
            n_records = state_.records.size();
            if (n_records > trained_records_) {
                data = state_.dataset;
            }
        }
        if (!data.empty()) {
            refresh_predictor(data, n_records);
        }
        maybe_checkpoint(false);
    }
}

void Run::run_async() {
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto guard = [&](auto&& body) {
        return [&, body] {
            try {
                body();
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
                request_stop();
            }
        };
    };
    bool rl_done = false;

    std::thread rl(guard([&] {
        while (!stop_ && !budget_done()) {
            rl_update();
            maybe_checkpoint(false);
        }
        {
            std::lock_guard lock(mutex_);
            rl_done = true;
        }
        queue_.close();
        cv_.notify_all();
    }));

    std::thread rater;
    if (config_.rater == RaterKind::Oracle) {
        rater = std::thread(guard([&] {
            while (auto pair = queue_.wait_lease()) {
                const auto traj = rollout(pair->agent_rollout_id);
                const int r = feedback::oracle_rate_pair(demo_, *traj, *pair, config_.oracle);
                if (queue_.complete(pair->pair_id) == feedback::PairQueue::Completion::Accepted) {
                    accept_record({*pair, r, feedback::RaterSource::Oracle, feedback::wall_clock()});
                }
            }
        }));
    }

    std::thread trainer(guard([&] {
        for (;;) {
            simpred::Dataset data;
            std::size_t n_records = 0;
            {
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || rl_done || state_.records.size() > trained_records_; });
                if (state_.records.size() > trained_records_ && !stop_) {
                    data = state_.dataset;
                    n_records = state_.records.size();
                } else {
                    return;
                }
            }
            refresh_predictor(data, n_records);
        }
    }));

    rl.join();
    if (rater.joinable()) {
        rater.join();
    }
    trainer.join();
    if (failure) {
        std::rethrow_exception(failure);
    }
}

RunState Run::execute() {
    try {
        if (!resumed_) {
            pretrain();
        }
        {
            std::lock_guard lock(mutex_);
            phase_ = "online";
        }
        if (!stop_) {
            if (config_.mode == Mode::Sync) {
                run_sync();
            } else {
                run_async();
            }
        }
        maybe_checkpoint(true);
        std::lock_guard lock(mutex_);
        phase_ = "done";
    } catch (...) {
        std::lock_guard lock(mutex_);
        phase_ = "failed";
        throw;
    }
    return snapshot();
}

RunState run(const RunConfig& config) {
    Run r(config);
    return r.execute();
}

ImitationScore score_trajectory(const render::DemoVideo& demo, const env::Trajectory& traj,
                                const feedback::OracleConfig& cfg) {
    if (!demo.has_states()) {
        throw feedback::OracleUnavailable();
    }
    const std::size_t n = std::min(demo.size(), traj.length());
    if (n == 0) {
        throw std::invalid_argument("score_trajectory: empty trajectory");
    }
    std::vector<env::EnvState> agent(n);
    double rating = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        agent[t] = traj.steps[t].state;
        rating += feedback::oracle_rate(std::span(&demo.states[t], 1), std::span(&agent[t], 1), cfg);
    }
    const auto curve = env::state_mse_curve(std::span(demo.states.data(), n), agent);
    ImitationScore s;
    s.mean_rating = rating / static_cast<double>(n);
    s.mean_mse = std::accumulate(curve.begin(), curve.end(), 0.0) / static_cast<double>(n);
    s.backflips = env::count_backflips(traj);
    return s;
}

env::Trajectory greedy_trajectory(const trpo::GaussianPolicy& policy, const env::EnvParams& params,
                                  std::size_t n_steps, std::uint64_t seed) {
    const auto no_reward = [](std::size_t, const env::EnvState&, const env::EnvAction&) { return 0.0; };
    return env::rollout(policy.as_env_policy(true), params, no_reward, n_steps, seed).trajectory;
}

ImitationScore random_baseline(const render::DemoVideo& demo, const env::EnvParams& params,
                               const feedback::OracleConfig& cfg, std::size_t n_rollouts, std::uint64_t seed) {
    if (n_rollouts == 0) {
        throw std::invalid_argument("random_baseline: n_rollouts must be >= 1");
    }
    const auto no_reward = [](std::size_t, const env::EnvState&, const env::EnvAction&) { return 0.0; };
    ImitationScore total;
    for (std::size_t i = 0; i < n_rollouts; ++i) {
        const std::uint64_t s = derive_seed(seed, 0x4a11, i);
        const auto traj = env::rollout(feedback::random_action_policy(s), params, no_reward, demo.size(), s).trajectory;
        const auto one = score_trajectory(demo, traj, cfg);
        total.mean_rating += one.mean_rating;
        total.mean_mse += one.mean_mse;
        total.backflips += one.backflips;
    }
    const double n = static_cast<double>(n_rollouts);
    total.mean_rating /= n;
    total.mean_mse /= n;
    total.backflips /= n;
    return total;
}

std::string_view to_string(Task t) {
    return t == Task::Backflip ? "backflip" : "hop";
}

Task task_from_string(std::string_view s) {
    if (s == "backflip") {
        return Task::Backflip;
    }
    if (s == "hop") {
        return Task::Hop;
    }
    throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected backflip or hop)");
}

env::RewardFn task_reward(Task t, const env::EnvParams& params) {
    return t == Task::Backflip ? env::backflip_reward_fn(params) : env::hop_reward_fn(params);
}

GeneratedDemo generate_demo(Task task, std::size_t steps, std::size_t updates, std::uint64_t seed,
                            const env::EnvParams& params) {
    if (steps == 0) {
        throw std::invalid_argument("generate_demo: steps must be >= 1");
    }
    if (updates == 0) {
        throw std::invalid_argument("generate_demo: updates must be >= 1");
    }
    const trpo::TrpoConfig cfg;
    auto policy = trpo::GaussianPolicy::hopper(derive_seed(seed, 11), -0.5);
    // Hand-coded returns run to the thousands; a larger scale keeps value targets near unit size.
    auto value = trpo::ValueFunction::hopper(derive_seed(seed, 12), 50.0);
    const auto reward = task_reward(task, params);
    GeneratedDemo best;
    best.reward = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < updates; ++u) {
        const auto batch = trpo::collect_batch(policy, value, params, reward, steps, cfg, derive_seed(seed, 1, u));
        trpo::trpo_update(policy, value, batch.batch, cfg, derive_seed(seed, 2, u));
        auto greedy = env::rollout(policy.as_env_policy(true), params, reward, steps, derive_seed(seed, 3, u));
        const double total = std::accumulate(greedy.rewards.begin(), greedy.rewards.end(), 0.0);
        if (total > best.reward) {
            best.reward = total;
            best.trajectory = std::move(greedy.trajectory);
        }
    }
    best.demo = render::demo_from_trajectory(best.trajectory);
    best.backflips = env::count_backflips(best.trajectory);
    return best;
}

std::vector<simpred::Dataset> split_clips(const std::vector<feedback::AnnotationRecord>& records,
                                          const simpred::Dataset& data, const std::vector<std::size_t>& counts,
                                          std::uint64_t seed) {
    const std::size_t needed = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (needed > records.size()) {
        throw std::invalid_argument("split needs " + std::to_string(needed) + " annotated clips, have " +
                                    std::to_string(records.size()));
    }
    std::vector<std::size_t> offsets(records.size());
    std::size_t offset = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        offsets[i] = offset;
        offset += records[i].pair.length;
    }
    if (offset != data.size()) {
        throw std::invalid_argument("split: records cover " + std::to_string(offset) + " samples, dataset has " +
                                    std::to_string(data.size()));
    }
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, kTagSplit));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<simpred::Dataset> parts(counts.size());
    std::size_t next = 0;
    for (std::size_t p = 0; p < counts.size(); ++p) {
        for (std::size_t k = 0; k < counts[p]; ++k, ++next) {
            const std::size_t c = order[next];
            const auto first = data.begin() + static_cast<std::ptrdiff_t>(offsets[c]);
            parts[p].insert(parts[p].end(), first, first + static_cast<std::ptrdiff_t>(records[c].pair.length));
        }
    }
    return parts;
}

std::vector<VariantRow> compare_variants(const simpred::Dataset& train, const simpred::Dataset& val,
                                         const simpred::Dataset& test, std::span<const env::EnvState> scaling_states,
                                         std::size_t n_seeds, const nn::SgdConfig& sgd, int epochs,
                                         std::uint64_t seed) {
    if (n_seeds == 0) {
        throw std::invalid_argument("compare_variants: need at least one seed");
    }
    if (train.empty() || val.empty() || test.empty()) {
        throw std::invalid_argument("compare_variants: train, validation and test sets must be non-empty");
    }
    std::vector<VariantRow> rows;
    for (const auto variant : simpred::kAllVariants) {
        VariantRow row;
        row.variant = variant;
        for (std::size_t k = 0; k < n_seeds; ++k) {
            const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(variant) + 1, k);
            auto pred = simpred::SimilarityPredictor::create(variant, derive_seed(s, kTagPredictorInit));
            if (!scaling_states.empty()) {
                simpred::fit_observation_scaling(pred, scaling_states);
            }
            const auto trained = simpred::train(pred, train, val, variant, sgd, epochs, s).predictor;
            const auto v = simpred::evaluate(trained, val);
            const auto t = simpred::evaluate(trained, test);
            row.val_accuracy += v.accuracy;
            row.test_accuracy += t.accuracy;
            row.f1_345 += t.f1_345;
            row.f1_45 += t.f1_45;
        }
        const double n = static_cast<double>(n_seeds);
        row.val_accuracy /= n;
        row.test_accuracy /= n;
        row.f1_345 /= n;
        row.f1_45 /= n;
        rows.push_back(row);
    }
    return rows;
}

std::string format_variants_report(const std::vector<VariantRow>& rows, std::size_t n_seeds) {
    std::string out = "# mean of " + std::to_string(n_seeds) + " runs\nvariant,val_acc,test_acc,f1_345,f1_45\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.4f\n", std::string(simpred::to_string(r.variant)).c_str(),
                      r.val_accuracy, r.test_accuracy, r.f1_345, r.f1_45);
        out += buf;
    }
    return out;
}

}  // namespace mimic::orchestrator
