// Acceptance checks A1-A7. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Long-running: A5 trains three full runs.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "mimic/cli.hpp"
#include "mimic/orchestrator.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mimic;
namespace orch = mimic::orchestrator;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

fs::path g_work;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

fs::path fresh(const std::string& name) {
    const fs::path p = g_work / name;
    fs::remove_all(p);
    return p;
}

// Demos come from the gen-demo command itself.
fs::path make_demo(const std::string& task, std::uint64_t seed) {
    const fs::path out = g_work / (task + "_demo_" + std::to_string(seed) + ".vdm");
    if (fs::exists(out)) {
        return out;
    }
    std::ostringstream o;
    std::ostringstream e;
    const int code = cli::run({"mimic", "gen-demo", "--task", task, "--out", out.string(), "--seed", std::to_string(seed)},
                              o, e);
    if (code != 0) {
        throw std::runtime_error("gen-demo failed: " + e.str());
    }
    std::cerr << "  gen-demo " << task << " seed " << seed << ": " << o.str();
    return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- A1

// Worst relative error over the sampled coordinates of [begin, end).
testing::GradCheck check_block(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& analytic, Eigen::Index begin, Eigen::Index end, std::size_t k,
                               std::uint64_t seed) {
    auto coords = testing::sample_coords(end - begin, k, seed);
    for (auto& c : coords) {
        c += begin;
    }
    return testing::check_gradient(f, x, analytic, coords);
}

Verdict a1() {
    const double tol = 1e-4;
    std::vector<std::pair<std::string, double>> worst;

    // Predictor: loss over a few samples, checked per branch and head, for both head shapes.
    env::Trajectory t;
    env::EnvState s = env::reset(3);
    Rng rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 8; ++i) {
        const env::EnvAction a{u(rng), u(rng)};
        t.steps.push_back({s, a});
        s = env::step(s, a, {});
    }
    const auto demo = render::demo_from_trajectory(t);
    simpred::Dataset samples;
    for (int i = 0; i < 8; ++i) {
        samples.push_back({demo.frames[static_cast<std::size_t>(i)],
                           simpred::Observation::from(t.steps[static_cast<std::size_t>(7 - i)].state,
                                                      t.steps[static_cast<std::size_t>(7 - i)].action),
                           1 + i % 5});
    }
    for (const auto variant : {simpred::TrainVariant::RandomSampling, simpred::TrainVariant::AdditionalLayer}) {
        auto pred = simpred::SimilarityPredictor::create(variant, 17);
        simpred::fit_observation_scaling(pred, demo.states);
        const std::array<double, 5> w{1.0, 0.5, 2.0, 1.5, 0.8};
        const auto lg = simpred::loss_gradient(pred, samples, w);
        const Eigen::VectorXd theta = simpred::flat_parameters(pred);
        const auto f = [&](const Eigen::VectorXd& p) {
            auto probe = pred;
            simpred::set_flat_parameters(probe, p);
            return simpred::loss_gradient(probe, samples, w).loss;
        };
        const Eigen::Index nv = pred.visual.parameter_count();
        const Eigen::Index ns = pred.standard.parameter_count();
        const std::string tag(simpred::to_string(variant));
        worst.emplace_back("visual/" + tag, check_block(f, theta, lg.grad, 0, nv, 300, 1).max_rel_error);
        worst.emplace_back("standard/" + tag, check_block(f, theta, lg.grad, nv, nv + ns, 300, 2).max_rel_error);
        worst.emplace_back("head/" + tag, check_block(f, theta, lg.grad, nv + ns, theta.size(), 300, 3).max_rel_error);
    }

    // Policy: the surrogate objective, all log_std coordinates included.
    {
        const auto policy = trpo::GaussianPolicy::hopper(7, -0.5);
        const auto value = trpo::ValueFunction::hopper(8, 50.0);
        trpo::TrpoConfig cfg;
        cfg.steps_per_update = 240;
        const auto cb = trpo::collect_batch(policy, value, {}, env::backflip_reward_fn({}), 240, cfg, 9);
        const Eigen::VectorXd theta = policy.flat_parameters();
        const Eigen::VectorXd g = trpo::surrogate_gradient(policy, cb.batch);
        const auto f = [&](const Eigen::VectorXd& p) {
            auto probe = policy;
            probe.set_flat_parameters(p);
            return trpo::surrogate(probe, cb.batch);
        };
        const Eigen::Index nm = policy.mean_net.parameter_count();
        const double mean_err = check_block(f, theta, g, 0, nm, 500, 4).max_rel_error;
        const double std_err = check_block(f, theta, g, nm, theta.size(), 10, 5).max_rel_error;
        worst.emplace_back("policy", std::max(mean_err, std_err));
    }

    // Value: squared-error regression through the value net.
    {
        const auto value = trpo::ValueFunction::hopper(10, 50.0);
        const nn::MatrixXd x = nn::MatrixXd::Random(env::kStateDim, 32);
        const nn::VectorXd y = nn::VectorXd::Random(32);
        const auto loss = [&](const nn::DenseNet& net) {
            const nn::VectorXd pred = nn::forward(net, x).row(0).transpose();
            return 0.5 * (pred - y).squaredNorm() / 32.0;
        };
        nn::ForwardCache cache;
        const nn::MatrixXd out = nn::forward(value.net, x, &cache);
        const nn::MatrixXd up = (out.row(0).transpose() - y).transpose() / 32.0;
        const Eigen::VectorXd g = nn::backward(value.net, cache, up).flat();
        const Eigen::VectorXd theta = value.net.flat_parameters();
        const auto f = [&](const Eigen::VectorXd& p) {
            auto probe = value.net;
            probe.set_flat_parameters(p);
            return loss(probe);
        };
        worst.emplace_back("value", check_block(f, theta, g, 0, theta.size(), 1000, 6).max_rel_error);
    }

    bool pass = true;
    std::string detail = "max rel error:";
    for (const auto& [name, err] : worst) {
        pass = pass && err < tol;
        detail += fmt(" %s=%.1e", name.c_str(), err);
    }
    return {pass, detail};
}

// ---------------------------------------------------------------- A5 / A2 shared runs

struct A5Seed {
    fs::path demo_path;
    fs::path run_dir;
    orch::ImitationScore trained;
    orch::ImitationScore random;
    std::vector<orch::MetricsRow> metrics;
    double seconds = 0.0;
};

std::map<std::uint64_t, A5Seed> g_a5;

// With the oracle's own per-step rating as the reward, TRPO needs 100-180
// updates to clear the +1.5 margin on this task; at 60 updates even that
// perfect reward falls short. Runs use this budget for both A5 and A6.
constexpr std::size_t kRlUpdates = 200;

const A5Seed& a5_run(std::uint64_t seed) {
    if (const auto it = g_a5.find(seed); it != g_a5.end()) {
        return it->second;
    }
    const auto t0 = std::chrono::steady_clock::now();
    A5Seed r;
    r.demo_path = make_demo("backflip", seed);
    r.run_dir = fresh("a5_run_" + std::to_string(seed));
    orch::RunConfig c;  // 200 pretrain + 150 online annotations
    c.demo_path = r.demo_path;
    c.run_dir = r.run_dir;
    c.seed = seed;
    c.n_updates = kRlUpdates;
    const auto state = orch::run(c);
    const auto demo = render::read_demo(r.demo_path);
    const env::EnvParams params;
    r.trained = orch::score_trajectory(demo, orch::greedy_trajectory(state.policy, params, demo.size(), 777));
    r.random = orch::random_baseline(demo, params, {}, 10, 777);
    r.metrics = state.metrics;
    r.seconds = seconds_since(t0);
    std::cerr << fmt("  A5 seed %llu: rating %.3f (random %.3f) mse %.2f (random %.2f) flips %.0f, %zu annotations, %.0fs\n",
                     static_cast<unsigned long long>(seed), r.trained.mean_rating, r.random.mean_rating,
                     r.trained.mean_mse, r.random.mean_mse, r.trained.backflips, state.records.size(), r.seconds);
    return g_a5.emplace(seed, std::move(r)).first->second;
}

// ---------------------------------------------------------------- A2

Verdict a2() {
    // TRPO contracts on every update of a full oracle run.
    const auto& run = a5_run(kSeeds[0]);
    std::size_t accepted = 0;
    double max_kl = 0.0;
    double min_improvement = std::numeric_limits<double>::infinity();
    bool contracts = run.metrics.size() >= 60;
    for (const auto& m : run.metrics) {
        const bool was_accepted = m.kl > 0.0 || m.surrogate_improvement != 0.0;
        if (!was_accepted) {
            continue;
        }
        ++accepted;
        max_kl = std::max(max_kl, m.kl);
        min_improvement = std::min(min_improvement, m.surrogate_improvement);
        contracts = contracts && m.kl <= 0.01 && m.surrogate_improvement > 0.0;
    }

    // CG against a dense solve on random SPD systems.
    double worst_residual = 0.0;
    double worst_agreement = 0.0;
    for (const Eigen::Index n : {5, 20, 60, 120}) {
        for (std::uint64_t s = 0; s < 5; ++s) {
            Rng rng(derive_seed(0xc9, static_cast<std::uint64_t>(n), s));
            std::normal_distribution<double> nd(0.0, 1.0);
            nn::MatrixXd m(n, n);
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = nd(rng);
            }
            const nn::MatrixXd a = m * m.transpose() / static_cast<double>(n) + 0.1 * nn::MatrixXd::Identity(n, n);
            nn::VectorXd b(n);
            for (auto& v : b) {
                v = nd(rng);
            }
            const auto cg = trpo::conjugate_gradient([&](const nn::VectorXd& v) { return nn::VectorXd(a * v); }, b,
                                                     static_cast<int>(4 * n), 1e-12 * b.norm());
            const nn::VectorXd exact = a.ldlt().solve(b);
            worst_residual = std::max(worst_residual, (b - a * cg.x).norm() / b.norm());
            worst_agreement = std::max(worst_agreement, (cg.x - exact).norm() / exact.norm());
        }
    }
    const bool cg_ok = worst_residual < 1e-8 && worst_agreement < 1e-6;
    return {contracts && cg_ok && accepted > 0,
            fmt("%zu updates, %zu accepted, max KL %.5f, min improvement %.2e; CG residual %.1e, dense agreement %.1e",
                run.metrics.size(), accepted, max_kl, min_improvement, worst_residual, worst_agreement)};
}

// ---------------------------------------------------------------- A3

double majority_fraction(const simpred::Dataset& d) {
    std::array<std::size_t, 5> c{};
    for (const auto& s : d) {
        ++c[static_cast<std::size_t>(s.rating - 1)];
    }
    return static_cast<double>(*std::max_element(c.begin(), c.end())) / static_cast<double>(d.size());
}

struct Learnability {
    std::size_t samples = 0;
    double accuracy = 0.0;
    double majority = 0.0;
};

Learnability learnability(const fs::path& demo_path) {
    const auto demo = render::read_demo(demo_path);
    // 200 clips of 10 steps give the 2000 per-step samples.
    const auto col = feedback::pretrain_collect(demo, {}, 200, feedback::oracle_rater(demo), 0xa3, 10);
    const auto parts = orch::split_clips(col.records, col.samples, {140, 30, 30}, 0xa3);
    auto pred = simpred::SimilarityPredictor::create(simpred::TrainVariant::AdditionalLayer, 0xa3);
    simpred::fit_observation_scaling(pred, demo.states);
    const auto trained =
        simpred::train(pred, parts[0], parts[1], simpred::TrainVariant::AdditionalLayer, {}, 30, 0xa3).predictor;
    return {col.samples.size(), simpred::evaluate(trained, parts[2]).accuracy, majority_fraction(parts[2])};
}

Verdict a3() {
    // Judged on the backflip demo. When the majority class exceeds 0.85 the
    // bound is above 1 and cannot be met; the hop demo is reported alongside
    // for context only.
    const auto bf = learnability(make_demo("backflip", kSeeds[0]));
    const auto hop = learnability(make_demo("hop", kSeeds[0]));
    std::string detail = fmt("backflip demo: %zu samples, test accuracy %.3f vs majority %.3f + 0.15", bf.samples,
                             bf.accuracy, bf.majority);
    if (bf.majority + 0.15 > 1.0) {
        detail += " (bound exceeds 1, unreachable)";
    }
    detail += fmt("; hop demo, not judged: accuracy %.3f vs majority %.3f", hop.accuracy, hop.majority);
    return {bf.accuracy >= bf.majority + 0.15, detail};
}

// ---------------------------------------------------------------- A4

Verdict a4() {
    const auto demo = render::read_demo(make_demo("backflip", kSeeds[0]));
    const auto col = feedback::pretrain_collect(demo, {}, 400, feedback::oracle_rater(demo), 0xa4);
    const auto parts = orch::split_clips(col.records, col.samples, {200, 100, 100}, 0xa4);
    std::size_t ones = 0;
    for (const auto& s : col.samples) {
        ones += s.rating == 1;
    }
    const double skew = static_cast<double>(ones) / static_cast<double>(col.samples.size());
    const auto rows = orch::compare_variants(parts[0], parts[1], parts[2], demo.states, 2, {}, 30, 0xa4);
    std::cerr << orch::format_variants_report(rows, 2);
    double equal = 0.0;
    double random = 0.0;
    for (const auto& r : rows) {
        if (r.variant == simpred::TrainVariant::SamplingEqually) {
            equal = r.f1_45;
        } else if (r.variant == simpred::TrainVariant::RandomSampling) {
            random = r.f1_45;
        }
    }
    return {skew > 0.4 && equal >= random,
            fmt("class-1 fraction %.3f; F1-4,5 SamplingEqually %.4f vs RandomSampling %.4f", skew, equal, random)};
}

// ---------------------------------------------------------------- A5

Verdict a5() {
    int passes = 0;
    std::string detail;
    for (const auto seed : kSeeds) {
        const auto& r = a5_run(seed);
        const bool a = r.trained.mean_rating >= r.random.mean_rating + 1.5;
        const bool b = r.trained.mean_mse <= 0.5 * r.random.mean_mse;
        const bool c = r.trained.backflips >= 1.0;
        passes += a && b && c;
        detail += fmt(" seed %llu: (a) %.2f vs %.2f+1.5 %s, (b) mse %.1f vs %.1f %s, (c) flips %.0f %s;",
                      static_cast<unsigned long long>(seed), r.trained.mean_rating, r.random.mean_rating,
                      a ? "ok" : "MISS", r.trained.mean_mse, 0.5 * r.random.mean_mse, b ? "ok" : "MISS",
                      r.trained.backflips, c ? "ok" : "MISS");
    }
    return {passes >= 2, fmt("%d/3 seeds pass all of (a)-(c);", passes) + detail};
}

// ---------------------------------------------------------------- A6

Verdict a6() {
    int wins = 0;
    std::string detail;
    const env::EnvParams params;
    for (const auto seed : kSeeds) {
        const fs::path bf_predictor = orch::latest_predictor_dir(a5_run(seed).run_dir);
        const auto hop_path = make_demo("hop", seed);
        const auto demo = render::read_demo(hop_path);
        double score[2] = {0.0, 0.0};
        for (int tuned = 0; tuned < 2; ++tuned) {
            orch::RunConfig c;
            c.demo_path = hop_path;
            c.run_dir = fresh("a6_" + std::to_string(seed) + (tuned ? "_finetuned" : "_scratch"));
            c.seed = seed;
            c.pretrain_annotations = 30;
            c.online_annotations = 25;
            c.n_updates = kRlUpdates;
            if (tuned) {
                c.init_predictor = bf_predictor;
            }
            const auto state = orch::run(c);
            score[tuned] =
                orch::score_trajectory(demo, orch::greedy_trajectory(state.policy, params, demo.size(), 777)).mean_rating;
        }
        wins += score[1] >= score[0];
        detail += fmt(" seed %llu: fine-tuned %.3f vs scratch %.3f;", static_cast<unsigned long long>(seed), score[1],
                      score[0]);
    }
    return {wins >= 2, fmt("fine-tuned >= scratch on %d/3 seeds;", wins) + detail};
}

// ---------------------------------------------------------------- A7

Verdict a7() {
    const auto demo_path = make_demo("backflip", kSeeds[0]);
    orch::RunConfig c;
    c.demo_path = demo_path;
    c.pretrain_annotations = 20;
    c.online_annotations = 10;
    c.n_updates = 4;
    c.trpo.steps_per_update = 480;
    c.pretrain_epochs = 3;
    c.refresh_epochs = 1;
    c.checkpoint_every = 2;
    c.seed = 7;
    c.run_dir = fresh("a7_a");
    const auto first = orch::run(c);
    c.run_dir = fresh("a7_b");
    orch::run(c);
    const bool metrics_equal = io::read_file(g_work / "a7_a" / "metrics.csv") == io::read_file(g_work / "a7_b" / "metrics.csv");

    // Resume returns the final state; re-checkpointing it changes nothing.
    const auto resumed = orch::resume(g_work / "a7_a");
    const std::string manifest = io::read_file(g_work / "a7_a" / "state.json");
    const std::string rollouts = io::read_file(g_work / "a7_a" / "rollouts.bin");
    orch::checkpoint(resumed, g_work / "a7_a");
    const bool resume_ok = resumed == first && io::read_file(g_work / "a7_a" / "state.json") == manifest &&
                           io::read_file(g_work / "a7_a" / "rollouts.bin") == rollouts &&
                           orch::resume(g_work / "a7_a") == first;

    // Byte-exact file round trips.
    const std::string vdm = io::read_file(demo_path);
    const bool vdm_ok = render::encode_demo(render::decode_demo(vdm)) == vdm;
    bool vnn_ok = true;
    for (const auto* net : {&first.predictor.visual, &first.predictor.standard, &first.predictor.head,
                            &first.policy.mean_net, &first.value.net}) {
        std::stringstream out;
        nn::save_vnn(*net, out);
        std::stringstream in(out.str());
        const auto back = nn::load_vnn(in);
        std::stringstream again;
        nn::save_vnn(back, again);
        vnn_ok = vnn_ok && back == *net && again.str() == out.str();
    }
    return {metrics_equal && resume_ok && vdm_ok && vnn_ok,
            fmt("metrics.csv identical %s, resume exact %s, .vdm bit-exact %s, VNN1 bit-exact %s",
                metrics_equal ? "yes" : "no", resume_ok ? "yes" : "no", vdm_ok ? "yes" : "no", vnn_ok ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string work = (fs::temp_directory_path() / "mimic_acceptance").string();
    std::vector<std::string> only;
    app.add_option("--work-dir", work, "scratch directory for demos and runs");
    app.add_option("--only", only, "subset of criteria, e.g. --only A1 A7")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    g_work = work;
    fs::create_directories(g_work);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5}, {"A6", a6}, {"A7", a7}};
    const std::set<std::string> selected(only.begin(), only.end());
    bool all = true;
    for (const auto& [name, check] : criteria) {
        if (!selected.empty() && !selected.count(name)) {
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        all = all && v.pass;
        std::cout << name << " " << (v.pass ? "PASS" : "FAIL") << " (" << fmt("%.0fs", seconds_since(t0)) << ") "
                  << v.detail << std::endl;
    }
    return all ? 0 : 1;
}
