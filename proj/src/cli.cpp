#include "mimic/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <thread>

#include <CLI11.hpp>

#include "mimic/feedback.hpp"
#include "mimic/image.hpp"
#include "mimic/orchestrator.hpp"
#include "mimic/service.hpp"
#include "mimic/util.hpp"

namespace mimic::cli {

namespace fs = std::filesystem;
namespace orch = orchestrator;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) {
    g_interrupted = true;
}

// Installs SIGINT/SIGTERM handlers for the lifetime of a long-running command.
struct SignalScope {
    SignalScope() {
        g_interrupted = false;
        previous_int_ = std::signal(SIGINT, on_signal);
        previous_term_ = std::signal(SIGTERM, on_signal);
    }
    ~SignalScope() {
        std::signal(SIGINT, previous_int_);
        std::signal(SIGTERM, previous_term_);
    }
    void (*previous_int_)(int);
    void (*previous_term_)(int);
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// A predictor checkpoint directory, or a run directory whose latest predictor is meant.
fs::path resolve_predictor(const fs::path& p) {
    return fs::exists(p / "manifest.json") ? p : orch::latest_predictor_dir(p);
}

trpo::GaussianPolicy resolve_policy(const fs::path& p) {
    const fs::path dir = fs::exists(p / "policy.json") ? p : orch::latest_policy_dir(p);
    return trpo::load_policy(dir).first;
}

// Runs `run` to completion on a worker thread, forwarding interrupts as a stop request.
orch::RunState execute_interruptible(orch::Run& run) {
    SignalScope signals;
    std::exception_ptr failure;
    orch::RunState result;
    std::atomic<bool> finished{false};
    std::thread worker([&] {
        try {
            result = run.execute();
        } catch (...) {
            failure = std::current_exception();
        }
        finished = true;
    });
    while (!finished) {
        if (g_interrupted) {
            run.request_stop();
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    worker.join();
    if (failure) {
        std::rethrow_exception(failure);
    }
    return result;
}

void print_run_summary(const orch::RunState& s, const fs::path& run_dir, std::ostream& out) {
    out << "run_dir=" << run_dir.string() << " annotations=" << s.records.size()
        << " pretrain=" << s.pretrain_done << " online=" << s.online_done << " rl_updates=" << s.rl_updates
        << " predictor_version=" << s.predictor_version << "\n";
}

struct GenDemoArgs {
    std::string task;
    std::size_t steps = 240;
    std::size_t updates = 150;
    std::string out;
    std::uint64_t seed = 1;
};

int gen_demo(const GenDemoArgs& a, std::ostream& out) {
    const auto task = orch::task_from_string(a.task);
    const auto g = orch::generate_demo(task, a.steps, a.updates, a.seed);
    render::write_demo(g.demo, a.out);
    out << "reward=" << fmt(g.reward);
    if (task == orch::Task::Backflip) {
        out << " backflips=" << g.backflips;
    }
    out << " frames=" << g.demo.size() << " out=" << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string demo;
    std::string rater = "oracle";
    std::string run_dir;
    std::string mode = "sync";
    std::size_t pretrain = 200;
    std::size_t online = 150;
    std::size_t pairs_per_update = 5;
    std::size_t updates = 60;
    std::uint64_t seed = 1;
    std::string variant = "additional_layer";
    int pretrain_epochs = 30;
    int refresh_epochs = 10;
    std::string init_predictor;
    std::string host = "127.0.0.1";
    int port = 8080;
    bool resume = false;
};

orch::RunConfig train_config(const TrainArgs& a) {
    orch::RunConfig c;
    c.demo_path = a.demo;
    c.run_dir = a.run_dir;
    c.rater = orch::rater_from_string(a.rater);
    c.mode = orch::mode_from_string(a.mode);
    c.pretrain_annotations = a.pretrain;
    c.online_annotations = a.online;
    c.pairs_per_update = a.pairs_per_update;
    c.n_updates = a.updates;
    c.seed = a.seed;
    c.variant = simpred::variant_from_string(a.variant);
    c.pretrain_epochs = a.pretrain_epochs;
    c.refresh_epochs = a.refresh_epochs;
    if (!a.init_predictor.empty()) {
        c.init_predictor = resolve_predictor(a.init_predictor);
    }
    c.validate();
    return c;
}

int train(const TrainArgs& a, std::ostream& out) {
    std::unique_ptr<orch::Run> run;
    if (a.resume) {
        run = orch::Run::resume_from(a.run_dir);
    } else {
        run = std::make_unique<orch::Run>(train_config(a));
    }
    std::unique_ptr<service::ServiceCore> core;
    std::unique_ptr<service::Server> server;
    if (run->human_mode()) {
        core = std::make_unique<service::ServiceCore>(*run);
        server = std::make_unique<service::Server>(*core);
        const int port = server->start(a.host, a.port);
        out << "serving http://" << a.host << ":" << port << "/" << std::endl;
    }
    const auto state = execute_interruptible(*run);
    if (server) {
        server->stop();
    }
    print_run_summary(state, a.run_dir, out);
    return 0;
}

struct EvalArgs {
    std::string policy;
    std::string traj;
    bool random = false;
    std::string demo;
    std::string metric;
    std::size_t steps = 0;
    std::uint64_t seed = 777;
    std::string traj_out;
};

int eval(const EvalArgs& a, std::ostream& out) {
    const int sources = !a.policy.empty() + !a.traj.empty() + a.random;
    if (sources != 1) {
        throw std::invalid_argument("eval needs exactly one of --policy, --traj, --random");
    }
    render::DemoVideo demo;
    if (!a.demo.empty()) {
        demo = render::read_demo(a.demo);
    }
    const bool needs_states = a.metric == "oracle-rating" || a.metric == "mse";
    if (needs_states) {
        if (a.demo.empty()) {
            throw std::invalid_argument("metric " + a.metric + " needs --demo");
        }
        if (!demo.has_states()) {
            throw std::invalid_argument("metric " + a.metric + " is incompatible with a frames-only demo");
        }
    }
    const std::size_t steps = a.steps > 0 ? a.steps : (demo.size() > 0 ? demo.size() : 240);
    const env::EnvParams params;

    env::Trajectory traj;
    if (!a.traj.empty()) {
        const auto stored = render::read_demo(a.traj);
        if (!stored.has_states()) {
            throw std::invalid_argument("trajectory " + a.traj + " has no states");
        }
        for (std::size_t t = 0; t < stored.size(); ++t) {
            traj.steps.push_back({stored.states[t], stored.actions[t]});
        }
    } else if (a.random) {
        const auto none = [](std::size_t, const env::EnvState&, const env::EnvAction&) { return 0.0; };
        traj = env::rollout(feedback::random_action_policy(a.seed), params, none, steps, a.seed).trajectory;
    } else {
        traj = orch::greedy_trajectory(resolve_policy(a.policy), params, steps, a.seed);
    }
    if (!a.traj_out.empty()) {
        render::write_demo(render::demo_from_trajectory(traj), a.traj_out);
    }

    if (a.metric == "backflip-reward" || a.metric == "hop-reward") {
        const auto reward = a.metric == "backflip-reward" ? env::backflip_reward_fn(params) : env::hop_reward_fn(params);
        double total = 0.0;
        for (std::size_t t = 0; t < traj.length(); ++t) {
            total += reward(t, traj.steps[t].state, traj.steps[t].action);
        }
        out << a.metric << "," << fmt(total) << "\n";
    } else if (a.metric == "oracle-rating") {
        const auto score = orch::score_trajectory(demo, traj);
        out << "oracle-rating," << fmt(score.mean_rating) << "\n";
    } else {
        const std::size_t n = std::min(demo.size(), traj.length());
        std::vector<env::EnvState> agent(n);
        for (std::size_t t = 0; t < n; ++t) {
            agent[t] = traj.steps[t].state;
        }
        const auto curve = env::state_mse_curve(std::span(demo.states.data(), n), agent);
        out << "t,mse\n";
        for (std::size_t t = 0; t < n; ++t) {
            out << t << "," << fmt(curve[t]) << "\n";
        }
    }
    return 0;
}

int serve(const std::string& run_dir, const std::string& host, int port, std::ostream& out) {
    auto run = orch::Run::resume_from(run_dir);
    service::ServiceCore core(*run);
    service::Server server(core);
    const int bound = server.start(host, port);
    out << "serving http://" << host << ":" << bound << "/" << std::endl;
    SignalScope signals;
    std::exception_ptr failure;
    std::thread worker([&] {
        try {
            run->execute();
        } catch (...) {
            failure = std::current_exception();
        }
    });
    while (!g_interrupted) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    run->request_stop();
    worker.join();
    server.stop();
    if (failure) {
        std::rethrow_exception(failure);
    }
    return 0;
}

int export_video(const std::string& traj_path, const std::string& out_dir, std::ostream& out) {
    const auto video = render::read_demo(traj_path);
    fs::create_directories(out_dir);
    for (std::size_t t = 0; t < video.size(); ++t) {
        const auto frame = video.has_states() ? render::rasterize(video.states[t]) : video.frames[t];
        char name[32];
        std::snprintf(name, sizeof name, "frame_%05zu.png", t);
        io::write_file_atomic(fs::path(out_dir) / name, image::encode_png(frame));
    }
    out << "frames=" << video.size() << " out=" << out_dir << "\n";
    return 0;
}

struct VariantsArgs {
    std::string demo;
    std::string dataset;
    std::size_t seeds = 2;
    int epochs = 30;
    std::uint64_t seed = 1;
};

int variants_report(const VariantsArgs& a, std::ostream& out) {
    const std::vector<std::size_t> split{200, 100, 100};
    const std::size_t needed = std::accumulate(split.begin(), split.end(), std::size_t{0});
    std::vector<feedback::AnnotationRecord> records;
    simpred::Dataset data;
    render::DemoVideo demo;
    if (!a.dataset.empty()) {
        auto state = orch::resume(a.dataset);
        records = std::move(state.records);
        data = std::move(state.dataset);
        demo = render::read_demo(fs::path(a.dataset) / "demo.vdm");
    } else {
        if (a.demo.empty()) {
            throw std::invalid_argument("variants-report needs --demo or --dataset");
        }
        demo = render::read_demo(a.demo);
        if (!demo.has_states()) {
            throw feedback::OracleUnavailable();
        }
        auto collected = feedback::pretrain_collect(demo, {}, needed, feedback::oracle_rater(demo),
                                                    derive_seed(a.seed, 0xda7a));
        records = std::move(collected.records);
        data = std::move(collected.samples);
    }
    if (records.size() < needed) {
        throw std::invalid_argument("dataset has " + std::to_string(records.size()) + " annotations; the 200/100/100 split needs " +
                                    std::to_string(needed));
    }
    records.resize(needed);
    std::size_t covered = 0;
    for (const auto& r : records) {
        covered += r.pair.length;
    }
    data.resize(covered);
    const auto parts = orch::split_clips(records, data, split, a.seed);
    const auto rows = orch::compare_variants(parts[0], parts[1], parts[2], demo.states, a.seeds, {}, a.epochs, a.seed);
    out << orch::format_variants_report(rows, a.seeds);
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Imitation from a single video demonstration with 1-5 similarity ratings"};
    app.require_subcommand(1);

    GenDemoArgs gd;
    auto* gen = app.add_subcommand("gen-demo", "train TRPO on a hand-coded reward and save the best rollout as a demo");
    gen->add_option("--task", gd.task, "backflip or hop")->required();
    gen->add_option("--steps", gd.steps, "episode length")->check(CLI::PositiveNumber);
    gen->add_option("--updates", gd.updates, "TRPO updates")->check(CLI::PositiveNumber);
    gen->add_option("--out", gd.out, "output .vdm")->required();
    gen->add_option("--seed", gd.seed);

    TrainArgs pt;
    auto* pre = app.add_subcommand("pretrain", "collect random-policy annotations and pre-train the predictor");
    pre->add_option("--demo", pt.demo)->required()->check(CLI::ExistingFile);
    pre->add_option("--run-dir", pt.run_dir)->required();
    pre->add_option("--annotations", pt.pretrain)->check(CLI::PositiveNumber);
    pre->add_option("--rater", pt.rater)->check(CLI::IsMember({"oracle", "human"}));
    pre->add_option("--variant", pt.variant);
    pre->add_option("--epochs", pt.pretrain_epochs)->check(CLI::PositiveNumber);
    pre->add_option("--init-predictor", pt.init_predictor);
    pre->add_option("--seed", pt.seed);
    pre->add_option("--host", pt.host);
    pre->add_option("--port", pt.port);

    TrainArgs tr;
    auto* trn = app.add_subcommand("train", "run pre-training, RL and online annotation");
    trn->add_option("--demo", tr.demo)->check(CLI::ExistingFile);
    trn->add_option("--rater", tr.rater)->check(CLI::IsMember({"oracle", "human"}));
    trn->add_option("--run-dir", tr.run_dir)->required();
    trn->add_option("--mode", tr.mode)->check(CLI::IsMember({"sync", "async"}));
    trn->add_option("--pretrain", tr.pretrain);
    trn->add_option("--online", tr.online);
    trn->add_option("--pairs-per-update", tr.pairs_per_update)->check(CLI::PositiveNumber);
    trn->add_option("--updates", tr.updates);
    trn->add_option("--variant", tr.variant);
    trn->add_option("--pretrain-epochs", tr.pretrain_epochs);
    trn->add_option("--refresh-epochs", tr.refresh_epochs);
    trn->add_option("--init-predictor", tr.init_predictor, "predictor checkpoint or run directory to fine-tune from");
    trn->add_option("--seed", tr.seed);
    trn->add_option("--host", tr.host);
    trn->add_option("--port", tr.port);
    trn->add_flag("--resume", tr.resume, "continue the run checkpointed in --run-dir");

    EvalArgs ev;
    auto* evl = app.add_subcommand("eval", "score a policy, a stored trajectory or the random policy");
    evl->add_option("--policy", ev.policy, "policy checkpoint or run directory");
    evl->add_option("--traj", ev.traj, "stored trajectory (.vdm with states)");
    evl->add_flag("--random", ev.random, "evaluate the pre-training random policy");
    evl->add_option("--demo", ev.demo)->check(CLI::ExistingFile);
    evl->add_option("--metric", ev.metric)
        ->required()
        ->check(CLI::IsMember({"backflip-reward", "hop-reward", "oracle-rating", "mse"}));
    evl->add_option("--steps", ev.steps);
    evl->add_option("--seed", ev.seed);
    evl->add_option("--traj-out", ev.traj_out, "save the evaluated trajectory as .vdm");

    std::string serve_dir;
    std::string serve_host = "127.0.0.1";
    int serve_port = 8080;
    auto* srv = app.add_subcommand("serve", "serve the rating interface for a checkpointed run");
    srv->add_option("--run-dir", serve_dir)->required()->check(CLI::ExistingDirectory);
    srv->add_option("--host", serve_host);
    srv->add_option("--port", serve_port);

    std::string ex_traj;
    std::string ex_out;
    auto* exv = app.add_subcommand("export-video", "render a trajectory to numbered PNG files");
    exv->add_option("--traj", ex_traj)->required()->check(CLI::ExistingFile);
    exv->add_option("--out", ex_out)->required();

    VariantsArgs va;
    auto* var = app.add_subcommand("variants-report", "compare predictor training variants on a 200/100/100 split");
    var->add_option("--demo", va.demo, "demo to collect oracle annotations against")->check(CLI::ExistingFile);
    var->add_option("--dataset", va.dataset, "run directory whose annotations to use")->check(CLI::ExistingDirectory);
    var->add_option("--seeds", va.seeds)->check(CLI::PositiveNumber);
    var->add_option("--epochs", va.epochs)->check(CLI::PositiveNumber);
    var->add_option("--seed", va.seed);

    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: " << msg << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            return gen_demo(gd, out);
        }
        if (pre->parsed()) {
            pt.online = 0;
            pt.updates = 0;
            const auto cfg = train_config(pt);
            if (cfg.rater == orch::RaterKind::Human) {
                return train(pt, out);
            }
            const auto state = orch::run(cfg);
            print_run_summary(state, pt.run_dir, out);
            out << "predictor=" << orch::latest_predictor_dir(pt.run_dir).string() << "\n";
            return 0;
        }
        if (trn->parsed()) {
            if (!tr.resume && tr.demo.empty()) {
                throw std::invalid_argument("train needs --demo (or --resume)");
            }
            return train(tr, out);
        }
        if (evl->parsed()) {
            return eval(ev, out);
        }
        if (srv->parsed()) {
            return serve(serve_dir, serve_host, serve_port, out);
        }
        if (exv->parsed()) {
            return export_video(ex_traj, ex_out, out);
        }
        if (var->parsed()) {
            return variants_report(va, out);
        }
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: " << msg << "\n";
        return 1;
    }
    return 1;
}

}  // namespace mimic::cli
