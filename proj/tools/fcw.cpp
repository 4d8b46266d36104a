// Command-line front end for the workbench: segment | attack | train |
// evaluate run one experiment stage from a JSON config; broker hosts a
// standalone pub/sub broker for tcp-transport training runs.
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "fcw/experiment.hpp"

namespace {

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop.store(true); }

struct StageArgs {
    std::string config;
    std::string out_dir;       // override
    std::string mode;          // override
    std::string transport;     // override
    uint64_t seed = 0;
    bool seed_set = false;
};

void add_stage_options(CLI::App* cmd, StageArgs& args) {
    cmd->add_option("-c,--config", args.config, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("-o,--out", args.out_dir, "override out_dir");
    cmd->add_option("--mode", args.mode, "override mode")
        ->check(CLI::IsMember({"federated", "centralized"}));
    cmd->add_option("--transport", args.transport, "override transport")
        ->check(CLI::IsMember({"loopback", "tcp"}));
    cmd->add_option("--seed", args.seed, "override seed")->each([&](const std::string&) {
        args.seed_set = true;
    });
}

fcw::ExperimentConfig load_with_overrides(const StageArgs& args) {
    fcw::ExperimentConfig cfg = fcw::load_experiment_config(args.config);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (args.mode == "federated") cfg.federated = true;
    if (args.mode == "centralized") cfg.federated = false;
    if (args.transport == "loopback") cfg.tcp = false;
    if (args.transport == "tcp") cfg.tcp = true;
    if (args.seed_set) {
        cfg.seed = args.seed;
        cfg.fed.seed = args.seed;
    }
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    return cfg;
}

void print_files(const std::vector<std::filesystem::path>& files) {
    for (const auto& f : files) std::printf("wrote %s\n", f.string().c_str());
}

int run_broker(const std::string& bind, std::string token) {
    uint16_t port = 0;
    std::string host = bind;
    if (const auto colon = bind.rfind(':'); colon != std::string::npos) {
        host = bind.substr(0, colon);
        port = static_cast<uint16_t>(std::stoul(bind.substr(colon + 1)));
    }
    if (host != "127.0.0.1" && host != "localhost") {
        std::fprintf(stderr, "error: broker binds loopback only (got '%s')\n", host.c_str());
        return 2;
    }
    if (const char* env = std::getenv("FCW_BROKER_TOKEN")) token = env;

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    fcw::TcpBrokerServer broker(token);
    const uint16_t bound = broker.start(port);
    std::printf("broker listening on 127.0.0.1:%u\n", bound);
    std::fflush(stdout);
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    broker.stop();
    std::printf("broker stopped\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CAN intrusion-detection workbench"};
    app.require_subcommand(1);

    StageArgs seg_args, atk_args, train_args, eval_args;
    auto* seg = app.add_subcommand("segment", "derive per-ID signal layouts");
    add_stage_options(seg, seg_args);
    auto* atk = app.add_subcommand("attack", "write attacked val/test streams and labels");
    add_stage_options(atk, atk_args);
    auto* train = app.add_subcommand("train", "train per-ID models");
    add_stage_options(train, train_args);
    auto* eval = app.add_subcommand("evaluate", "score trained models on the test split");
    add_stage_options(eval, eval_args);

    std::string broker_bind = "127.0.0.1:0";
    std::string broker_token = "fcw-local";
    auto* broker = app.add_subcommand("broker", "run a standalone pub/sub broker");
    broker->add_option("--bind", broker_bind, "host:port (port 0 = ephemeral)");
    broker->add_option("--token", broker_token, "client auth token");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (seg->parsed()) {
            const auto out = fcw::cmd_segment(load_with_overrides(seg_args));
            print_files(out.files);
        } else if (atk->parsed()) {
            const auto out = fcw::cmd_attack(load_with_overrides(atk_args));
            print_files(out.files);
        } else if (train->parsed()) {
            const auto cfg = load_with_overrides(train_args);
            const auto out = fcw::cmd_train(cfg);
            for (const auto& m : out.models)
                std::printf("%s: %s %u rounds%s, final loss %.6g, threshold %.6g\n",
                            fcw::id_hex(m.id).c_str(),
                            cfg.federated ? "federated" : "centralized", m.rounds_run,
                            m.stopped_early ? " (early stop)" : "", m.final_loss, m.threshold);
            print_files(out.files);
        } else if (eval->parsed()) {
            const auto out = fcw::cmd_evaluate(load_with_overrides(eval_args));
            std::fputs(fcw::format_detection_report(out.detection).c_str(), stdout);
            if (!out.overhead.empty())
                std::fputs(fcw::format_overhead_table(out.overhead).c_str(), stdout);
            print_files(out.files);
        } else if (broker->parsed()) {
            return run_broker(broker_bind, broker_token);
        }
    } catch (const fcw::BadConfig& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
