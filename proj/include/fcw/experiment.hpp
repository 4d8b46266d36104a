// Experiment orchestration: a single JSON config drives ingestion (log file
// or synthetic traffic), signal segmentation, attack injection, centralized
// or federated training over a chosen transport, evaluation, and reporting.
// Identical config + seed reproduce every output byte for byte.
#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fcw/attack.hpp"
#include "fcw/autoencoder.hpp"
#include "fcw/can.hpp"
#include "fcw/fed.hpp"
#include "fcw/metrics.hpp"
#include "fcw/pubsub.hpp"
#include "fcw/pubsub_tcp.hpp"
#include "fcw/segmentation.hpp"
#include "fcw/synth.hpp"

namespace fcw {

struct BadConfig : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    uint64_t seed = 1;
    std::filesystem::path out_dir = "out";
    bool federated = true;  // mode: federated | centralized
    bool tcp = false;       // transport: tcp | loopback

    // tcp transport only; port 0 hosts a private broker per training run
    std::string broker_host = "127.0.0.1";
    uint16_t broker_port = 0;
    std::string broker_token = "fcw-local";

    // data source: exactly one of the two
    std::string log_path;
    std::vector<SynthIdSpec> synth_ids;
    double synth_duration_s = 0.0;

    std::vector<uint16_t> ids;  // selected CAN IDs, required non-empty
    double train_frac = 0.6;
    double val_frac = 0.2;

    std::vector<AttackSpec> val_attacks;
    std::vector<AttackSpec> test_attacks;

    LayoutThresholds seg;
    size_t train_stride = 1;
    size_t eval_stride = 1;
    size_t min_attack_frames = 1;

    ArchConfig arch;        // input_width/seq_len are derived per ID
    FederationConfig fed;   // also seeds the centralized schedule
    OverheadParams overhead;

    void validate() const {
        if (log_path.empty() == synth_ids.empty())
            throw BadConfig("config: data must name exactly one of log | synthetic");
        if (!synth_ids.empty() && synth_duration_s <= 0.0)
            throw BadConfig("config: synthetic.duration_s must be positive");
        if (ids.empty()) throw BadConfig("config: ids must select at least one CAN ID");
        if (train_frac <= 0.0 || val_frac <= 0.0 || train_frac + val_frac >= 1.0)
            throw BadConfig("config: split fractions must be positive and leave a test share");
        if (train_stride == 0 || eval_stride == 0)
            throw BadConfig("config: window strides must be >= 1");
        if (min_attack_frames == 0)
            throw BadConfig("config: window.min_attack_frames must be >= 1");
        if (arch.enc_hidden == 0 || arch.latent == 0 || arch.dec_hidden == 0)
            throw BadConfig("config: arch dimensions must be >= 1");
        if (tcp && broker_host != "127.0.0.1" && broker_host != "localhost")
            throw BadConfig("config: tcp transport supports only loopback brokers");
        if (overhead.model_update_bytes == 0)
            throw BadConfig("config: overhead.model_update_bytes must be >= 1");
        for (const auto& a : val_attacks)
            if (a.kind == AttackKind::None) throw BadConfig("config: attack kind 'none'");
        for (const auto& a : test_attacks)
            if (a.kind == AttackKind::None) throw BadConfig("config: attack kind 'none'");
        try {
            fed.validate();
        } catch (const std::exception& e) {
            throw BadConfig(std::string("config: ") + e.what());
        }
    }
};

inline std::string id_hex(uint16_t id) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%03X", id);
    return buf;
}

inline uint16_t parse_hex_id(const std::string& s) {
    uint64_t v = 0;
    if (!parse_hex_u64(s, v) || v > 0x7FF)
        throw BadConfig("config: '" + s + "' is not an 11-bit hex CAN ID");
    return static_cast<uint16_t>(v);
}

namespace expdetail {

using nlohmann::json;

inline const json& need(const json& j, const char* key, const char* where) {
    auto it = j.find(key);
    if (it == j.end())
        throw BadConfig(std::string("config: missing key '") + key + "' in " + where);
    return *it;
}

inline SignalClass parse_signal_class(const std::string& s) {
    SignalClass c;
    if (!signal_class_from_name(s, c))
        throw BadConfig("config: unknown signal class '" + s + "'");
    return c;
}

inline SynthIdSpec parse_synth_id(const json& j) {
    SynthIdSpec spec;
    spec.id = parse_hex_id(need(j, "id", "synthetic id").get<std::string>());
    spec.dlc = j.value("dlc", uint8_t{8});
    spec.period_s = j.value("period_s", 0.01);
    spec.jitter_frac = j.value("jitter_frac", 0.0);
    for (const auto& sj : need(j, "signals", "synthetic id")) {
        SignalDynamics d;
        d.cls = parse_signal_class(need(sj, "class", "synthetic signal").get<std::string>());
        d.start_bit = need(sj, "start_bit", "synthetic signal").get<uint16_t>();
        d.length = need(sj, "length", "synthetic signal").get<uint16_t>();
        d.init = sj.value("init", uint64_t{0});
        d.walk_step = sj.value("walk_step", int64_t{0});
        spec.signals.push_back(d);
    }
    return spec;
}

// One manifest entry can expand into `count` staggered attack instances.
inline void parse_attacks(const json& arr, std::vector<AttackSpec>& out) {
    for (const auto& aj : arr) {
        AttackSpec a;
        const std::string kind = need(aj, "kind", "attack").get<std::string>();
        if (!attack_kind_from_name(kind, a.kind) || a.kind == AttackKind::None)
            throw BadConfig("config: unknown attack kind '" + kind + "'");
        a.id = parse_hex_id(need(aj, "id", "attack").get<std::string>());
        a.start_index = need(aj, "start_index", "attack").get<size_t>();
        a.length = aj.value("length", size_t{25});
        a.seed = aj.value("seed", uint64_t{0});
        if (aj.contains("signal")) a.target_signal = aj.at("signal").get<size_t>();
        const uint32_t count = aj.value("count", uint32_t{1});
        const size_t gap = aj.value("gap", a.length * 8);
        if (count == 0) throw BadConfig("config: attack count must be >= 1");
        if (count > 1 && gap <= a.length)
            throw BadConfig("config: attack gap must exceed the attack length");
        for (uint32_t i = 0; i < count; ++i) {
            AttackSpec inst = a;
            inst.start_index = a.start_index + static_cast<size_t>(i) * gap;
            inst.seed = a.seed + i;
            out.push_back(inst);
        }
    }
}

}  // namespace expdetail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    using expdetail::need;
    ExperimentConfig cfg;
    try {
        cfg.seed = j.value("seed", uint64_t{1});
        cfg.out_dir = j.value("out_dir", std::string("out"));

        const std::string mode = j.value("mode", std::string("federated"));
        if (mode == "federated")
            cfg.federated = true;
        else if (mode == "centralized")
            cfg.federated = false;
        else
            throw BadConfig("config: mode must be 'federated' or 'centralized'");

        const std::string transport = j.value("transport", std::string("loopback"));
        if (transport == "tcp")
            cfg.tcp = true;
        else if (transport == "loopback")
            cfg.tcp = false;
        else
            throw BadConfig("config: transport must be 'loopback' or 'tcp'");

        if (j.contains("broker")) {
            const auto& b = j.at("broker");
            cfg.broker_host = b.value("host", cfg.broker_host);
            cfg.broker_port = b.value("port", cfg.broker_port);
            cfg.broker_token = b.value("token", cfg.broker_token);
        }

        const auto& data = need(j, "data", "config");
        if (data.contains("log") && data.contains("synthetic"))
            throw BadConfig("config: data must name exactly one of log | synthetic");
        if (data.contains("log")) cfg.log_path = data.at("log").get<std::string>();
        if (data.contains("synthetic")) {
            const auto& s = data.at("synthetic");
            cfg.synth_duration_s = need(s, "duration_s", "synthetic").get<double>();
            for (const auto& ij : need(s, "ids", "synthetic"))
                cfg.synth_ids.push_back(expdetail::parse_synth_id(ij));
            if (cfg.synth_ids.empty())
                throw BadConfig("config: synthetic.ids must not be empty");
        }

        for (const auto& v : need(j, "ids", "config"))
            cfg.ids.push_back(parse_hex_id(v.get<std::string>()));

        if (j.contains("split")) {
            const auto& s = j.at("split");
            cfg.train_frac = s.value("train", cfg.train_frac);
            cfg.val_frac = s.value("val", cfg.val_frac);
        }

        if (j.contains("attacks")) {
            const auto& a = j.at("attacks");
            if (a.contains("val")) expdetail::parse_attacks(a.at("val"), cfg.val_attacks);
            if (a.contains("test")) expdetail::parse_attacks(a.at("test"), cfg.test_attacks);
        }

        if (j.contains("segmentation")) {
            const auto& s = j.at("segmentation");
            cfg.seg.checksum_lo = s.value("checksum_lo", cfg.seg.checksum_lo);
            cfg.seg.checksum_hi = s.value("checksum_hi", cfg.seg.checksum_hi);
            cfg.seg.counter_ratio_lo = s.value("counter_ratio_lo", cfg.seg.counter_ratio_lo);
            cfg.seg.counter_ratio_hi = s.value("counter_ratio_hi", cfg.seg.counter_ratio_hi);
            cfg.seg.counter_min_bits = s.value("counter_min_bits", cfg.seg.counter_min_bits);
            cfg.seg.counter_lsb_min = s.value("counter_lsb_min", cfg.seg.counter_lsb_min);
        }

        if (j.contains("window")) {
            const auto& w = j.at("window");
            cfg.train_stride = w.value("train_stride", cfg.train_stride);
            cfg.eval_stride = w.value("eval_stride", cfg.eval_stride);
            cfg.min_attack_frames = w.value("min_attack_frames", cfg.min_attack_frames);
        }

        if (j.contains("arch")) {
            const auto& a = j.at("arch");
            cfg.arch.enc_hidden = a.value("enc_hidden", cfg.arch.enc_hidden);
            cfg.arch.latent = a.value("latent", cfg.arch.latent);
            cfg.arch.dec_hidden = a.value("dec_hidden", cfg.arch.dec_hidden);
        }

        cfg.fed.wide_weights = true;  // lossless wire weights by default
        if (j.contains("train")) {
            const auto& t = j.at("train");
            cfg.fed.vehicles = t.value("vehicles", cfg.fed.vehicles);
            cfg.fed.rounds = t.value("rounds", cfg.fed.rounds);
            cfg.fed.local_epochs = t.value("local_epochs", cfg.fed.local_epochs);
            cfg.fed.mu = t.value("mu", cfg.fed.mu);
            cfg.fed.early_stopping = t.value("early_stopping", cfg.fed.early_stopping);
            cfg.fed.patience = t.value("patience", cfg.fed.patience);
            cfg.fed.min_delta_frac = t.value("min_delta_frac", cfg.fed.min_delta_frac);
            cfg.fed.threshold_vehicle = t.value("threshold_vehicle", cfg.fed.threshold_vehicle);
            cfg.fed.wide_weights = t.value("wide_weights", cfg.fed.wide_weights);
            cfg.fed.run_timeout_s = t.value("run_timeout_s", cfg.fed.run_timeout_s);
            cfg.fed.opt.lr = t.value("learning_rate", cfg.fed.opt.lr);
            cfg.fed.opt.batch = t.value("batch", cfg.fed.opt.batch);
            if (t.contains("threshold")) {
                const auto& th = t.at("threshold");
                const std::string m = th.value("mode", std::string("labeled"));
                if (m == "labeled")
                    cfg.fed.threshold_mode = ThresholdMode::LabeledOptimal;
                else if (m == "quantile")
                    cfg.fed.threshold_mode = ThresholdMode::Quantile;
                else
                    throw BadConfig("config: threshold.mode must be 'labeled' or 'quantile'");
                cfg.fed.quantile_q = th.value("q", cfg.fed.quantile_q);
            }
        }
        cfg.fed.seed = cfg.seed;

        if (j.contains("overhead")) {
            const auto& o = j.at("overhead");
            cfg.overhead.model_update_bytes =
                o.value("model_update_bytes", cfg.overhead.model_update_bytes);
            cfg.overhead.subscriber_latency_s =
                o.value("subscriber_latency_s", cfg.overhead.subscriber_latency_s);
            cfg.overhead.publisher_latency_s =
                o.value("publisher_latency_s", cfg.overhead.publisher_latency_s);
            cfg.overhead.raw_frame_bytes = o.value("raw_frame_bytes", cfg.overhead.raw_frame_bytes);
        }
    } catch (const nlohmann::json::exception& e) {
        throw BadConfig(std::string("config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw BadConfig(std::string("config: ") + e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw BadConfig("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------
// Data assembly
// ---------------------------------------------------------------------------

inline std::vector<CanFrame> experiment_frames(const ExperimentConfig& cfg) {
    if (!cfg.log_path.empty()) {
        const std::string text = read_file(cfg.log_path);
        return parse_log_string(text);
    }
    return synthesize_traffic(cfg.synth_ids, cfg.synth_duration_s, cfg.seed);
}

// Selected streams in config order; every selected ID must be present.
inline std::vector<IdStream> experiment_streams(const ExperimentConfig& cfg) {
    const auto frames = experiment_frames(cfg);
    auto all = split_by_id(frames);
    std::vector<IdStream> out;
    out.reserve(cfg.ids.size());
    for (uint16_t id : cfg.ids) {
        auto it = std::find_if(all.begin(), all.end(),
                               [id](const IdStream& s) { return s.id == id; });
        if (it == all.end())
            throw EmptyDataset("data source has no frames for id " + id_hex(id));
        out.push_back(std::move(*it));
    }
    return out;
}

// Applies one manifest to a stream. Instances are applied from the highest
// start index down so every start keeps its meaning in the coordinates of
// the original stream even when earlier attacks insert or drop frames.
inline LabeledStream apply_manifest(LabeledStream base, std::vector<AttackSpec> manifest,
                                    const SignalLayout* layout) {
    std::stable_sort(manifest.begin(), manifest.end(),
                     [](const AttackSpec& a, const AttackSpec& b) {
                         return a.start_index > b.start_index;
                     });
    for (const auto& spec : manifest) base = apply_attack(base, spec, layout);
    return base;
}

// ---------------------------------------------------------------------------
// Per-ID pipeline
// ---------------------------------------------------------------------------

struct IdDataset {
    uint16_t id = 0;
    size_t raw_frames = 0;
    SignalLayout layout;
    SplitSlices splits;          // clean train/val/test streams
    LabeledStream val_attacked;  // manifest applied
    LabeledStream test_attacked;
    FeatureSpec features;
    std::vector<FeatureWindow> train_w;  // pooled, train_stride
    std::vector<FeatureWindow> val_w;    // pooled, eval_stride, labeled
    std::vector<FeatureWindow> test_w;   // pooled, eval_stride, labeled
};

namespace expdetail {

inline LabeledStream slice_labeled(const LabeledStream& ls, const Partition& p) {
    LabeledStream out;
    out.stream = slice(ls.stream, p);
    out.labels.assign(ls.labels.begin() + static_cast<std::ptrdiff_t>(p.first),
                      ls.labels.begin() + static_cast<std::ptrdiff_t>(p.first + p.count));
    return out;
}

inline std::vector<AttackSpec> manifest_for(const std::vector<AttackSpec>& all, uint16_t id) {
    std::vector<AttackSpec> out;
    for (const auto& a : all)
        if (a.id == id) out.push_back(a);
    return out;
}

}  // namespace expdetail

inline IdDataset build_id_dataset(const ExperimentConfig& cfg, const IdStream& s) {
    IdDataset ds;
    ds.id = s.id;
    ds.raw_frames = s.frames.size();
    ds.splits = split_stream(s, cfg.train_frac, cfg.val_frac);
    ds.layout = derive_layout(bit_flip_profile(ds.splits.train), cfg.seg);
    ds.val_attacked = apply_manifest(LabeledStream::clean(ds.splits.val),
                                     expdetail::manifest_for(cfg.val_attacks, s.id), &ds.layout);
    ds.test_attacked = apply_manifest(LabeledStream::clean(ds.splits.test),
                                      expdetail::manifest_for(cfg.test_attacks, s.id), &ds.layout);
    ds.features = fit_feature_spec(ds.layout, ds.splits.train);
    ds.train_w = featurize_all(windows(ds.splits.train, cfg.train_stride), ds.features);
    ds.val_w = featurize_all(windows(ds.val_attacked, cfg.eval_stride, cfg.min_attack_frames),
                             ds.features);
    ds.test_w = featurize_all(windows(ds.test_attacked, cfg.eval_stride, cfg.min_attack_frames),
                              ds.features);
    return ds;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct IdModel {
    uint16_t id = 0;
    ModelWeights model;
    double threshold = 0.0;
    uint32_t rounds_run = 0;
    bool stopped_early = false;
    double final_loss = 0.0;
    nlohmann::json history;
};

namespace expdetail {

inline nlohmann::json traffic_json(const AgentTraffic& t) {
    return {{"model_msgs_up", t.model_msgs_up},       {"model_bytes_up", t.model_bytes_up},
            {"model_msgs_down", t.model_msgs_down},   {"model_bytes_down", t.model_bytes_down},
            {"control_msgs_up", t.control_msgs_up},   {"control_bytes_up", t.control_bytes_up},
            {"control_msgs_down", t.control_msgs_down},
            {"control_bytes_down", t.control_bytes_down}};
}

inline nlohmann::json bus_json(const BusCounters& c) {
    return {{"frames_tx", c.frames_tx},     {"frames_rx", c.frames_rx},
            {"bytes_tx", c.bytes_tx},       {"bytes_rx", c.bytes_rx},
            {"retx_frames", c.retx_frames}, {"retx_bytes", c.retx_bytes},
            {"msgs_published", c.msgs_published},
            {"msgs_delivered", c.msgs_delivered}};
}

}  // namespace expdetail

// Trains one ID. In tcp mode with a configured broker port the round trips
// go through that broker (one federation at a time: the topics are shared),
// otherwise each run hosts a private broker on an ephemeral port.
inline IdModel train_id(const ExperimentConfig& cfg, const IdDataset& ds,
                        std::mutex* shared_broker_gate = nullptr) {
    ArchConfig arch = cfg.arch;
    arch.input_width = ds.features.signals.size();
    arch.seq_len = kWindowLen;

    IdModel out;
    out.id = ds.id;

    if (!cfg.federated) {
        CentralizedConfig c;
        c.max_steps = cfg.fed.rounds;
        c.epochs_per_step = cfg.fed.local_epochs;
        c.early_stopping = cfg.fed.early_stopping;
        c.patience = cfg.fed.patience;
        c.min_delta_frac = cfg.fed.min_delta_frac;
        c.opt = cfg.fed.opt;
        c.seed = cfg.seed;
        const CentralizedResult r = run_centralized(arch, ds.train_w, ds.val_w, c);
        out.model = r.model;
        out.threshold =
            derive_threshold(r.model, ds.val_w, cfg.fed.threshold_mode, cfg.fed.quantile_q);
        out.rounds_run = r.steps_run;
        out.stopped_early = r.stopped_early;
        out.final_loss = r.step_losses.empty() ? 0.0 : r.step_losses.back();
        out.history = {{"mode", "centralized"},
                       {"steps_run", r.steps_run},
                       {"stopped_early", r.stopped_early},
                       {"step_losses", r.step_losses},
                       {"threshold", out.threshold}};
        return out;
    }

    FederationConfig fedcfg = cfg.fed;
    fedcfg.seed = cfg.seed;
    const auto train_parts = partition(ds.splits.train, fedcfg.vehicles);
    const auto val_parts = partition(ds.val_attacked.stream, fedcfg.vehicles);
    std::vector<VehicleData> data(fedcfg.vehicles);
    for (uint32_t v = 0; v < fedcfg.vehicles; ++v) {
        data[v].train = featurize_all(
            windows(slice(ds.splits.train, train_parts[v]), cfg.train_stride), ds.features);
        const LabeledStream lv = expdetail::slice_labeled(ds.val_attacked, val_parts[v]);
        data[v].val =
            featurize_all(windows(lv, cfg.eval_stride, cfg.min_attack_frames), ds.features);
    }

    FederationResult res;
    if (cfg.tcp && cfg.broker_port != 0) {
        std::unique_lock<std::mutex> gate;
        if (shared_broker_gate) gate = std::unique_lock<std::mutex>(*shared_broker_gate);
        TcpTransport bus(cfg.broker_port, cfg.broker_token);
        res = run_federation(bus, fedcfg, arch, data);
    } else if (cfg.tcp) {
        TcpBrokerServer broker(cfg.broker_token);
        const uint16_t port = broker.start();
        TcpTransport bus(port, cfg.broker_token);
        res = run_federation(bus, fedcfg, arch, data);
        broker.stop();
    } else {
        LoopbackTransport bus(cfg.broker_token);
        res = run_federation(bus, fedcfg, arch, data);
    }

    out.model = res.model;
    out.threshold = res.history.threshold.value();
    out.rounds_run = res.history.rounds_run;
    out.stopped_early = res.history.stopped_early;
    out.final_loss = res.history.final_loss;

    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& r : res.history.rounds)
        rounds.push_back({{"round", r.round},
                          {"global_loss", r.global_loss},
                          {"vehicle_losses", r.vehicle_losses},
                          {"sample_counts", r.sample_counts}});
    nlohmann::json vehicle_traffic = nlohmann::json::array();
    for (const auto& t : res.history.vehicle_traffic)
        vehicle_traffic.push_back(expdetail::traffic_json(t));
    nlohmann::json vehicle_bus = nlohmann::json::array();
    for (const auto& c : res.history.vehicle_bus)
        vehicle_bus.push_back(expdetail::bus_json(c));
    out.history = {{"mode", "federated"},
                   {"rounds_run", res.history.rounds_run},
                   {"stopped_early", res.history.stopped_early},
                   {"final_loss", res.history.final_loss},
                   {"threshold", out.threshold},
                   {"rounds", std::move(rounds)},
                   {"traffic",
                    {{"server", expdetail::traffic_json(res.history.server_traffic)},
                     {"vehicles", std::move(vehicle_traffic)}}},
                   {"bus",
                    {{"server", expdetail::bus_json(res.history.server_bus)},
                     {"vehicles", std::move(vehicle_bus)}}}};
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::vector<WindowVerdict> evaluate_windows(const ModelWeights& model, double threshold,
                                                   const std::vector<FeatureWindow>& ws,
                                                   uint16_t id) {
    std::vector<WindowVerdict> out;
    out.reserve(ws.size());
    Workspace scratch;
    for (const auto& fw : ws) {
        WindowVerdict v;
        v.id = id;
        v.truth = fw.label;
        v.instance = fw.instance;
        v.flagged = classify(reconstruction_error(model, fw, scratch), threshold);
        out.push_back(v);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Artifact persistence
// ---------------------------------------------------------------------------

namespace expdetail {

inline nlohmann::json features_json(const FeatureSpec& fs) {
    nlohmann::json signals = nlohmann::json::array();
    for (size_t i = 0; i < fs.signals.size(); ++i)
        signals.push_back({{"start_bit", fs.signals[i].start_bit},
                           {"length", fs.signals[i].length},
                           {"class", signal_class_name(fs.signals[i].cls)},
                           {"lo", fs.lo[i]},
                           {"hi", fs.hi[i]}});
    return {{"id", id_hex(fs.id)}, {"signals", std::move(signals)}};
}

inline FeatureSpec features_from_json(const nlohmann::json& j) {
    FeatureSpec fs;
    fs.id = parse_hex_id(j.at("id").get<std::string>());
    for (const auto& sj : j.at("signals")) {
        Signal sig;
        sig.start_bit = sj.at("start_bit").get<uint16_t>();
        sig.length = sj.at("length").get<uint16_t>();
        sig.cls = parse_signal_class(sj.at("class").get<std::string>());
        fs.signals.push_back(sig);
        fs.lo.push_back(sj.at("lo").get<double>());
        fs.hi.push_back(sj.at("hi").get<double>());
    }
    return fs;
}

}  // namespace expdetail

struct IdArtifactPaths {
    std::filesystem::path layout, weights, meta, history;
};

inline IdArtifactPaths id_artifact_paths(const ExperimentConfig& cfg, uint16_t id) {
    const std::string base = id_hex(id);
    return {cfg.out_dir / (base + ".layout.csv"), cfg.out_dir / (base + ".weights.fcw"),
            cfg.out_dir / (base + ".meta.json"), cfg.out_dir / (base + ".history.json")};
}

inline void save_id_artifacts(const ExperimentConfig& cfg, const IdDataset& ds,
                              const IdModel& m) {
    const IdArtifactPaths paths = id_artifact_paths(cfg, ds.id);
    write_file_atomic(paths.layout, serialize_layouts({ds.layout}));
    write_file_atomic(paths.weights, save_weights(m.model));
    const nlohmann::json meta = {
        {"id", id_hex(ds.id)},
        {"mode", cfg.federated ? "federated" : "centralized"},
        {"seed", cfg.seed},
        {"threshold", m.threshold},
        {"raw_frames", ds.raw_frames},
        {"rounds_run", m.rounds_run},
        {"stopped_early", m.stopped_early},
        {"final_loss", m.final_loss},
        {"arch",
         {{"input_width", ds.features.signals.size()},
          {"enc_hidden", cfg.arch.enc_hidden},
          {"latent", cfg.arch.latent},
          {"dec_hidden", cfg.arch.dec_hidden},
          {"seq_len", kWindowLen}}},
        {"features", expdetail::features_json(ds.features)}};
    write_file_atomic(paths.meta, meta.dump(2) + "\n");
    write_file_atomic(paths.history, m.history.dump(2) + "\n");
}

struct LoadedArtifacts {
    SignalLayout layout;
    FeatureSpec features;
    ModelWeights model;
    double threshold = 0.0;
    uint32_t rounds_run = 0;
    size_t raw_frames = 0;
};

inline LoadedArtifacts load_id_artifacts(const ExperimentConfig& cfg, uint16_t id) {
    const IdArtifactPaths paths = id_artifact_paths(cfg, id);
    LoadedArtifacts la;
    const auto layouts = parse_layouts(read_file(paths.layout));
    const SignalLayout* l = find_layout(layouts, id);
    if (!l) throw BadConfig(paths.layout.string() + " has no layout for id " + id_hex(id));
    la.layout = *l;
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(paths.meta));
        la.threshold = meta.at("threshold").get<double>();
        la.rounds_run = meta.at("rounds_run").get<uint32_t>();
        la.raw_frames = meta.at("raw_frames").get<size_t>();
        la.features = expdetail::features_from_json(meta.at("features"));
        ArchConfig arch;
        arch.input_width = meta.at("arch").at("input_width").get<size_t>();
        arch.enc_hidden = meta.at("arch").at("enc_hidden").get<size_t>();
        arch.latent = meta.at("arch").at("latent").get<size_t>();
        arch.dec_hidden = meta.at("arch").at("dec_hidden").get<size_t>();
        arch.seq_len = meta.at("arch").at("seq_len").get<size_t>();
        la.model = load_weights(read_file(paths.weights), arch);
    } catch (const nlohmann::json::exception& e) {
        throw BadConfig(paths.meta.string() + ": " + e.what());
    }
    return la;
}

// ---------------------------------------------------------------------------
// Parallel per-ID execution: worker threads own their state, first error wins,
// results are assembled in ID order.
// ---------------------------------------------------------------------------

namespace expdetail {

template <typename Fn>
inline void for_each_id(size_t n, Fn fn) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    const size_t workers = std::min<size_t>(hw, n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto run = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(run);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace expdetail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct SegmentOutcome {
    std::vector<std::filesystem::path> files;
    std::vector<SignalLayout> layouts;
};

inline SegmentOutcome cmd_segment(const ExperimentConfig& cfg) {
    const auto streams = experiment_streams(cfg);
    SegmentOutcome out;
    out.layouts.resize(streams.size());
    expdetail::for_each_id(streams.size(), [&](size_t i) {
        const auto split = split_stream(streams[i], cfg.train_frac, cfg.val_frac);
        out.layouts[i] = derive_layout(bit_flip_profile(split.train), cfg.seg);
    });
    for (size_t i = 0; i < streams.size(); ++i) {
        const auto path = cfg.out_dir / (id_hex(streams[i].id) + ".layout.csv");
        write_file_atomic(path, serialize_layouts({out.layouts[i]}));
        out.files.push_back(path);
    }
    return out;
}

struct AttackOutcome {
    std::vector<std::filesystem::path> files;
};

inline AttackOutcome cmd_attack(const ExperimentConfig& cfg) {
    const auto streams = experiment_streams(cfg);
    std::vector<IdDataset> sets(streams.size());
    expdetail::for_each_id(streams.size(),
                           [&](size_t i) { sets[i] = build_id_dataset(cfg, streams[i]); });
    AttackOutcome out;
    auto emit = [&](const std::filesystem::path& p, const std::string& bytes) {
        write_file_atomic(p, bytes);
        out.files.push_back(p);
    };
    for (const auto& ds : sets) {
        const std::string base = id_hex(ds.id);
        emit(cfg.out_dir / (base + ".val.csv"), serialize(ds.val_attacked.stream.frames));
        emit(cfg.out_dir / (base + ".val.labels.csv"), serialize_labels(ds.val_attacked.labels));
        emit(cfg.out_dir / (base + ".test.csv"), serialize(ds.test_attacked.stream.frames));
        emit(cfg.out_dir / (base + ".test.labels.csv"),
             serialize_labels(ds.test_attacked.labels));
    }
    return out;
}

struct TrainOutcome {
    std::vector<std::filesystem::path> files;
    std::vector<IdModel> models;
};

inline TrainOutcome cmd_train(const ExperimentConfig& cfg) {
    const auto streams = experiment_streams(cfg);
    std::vector<IdDataset> sets(streams.size());
    std::vector<IdModel> models(streams.size());
    std::mutex broker_gate;  // external tcp broker: one federation at a time
    expdetail::for_each_id(streams.size(), [&](size_t i) {
        sets[i] = build_id_dataset(cfg, streams[i]);
        models[i] = train_id(cfg, sets[i], &broker_gate);
    });
    TrainOutcome out;
    for (size_t i = 0; i < sets.size(); ++i) {
        save_id_artifacts(cfg, sets[i], models[i]);
        const IdArtifactPaths p = id_artifact_paths(cfg, sets[i].id);
        out.files.insert(out.files.end(), {p.layout, p.weights, p.meta, p.history});
    }
    out.models = std::move(models);
    return out;
}

struct EvalOutcome {
    std::vector<std::filesystem::path> files;
    DetectionReport detection;
    std::vector<std::pair<std::string, OverheadRow>> overhead;
};

// Loads the trained artifacts, rebuilds the attacked test split from the
// (deterministic) data source, classifies its windows, and writes the
// detection report plus — for federated runs — the per-ID overhead table.
inline EvalOutcome cmd_evaluate(const ExperimentConfig& cfg) {
    const auto streams = experiment_streams(cfg);
    std::vector<std::vector<WindowVerdict>> verdicts(streams.size());
    std::vector<std::pair<std::string, OverheadRow>> overhead(streams.size());
    expdetail::for_each_id(streams.size(), [&](size_t i) {
        const IdStream& s = streams[i];
        const LoadedArtifacts la = load_id_artifacts(cfg, s.id);
        const auto split = split_stream(s, cfg.train_frac, cfg.val_frac);
        const LabeledStream test_ls =
            apply_manifest(LabeledStream::clean(split.test),
                           expdetail::manifest_for(cfg.test_attacks, s.id), &la.layout);
        const auto test_w = featurize_all(
            windows(test_ls, cfg.eval_stride, cfg.min_attack_frames), la.features);
        verdicts[i] = evaluate_windows(la.model, la.threshold, test_w, s.id);
        overhead[i] = {id_hex(s.id), overhead_row(la.rounds_run, la.raw_frames, cfg.overhead)};
    });

    EvalOutcome out;
    std::vector<WindowVerdict> all;
    for (const auto& v : verdicts) all.insert(all.end(), v.begin(), v.end());
    out.detection = build_detection_report(all);
    auto emit = [&](const std::filesystem::path& p, const std::string& bytes) {
        write_file_atomic(p, bytes);
        out.files.push_back(p);
    };
    emit(cfg.out_dir / "detection.txt", format_detection_report(out.detection));
    emit(cfg.out_dir / "detection.csv", detection_csv(out.detection));
    if (cfg.federated) {
        out.overhead = std::move(overhead);
        emit(cfg.out_dir / "overhead.txt", format_overhead_table(out.overhead));
        emit(cfg.out_dir / "overhead.csv", overhead_csv(out.overhead));
    }
    return out;
}

}  // namespace fcw
