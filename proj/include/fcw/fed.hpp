#pragma once
// Federated training of the reconstruction model over the pub/sub bus.
//
// One server agent and V vehicle agents, all bus clients. Per round:
//   1. the server broadcasts the global weights on fl/global
//   2. each vehicle evaluates the received weights on its local validation
//      split (that loss is reported for early stopping), adopts them, trains
//      for E local epochs (optionally with a proximal pull toward the
//      received weights), and publishes its update on fl/local
//   3. once all V updates arrive, the server aggregates them by
//      sample-weighted mean and either starts the next round or broadcasts
//      the final model with the stop flag set
// After the stop broadcast, a designated vehicle derives the detection
// threshold from its validation split under the final model and reports it
// in a weightless control update; the server re-broadcasts it to everyone,
// which ends the run.
//
// Vehicle update payload ("FCU1", or "FCU8" with 8-byte weights):
//   magic[4] | vehicle_id u16 | round u32 | sample_count u32 |
//   validation_loss f32/f64 | weight_count u32 | weights f32/f64...
// Weightless updates (weight_count == 0) are control messages; the
// threshold report carries its value in the validation_loss field.
//
// Global update payload ("FCG1"/"FCG8"):
//   magic[4] | round u32 | flags u8 | [threshold f32/f64 when flag bit 1] |
//   weight_count u32 | weights f32/f64...
// flags: bit 0 = stop (this is the final model), bit 1 = threshold present.

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>

#include "fcw/autoencoder.hpp"
#include "fcw/pubsub.hpp"

namespace fcw {

struct BadUpdateMessage : std::runtime_error {
    explicit BadUpdateMessage(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct FederationConfig {
    uint32_t vehicles = 5;       // V
    uint32_t rounds = 200;       // R, upper bound on communication rounds
    uint32_t local_epochs = 1;   // E
    double mu = 0.0;             // proximal term; 0 gives plain averaging
    bool early_stopping = true;
    uint32_t patience = 10;
    double min_delta_frac = 0.03;  // improvement must beat this share of best
    uint16_t threshold_vehicle = 0;
    ThresholdMode threshold_mode = ThresholdMode::LabeledOptimal;
    double quantile_q = 0.999;
    bool wide_weights = false;  // 8-byte weights on the wire (lossless)
    OptimizerConfig opt;
    uint64_t seed = 1;
    double run_timeout_s = 86400.0;

    void validate() const {
        if (vehicles < 1) throw OutOfRange("federation: vehicles must be >= 1");
        if (rounds < 1) throw OutOfRange("federation: rounds must be >= 1");
        if (local_epochs < 1) throw OutOfRange("federation: local_epochs must be >= 1");
        if (!(mu >= 0.0)) throw OutOfRange("federation: mu must be >= 0");
        if (patience < 1) throw OutOfRange("federation: patience must be >= 1");
        if (!(min_delta_frac >= 0.0) || min_delta_frac >= 1.0)
            throw OutOfRange("federation: min_delta_frac must be in [0, 1)");
        if (threshold_vehicle >= vehicles)
            throw OutOfRange("federation: threshold_vehicle out of range");
        if (!(quantile_q >= 0.0) || quantile_q > 1.0)
            throw OutOfRange("federation: quantile_q must be in [0, 1]");
        if (opt.batch == 0) throw OutOfRange("federation: batch must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Update payloads
// ---------------------------------------------------------------------------

struct RoundUpdate {
    uint16_t vehicle_id = 0;
    uint32_t round = 0;
    uint32_t sample_count = 0;
    double validation_loss = 0.0;
    std::vector<double> weights;  // empty for control messages
    bool wide = false;
};

struct GlobalUpdate {
    uint32_t round = 0;
    bool stop = false;
    std::optional<double> threshold;
    std::vector<double> weights;  // empty in the threshold broadcast
    bool wide = false;
};

namespace feddetail {

inline void put_real(ByteWriter& w, double v, bool wide) {
    if (wide)
        w.f64(v);
    else
        w.f32(static_cast<float>(v));
}

inline double get_real(ByteReader& r, bool wide) { return wide ? r.f64() : r.f32(); }

inline bool read_magic(ByteReader& r, char kind, bool& wide) {
    if (!r.need(4)) return false;
    const uint8_t a = r.u8(), b = r.u8(), c = r.u8(), d = r.u8();
    if (a != 'F' || b != 'C' || c != static_cast<uint8_t>(kind)) return false;
    if (d == '1')
        wide = false;
    else if (d == '8')
        wide = true;
    else
        return false;
    return true;
}

}  // namespace feddetail

inline std::vector<uint8_t> encode_round_update(const RoundUpdate& u) {
    ByteWriter w;
    w.u8('F');
    w.u8('C');
    w.u8('U');
    w.u8(u.wide ? '8' : '1');
    w.u16(u.vehicle_id);
    w.u32(u.round);
    w.u32(u.sample_count);
    feddetail::put_real(w, u.validation_loss, u.wide);
    w.u32(static_cast<uint32_t>(u.weights.size()));
    for (double v : u.weights) feddetail::put_real(w, v, u.wide);
    return std::move(w.buf);
}

inline RoundUpdate decode_round_update(const std::vector<uint8_t>& buf) {
    ByteReader r(buf.data(), buf.size());
    RoundUpdate u;
    if (!feddetail::read_magic(r, 'U', u.wide))
        throw BadUpdateMessage("round update: bad magic");
    const size_t real = u.wide ? 8 : 4;
    if (!r.need(2 + 4 + 4 + real + 4)) throw BadUpdateMessage("round update: truncated header");
    u.vehicle_id = r.u16();
    u.round = r.u32();
    u.sample_count = r.u32();
    u.validation_loss = feddetail::get_real(r, u.wide);
    const uint32_t count = r.u32();
    if (!r.need(static_cast<size_t>(count) * real))
        throw BadUpdateMessage("round update: truncated weights");
    u.weights.resize(count);
    for (auto& v : u.weights) v = feddetail::get_real(r, u.wide);
    if (r.remaining() != 0) throw BadUpdateMessage("round update: trailing bytes");
    return u;
}

inline std::vector<uint8_t> encode_global_update(const GlobalUpdate& g) {
    ByteWriter w;
    w.u8('F');
    w.u8('C');
    w.u8('G');
    w.u8(g.wide ? '8' : '1');
    w.u32(g.round);
    const uint8_t flags =
        static_cast<uint8_t>((g.stop ? 1u : 0u) | (g.threshold.has_value() ? 2u : 0u));
    w.u8(flags);
    if (g.threshold) feddetail::put_real(w, *g.threshold, g.wide);
    w.u32(static_cast<uint32_t>(g.weights.size()));
    for (double v : g.weights) feddetail::put_real(w, v, g.wide);
    return std::move(w.buf);
}

inline GlobalUpdate decode_global_update(const std::vector<uint8_t>& buf) {
    ByteReader r(buf.data(), buf.size());
    GlobalUpdate g;
    if (!feddetail::read_magic(r, 'G', g.wide))
        throw BadUpdateMessage("global update: bad magic");
    const size_t real = g.wide ? 8 : 4;
    if (!r.need(4 + 1)) throw BadUpdateMessage("global update: truncated header");
    g.round = r.u32();
    const uint8_t flags = r.u8();
    if (flags & ~0x03u) throw BadUpdateMessage("global update: unknown flags");
    g.stop = (flags & 1u) != 0;
    if (flags & 2u) {
        if (!r.need(real)) throw BadUpdateMessage("global update: truncated threshold");
        g.threshold = feddetail::get_real(r, g.wide);
    }
    if (!r.need(4)) throw BadUpdateMessage("global update: truncated weight count");
    const uint32_t count = r.u32();
    if (!r.need(static_cast<size_t>(count) * real))
        throw BadUpdateMessage("global update: truncated weights");
    g.weights.resize(count);
    for (auto& v : g.weights) v = feddetail::get_real(r, g.wide);
    if (r.remaining() != 0) throw BadUpdateMessage("global update: trailing bytes");
    return g;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

// Sample-weighted elementwise mean. Coefficients n_k / N are formed first so
// a lone update passes through bit-identically, and the result is clamped to
// the per-element envelope of the inputs to keep rounding inside the hull.
inline std::vector<double> aggregate(const std::vector<RoundUpdate>& updates) {
    if (updates.empty()) throw EmptyDataset("aggregate: no updates");
    const size_t p_count = updates.front().weights.size();
    if (p_count == 0) throw BadDimensions("aggregate: empty weight vectors");
    uint64_t total = 0;
    for (const auto& u : updates) {
        if (u.weights.size() != p_count) throw BadDimensions("aggregate: size mismatch");
        total += u.sample_count;
    }
    if (total == 0) throw OutOfRange("aggregate: zero total samples");

    std::vector<double> out(p_count, 0.0);
    std::vector<double> lo(p_count, std::numeric_limits<double>::infinity());
    std::vector<double> hi(p_count, -std::numeric_limits<double>::infinity());
    for (const auto& u : updates) {
        const double coef =
            static_cast<double>(u.sample_count) / static_cast<double>(total);
        for (size_t p = 0; p < p_count; ++p) {
            out[p] += coef * u.weights[p];
            lo[p] = std::min(lo[p], u.weights[p]);
            hi[p] = std::max(hi[p], u.weights[p]);
        }
    }
    for (size_t p = 0; p < p_count; ++p) out[p] = std::clamp(out[p], lo[p], hi[p]);
    return out;
}

// Round loss used for early stopping: plain mean of the vehicles' reported
// validation losses.
inline double aggregate_validation_loss(const std::vector<RoundUpdate>& updates) {
    if (updates.empty()) throw EmptyDataset("aggregate_validation_loss: no updates");
    double acc = 0.0;
    for (const auto& u : updates) acc += u.validation_loss;
    return acc / static_cast<double>(updates.size());
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

struct EarlyStopState {
    double best = std::numeric_limits<double>::infinity();
    uint32_t stale = 0;  // consecutive rounds without improvement
    bool stopped = false;
};

// An improvement must undercut the running best by more than
// min_delta_frac * best; `patience` consecutive non-improving observations
// stop the run. Returns the stopped flag.
inline bool early_stop_step(EarlyStopState& s, double loss, double min_delta_frac,
                            uint32_t patience) {
    if (s.stopped) return true;
    const bool first = !std::isfinite(s.best);
    if (first || s.best - loss > min_delta_frac * s.best) {
        s.best = loss;
        s.stale = 0;
    } else if (++s.stale >= patience) {
        s.stopped = true;
    }
    return s.stopped;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct VehicleData {
    std::vector<FeatureWindow> train;
    std::vector<FeatureWindow> val;
};

struct RoundRecord {
    uint32_t round = 0;
    double global_loss = 0.0;
    std::vector<double> vehicle_losses;     // ordered by vehicle id
    std::vector<uint32_t> sample_counts;    // ordered by vehicle id
};

// Application-payload traffic of one agent, split into model-carrying
// messages and weightless control messages.
struct AgentTraffic {
    uint64_t model_msgs_up = 0, model_bytes_up = 0;
    uint64_t model_msgs_down = 0, model_bytes_down = 0;
    uint64_t control_msgs_up = 0, control_bytes_up = 0;
    uint64_t control_msgs_down = 0, control_bytes_down = 0;

    uint64_t bytes_up() const { return model_bytes_up + control_bytes_up; }
    uint64_t bytes_down() const { return model_bytes_down + control_bytes_down; }
};

struct FederationHistory {
    std::vector<RoundRecord> rounds;
    uint32_t rounds_run = 0;
    bool stopped_early = false;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> threshold;
    std::vector<AgentTraffic> vehicle_traffic;
    AgentTraffic server_traffic;
    std::vector<BusCounters> vehicle_bus;  // transport-level, incl. handshakes
    BusCounters server_bus;
};

struct FederationResult {
    ModelWeights model;
    FederationHistory history;
};

// ---------------------------------------------------------------------------
// Threshold search on a validation split
// ---------------------------------------------------------------------------

inline double derive_threshold(const ModelWeights& model, const std::vector<FeatureWindow>& val,
                               ThresholdMode mode, double quantile_q) {
    if (val.empty()) throw EmptyDataset("derive_threshold: no validation windows");
    Workspace ws;
    std::vector<double> clean, attacked;
    for (const auto& fw : val) {
        const double e = reconstruction_error(model, fw, ws);
        (fw.label == AttackKind::None ? clean : attacked).push_back(e);
    }
    if (mode == ThresholdMode::LabeledOptimal) return optimal_threshold(clean, attacked);
    // quantile of the clean errors (all errors when nothing is labeled clean)
    if (!clean.empty()) return quantile(std::move(clean), quantile_q);
    return quantile(std::move(attacked), quantile_q);
}

// ---------------------------------------------------------------------------
// Federated run
// ---------------------------------------------------------------------------

namespace feddetail {

struct SharedFlags {
    std::atomic<uint32_t> subscribed{0};
    std::atomic<bool> server_done{false};
    std::atomic<uint32_t> vehicles_done{0};
    std::atomic<bool> failed{false};
    std::mutex err_mu;
    std::string error;

    void fail(const std::string& what) {
        {
            std::lock_guard<std::mutex> lk(err_mu);
            if (error.empty()) error = what;
        }
        failed.store(true);
    }
};

struct ServerAgent {
    const FederationConfig* cfg = nullptr;
    std::shared_ptr<BusClient> client;
    SharedFlags* flags = nullptr;

    ModelWeights global;
    EarlyStopState stop_state;
    std::map<uint16_t, RoundUpdate> pending;
    uint32_t round = 1;
    bool finale_sent = false;

    std::vector<RoundRecord> rounds;
    uint32_t rounds_run = 0;
    bool stopped_early = false;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> threshold;
    AgentTraffic traffic;

    void broadcast(uint32_t r, bool stop) {
        GlobalUpdate g;
        g.round = r;
        g.stop = stop;
        g.weights = global.w;
        g.wide = cfg->wide_weights;
        auto payload = encode_global_update(g);
        ++traffic.model_msgs_up;
        traffic.model_bytes_up += payload.size();
        client->publish(kTopicGlobal, std::move(payload), [f = flags](bool ok) {
            if (!ok) f->fail("server: broadcast publish failed");
        });
    }

    void on_update(const std::vector<uint8_t>& payload) {
        const RoundUpdate u = decode_round_update(payload);
        if (u.weights.empty()) {
            // control message: the threshold report
            ++traffic.control_msgs_down;
            traffic.control_bytes_down += payload.size();
            threshold = u.validation_loss;
            GlobalUpdate g;
            g.round = round + 1;
            g.stop = true;
            g.threshold = threshold;
            g.wide = cfg->wide_weights;
            auto out = encode_global_update(g);
            ++traffic.control_msgs_up;
            traffic.control_bytes_up += out.size();
            client->publish(kTopicGlobal, std::move(out), [f = flags](bool ok) {
                if (!ok) f->fail("server: threshold broadcast failed");
            });
            flags->server_done.store(true);
            return;
        }
        ++traffic.model_msgs_down;
        traffic.model_bytes_down += payload.size();
        if (finale_sent || u.round != round) return;  // stale or late update
        pending[u.vehicle_id] = u;
        if (pending.size() < cfg->vehicles) return;

        std::vector<RoundUpdate> updates;
        updates.reserve(pending.size());
        for (auto& [id, up] : pending) updates.push_back(std::move(up));
        pending.clear();

        global.w = aggregate(updates);
        const double loss = aggregate_validation_loss(updates);
        RoundRecord rec;
        rec.round = round;
        rec.global_loss = loss;
        for (const auto& up : updates) {
            rec.vehicle_losses.push_back(up.validation_loss);
            rec.sample_counts.push_back(up.sample_count);
        }
        rounds.push_back(std::move(rec));
        rounds_run = round;
        final_loss = loss;

        const bool stop_now =
            cfg->early_stopping && early_stop_step(stop_state, loss, cfg->min_delta_frac,
                                                   cfg->patience);
        if (stop_now || round == cfg->rounds) {
            stopped_early = stop_now;
            finale_sent = true;
            broadcast(round + 1, true);
        } else {
            ++round;
            broadcast(round, false);
        }
    }
};

struct VehicleAgent {
    const FederationConfig* cfg = nullptr;
    uint16_t id = 0;
    const VehicleData* data = nullptr;
    std::shared_ptr<BusClient> client;
    SharedFlags* flags = nullptr;

    ModelWeights model;
    TrainerState trainer;
    AgentTraffic traffic;

    void on_global(const std::vector<uint8_t>& payload) {
        const GlobalUpdate g = decode_global_update(payload);
        if (g.threshold.has_value()) {
            ++traffic.control_msgs_down;
            traffic.control_bytes_down += payload.size();
            flags->vehicles_done.fetch_add(1);
            return;
        }
        ++traffic.model_msgs_down;
        traffic.model_bytes_down += payload.size();
        if (g.weights.size() != model.w.size())
            throw BadDimensions("vehicle: global weight count mismatch");

        // the reported loss is measured on the weights as received,
        // before any local training
        model.w = g.weights;
        const double val_loss = mean_error(model, data->val);

        if (g.stop) {
            if (id == cfg->threshold_vehicle) {
                const double thr =
                    derive_threshold(model, data->val, cfg->threshold_mode, cfg->quantile_q);
                RoundUpdate u;
                u.vehicle_id = id;
                u.round = g.round;
                u.sample_count = 0;
                u.validation_loss = thr;
                u.wide = cfg->wide_weights;
                auto out = encode_round_update(u);
                ++traffic.control_msgs_up;
                traffic.control_bytes_up += out.size();
                client->publish(kTopicLocal, std::move(out), [f = flags](bool ok) {
                    if (!ok) f->fail("vehicle: threshold report failed");
                });
            }
            return;  // wait for the threshold broadcast
        }

        const std::vector<double> anchor = cfg->mu != 0.0 ? g.weights : std::vector<double>{};
        local_train(model, data->train, cfg->local_epochs, cfg->opt, cfg->mu, anchor, trainer,
                    Rng::mix(cfg->seed, id));

        RoundUpdate u;
        u.vehicle_id = id;
        u.round = g.round;
        u.sample_count = static_cast<uint32_t>(data->train.size());
        u.validation_loss = val_loss;
        u.weights = model.w;
        u.wide = cfg->wide_weights;
        auto out = encode_round_update(u);
        ++traffic.model_msgs_up;
        traffic.model_bytes_up += out.size();
        client->publish(kTopicLocal, std::move(out), [f = flags](bool ok) {
            if (!ok) f->fail("vehicle: update publish failed");
        });
    }
};

}  // namespace feddetail

inline FederationResult run_federation(Transport& bus, const FederationConfig& cfg,
                                       const ArchConfig& arch,
                                       const std::vector<VehicleData>& data) {
    cfg.validate();
    arch.validate();
    if (data.size() != cfg.vehicles)
        throw BadDimensions("run_federation: need one dataset per vehicle");
    for (const auto& d : data) {
        if (d.train.empty()) throw EmptyDataset("run_federation: vehicle without training data");
        if (d.val.empty()) throw EmptyDataset("run_federation: vehicle without validation data");
    }

    auto flags = std::make_shared<feddetail::SharedFlags>();
    auto server = std::make_shared<feddetail::ServerAgent>();
    server->cfg = &cfg;
    server->flags = flags.get();
    server->global = init_weights(arch, cfg.seed);
    server->client = bus.make_client("server");

    std::vector<std::shared_ptr<feddetail::VehicleAgent>> vehicles;
    for (uint32_t i = 0; i < cfg.vehicles; ++i) {
        auto v = std::make_shared<feddetail::VehicleAgent>();
        v->cfg = &cfg;
        v->id = static_cast<uint16_t>(i);
        v->data = &data[i];
        v->flags = flags.get();
        v->model.arch = arch;
        v->model.w.assign(arch.param_count(), 0.0);
        v->client = bus.make_client("vehicle-" + std::to_string(i));
        vehicles.push_back(std::move(v));
    }

    auto guard = [flags](const char* who, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            flags->fail(std::string(who) + ": " + e.what());
        }
    };

    // all subscriptions must be live before the first broadcast
    server->client->subscribe(
        kTopicLocal,
        [server, guard](std::vector<uint8_t> payload) {
            guard("server", [&] { server->on_update(payload); });
        },
        [flags](bool ok) {
            if (ok)
                flags->subscribed.fetch_add(1);
            else
                flags->fail("server: subscription refused");
        });
    for (auto& v : vehicles) {
        v->client->subscribe(
            kTopicGlobal,
            [v, guard](std::vector<uint8_t> payload) {
                guard("vehicle", [&] { v->on_global(payload); });
            },
            [flags](bool ok) {
                if (ok)
                    flags->subscribed.fetch_add(1);
                else
                    flags->fail("vehicle: subscription refused");
            });
    }
    bus.drive(
        [&] {
            return flags->failed.load() || flags->subscribed.load() == cfg.vehicles + 1;
        },
        cfg.run_timeout_s);
    if (flags->failed.load()) {
        std::lock_guard<std::mutex> lk(flags->err_mu);
        throw std::runtime_error("federation failed: " + flags->error);
    }

    // round 1 kick-off; everything after this is driven by message handlers
    server->broadcast(1, false);
    bus.drive(
        [&] {
            return flags->failed.load() ||
                   (flags->server_done.load() &&
                    flags->vehicles_done.load() == cfg.vehicles);
        },
        cfg.run_timeout_s);
    if (flags->failed.load()) {
        std::lock_guard<std::mutex> lk(flags->err_mu);
        throw std::runtime_error("federation failed: " + flags->error);
    }

    FederationResult res;
    res.model = server->global;
    res.history.rounds = std::move(server->rounds);
    res.history.rounds_run = server->rounds_run;
    res.history.stopped_early = server->stopped_early;
    res.history.final_loss = server->final_loss;
    res.history.threshold = server->threshold;
    res.history.server_traffic = server->traffic;
    res.history.server_bus = server->client->counters();
    for (auto& v : vehicles) {
        res.history.vehicle_traffic.push_back(v->traffic);
        res.history.vehicle_bus.push_back(v->client->counters());
    }
    // release the clients while the agents are still alive: transports join
    // their worker threads here, and dropping the reference breaks the
    // agent -> client -> handler -> agent ownership cycle
    server->client.reset();
    for (auto& v : vehicles) v->client.reset();
    return res;
}

// ---------------------------------------------------------------------------
// Centralized reference training
// ---------------------------------------------------------------------------

struct CentralizedConfig {
    uint32_t max_steps = 200;       // upper bound, analogous to rounds
    uint32_t epochs_per_step = 1;   // epochs between validation checks
    bool early_stopping = true;
    uint32_t patience = 10;
    double min_delta_frac = 0.03;
    OptimizerConfig opt;
    uint64_t seed = 1;

    void validate() const {
        if (max_steps < 1) throw OutOfRange("centralized: max_steps must be >= 1");
        if (epochs_per_step < 1) throw OutOfRange("centralized: epochs_per_step must be >= 1");
        if (patience < 1) throw OutOfRange("centralized: patience must be >= 1");
        if (!(min_delta_frac >= 0.0) || min_delta_frac >= 1.0)
            throw OutOfRange("centralized: min_delta_frac must be in [0, 1)");
    }
};

struct CentralizedResult {
    ModelWeights model;
    std::vector<double> step_losses;  // validation loss before each step
    uint32_t steps_run = 0;
    bool stopped_early = false;
};

// Single-site training with the same schedule the federated run would use:
// per step, the validation loss is measured first (on the incoming weights),
// then the model trains for epochs_per_step epochs. The stop decision after
// a step keeps that step's training, exactly like a federated round.
inline CentralizedResult run_centralized(const ArchConfig& arch,
                                         const std::vector<FeatureWindow>& train,
                                         const std::vector<FeatureWindow>& val,
                                         const CentralizedConfig& cfg) {
    cfg.validate();
    arch.validate();
    if (train.empty()) throw EmptyDataset("run_centralized: no training windows");
    if (val.empty()) throw EmptyDataset("run_centralized: no validation windows");

    CentralizedResult res;
    res.model = init_weights(arch, cfg.seed);
    TrainerState state;
    EarlyStopState stop;
    for (uint32_t s = 1; s <= cfg.max_steps; ++s) {
        const double loss = mean_error(res.model, val);
        local_train(res.model, train, cfg.epochs_per_step, cfg.opt, 0.0, {}, state,
                    Rng::mix(cfg.seed, 0));
        res.step_losses.push_back(loss);
        res.steps_run = s;
        if (cfg.early_stopping && early_stop_step(stop, loss, cfg.min_delta_frac,
                                                  cfg.patience)) {
            res.stopped_early = true;
            break;
        }
    }
    return res;
}

}  // namespace fcw
