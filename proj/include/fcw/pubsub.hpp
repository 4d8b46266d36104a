#pragma once
// Topic-based publish/subscribe with QoS-2 (exactly-once) delivery.
//
// Wire format, little-endian:
//   u32 length of everything after this field
//   u8  message type
//   u16 packet id (0 where unused)
//   [u16 topic length + topic bytes]   PUBLISH and SUBSCRIBE only
//   payload bytes
//
// Exactly-once handshake: PUBLISH -> PUBREC -> PUBREL -> PUBCOMP. The
// receiver hands the message to the application when PUBREL arrives; a
// PUBREL for an unknown packet id is answered with PUBCOMP and nothing is
// delivered (the release was a retransmission of an already-completed
// exchange). Senders keep one message in flight per connection and retry
// the outstanding frame on a timer.
//
// The protocol core is transport-agnostic: frames travel through a
// FrameConduit and retries are armed on a TimerHost. A deterministic
// single-process loopback transport lives below; a socket transport is in
// pubsub_tcp.hpp. Both run the same broker and client state machines.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "fcw/util.hpp"

namespace fcw {

struct MalformedFrame : std::runtime_error {
    explicit MalformedFrame(const std::string& what) : std::runtime_error(what) {}
};
struct AuthFailed : std::runtime_error {
    explicit AuthFailed(const std::string& what) : std::runtime_error(what) {}
};
struct RetryExhausted : std::runtime_error {
    explicit RetryExhausted(const std::string& what) : std::runtime_error(what) {}
};
struct InvalidTopic : std::runtime_error {
    explicit InvalidTopic(const std::string& what) : std::runtime_error(what) {}
};
struct StalledRound : std::runtime_error {
    explicit StalledRound(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

enum class MsgType : uint8_t {
    Connect = 1,
    Connack = 2,
    Subscribe = 3,
    Suback = 4,
    Publish = 5,
    Pubrec = 6,
    Pubrel = 7,
    Pubcomp = 8,
    Ping = 9,
    Pong = 10,
};

inline constexpr const char* kTopicLocal = "fl/local";    // vehicle -> server
inline constexpr const char* kTopicGlobal = "fl/global";  // server -> vehicles
inline constexpr uint32_t kMaxFrameBody = 64u << 20;
inline constexpr uint8_t kConnackOk = 0x00;
inline constexpr uint8_t kConnackBadToken = 0x05;

struct WireFrame {
    MsgType type = MsgType::Ping;
    uint16_t packet_id = 0;
    std::string topic;             // PUBLISH / SUBSCRIBE only
    std::vector<uint8_t> payload;

    bool operator==(const WireFrame& o) const {
        return type == o.type && packet_id == o.packet_id && topic == o.topic &&
               payload == o.payload;
    }
};

inline bool frame_has_topic(MsgType t) {
    return t == MsgType::Publish || t == MsgType::Subscribe;
}

inline bool is_valid_topic(const std::string& t) {
    if (t.empty() || t.size() > 1024) return false;
    for (unsigned char c : t)
        if (c <= 0x20 || c >= 0x7F) return false;
    return true;
}

inline size_t wire_size(const WireFrame& f) {
    return 4 + 1 + 2 + (frame_has_topic(f.type) ? 2 + f.topic.size() : 0) + f.payload.size();
}

inline std::vector<uint8_t> encode_frame(const WireFrame& f) {
    if (frame_has_topic(f.type) && !is_valid_topic(f.topic))
        throw InvalidTopic("encode_frame: bad topic '" + f.topic + "'");
    ByteWriter w;
    const size_t body = wire_size(f) - 4;
    w.u32(static_cast<uint32_t>(body));
    w.u8(static_cast<uint8_t>(f.type));
    w.u16(f.packet_id);
    if (frame_has_topic(f.type)) {
        w.u16(static_cast<uint16_t>(f.topic.size()));
        w.bytes(f.topic.data(), f.topic.size());
    }
    w.bytes(f.payload.data(), f.payload.size());
    return std::move(w.buf);
}

// Decodes one complete frame occupying the whole buffer.
inline WireFrame decode_frame(const uint8_t* data, size_t size) {
    ByteReader r(data, size);
    if (!r.need(7)) throw MalformedFrame("frame shorter than fixed header");
    const uint32_t body = r.u32();
    if (body > kMaxFrameBody) throw MalformedFrame("frame body exceeds limit");
    if (body + 4 != size) throw MalformedFrame("length field disagrees with buffer");
    WireFrame f;
    const uint8_t t = r.u8();
    if (t < 1 || t > 10) throw MalformedFrame("unknown message type " + std::to_string(t));
    f.type = static_cast<MsgType>(t);
    f.packet_id = r.u16();
    if (frame_has_topic(f.type)) {
        if (!r.need(2)) throw MalformedFrame("truncated topic length");
        const uint16_t tl = r.u16();
        if (!r.need(tl)) throw MalformedFrame("truncated topic");
        f.topic.resize(tl);
        r.bytes(f.topic.data(), tl);
        if (!is_valid_topic(f.topic)) throw MalformedFrame("invalid topic");
    }
    f.payload.resize(r.remaining());
    r.bytes(f.payload.data(), f.payload.size());
    switch (f.type) {
        case MsgType::Publish:
        case MsgType::Pubrec:
        case MsgType::Pubrel:
        case MsgType::Pubcomp:
            if (f.packet_id == 0) throw MalformedFrame("packet id 0 in a QoS frame");
            break;
        case MsgType::Subscribe:
            if (f.packet_id == 0) throw MalformedFrame("packet id 0 in SUBSCRIBE");
            if (!f.payload.empty()) throw MalformedFrame("SUBSCRIBE carries a payload");
            break;
        default:
            break;
    }
    return f;
}

inline WireFrame decode_frame(const std::vector<uint8_t>& buf) {
    return decode_frame(buf.data(), buf.size());
}

// Stream parser: returns a frame and the bytes consumed once the buffer holds
// a complete one, nullopt while more bytes are needed.
inline std::optional<std::pair<WireFrame, size_t>> try_decode_stream(const uint8_t* data,
                                                                     size_t size) {
    if (size < 4) return std::nullopt;
    ByteReader r(data, size);
    const uint32_t body = r.u32();
    if (body > kMaxFrameBody) throw MalformedFrame("frame body exceeds limit");
    if (size < 4 + static_cast<size_t>(body)) return std::nullopt;
    return std::make_pair(decode_frame(data, 4 + body), 4 + static_cast<size_t>(body));
}

// ---------------------------------------------------------------------------
// Transport abstraction used by the protocol cores
// ---------------------------------------------------------------------------

struct FrameConduit {
    virtual ~FrameConduit() = default;
    virtual void conduit_send(const WireFrame& f, bool retransmission) = 0;
    virtual void conduit_close() = 0;
};

struct TimerHost {
    virtual ~TimerHost() = default;
    virtual uint64_t timer_schedule(double delay_s, std::function<void()> fn) = 0;
    virtual void timer_cancel(uint64_t id) = 0;
};

struct QosConfig {
    double retry_timeout_s = 1.0;
    int max_retries = 10;
};

struct BusCounters {
    uint64_t frames_tx = 0, frames_rx = 0;
    uint64_t bytes_tx = 0, bytes_rx = 0;
    uint64_t retx_frames = 0, retx_bytes = 0;
    uint64_t msgs_published = 0, msgs_delivered = 0;

    void count_tx(const WireFrame& f, bool retx) {
        ++frames_tx;
        bytes_tx += wire_size(f);
        if (retx) {
            ++retx_frames;
            retx_bytes += wire_size(f);
        }
    }
    void count_rx(const WireFrame& f) {
        ++frames_rx;
        bytes_rx += wire_size(f);
    }
};

// ---------------------------------------------------------------------------
// QoS-2 sender: one in-flight message, FIFO queue behind it
// ---------------------------------------------------------------------------

class Qos2Sender {
public:
    using Completion = std::function<void(bool ok)>;

    Qos2Sender(FrameConduit* out, TimerHost* timers, QosConfig cfg)
        : out_(out), timers_(timers), cfg_(cfg) {}

    ~Qos2Sender() { abandon(); }

    void publish(const std::string& topic, std::vector<uint8_t> payload, Completion done) {
        queue_.push_back(Pending{topic, std::move(payload), std::move(done)});
        if (state_ == State::Idle) start_next();
    }

    void on_pubrec(uint16_t id) {
        if (id != current_id_ || state_ == State::Idle) return;
        if (state_ == State::AwaitRec) {
            state_ = State::AwaitComp;
            retries_ = 0;
            rearm();
            out_->conduit_send(rel_frame(), false);
        } else {
            // duplicate PUBREC: our PUBREL was lost, answer it again
            out_->conduit_send(rel_frame(), true);
        }
    }

    void on_pubcomp(uint16_t id) {
        if (state_ != State::AwaitComp || id != current_id_) return;
        disarm();
        state_ = State::Idle;
        Completion done = std::move(current_done_);
        current_done_ = nullptr;
        if (done) done(true);
        start_next();
    }

    bool idle() const { return state_ == State::Idle && queue_.empty(); }
    size_t backlog() const { return queue_.size() + (state_ == State::Idle ? 0 : 1); }

    // Cancels the timer and fails everything outstanding.
    void shutdown() {
        disarm();
        state_ = State::Idle;
        if (current_done_) {
            auto done = std::move(current_done_);
            current_done_ = nullptr;
            done(false);
        }
        while (!queue_.empty()) {
            auto p = std::move(queue_.front());
            queue_.pop_front();
            if (p.done) p.done(false);
        }
    }

    // Cancels the timer and drops everything outstanding without firing any
    // completion: destructors must never call back into application code.
    void abandon() {
        disarm();
        state_ = State::Idle;
        current_done_ = nullptr;
        queue_.clear();
    }

private:
    enum class State { Idle, AwaitRec, AwaitComp };

    struct Pending {
        std::string topic;
        std::vector<uint8_t> payload;
        Completion done;
    };

    void start_next() {
        if (queue_.empty()) return;
        Pending p = std::move(queue_.front());
        queue_.pop_front();
        current_id_ = next_id_;
        next_id_ = static_cast<uint16_t>(next_id_ == 0xFFFF ? 1 : next_id_ + 1);
        current_topic_ = std::move(p.topic);
        current_payload_ = std::move(p.payload);
        current_done_ = std::move(p.done);
        retries_ = 0;
        state_ = State::AwaitRec;
        rearm();
        out_->conduit_send(pub_frame(), false);
    }

    WireFrame pub_frame() const {
        WireFrame f;
        f.type = MsgType::Publish;
        f.packet_id = current_id_;
        f.topic = current_topic_;
        f.payload = current_payload_;
        return f;
    }
    WireFrame rel_frame() const {
        WireFrame f;
        f.type = MsgType::Pubrel;
        f.packet_id = current_id_;
        return f;
    }

    void rearm() {
        disarm();
        timer_ = timers_->timer_schedule(cfg_.retry_timeout_s, [this] { on_timeout(); });
        timer_armed_ = true;
    }
    void disarm() {
        if (timer_armed_) {
            timers_->timer_cancel(timer_);
            timer_armed_ = false;
        }
    }

    void on_timeout() {
        timer_armed_ = false;
        if (state_ == State::Idle) return;
        if (retries_ >= cfg_.max_retries) {
            state_ = State::Idle;
            Completion done = std::move(current_done_);
            current_done_ = nullptr;
            if (done) done(false);
            start_next();
            return;
        }
        ++retries_;
        rearm();
        out_->conduit_send(state_ == State::AwaitRec ? pub_frame() : rel_frame(), true);
    }

    FrameConduit* out_;
    TimerHost* timers_;
    QosConfig cfg_;
    State state_ = State::Idle;
    uint16_t next_id_ = 1;
    uint16_t current_id_ = 0;
    std::string current_topic_;
    std::vector<uint8_t> current_payload_;
    Completion current_done_;
    int retries_ = 0;
    uint64_t timer_ = 0;
    bool timer_armed_ = false;
    std::deque<Pending> queue_;
};

// ---------------------------------------------------------------------------
// QoS-2 receiver
// ---------------------------------------------------------------------------

class Qos2Receiver {
public:
    using Deliver = std::function<void(const std::string& topic, std::vector<uint8_t> payload)>;

    Qos2Receiver(FrameConduit* out, Deliver deliver) : out_(out), deliver_(std::move(deliver)) {}

    void on_publish(const WireFrame& f) {
        // a repeated id overwrites the stored copy (sender retransmission)
        const bool dup = pending_.count(f.packet_id) != 0;
        pending_[f.packet_id] = Stored{f.topic, f.payload};
        WireFrame rec;
        rec.type = MsgType::Pubrec;
        rec.packet_id = f.packet_id;
        out_->conduit_send(rec, dup);
    }

    void on_pubrel(uint16_t id) {
        auto it = pending_.find(id);
        WireFrame comp;
        comp.type = MsgType::Pubcomp;
        comp.packet_id = id;
        if (it == pending_.end()) {
            // already delivered; the sender just missed our PUBCOMP
            out_->conduit_send(comp, true);
            return;
        }
        Stored msg = std::move(it->second);
        pending_.erase(it);
        // complete the handshake before running application code so a slow
        // handler cannot stall the reverse path
        out_->conduit_send(comp, false);
        if (deliver_) deliver_(msg.topic, std::move(msg.payload));
    }

private:
    struct Stored {
        std::string topic;
        std::vector<uint8_t> payload;
    };
    FrameConduit* out_;
    Deliver deliver_;
    std::map<uint16_t, Stored> pending_;
};

// ---------------------------------------------------------------------------
// Broker core (transport provides conduits and threading/locking)
// ---------------------------------------------------------------------------

class BrokerCore {
public:
    BrokerCore(std::string token, TimerHost* timers, QosConfig cfg = {})
        : token_(std::move(token)), timers_(timers), cfg_(cfg) {}

    void add_connection(uint64_t conn_id, FrameConduit* out) {
        auto& c = conns_[conn_id];
        c.out = out;
        c.sender = std::make_unique<Qos2Sender>(out, timers_, cfg_);
        c.receiver = std::make_unique<Qos2Receiver>(
            out, [this](const std::string& topic, std::vector<uint8_t> payload) {
                route(topic, payload);
            });
    }

    void remove_connection(uint64_t conn_id) { conns_.erase(conn_id); }

    void on_frame(uint64_t conn_id, const WireFrame& f) {
        auto it = conns_.find(conn_id);
        if (it == conns_.end()) return;
        Conn& c = it->second;

        if (f.type == MsgType::Connect) {
            const std::string supplied(f.payload.begin(), f.payload.end());
            WireFrame ack;
            ack.type = MsgType::Connack;
            const bool ok = supplied == token_;
            ack.payload = {ok ? kConnackOk : kConnackBadToken};
            c.out->conduit_send(ack, c.authed);
            if (ok) {
                c.authed = true;
            } else {
                c.out->conduit_close();
            }
            return;
        }
        if (!c.authed) {
            c.out->conduit_close();
            return;
        }
        switch (f.type) {
            case MsgType::Subscribe: {
                c.topics.insert(f.topic);
                WireFrame ack;
                ack.type = MsgType::Suback;
                ack.packet_id = f.packet_id;
                c.out->conduit_send(ack, false);
                break;
            }
            case MsgType::Publish:
                c.receiver->on_publish(f);
                break;
            case MsgType::Pubrel:
                c.receiver->on_pubrel(f.packet_id);
                break;
            case MsgType::Pubrec:
                c.sender->on_pubrec(f.packet_id);
                break;
            case MsgType::Pubcomp:
                c.sender->on_pubcomp(f.packet_id);
                break;
            case MsgType::Ping: {
                WireFrame pong;
                pong.type = MsgType::Pong;
                c.out->conduit_send(pong, false);
                break;
            }
            case MsgType::Pong:
                break;
            default:
                c.out->conduit_close();
                break;
        }
    }

    size_t connection_count() const { return conns_.size(); }

    size_t subscriber_count(const std::string& topic) const {
        size_t n = 0;
        for (const auto& [id, c] : conns_)
            if (c.authed && c.topics.count(topic)) ++n;
        return n;
    }

private:
    struct Conn {
        FrameConduit* out = nullptr;
        bool authed = false;
        std::set<std::string> topics;
        std::unique_ptr<Qos2Sender> sender;
        std::unique_ptr<Qos2Receiver> receiver;
    };

    // fan out to every subscriber, in connection order (no persistence:
    // zero subscribers means the message is dropped)
    void route(const std::string& topic, const std::vector<uint8_t>& payload) {
        for (auto& [id, c] : conns_)
            if (c.authed && c.topics.count(topic)) c.sender->publish(topic, payload, nullptr);
    }

    std::string token_;
    TimerHost* timers_;
    QosConfig cfg_;
    std::map<uint64_t, Conn> conns_;
};

// ---------------------------------------------------------------------------
// Client core
// ---------------------------------------------------------------------------

class ClientCore {
public:
    using MessageHandler = std::function<void(std::vector<uint8_t> payload)>;
    using Done = std::function<void(bool ok)>;

    ClientCore(FrameConduit* out, TimerHost* timers, QosConfig cfg)
        : out_(out),
          timers_(timers),
          cfg_(cfg),
          sender_(out, timers, cfg),
          receiver_(out, [this](const std::string& topic, std::vector<uint8_t> payload) {
              dispatch(topic, std::move(payload));
          }) {}

    ~ClientCore() { abandon(); }

    enum class State { Fresh, Connecting, Ready, Failed };
    State state() const { return state_; }

    // Fires on every state transition; transports use it to unblock waiters.
    std::function<void()> on_state_change;
    // Receives messages for topics nobody subscribed to locally (unexpected).
    std::function<void(const std::string&, std::vector<uint8_t>)> on_stray;

    void connect(const std::string& token) {
        state_ = State::Connecting;
        WireFrame f;
        f.type = MsgType::Connect;
        f.payload.assign(token.begin(), token.end());
        start_control(0, std::move(f), [this](bool ok) {
            state_ = ok ? State::Ready : State::Failed;
            if (state_ == State::Ready) {
                auto q = std::move(deferred_);
                deferred_.clear();
                for (auto& fn : q) fn();
            } else {
                fail_deferred();
            }
            if (on_state_change) on_state_change();
        });
    }

    void subscribe(const std::string& topic, MessageHandler handler, Done done) {
        if (!is_valid_topic(topic)) throw InvalidTopic("subscribe: bad topic '" + topic + "'");
        handlers_[topic] = std::move(handler);
        run_or_defer([this, topic, done = std::move(done)]() mutable {
            WireFrame f;
            f.type = MsgType::Subscribe;
            f.packet_id = next_control_id();
            f.topic = topic;
            start_control(f.packet_id, std::move(f), std::move(done));
        });
    }

    void publish(const std::string& topic, std::vector<uint8_t> payload, Done done) {
        if (!is_valid_topic(topic)) throw InvalidTopic("publish: bad topic '" + topic + "'");
        run_or_defer([this, topic, payload = std::move(payload), done = std::move(done)]() mutable {
            sender_.publish(topic, std::move(payload), std::move(done));
        });
    }

    void ping() {
        WireFrame f;
        f.type = MsgType::Ping;
        out_->conduit_send(f, false);
    }

    void on_frame(const WireFrame& f) {
        switch (f.type) {
            case MsgType::Connack: {
                const bool ok = !f.payload.empty() && f.payload[0] == kConnackOk;
                finish_control(0, ok);
                break;
            }
            case MsgType::Suback:
                finish_control(f.packet_id, true);
                break;
            case MsgType::Publish:
                receiver_.on_publish(f);
                break;
            case MsgType::Pubrel:
                receiver_.on_pubrel(f.packet_id);
                break;
            case MsgType::Pubrec:
                sender_.on_pubrec(f.packet_id);
                break;
            case MsgType::Pubcomp:
                sender_.on_pubcomp(f.packet_id);
                break;
            case MsgType::Pong:
            default:
                break;
        }
    }

    void shutdown() {
        for (auto& [id, op] : controls_)
            if (op.timer_armed) timers_->timer_cancel(op.timer);
        controls_.clear();
        sender_.shutdown();
    }

    // Destruction-time teardown: cancel timers and drop pending operations
    // without invoking their completions.
    void abandon() {
        for (auto& [id, op] : controls_)
            if (op.timer_armed) timers_->timer_cancel(op.timer);
        controls_.clear();
        sender_.abandon();
    }

private:
    struct ControlOp {
        WireFrame frame;
        int retries = 0;
        uint64_t timer = 0;
        bool timer_armed = false;
        Done done;
    };

    uint16_t next_control_id() {
        control_id_ = static_cast<uint16_t>(control_id_ == 0xFFFF ? 1 : control_id_ + 1);
        return control_id_;
    }

    void run_or_defer(std::function<void()> fn) {
        if (state_ == State::Ready) {
            fn();
        } else if (state_ == State::Failed) {
            // drop silently into the failure path: callers learn via done(false)
            deferred_.push_back(std::move(fn));
            fail_deferred();
        } else {
            deferred_.push_back(std::move(fn));
        }
    }

    void fail_deferred() {
        // run deferred requests against a dead sender so completions fire
        auto q = std::move(deferred_);
        deferred_.clear();
        for (auto& fn : q) fn();
        sender_.shutdown();
    }

    // CONNECT and SUBSCRIBE retry on the same timer policy as publishes; the
    // broker treats both idempotently.
    void start_control(uint16_t id, WireFrame f, Done done) {
        if (state_ == State::Failed && id != 0) {
            if (done) done(false);
            return;
        }
        ControlOp op;
        op.frame = std::move(f);
        op.done = std::move(done);
        auto [it, fresh] = controls_.insert_or_assign(id, std::move(op));
        arm_control(id);
        out_->conduit_send(it->second.frame, false);
    }

    void arm_control(uint16_t id) {
        auto& op = controls_[id];
        op.timer = timers_->timer_schedule(cfg_.retry_timeout_s, [this, id] {
            auto it = controls_.find(id);
            if (it == controls_.end()) return;
            it->second.timer_armed = false;
            if (it->second.retries >= cfg_.max_retries) {
                finish_control(id, false);
                return;
            }
            ++it->second.retries;
            out_->conduit_send(it->second.frame, true);
            arm_control(id);
        });
        op.timer_armed = true;
    }

    void finish_control(uint16_t id, bool ok) {
        auto it = controls_.find(id);
        if (it == controls_.end()) return;
        if (it->second.timer_armed) timers_->timer_cancel(it->second.timer);
        Done done = std::move(it->second.done);
        controls_.erase(it);
        if (done) done(ok);
    }

    void dispatch(const std::string& topic, std::vector<uint8_t> payload) {
        auto it = handlers_.find(topic);
        if (it != handlers_.end() && it->second) {
            it->second(std::move(payload));
        } else if (on_stray) {
            on_stray(topic, std::move(payload));
        }
    }

    FrameConduit* out_;
    TimerHost* timers_;
    QosConfig cfg_;
    Qos2Sender sender_;
    Qos2Receiver receiver_;
    State state_ = State::Fresh;
    uint16_t control_id_ = 0;
    std::map<uint16_t, ControlOp> controls_;
    std::map<std::string, MessageHandler> handlers_;
    std::vector<std::function<void()>> deferred_;
};

// ---------------------------------------------------------------------------
// Application-facing interfaces
// ---------------------------------------------------------------------------

class BusClient {
public:
    using MessageHandler = ClientCore::MessageHandler;
    using Done = ClientCore::Done;

    virtual ~BusClient() = default;
    // done (optional) fires once the broker has acknowledged the subscription
    virtual void subscribe(const std::string& topic, MessageHandler handler,
                           Done done = nullptr) = 0;
    virtual void publish(const std::string& topic, std::vector<uint8_t> payload,
                         Done done = nullptr) = 0;
    virtual BusCounters counters() const = 0;
    virtual const std::string& name() const = 0;
};

class Transport {
public:
    virtual ~Transport() = default;
    virtual std::shared_ptr<BusClient> make_client(const std::string& name) = 0;
    // Runs/waits until done() holds; throws StalledRound when progress stops.
    virtual void drive(const std::function<bool()>& done, double timeout_s) = 0;
    virtual double now_s() const = 0;
};

// ---------------------------------------------------------------------------
// Deterministic loopback transport
// ---------------------------------------------------------------------------
//
// Single-threaded discrete-event simulator. Events execute in (time, seq)
// order under a virtual clock, so a given seed reproduces a run exactly.
// Frames may be dropped, duplicated or delayed by seeded faults, but each
// per-direction channel stays FIFO. Handshake legs carry fixed latencies so
// end-to-end exchange times can be shaped: the four legs of a client-
// initiated publish exchange each take publish_exchange_s / 4, the four legs
// of a broker-to-subscriber delivery take subscribe_exchange_s / 4.

struct FaultSpec {
    double drop = 0.0;       // per-frame drop probability
    double dup = 0.0;        // per-frame duplication probability
    double delay = 0.0;      // per-frame probability of extra latency
    double max_delay_s = 0.05;
    uint64_t seed = 1;
};

struct SimLatency {
    double publish_exchange_s = 0.0;    // client PUBLISH..PUBCOMP round trip
    double subscribe_exchange_s = 0.0;  // broker delivery round trip
    double control_s = 0.0;             // everything else, one way
};

class LoopbackTransport final : public Transport, public TimerHost {
public:
    explicit LoopbackTransport(std::string token, FaultSpec faults = {}, SimLatency lat = {},
                               QosConfig qos = {})
        : token_(std::move(token)),
          faults_(faults),
          lat_(lat),
          qos_(qos),
          rng_(faults.seed),
          broker_(token_, this, qos) {}

    ~LoopbackTransport() override {
        // Queued events may hold the last reference to a client, and client
        // teardown cancels timers through this object, so the queue and the
        // clients must go while the timer bookkeeping is still alive.
        events_.clear();
        clients_.clear();
    }

    // --- TimerHost ---
    uint64_t timer_schedule(double delay_s, std::function<void()> fn) override {
        return push_event(now_ + delay_s, std::move(fn));
    }
    void timer_cancel(uint64_t id) override { cancelled_.insert(id); }

    // --- Transport ---
    std::shared_ptr<BusClient> make_client(const std::string& name) override {
        return make_client_with_token(name, token_);
    }

    std::shared_ptr<BusClient> make_client_with_token(const std::string& name,
                                                      const std::string& token);

    void drive(const std::function<bool()>& done, double timeout_s) override {
        const double deadline = now_ + timeout_s;
        while (!done()) {
            if (!step()) throw StalledRound("loopback: no events left before completion");
            if (now_ > deadline) throw StalledRound("loopback: simulated deadline passed");
        }
    }

    double now_s() const override { return now_; }

    // Executes the next pending event; false when none remain.
    bool step() {
        while (!events_.empty()) {
            auto it = events_.begin();
            const uint64_t id = it->first.second;
            now_ = it->first.first;
            auto fn = std::move(it->second);
            events_.erase(it);
            if (cancelled_.erase(id)) continue;
            fn();
            return true;
        }
        return false;
    }

    void run_until_idle() {
        while (step()) {
        }
    }

    void disconnect(const BusClient& c);

    const BusCounters& broker_counters() const { return broker_counters_; }
    BrokerCore& broker() { return broker_; }

private:
    friend class SimBusClient;

    uint64_t push_event(double t, std::function<void()> fn) {
        const uint64_t id = ++seq_;
        events_.emplace(std::make_pair(t, id), std::move(fn));
        return id;
    }

    double leg_latency(MsgType type, bool to_broker) {
        double base;
        switch (type) {
            case MsgType::Publish:
            case MsgType::Pubrel:
                // sent by the exchange initiator
                base = to_broker ? lat_.publish_exchange_s / 4 : lat_.subscribe_exchange_s / 4;
                break;
            case MsgType::Pubrec:
            case MsgType::Pubcomp:
                // sent back toward the initiator
                base = to_broker ? lat_.subscribe_exchange_s / 4 : lat_.publish_exchange_s / 4;
                break;
            default:
                base = lat_.control_s;
                break;
        }
        if (faults_.delay > 0 && rng_.chance(faults_.delay))
            base += rng_.uniform(0.0, faults_.max_delay_s);
        return base;
    }

    std::string token_;
    FaultSpec faults_;
    SimLatency lat_;
    QosConfig qos_;
    Rng rng_;
    double now_ = 0.0;
    uint64_t seq_ = 0;
    uint64_t next_conn_ = 0;
    // Declared before (and so destroyed after) everything that can cancel a
    // timer on teardown: client cores, broker connections, queued events.
    std::unordered_set<uint64_t> cancelled_;
    std::map<std::pair<double, uint64_t>, std::function<void()>> events_;
    BrokerCore broker_;
    BusCounters broker_counters_;
    std::map<uint64_t, std::shared_ptr<class SimBusClient>> clients_;
};

// One simulated client: a ClientCore wired to the broker through two faulty
// FIFO channels (one per direction).
class SimBusClient final : public BusClient, public std::enable_shared_from_this<SimBusClient> {
public:
    SimBusClient(LoopbackTransport* sim, uint64_t conn_id, std::string name)
        : sim_(sim),
          conn_id_(conn_id),
          name_(std::move(name)),
          to_broker_(this, true),
          to_client_(this, false),
          core_(&to_broker_, sim, sim->qos_) {}

    void subscribe(const std::string& topic, MessageHandler handler,
                   Done done = nullptr) override {
        auto counted = [this, handler = std::move(handler)](std::vector<uint8_t> payload) {
            ++counters_.msgs_delivered;
            if (handler) handler(std::move(payload));
        };
        core_.subscribe(topic, std::move(counted), [topic, done = std::move(done)](bool ok) {
            if (done)
                done(ok);
            else if (!ok)
                throw RetryExhausted("subscribe to '" + topic + "' failed");
        });
    }

    void publish(const std::string& topic, std::vector<uint8_t> payload,
                 Done done = nullptr) override {
        ++counters_.msgs_published;
        core_.publish(topic, std::move(payload),
                      done ? std::move(done) : Done([topic](bool ok) {
                          if (!ok) throw RetryExhausted("publish to '" + topic + "' failed");
                      }));
    }

    BusCounters counters() const override { return counters_; }
    const std::string& name() const override { return name_; }

    ClientCore& core() { return core_; }
    uint64_t conn_id() const { return conn_id_; }
    bool connected() const { return core_.state() == ClientCore::State::Ready; }
    bool auth_failed() const { return core_.state() == ClientCore::State::Failed; }

private:
    friend class LoopbackTransport;

    // One direction of the client<->broker link.
    struct Channel final : FrameConduit {
        Channel(SimBusClient* owner, bool to_broker) : owner(owner), to_broker(to_broker) {}

        void conduit_send(const WireFrame& f, bool retx) override {
            LoopbackTransport* sim = owner->sim_;
            BusCounters& tx_side = to_broker ? owner->counters_ : sim->broker_counters_;
            tx_side.count_tx(f, retx);
            if (sim->faults_.drop > 0 && sim->rng_.chance(sim->faults_.drop)) return;
            const int copies =
                (sim->faults_.dup > 0 && sim->rng_.chance(sim->faults_.dup)) ? 2 : 1;
            double arrival = sim->now_ + sim->leg_latency(f.type, to_broker);
            if (arrival < last_arrival) arrival = last_arrival;  // FIFO
            for (int i = 0; i < copies; ++i) {
                last_arrival = arrival;
                auto self = owner->shared_from_this();
                sim->push_event(arrival, [self, f, this] { deliver(f); });
            }
        }

        void conduit_close() override {
            auto self = owner->shared_from_this();
            owner->sim_->push_event(owner->sim_->now_,
                                    [self] { self->sim_->disconnect(*self); });
        }

        void deliver(const WireFrame& f) {
            LoopbackTransport* sim = owner->sim_;
            if (to_broker) {
                if (!owner->attached_) return;  // connection was closed
                sim->broker_counters_.count_rx(f);
                sim->broker_.on_frame(owner->conn_id_, f);
            } else {
                owner->counters_.count_rx(f);
                owner->core_.on_frame(f);
            }
        }

        SimBusClient* owner;
        bool to_broker;
        double last_arrival = 0.0;
    };

    LoopbackTransport* sim_;
    uint64_t conn_id_;
    std::string name_;
    bool attached_ = true;
    Channel to_broker_;
    Channel to_client_;
    ClientCore core_;
    BusCounters counters_;
};

inline std::shared_ptr<BusClient> LoopbackTransport::make_client_with_token(
    const std::string& name, const std::string& token) {
    const uint64_t id = ++next_conn_;
    auto client = std::make_shared<SimBusClient>(this, id, name);
    clients_[id] = client;
    broker_.add_connection(id, &client->to_client_);
    client->core_.connect(token);
    return client;
}

inline void LoopbackTransport::disconnect(const BusClient& c) {
    const auto* sc = dynamic_cast<const SimBusClient*>(&c);
    if (!sc) return;
    auto it = clients_.find(sc->conn_id());
    if (it == clients_.end()) return;
    it->second->attached_ = false;
    broker_.remove_connection(sc->conn_id());
    clients_.erase(it);
}

}  // namespace fcw
