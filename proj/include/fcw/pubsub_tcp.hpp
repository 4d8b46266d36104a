#pragma once
// TCP transport for the pub/sub layer: a broker server and a client, both
// running the protocol cores from pubsub.hpp.
//
// Threading model
//   broker: one accept thread, one reader thread per connection, one timer
//           worker. All protocol state is guarded by a single mutex; timer
//           callbacks run with that mutex held, so a cancel issued from core
//           code is final.
//   client: one reader thread, one timer worker, one dispatch thread.
//           Message handlers and publish completions run on the dispatch
//           thread with no lock held, so application work (however slow)
//           never blocks handshake traffic.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <thread>

#include "fcw/pubsub.hpp"

namespace fcw {

struct SocketError : std::runtime_error {
    explicit SocketError(const std::string& what) : std::runtime_error(what) {}
};

namespace tcpdetail {

inline void write_all(int fd, const uint8_t* data, size_t size) {
    size_t off = 0;
    while (off < size) {
        const ssize_t n = ::send(fd, data + off, size - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw SocketError(std::string("send: ") + std::strerror(errno));
        }
        off += static_cast<size_t>(n);
    }
}

inline void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

inline sockaddr_in loopback_addr(uint16_t port) {
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(port);
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    return a;
}

}  // namespace tcpdetail

// Timer worker whose callbacks run while holding the owner mutex. Core code
// always cancels while holding that mutex, which makes cancellation final:
// once timer_cancel returns, the callback will not run.
class TcpTimerHost final : public TimerHost {
public:
    explicit TcpTimerHost(std::mutex& owner) : owner_(owner) {
        worker_ = std::thread([this] { run(); });
    }

    ~TcpTimerHost() { stop(); }

    void stop() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (stop_) return;
            stop_ = true;
        }
        cv_.notify_all();
        if (worker_.joinable()) worker_.join();
    }

    uint64_t timer_schedule(double delay_s, std::function<void()> fn) override {
        std::lock_guard<std::mutex> lk(mu_);
        const uint64_t id = ++seq_;
        const auto due = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                            std::chrono::duration<double>(delay_s));
        items_.emplace(std::make_pair(due, id), std::move(fn));
        cv_.notify_all();
        return id;
    }

    void timer_cancel(uint64_t id) override {
        std::lock_guard<std::mutex> lk(mu_);
        for (auto it = items_.begin(); it != items_.end(); ++it) {
            if (it->first.second == id) {
                items_.erase(it);
                break;
            }
        }
    }

private:
    using Clock = std::chrono::steady_clock;

    void run() {
        std::unique_lock<std::mutex> lk(mu_);
        while (!stop_) {
            if (items_.empty()) {
                cv_.wait(lk);
                continue;
            }
            const auto due = items_.begin()->first.first;
            if (Clock::now() < due) {
                cv_.wait_until(lk, due);
                continue;
            }
            // take the owner lock first so cancellation stays race-free
            lk.unlock();
            {
                std::lock_guard<std::mutex> ol(owner_);
                std::vector<std::function<void()>> fns;
                {
                    std::lock_guard<std::mutex> ml(mu_);
                    const auto now = Clock::now();
                    while (!stop_ && !items_.empty() && items_.begin()->first.first <= now) {
                        fns.push_back(std::move(items_.begin()->second));
                        items_.erase(items_.begin());
                    }
                }
                for (auto& fn : fns) fn();
            }
            lk.lock();
        }
    }

    std::mutex& owner_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::pair<Clock::time_point, uint64_t>, std::function<void()>> items_;
    uint64_t seq_ = 0;
    bool stop_ = false;
    std::thread worker_;
};

// ---------------------------------------------------------------------------
// Broker server
// ---------------------------------------------------------------------------

class TcpBrokerServer {
public:
    explicit TcpBrokerServer(std::string token, QosConfig qos = {})
        : token_(std::move(token)), qos_(qos), timers_(mu_) {}

    ~TcpBrokerServer() { stop(); }

    // Binds 127.0.0.1:port (0 picks a free port) and starts serving.
    uint16_t start(uint16_t port = 0) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw SocketError("socket failed");
        int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr = tcpdetail::loopback_addr(port);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0)
            throw SocketError(std::string("bind: ") + std::strerror(errno));
        if (::listen(listen_fd_, 64) < 0)
            throw SocketError(std::string("listen: ") + std::strerror(errno));
        socklen_t len = sizeof(addr);
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        {
            std::lock_guard<std::mutex> lk(mu_);
            core_ = std::make_unique<BrokerCore>(token_, &timers_, qos_);
        }
        accept_thread_ = std::thread([this] { accept_loop(); });
        return port_;
    }

    uint16_t port() const { return port_; }

    void stop() {
        if (stopped_.exchange(true)) return;
        if (listen_fd_ >= 0) {
            ::shutdown(listen_fd_, SHUT_RDWR);
            ::close(listen_fd_);
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        {
            std::lock_guard<std::mutex> lk(mu_);
            for (auto& [id, c] : conns_) {
                ::shutdown(c->fd, SHUT_RDWR);
            }
        }
        // readers see EOF, detach their core state and finish
        for (;;) {
            std::unique_ptr<ConnState> c;
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (conns_.empty() && retired_.empty()) break;
                if (!retired_.empty()) {
                    c = std::move(retired_.back());
                    retired_.pop_back();
                } else {
                    auto it = conns_.begin();
                    c = std::move(it->second);
                    conns_.erase(it);
                    ::shutdown(c->fd, SHUT_RDWR);
                }
            }
            if (c) {
                if (c->reader.joinable()) c->reader.join();
                ::close(c->fd);
                std::lock_guard<std::mutex> lk(mu_);
                core_->remove_connection(c->id);
            }
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (core_) core_ = nullptr;
        }
        timers_.stop();
    }

    BusCounters counters() const {
        std::lock_guard<std::mutex> lk(mu_);
        return counters_;
    }

    size_t connection_count() const {
        std::lock_guard<std::mutex> lk(mu_);
        return core_ ? core_->connection_count() : 0;
    }

private:
    struct ConnState;

    struct ConnConduit final : FrameConduit {
        TcpBrokerServer* server = nullptr;
        ConnState* conn = nullptr;

        void conduit_send(const WireFrame& f, bool retx) override;
        void conduit_close() override;
    };

    struct ConnState {
        uint64_t id = 0;
        int fd = -1;
        ConnConduit conduit;
        std::thread reader;
    };

    void accept_loop() {
        for (;;) {
            sockaddr_in peer{};
            socklen_t len = sizeof(peer);
            const int fd = ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&peer), &len);
            if (fd < 0) {
                if (errno == EINTR) continue;
                return;  // listen socket closed
            }
            tcpdetail::set_nodelay(fd);
            auto conn = std::make_unique<ConnState>();
            conn->fd = fd;
            conn->conduit.server = this;
            conn->conduit.conn = conn.get();
            ConnState* raw = conn.get();
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (stopped_ || !core_) {
                    ::close(fd);
                    return;
                }
                conn->id = ++next_conn_;
                core_->add_connection(conn->id, &conn->conduit);
                conns_[conn->id] = std::move(conn);
            }
            raw->reader = std::thread([this, raw] { reader_loop(raw); });
        }
    }

    void reader_loop(ConnState* conn) {
        std::vector<uint8_t> buf;
        uint8_t chunk[65536];
        for (;;) {
            const ssize_t n = ::recv(conn->fd, chunk, sizeof(chunk), 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) break;
            buf.insert(buf.end(), chunk, chunk + n);
            size_t off = 0;
            bool protocol_error = false;
            for (;;) {
                std::optional<std::pair<WireFrame, size_t>> got;
                try {
                    got = try_decode_stream(buf.data() + off, buf.size() - off);
                } catch (const MalformedFrame&) {
                    protocol_error = true;
                    break;
                }
                if (!got) break;
                off += got->second;
                std::lock_guard<std::mutex> lk(mu_);
                if (!core_) {
                    protocol_error = true;
                    break;
                }
                counters_.count_rx(got->first);
                core_->on_frame(conn->id, got->first);
            }
            buf.erase(buf.begin(), buf.begin() + static_cast<long>(off));
            if (protocol_error) break;
        }
        // detach this connection's protocol state; stop() joins the thread
        std::lock_guard<std::mutex> lk(mu_);
        if (core_) core_->remove_connection(conn->id);
        auto it = conns_.find(conn->id);
        if (it != conns_.end()) {
            ::close(it->second->fd);
            it->second->fd = -1;
            retired_.push_back(std::move(it->second));
            conns_.erase(it);
        }
    }

    std::string token_;
    QosConfig qos_;
    mutable std::mutex mu_;
    TcpTimerHost timers_;
    std::unique_ptr<BrokerCore> core_;
    std::map<uint64_t, std::unique_ptr<ConnState>> conns_;
    std::vector<std::unique_ptr<ConnState>> retired_;
    BusCounters counters_;
    uint64_t next_conn_ = 0;
    int listen_fd_ = -1;
    uint16_t port_ = 0;
    std::atomic<bool> stopped_{false};
    std::thread accept_thread_;
};

inline void TcpBrokerServer::ConnConduit::conduit_send(const WireFrame& f, bool retx) {
    // called with the server mutex held
    server->counters_.count_tx(f, retx);
    if (conn->fd < 0) return;
    try {
        const auto bytes = encode_frame(f);
        tcpdetail::write_all(conn->fd, bytes.data(), bytes.size());
    } catch (const SocketError&) {
        // peer is gone; its reader thread will tear the connection down
    }
}

inline void TcpBrokerServer::ConnConduit::conduit_close() {
    if (conn->fd >= 0) ::shutdown(conn->fd, SHUT_RDWR);
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

class TcpBusClient final : public BusClient {
public:
    TcpBusClient(const std::string& host_ignored, uint16_t port, const std::string& token,
                 std::string name, QosConfig qos = {}, double connect_timeout_s = 10.0)
        : name_(std::move(name)), timers_(mu_) {
        (void)host_ignored;  // loopback only
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw SocketError("socket failed");
        sockaddr_in addr = tcpdetail::loopback_addr(port);
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
            const int err = errno;
            ::close(fd_);
            throw SocketError(std::string("connect: ") + std::strerror(err));
        }
        tcpdetail::set_nodelay(fd_);
        conduit_.client = this;
        core_ = std::make_unique<ClientCore>(&conduit_, &timers_, qos);
        core_->on_state_change = [this] { cv_.notify_all(); };
        dispatch_thread_ = std::thread([this] { dispatch_loop(); });
        reader_thread_ = std::thread([this] { reader_loop(); });
        std::unique_lock<std::mutex> lk(mu_);
        core_->connect(token);
        const bool decided = cv_.wait_for(
            lk, std::chrono::duration<double>(connect_timeout_s), [this] {
                return core_->state() == ClientCore::State::Ready ||
                       core_->state() == ClientCore::State::Failed || reader_done_;
            });
        if (!decided || core_->state() != ClientCore::State::Ready) {
            const bool refused = core_->state() == ClientCore::State::Failed;
            lk.unlock();
            teardown();
            if (refused) throw AuthFailed("broker refused the connection token");
            throw RetryExhausted("no CONNACK from broker");
        }
    }

    ~TcpBusClient() { teardown(); }

    void subscribe(const std::string& topic, MessageHandler handler,
                   Done on_done = nullptr) override {
        std::unique_lock<std::mutex> lk(mu_);
        bool done = false, ok = false;
        auto wrapped = [this, handler = std::move(handler)](std::vector<uint8_t> payload) {
            // runs with mu_ held: hand off to the dispatch thread
            ++counters_.msgs_delivered;
            enqueue([handler, payload = std::move(payload)]() mutable {
                handler(std::move(payload));
            });
        };
        core_->subscribe(topic, std::move(wrapped), [this, &done, &ok](bool r) {
            done = true;
            ok = r;
            cv_.notify_all();
        });
        cv_.wait(lk, [&] { return done || reader_done_; });
        if (on_done) on_done(done && ok);
        if (!done || !ok) throw RetryExhausted("subscribe to '" + topic + "' not acknowledged");
    }

    void publish(const std::string& topic, std::vector<uint8_t> payload,
                 Done done = nullptr) override {
        std::lock_guard<std::mutex> lk(mu_);
        ++counters_.msgs_published;
        Done wrapped;
        if (done)
            wrapped = [this, done = std::move(done)](bool ok) { enqueue([done, ok] { done(ok); }); };
        core_->publish(topic, std::move(payload), std::move(wrapped));
    }

    // Publishes and blocks until the exchange completes.
    void publish_sync(const std::string& topic, std::vector<uint8_t> payload) {
        std::mutex m;
        std::condition_variable cv;
        bool done = false, ok = false;
        publish(topic, std::move(payload), [&](bool r) {
            std::lock_guard<std::mutex> lk(m);
            done = true;
            ok = r;
            cv.notify_all();
        });
        std::unique_lock<std::mutex> lk(m);
        cv.wait(lk, [&] { return done; });
        if (!ok) throw RetryExhausted("publish to '" + topic + "' failed");
    }

    BusCounters counters() const override {
        std::lock_guard<std::mutex> lk(mu_);
        return counters_;
    }

    const std::string& name() const override { return name_; }

private:
    struct Conduit final : FrameConduit {
        TcpBusClient* client = nullptr;
        void conduit_send(const WireFrame& f, bool retx) override {
            // called with client->mu_ held
            client->counters_.count_tx(f, retx);
            if (client->fd_ < 0) return;
            try {
                const auto bytes = encode_frame(f);
                tcpdetail::write_all(client->fd_, bytes.data(), bytes.size());
            } catch (const SocketError&) {
            }
        }
        void conduit_close() override {
            if (client->fd_ >= 0) ::shutdown(client->fd_, SHUT_RDWR);
        }
    };

    void reader_loop() {
        std::vector<uint8_t> buf;
        uint8_t chunk[65536];
        for (;;) {
            const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) break;
            buf.insert(buf.end(), chunk, chunk + n);
            size_t off = 0;
            bool bad = false;
            for (;;) {
                std::optional<std::pair<WireFrame, size_t>> got;
                try {
                    got = try_decode_stream(buf.data() + off, buf.size() - off);
                } catch (const MalformedFrame&) {
                    bad = true;
                    break;
                }
                if (!got) break;
                off += got->second;
                std::lock_guard<std::mutex> lk(mu_);
                counters_.count_rx(got->first);
                core_->on_frame(got->first);
            }
            buf.erase(buf.begin(), buf.begin() + static_cast<long>(off));
            if (bad) break;
        }
        std::lock_guard<std::mutex> lk(mu_);
        reader_done_ = true;
        cv_.notify_all();
    }

    void enqueue(std::function<void()> fn) {
        {
            std::lock_guard<std::mutex> lk(dispatch_mu_);
            dispatch_q_.push_back(std::move(fn));
        }
        dispatch_cv_.notify_all();
    }

    void dispatch_loop() {
        for (;;) {
            std::function<void()> fn;
            {
                std::unique_lock<std::mutex> lk(dispatch_mu_);
                dispatch_cv_.wait(lk, [this] { return dispatch_stop_ || !dispatch_q_.empty(); });
                if (dispatch_q_.empty()) return;  // stop requested and drained
                fn = std::move(dispatch_q_.front());
                dispatch_q_.pop_front();
            }
            fn();
        }
    }

    void teardown() {
        if (torn_down_.exchange(true)) return;
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (core_) core_->abandon();
        }
        timers_.stop();
        if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
        if (reader_thread_.joinable()) reader_thread_.join();
        {
            std::lock_guard<std::mutex> lk(dispatch_mu_);
            dispatch_stop_ = true;
        }
        dispatch_cv_.notify_all();
        if (dispatch_thread_.joinable()) dispatch_thread_.join();
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

    std::string name_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    TcpTimerHost timers_;
    Conduit conduit_;
    std::unique_ptr<ClientCore> core_;
    BusCounters counters_;
    int fd_ = -1;
    bool reader_done_ = false;
    std::atomic<bool> torn_down_{false};
    std::mutex dispatch_mu_;
    std::condition_variable dispatch_cv_;
    std::deque<std::function<void()>> dispatch_q_;
    bool dispatch_stop_ = false;
    std::thread reader_thread_;
    std::thread dispatch_thread_;
};

class TcpTransport final : public Transport {
public:
    TcpTransport(uint16_t port, std::string token, QosConfig qos = {})
        : port_(port), token_(std::move(token)), qos_(qos) {}

    std::shared_ptr<BusClient> make_client(const std::string& name) override {
        return std::make_shared<TcpBusClient>("127.0.0.1", port_, token_, name, qos_);
    }

    void drive(const std::function<bool()>& done, double timeout_s) override {
        const auto deadline =
            std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
        while (!done()) {
            if (std::chrono::steady_clock::now() > deadline)
                throw StalledRound("tcp: deadline passed before completion");
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        }
    }

    double now_s() const override {
        return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
            .count();
    }

private:
    uint16_t port_;
    std::string token_;
    QosConfig qos_;
};

}  // namespace fcw
