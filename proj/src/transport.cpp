#include "afedcl/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <exception>
#include <thread>
#include <utility>

namespace afedcl {

MessageType message_type(const Message& msg) {
    return std::visit(
        [](const auto& m) -> MessageType {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, HelloMsg>) return MessageType::Hello;
            if constexpr (std::is_same_v<T, GlobalModelMsg>) return MessageType::GlobalModel;
            if constexpr (std::is_same_v<T, ClientUpdateMsg>) return MessageType::ClientUpdate;
            if constexpr (std::is_same_v<T, RoundDoneMsg>) return MessageType::RoundDone;
            if constexpr (std::is_same_v<T, ErrorMsg>) return MessageType::Error;
        },
        msg);
}

Bytes encode_message(const Message& msg) {
    ByteWriter payload;
    std::visit(
        [&](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, HelloMsg>) {
                payload.u32(m.client_id);
            } else if constexpr (std::is_same_v<T, GlobalModelMsg>) {
                payload.u32(m.round);
                payload.u64(m.params.size());
                payload.f64s(m.params);
            } else if constexpr (std::is_same_v<T, ClientUpdateMsg>) {
                payload.u32(m.client_id);
                payload.u32(m.round);
                payload.f64(m.discrimination_loss);
                payload.u64(m.params.size());
                payload.f64s(m.params);
            } else if constexpr (std::is_same_v<T, RoundDoneMsg>) {
                payload.u32(m.round);
            } else {
                payload.u16(m.code);
                payload.text(m.text);
            }
        },
        msg);
    if (payload.bytes().size() > kMaxPayloadBytes) throw ProtocolError("message too large");
    ByteWriter frame;
    frame.u32_be(static_cast<std::uint32_t>(payload.bytes().size()));
    frame.u8(static_cast<std::uint8_t>(message_type(msg)));
    frame.raw(payload.bytes());
    return frame.take();
}

namespace {

ParamVector read_params(ByteReader& r) {
    const std::uint64_t count = r.u64();
    if (count != r.remaining() / 8 || r.remaining() % 8 != 0) {
        throw ProtocolError("count mismatch: param_count " + std::to_string(count) + " but " +
                            std::to_string(r.remaining()) + " payload bytes remain");
    }
    return r.f64s(count);
}

}  // namespace

Message decode_payload(std::uint8_t type, std::span<const std::uint8_t> payload) {
    ByteReader r(payload);
    Message out;
    try {
        switch (static_cast<MessageType>(type)) {
            case MessageType::Hello: out = HelloMsg{r.u32()}; break;
            case MessageType::GlobalModel: {
                GlobalModelMsg m;
                m.round = r.u32();
                m.params = read_params(r);
                out = std::move(m);
                break;
            }
            case MessageType::ClientUpdate: {
                ClientUpdateMsg m;
                m.client_id = r.u32();
                m.round = r.u32();
                m.discrimination_loss = r.f64();
                m.params = read_params(r);
                out = std::move(m);
                break;
            }
            case MessageType::RoundDone: out = RoundDoneMsg{r.u32()}; break;
            case MessageType::Error: {
                ErrorMsg m;
                m.code = r.u16();
                auto rest = r.raw(r.remaining());
                m.text.assign(rest.begin(), rest.end());
                out = std::move(m);
                break;
            }
            default: throw ProtocolError("unknown message type " + std::to_string(type));
        }
    } catch (const TruncatedInput& e) {
        throw ProtocolError(std::string("truncated payload: ") + e.what());
    }
    if (r.remaining() != 0) {
        throw ProtocolError("count mismatch: " + std::to_string(r.remaining()) + " unread payload bytes");
    }
    return out;
}

Message decode_message(std::span<const std::uint8_t> frame) {
    if (frame.size() < kFrameHeaderBytes) throw ProtocolError("truncated frame header");
    ByteReader r(frame);
    const std::uint32_t length = r.u32_be();
    const std::uint8_t type = r.u8();
    if (length > r.remaining()) {
        throw ProtocolError("truncated frame: declared " + std::to_string(length) +
                            " payload bytes, have " + std::to_string(r.remaining()));
    }
    if (length < r.remaining()) {
        throw ProtocolError("frame has " + std::to_string(r.remaining() - length) + " trailing bytes");
    }
    return decode_payload(type, r.raw(length));
}

// ---- sockets -----------------------------------------------------------

Socket& Socket::operator=(Socket&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
}

Socket::~Socket() { close(); }

void Socket::close() noexcept {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

void Socket::send_all(std::span<const std::uint8_t> bytes) {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
        const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }
}

void Socket::recv_exact(std::span<std::uint8_t> out, std::chrono::steady_clock::time_point deadline) {
    std::size_t got = 0;
    while (got < out.size()) {
        const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) throw TimeoutError("receive timed out");
        pollfd p{fd_, POLLIN, 0};
        const int ready = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
        if (ready < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
        }
        if (ready == 0) throw TimeoutError("receive timed out");
        const ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
        if (n == 0) throw ProtocolError("connection closed by peer");
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw ProtocolError(std::string("recv failed: ") + std::strerror(errno));
        }
        got += static_cast<std::size_t>(n);
    }
}

void write_message(Socket& s, const Message& msg) { s.send_all(encode_message(msg)); }

Message read_message(Socket& s, Millis timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::uint8_t header[kFrameHeaderBytes];
    s.recv_exact(header, deadline);
    ByteReader hr(header);
    const std::uint32_t length = hr.u32_be();
    const std::uint8_t type = hr.u8();
    if (length > kMaxPayloadBytes) throw ProtocolError("frame payload too large");
    Bytes payload(length);
    s.recv_exact(payload, deadline);
    return decode_payload(type, payload);
}

namespace {

addrinfo* resolve(const std::string& host, std::uint16_t port, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &res);
    if (rc != 0) throw ProtocolError("cannot resolve " + host + ": " + ::gai_strerror(rc));
    return res;
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
    addrinfo* res = resolve(host, port, true);
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
        ::freeaddrinfo(res);
        throw ProtocolError(std::string("socket failed: ") + std::strerror(errno));
    }
    sock_ = Socket(fd);
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    const int brc = ::bind(fd, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (brc < 0) throw ProtocolError("bind to " + host + ":" + std::to_string(port) + " failed: " + std::strerror(errno));
    if (::listen(fd, 64) < 0) throw ProtocolError(std::string("listen failed: ") + std::strerror(errno));
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

Socket TcpListener::accept(Millis timeout) {
    pollfd p{sock_.fd(), POLLIN, 0};
    const int ready = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (ready == 0) throw TimeoutError("no client connected within timeout");
    if (ready < 0) throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
    const int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd < 0) throw ProtocolError(std::string("accept failed: ") + std::strerror(errno));
    set_nodelay(fd);
    return Socket(fd);
}

Socket tcp_connect(const std::string& host, std::uint16_t port, Millis timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        addrinfo* res = resolve(host, port, false);
        const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
        if (fd < 0) {
            ::freeaddrinfo(res);
            throw ProtocolError(std::string("socket failed: ") + std::strerror(errno));
        }
        const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
        const int err = errno;
        ::freeaddrinfo(res);
        if (rc == 0) {
            set_nodelay(fd);
            return Socket(fd);
        }
        ::close(fd);
        if (std::chrono::steady_clock::now() >= deadline) {
            throw TimeoutError("cannot connect to " + host + ":" + std::to_string(port) + ": " +
                               std::strerror(err));
        }
        std::this_thread::sleep_for(Millis(20));
    }
}

// ---- channels ----------------------------------------------------------

std::vector<ClientUpload> LoopbackChannel::broadcast_and_collect(std::span<const double> global_params,
                                                                 std::uint32_t round) {
    std::vector<ClientUpload> uploads;
    stats_.assign(clients_.size(), {});
    for (std::size_t k = 0; k < clients_.size(); ++k) {
        try {
            uploads.push_back(client_local_round(clients_[k], method_, global_params, round, cfg_, &stats_[k]));
            client_finish_round(clients_[k], method_, cfg_, &stats_[k]);
        } catch (const RoundError&) {
            throw;
        } catch (const std::exception& e) {
            throw RoundError(clients_[k].client_id, e.what());
        }
    }
    return uploads;
}

TcpServerChannel::TcpServerChannel(TcpListener& listener, std::span<const std::size_t> roster,
                                   std::size_t expected_param_count, Millis timeout)
    : roster_(roster.begin(), roster.end()),
      conns_(roster.size()),
      expected_params_(expected_param_count),
      timeout_(timeout) {
    for (std::size_t accepted = 0; accepted < roster_.size(); ++accepted) {
        Socket s = listener.accept(timeout_);
        const Message hello = read_message(s, timeout_);
        const auto* h = std::get_if<HelloMsg>(&hello);
        if (!h) throw ProtocolError("expected HELLO as first message");
        auto it = std::find(roster_.begin(), roster_.end(), h->client_id);
        if (it == roster_.end()) {
            write_message(s, ErrorMsg{1, "unknown client id " + std::to_string(h->client_id)});
            throw ProtocolError("HELLO from unknown client " + std::to_string(h->client_id));
        }
        auto& slot = conns_[static_cast<std::size_t>(it - roster_.begin())];
        if (slot.valid()) throw ProtocolError("duplicate HELLO from client " + std::to_string(h->client_id));
        slot = std::move(s);
    }
}

std::vector<ClientUpload> TcpServerChannel::broadcast_and_collect(std::span<const double> global_params,
                                                                  std::uint32_t round) {
    const Bytes frame = encode_message(GlobalModelMsg{round, ParamVector(global_params.begin(), global_params.end())});
    std::vector<ClientUpload> uploads(conns_.size());
    std::vector<std::exception_ptr> errors(conns_.size());
    {
        std::vector<std::jthread> handlers;
        for (std::size_t k = 0; k < conns_.size(); ++k) {
            handlers.emplace_back([&, k] {
                try {
                    conns_[k].send_all(frame);
                    const Message reply = read_message(conns_[k], timeout_);
                    if (const auto* err = std::get_if<ErrorMsg>(&reply)) {
                        throw ProtocolError("client reported error " + std::to_string(err->code) + ": " + err->text);
                    }
                    const auto* up = std::get_if<ClientUpdateMsg>(&reply);
                    if (!up) throw ProtocolError("expected CLIENT_UPDATE");
                    if (up->client_id != roster_[k]) {
                        throw ProtocolError("update carries client id " + std::to_string(up->client_id));
                    }
                    if (up->round != round) {
                        throw ProtocolError("round mismatch: update for round " + std::to_string(up->round) +
                                            " during round " + std::to_string(round));
                    }
                    if (up->params.size() != expected_params_) {
                        throw ProtocolError("param_count " + std::to_string(up->params.size()) +
                                            " != expected " + std::to_string(expected_params_));
                    }
                    uploads[k] = ClientUpload{up->client_id, up->round, up->discrimination_loss, up->params};
                } catch (...) {
                    errors[k] = std::current_exception();
                }
            });
        }
    }
    for (std::size_t k = 0; k < conns_.size(); ++k) {
        if (!errors[k]) continue;
        try {
            std::rethrow_exception(errors[k]);
        } catch (const TimeoutError& e) {
            throw RoundError(roster_[k], std::string("no update for round ") + std::to_string(round) + ": " + e.what());
        } catch (const std::exception& e) {
            throw RoundError(roster_[k], e.what());
        }
    }
    return uploads;
}

void TcpServerChannel::round_done(std::uint32_t round) {
    const Bytes frame = encode_message(RoundDoneMsg{round});
    for (auto& c : conns_) c.send_all(frame);
}

void TcpServerChannel::abort(const std::string& why) noexcept {
    for (auto& c : conns_) {
        try {
            if (c.valid()) write_message(c, ErrorMsg{2, why});
        } catch (...) {
        }
    }
}

std::vector<RoundReport> serve_rounds(ServerState& server, RoundChannel& channel, std::size_t rounds,
                                      const TrainingConfig& cfg) {
    std::vector<RoundReport> reports;
    for (std::size_t t = 0; t < rounds; ++t) {
        RoundReport rep;
        rep.round = server.round;
        const auto uploads = channel.broadcast_and_collect(shared_params(server), server.round);
        rep.aggregation_weights = server_aggregate(server, uploads, cfg);
        for (std::size_t k = 0; k < uploads.size(); ++k) {
            ClientRoundStats s;
            s.client_id = uploads[k].client_id;
            s.discrimination_loss = uploads[k].discrimination_loss;
            if (k < rep.aggregation_weights.size()) s.aggregation_weight = rep.aggregation_weights[k];
            rep.clients.push_back(s);
        }
        channel.round_done(rep.round);
        reports.push_back(std::move(rep));
    }
    return reports;
}

void tcp_client_session(ClientState& client, Method method, const TrainingConfig& cfg,
                        const std::string& host, std::uint16_t port, std::size_t rounds, Millis timeout) {
    Socket s = tcp_connect(host, port, timeout);
    write_message(s, HelloMsg{static_cast<std::uint32_t>(client.client_id)});
    std::uint32_t last_round = 0;
    for (std::size_t t = 0; t < rounds; ++t) {
        const Message msg = read_message(s, timeout);
        if (const auto* err = std::get_if<ErrorMsg>(&msg)) {
            throw ProtocolError("server error " + std::to_string(err->code) + ": " + err->text);
        }
        const auto* gm = std::get_if<GlobalModelMsg>(&msg);
        if (!gm) throw ProtocolError("expected GLOBAL_MODEL");
        if (gm->round <= last_round) {
            throw ProtocolError("round numbers not monotone: " + std::to_string(gm->round) + " after " +
                                std::to_string(last_round));
        }
        last_round = gm->round;
        ClientUpload up;
        try {
            up = client_local_round(client, method, gm->params, gm->round, cfg);
        } catch (const std::exception& e) {
            write_message(s, ErrorMsg{3, e.what()});
            throw;
        }
        write_message(s, ClientUpdateMsg{static_cast<std::uint32_t>(up.client_id), up.round,
                                         up.discrimination_loss, std::move(up.params)});
        client_finish_round(client, method, cfg);
        const Message done = read_message(s, timeout);
        if (const auto* err = std::get_if<ErrorMsg>(&done)) {
            throw ProtocolError("server error " + std::to_string(err->code) + ": " + err->text);
        }
        const auto* rd = std::get_if<RoundDoneMsg>(&done);
        if (!rd || rd->round != last_round) throw ProtocolError("expected ROUND_DONE for round " + std::to_string(last_round));
    }
}

BackendRun run_loopback(const ExperimentSpec& spec, const FederatedData& data) {
    ExperimentResult init = initialize_experiment(spec, data);
    BackendRun run{std::move(init.server), std::move(init.clients), {}};
    LoopbackChannel channel(run.clients, spec.method, spec.training);
    run.reports = serve_rounds(run.server, channel, spec.rounds, spec.training);
    return run;
}

BackendRun run_tcp_local(const ExperimentSpec& spec, const FederatedData& data, const std::string& host,
                         Millis timeout) {
    ExperimentResult init = initialize_experiment(spec, data);
    BackendRun run{std::move(init.server), std::move(init.clients), {}};
    TcpListener listener(host, 0);
    const std::uint16_t port = listener.port();
    std::vector<std::exception_ptr> client_errors(run.clients.size());
    std::exception_ptr server_error;
    {
        std::vector<std::jthread> client_threads;
        for (std::size_t k = 0; k < run.clients.size(); ++k) {
            client_threads.emplace_back([&, k] {
                try {
                    tcp_client_session(run.clients[k], spec.method, spec.training, host, port, spec.rounds, timeout);
                } catch (...) {
                    client_errors[k] = std::current_exception();
                }
            });
        }
        try {
            TcpServerChannel channel(listener, run.server.roster, shared_params(run.server).size(), timeout);
            try {
                run.reports = serve_rounds(run.server, channel, spec.rounds, spec.training);
            } catch (const std::exception& e) {
                channel.abort(e.what());
                throw;
            }
        } catch (...) {
            server_error = std::current_exception();
        }
    }
    if (server_error) std::rethrow_exception(server_error);
    for (std::size_t k = 0; k < client_errors.size(); ++k) {
        if (!client_errors[k]) continue;
        try {
            std::rethrow_exception(client_errors[k]);
        } catch (const std::exception& e) {
            throw RoundError(run.clients[k].client_id, e.what());
        }
    }
    return run;
}

}  // namespace afedcl
