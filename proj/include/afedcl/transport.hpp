// Round communication between server and clients.
//
// Frame: length u32 big-endian (payload bytes), msg_type u8, payload.
// Payload fields are little-endian:
//   HELLO         client_id u32
//   GLOBAL_MODEL  round u32, param_count u64, params f64[param_count]
//   CLIENT_UPDATE client_id u32, round u32, L_D f64, param_count u64, params f64[]
//   ROUND_DONE    round u32
//   ERROR         code u16, utf-8 text (rest of payload)
// A client connects, sends HELLO, then for every round receives GLOBAL_MODEL,
// replies with CLIENT_UPDATE and receives ROUND_DONE once the server has
// aggregated.
#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "afedcl/bytes.hpp"
#include "afedcl/fedcore.hpp"

namespace afedcl {

enum class MessageType : std::uint8_t {
    Hello = 1,
    GlobalModel = 2,
    ClientUpdate = 3,
    RoundDone = 4,
    Error = 5,
};

struct HelloMsg {
    std::uint32_t client_id = 0;
    friend bool operator==(const HelloMsg&, const HelloMsg&) = default;
};

struct GlobalModelMsg {
    std::uint32_t round = 0;
    ParamVector params;
    friend bool operator==(const GlobalModelMsg&, const GlobalModelMsg&) = default;
};

struct ClientUpdateMsg {
    std::uint32_t client_id = 0;
    std::uint32_t round = 0;
    double discrimination_loss = 0.0;
    ParamVector params;
    friend bool operator==(const ClientUpdateMsg&, const ClientUpdateMsg&) = default;
};

struct RoundDoneMsg {
    std::uint32_t round = 0;
    friend bool operator==(const RoundDoneMsg&, const RoundDoneMsg&) = default;
};

struct ErrorMsg {
    std::uint16_t code = 0;
    std::string text;
    friend bool operator==(const ErrorMsg&, const ErrorMsg&) = default;
};

using Message = std::variant<HelloMsg, GlobalModelMsg, ClientUpdateMsg, RoundDoneMsg, ErrorMsg>;

MessageType message_type(const Message& msg);

struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TimeoutError : ProtocolError {
    using ProtocolError::ProtocolError;
};

inline constexpr std::size_t kFrameHeaderBytes = 5;
/// Largest payload accepted from the wire (256 MiB).
inline constexpr std::uint32_t kMaxPayloadBytes = 256u << 20;

/// One complete frame.
Bytes encode_message(const Message& msg);

/// Decodes exactly one frame. Throws ProtocolError on truncation, unknown
/// type, a param_count that disagrees with the payload length, or trailing bytes.
Message decode_message(std::span<const std::uint8_t> frame);

/// Decodes a payload whose type byte has already been read.
Message decode_payload(std::uint8_t type, std::span<const std::uint8_t> payload);

// ---- sockets -----------------------------------------------------------

using Millis = std::chrono::milliseconds;

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    ~Socket();

    int fd() const noexcept { return fd_; }
    bool valid() const noexcept { return fd_ >= 0; }
    void close() noexcept;

    void send_all(std::span<const std::uint8_t> bytes);
    /// Reads exactly `out.size()` bytes or throws TimeoutError / ProtocolError.
    void recv_exact(std::span<std::uint8_t> out, std::chrono::steady_clock::time_point deadline);

private:
    int fd_ = -1;
};

void write_message(Socket& s, const Message& msg);
Message read_message(Socket& s, Millis timeout);

class TcpListener {
public:
    /// Binds and listens; port 0 picks a free port.
    TcpListener(const std::string& host, std::uint16_t port);
    std::uint16_t port() const noexcept { return port_; }
    Socket accept(Millis timeout);

private:
    Socket sock_;
    std::uint16_t port_ = 0;
};

/// Connects, retrying until `timeout` elapses (the server may not be up yet).
Socket tcp_connect(const std::string& host, std::uint16_t port, Millis timeout);

// ---- round channels ----------------------------------------------------

/// Server-side view of the federation for one round.
class RoundChannel {
public:
    virtual ~RoundChannel() = default;
    /// Sends the global parameters to every client and returns one upload per
    /// client in roster order. Throws if any client fails to deliver.
    virtual std::vector<ClientUpload> broadcast_and_collect(std::span<const double> global_params,
                                                            std::uint32_t round) = 0;
    /// Signals that aggregation for `round` is complete.
    virtual void round_done(std::uint32_t round) = 0;
};

/// In-process clients driven by direct calls.
class LoopbackChannel final : public RoundChannel {
public:
    LoopbackChannel(std::vector<ClientState>& clients, Method method, const TrainingConfig& cfg)
        : clients_(clients), method_(method), cfg_(cfg) {}

    std::vector<ClientUpload> broadcast_and_collect(std::span<const double> global_params,
                                                    std::uint32_t round) override;
    void round_done(std::uint32_t) override {}

    const std::vector<ClientRoundStats>& last_stats() const noexcept { return stats_; }

private:
    std::vector<ClientState>& clients_;
    Method method_;
    TrainingConfig cfg_;
    std::vector<ClientRoundStats> stats_;
};

/// Server end of the TCP protocol. Each connection is served by its own
/// thread during a round; the call returns only when every client has
/// answered (or fails naming the first client that did not).
class TcpServerChannel final : public RoundChannel {
public:
    /// Accepts one connection per roster entry and performs the HELLO handshake.
    TcpServerChannel(TcpListener& listener, std::span<const std::size_t> roster,
                     std::size_t expected_param_count, Millis timeout);

    std::vector<ClientUpload> broadcast_and_collect(std::span<const double> global_params,
                                                    std::uint32_t round) override;
    void round_done(std::uint32_t round) override;

    /// Sends ERROR to every client (best effort).
    void abort(const std::string& why) noexcept;

private:
    std::vector<std::size_t> roster_;
    std::vector<Socket> conns_;  // roster order
    std::size_t expected_params_;
    Millis timeout_;
};

/// Runs `rounds` rounds against `channel`, aggregating on the server.
std::vector<RoundReport> serve_rounds(ServerState& server, RoundChannel& channel,
                                      std::size_t rounds, const TrainingConfig& cfg);

/// Client end of the TCP protocol for a whole session.
void tcp_client_session(ClientState& client, Method method, const TrainingConfig& cfg,
                        const std::string& host, std::uint16_t port, std::size_t rounds,
                        Millis timeout);

struct BackendRun {
    ServerState server;
    std::vector<ClientState> clients;
    std::vector<RoundReport> reports;  // server-side view: L_D and weights only
};

/// Full experiment through the loopback channel.
BackendRun run_loopback(const ExperimentSpec& spec, const FederatedData& data);

/// Full experiment with every client on its own thread talking TCP to a
/// server on `host` (ephemeral port).
BackendRun run_tcp_local(const ExperimentSpec& spec, const FederatedData& data,
                         const std::string& host = "127.0.0.1", Millis timeout = Millis(60000));

}  // namespace afedcl
