#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <thread>

#include "afedcl/transport.hpp"

using namespace afedcl;

namespace {

Message random_message(Rng& rng) {
    auto params = [&] {
        ParamVector p(rng.index(40));
        for (double& v : p) v = rng.normal() * std::pow(10.0, rng.uniform(-300, 300));
        return p;
    };
    switch (rng.index(5)) {
        case 0: return HelloMsg{static_cast<std::uint32_t>(rng.index(1u << 31))};
        case 1: return GlobalModelMsg{static_cast<std::uint32_t>(rng.index(100000)), params()};
        case 2:
            return ClientUpdateMsg{static_cast<std::uint32_t>(rng.index(64)),
                                   static_cast<std::uint32_t>(rng.index(100000)), rng.uniform(0, 3), params()};
        case 3: return RoundDoneMsg{static_cast<std::uint32_t>(rng.index(100000))};
        default: {
            std::string text(rng.index(30), 'a');
            for (char& c : text) c = static_cast<char>('a' + rng.index(26));
            return ErrorMsg{static_cast<std::uint16_t>(rng.index(65536)), text + " \xc3\xa9"};
        }
    }
}

FederatedData small_federation(std::size_t clients) {
    FederatedData fd;
    for (std::size_t k = 0; k < clients; ++k) {
        Rng rng(derive_seed(9, k));
        ClientSplit s;
        s.train.num_classes = 3;
        s.train.features = Tensor::matrix(8, 4);
        for (double& v : s.train.features.values()) v = rng.normal();
        s.train.labels = {0, 1, 2, 0, 1, 2, 0, 1};
        s.test = s.train;
        fd.clients.push_back(std::move(s));
    }
    fd.global_test = fd.clients[0].test;
    return fd;
}

ExperimentSpec small_spec(Method m, std::size_t rounds) {
    ExperimentSpec spec;
    spec.method = m;
    spec.rounds = rounds;
    spec.seed = 21;
    spec.network.input_dim = 4;
    spec.network.num_classes = 3;
    spec.network.feature_dim = 3;
    spec.network.encoder_hidden = {6};
    spec.network.discriminator_hidden = 4;
    return spec;
}

}  // namespace

TEST(Codec, RoundTripProperty) {
    Rng rng(2024);
    for (int i = 0; i < 2000; ++i) {
        const Message m = random_message(rng);
        const Bytes frame = encode_message(m);
        const Message back = decode_message(frame);
        ASSERT_EQ(back, m) << "case " << i;
        EXPECT_EQ(encode_message(back), frame);
    }
}

TEST(Codec, GlobalModelFrameSize) {
    for (std::size_t n : {0, 1, 7, 1000}) {
        const Bytes f = encode_message(GlobalModelMsg{3, ParamVector(n, 1.0)});
        EXPECT_EQ(f.size(), 17 + 8 * n);
        const std::uint32_t len = (std::uint32_t{f[0]} << 24) | (std::uint32_t{f[1]} << 16) |
                                  (std::uint32_t{f[2]} << 8) | f[3];
        EXPECT_EQ(len, 12 + 8 * n);  // big-endian payload length
        EXPECT_EQ(f[4], 2);
        EXPECT_EQ(f[5], 3);  // round little-endian
    }
}

TEST(Codec, RejectsMalformedFrames) {
    const Bytes good = encode_message(ClientUpdateMsg{1, 2, 0.5, {1.0, 2.0, 3.0}});
    for (std::size_t cut = 0; cut < good.size(); ++cut) {
        const Bytes part(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(decode_message(part), ProtocolError) << cut;
    }
    Bytes extra = good;
    extra.push_back(0);
    EXPECT_THROW(decode_message(extra), ProtocolError);
    Bytes unknown = encode_message(RoundDoneMsg{1});
    unknown[4] = 9;
    EXPECT_THROW(decode_message(unknown), ProtocolError);
    // param_count says 4 but only 3 values follow
    Bytes lie = good;
    lie[5 + 16] = 4;
    try {
        decode_message(lie);
        FAIL();
    } catch (const ProtocolError& e) {
        EXPECT_NE(std::string(e.what()).find("count mismatch"), std::string::npos);
    }
}

TEST(Backends, LoopbackMatchesDirectCalls) {
    const FederatedData fd = small_federation(3);
    for (Method m : {Method::AFedCL, Method::FedAvg, Method::FedProx, Method::LocalOnly}) {
        const ExperimentSpec spec = small_spec(m, 3);
        const ExperimentResult direct = run_experiment(spec, fd);
        const BackendRun loop = run_loopback(spec, fd);
        EXPECT_EQ(loop.server.global_encoder, direct.server.global_encoder) << to_string(m);
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_EQ(checkpoint_save(client_checkpoint(loop.clients[k], 3)),
                      checkpoint_save(client_checkpoint(direct.clients[k], 3)));
        }
        ASSERT_EQ(loop.reports.size(), 3u);
        EXPECT_EQ(loop.reports.back().aggregation_weights, direct.reports.back().aggregation_weights);
    }
}

TEST(Backends, TcpMatchesLoopback) {
    const FederatedData fd = small_federation(3);
    for (Method m : {Method::AFedCL, Method::FedAvg}) {
        const ExperimentSpec spec = small_spec(m, 3);
        const BackendRun loop = run_loopback(spec, fd);
        const BackendRun tcp = run_tcp_local(spec, fd, "127.0.0.1", Millis(20000));
        EXPECT_EQ(tcp.server.global_encoder, loop.server.global_encoder);
        EXPECT_EQ(tcp.server.round, 4u);
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_EQ(checkpoint_save(client_checkpoint(tcp.clients[k], 3)),
                      checkpoint_save(client_checkpoint(loop.clients[k], 3)));
        }
    }
}

namespace {

// Server side of a one-client federation whose client is scripted by `script`.
std::string serve_one_round_against(const std::function<void(Socket&)>& script, Millis timeout) {
    TcpListener listener("127.0.0.1", 0);
    const std::uint16_t port = listener.port();
    std::jthread fake([&] {
        try {
            Socket s = tcp_connect("127.0.0.1", port, Millis(5000));
            write_message(s, HelloMsg{0});
            script(s);
        } catch (...) {
        }
    });
    const std::size_t roster[] = {0};
    TcpServerChannel channel(listener, roster, 2, timeout);
    const ParamVector g{1.0, 2.0};
    try {
        channel.broadcast_and_collect(g, 5);
    } catch (const RoundError& e) {
        channel.abort(e.what());
        return e.what();
    }
    return "no error";
}

}  // namespace

TEST(TcpServer, WrongRoundIsProtocolError) {
    const std::string err = serve_one_round_against(
        [](Socket& s) {
            const Message m = read_message(s, Millis(5000));
            const auto& gm = std::get<GlobalModelMsg>(m);
            write_message(s, ClientUpdateMsg{0, gm.round + 1, 0.5, gm.params});
            read_message(s, Millis(5000));
        },
        Millis(5000));
    EXPECT_NE(err.find("round mismatch"), std::string::npos) << err;
    EXPECT_NE(err.find("client 0"), std::string::npos) << err;
}

TEST(TcpServer, WrongParamCountIsRejected) {
    const std::string err = serve_one_round_against(
        [](Socket& s) {
            const Message m = read_message(s, Millis(5000));
            write_message(s, ClientUpdateMsg{0, std::get<GlobalModelMsg>(m).round, 0.5, {1.0}});
            read_message(s, Millis(5000));
        },
        Millis(5000));
    EXPECT_NE(err.find("param_count"), std::string::npos) << err;
}

TEST(TcpServer, SilentClientTimesOutWithItsId) {
    const std::string err = serve_one_round_against(
        [](Socket& s) {
            read_message(s, Millis(5000));
            try {
                read_message(s, Millis(5000));  // wait for the server's ERROR
            } catch (...) {
            }
        },
        Millis(300));
    EXPECT_NE(err.find("client 0"), std::string::npos) << err;
    EXPECT_NE(err.find("timed out"), std::string::npos) << err;
}

TEST(TcpClient, RejectsNonMonotoneRounds) {
    TcpListener listener("127.0.0.1", 0);
    const std::uint16_t port = listener.port();
    const FederatedData fd = small_federation(1);
    const ExperimentSpec spec = small_spec(Method::AFedCL, 2);
    ExperimentResult init = initialize_experiment(spec, fd);
    std::exception_ptr client_error;
    {
        std::jthread client([&] {
            try {
                tcp_client_session(init.clients[0], spec.method, spec.training, "127.0.0.1", port, 2, Millis(5000));
            } catch (...) {
                client_error = std::current_exception();
            }
        });
        Socket s = listener.accept(Millis(5000));
        read_message(s, Millis(5000));  // HELLO
        const ParamVector g = shared_params(init.server);
        write_message(s, GlobalModelMsg{4, g});
        read_message(s, Millis(5000));
        write_message(s, RoundDoneMsg{4});
        write_message(s, GlobalModelMsg{4, g});
    }
    ASSERT_TRUE(client_error);
    try {
        std::rethrow_exception(client_error);
    } catch (const ProtocolError& e) {
        EXPECT_NE(std::string(e.what()).find("monotone"), std::string::npos);
    }
}
