// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

#include "afedcl/harness.hpp"
#include "afedcl/transport.hpp"
#include "oracle/gradcheck.hpp"
#include "oracle/round_compare.hpp"

using namespace afedcl;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (budget_s > 0 && secs > budget_s) {
        o.pass = false;
        o.detail += " (over time budget " + std::to_string(budget_s) + " s)";
    }
    if (!o.pass) ++failures;
    std::printf("%s  [%d] %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

ExperimentConfig desk_config() {
    ExperimentConfig cfg = load_config(std::string(AFEDCL_SOURCE_DIR) + "/configs/desk_benchmark.json");
    cfg.seeds.clear();
    return cfg;
}

// ---- 1-4: math ------------------------------------------------------------

Outcome gradients() {
    const gradcheck::Report r = gradcheck::run(120, 2024);
    std::string worst_block;
    for (const auto& b : r.blocks) {
        if (b.worst == r.worst()) worst_block = b.name;
    }
    return {r.worst() < 1e-4, fmt("worst relative error %.3g", r.worst()) + " in " + worst_block + " over " +
                                  std::to_string(r.instances) + " instances, " +
                                  std::to_string(r.blocks.size()) + " gradient blocks"};
}

Outcome oracle_round() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const round_compare::Result r = round_compare::run(seed);
        worst = std::max({worst, r.max_param_diff, r.max_loss_diff, r.max_global_diff, r.max_fusion_diff});
    }
    return {worst <= 1e-10, fmt("max |diff| over parameters, L_D, aggregate and A_k: %.3g", worst)};
}

Outcome aggregation() {
    Rng rng(77);
    double worst_sum = 0.0, worst_perm = 0.0, worst_scale = 0.0, worst_uniform = 0.0;
    bool in_range = true;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t k = 1 + rng.index(20);
        std::vector<double> l(k);
        for (double& v : l) v = rng.uniform(0.0, 3.0) * (rng.index(10) == 0 ? 0.0 : 1.0);
        const auto w = consensus_weights(l);
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
        for (double v : w) in_range = in_range && v >= 0.0 && v <= 1.0;

        std::vector<std::size_t> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<double> lp(k);
        for (std::size_t j = 0; j < k; ++j) lp[j] = l[perm[j]];
        const auto wp = consensus_weights(lp);
        for (std::size_t j = 0; j < k; ++j) worst_perm = std::max(worst_perm, std::abs(wp[j] - w[perm[j]]));

        const double c = std::exp(rng.uniform(-5.0, 5.0));
        std::vector<double> ls = l;
        for (double& v : ls) v *= c;
        const auto ws = consensus_weights(ls);
        for (std::size_t j = 0; j < k; ++j) worst_scale = std::max(worst_scale, std::abs(ws[j] - w[j]));

        const std::vector<double> eq(k, rng.uniform(0.0, 3.0));
        for (double v : consensus_weights(eq)) {
            worst_uniform = std::max(worst_uniform, std::abs(v - 1.0 / static_cast<double>(k)));
        }
    }
    const bool pass = worst_sum <= 1e-9 && in_range && worst_perm <= 1e-12 && worst_scale <= 1e-12 &&
                      worst_uniform <= 1e-12;
    return {pass, fmt("1000 cases; |sum-1| %.2g", worst_sum) + fmt(", permutation %.2g", worst_perm) +
                      fmt(", scale %.2g", worst_scale) + fmt(", uniform %.2g", worst_uniform) +
                      (in_range ? ", all in [0,1]" : ", out of [0,1]")};
}

Outcome reductions() {
    NetworkConfig net;
    net.input_dim = 6, net.num_classes = 3, net.feature_dim = 4, net.encoder_hidden = {8}, net.discriminator_hidden = 5;
    auto dataset = [&](std::uint64_t seed, std::size_t n) {
        Rng rng(seed);
        Dataset d;
        d.num_classes = 3;
        d.features = Tensor::matrix(n, 6);
        for (double& v : d.features.values()) v = rng.normal();
        for (std::size_t i = 0; i < n; ++i) d.labels.push_back(i % 3);
        return d;
    };
    bool lambda_ok = true, prox_ok = true, fusion_ok = true;
    for (auto kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
        for (std::size_t n : {std::size_t{20}, std::size_t{90}}) {
            TrainingConfig cfg;
            cfg.optimizer.kind = kind;
            cfg.optimizer.learning_rate = 0.05;
            ClientState a = make_client(0, build_models(net, n), dataset(n + 1, n), cfg, 3);
            ClientState b = a;
            const Encoder global = build_models(net, 1000 + n).encoder;
            const Discriminator before = a.models.discriminator;
            dcc_local_update(a, global, 1, 0.0, cfg.flags, cfg);
            classification_local_update(b, 1, cfg);
            lambda_ok = lambda_ok && a.models.discriminator == before && a.models.encoder == b.models.encoder &&
                        a.models.classifier == b.models.classifier;

            ClientState p = make_client(0, build_models(net, n + 7), dataset(n + 8, n), cfg, 4);
            ClientState q = p;
            const Encoder ge = p.models.encoder;
            const Classifier gc = p.models.classifier;
            fedprox_local_update(p, ge, gc, 4, 0.0, cfg);
            classification_local_update(q, 4, cfg);
            prox_ok = prox_ok && p.models == q.models;

            ClientState f = make_client(0, build_models(net, n + 9), dataset(n + 10, n), cfg, 5);
            f.fusion_weight = 0.0;
            const Dataset test = dataset(n + 11, 200);
            AblationFlags local_only;
            local_only.enable_aff = false;
            fusion_ok = fusion_ok && predict(f, global, test.features) == predict(f, global, test.features, local_only);
        }
    }
    return {lambda_ok && prox_ok && fusion_ok,
            std::string("lambda=0 freeze ") + (lambda_ok ? "exact" : "DIFFERS") + ", FedProx mu=0 " +
                (prox_ok ? "exact" : "DIFFERS") + ", A_k=0 predictions " + (fusion_ok ? "exact" : "DIFFER")};
}

// ---- 5-7: desk benchmark --------------------------------------------------

struct DeskRuns {
    std::map<std::string, std::vector<RunSummary>> by_variant;  // 5 seeds each
};

DeskRuns& desk_runs() {
    static DeskRuns runs = [] {
        struct Setup {
            std::string name;
            Method method;
            AblationFlags flags;
        };
        std::vector<Setup> setups{{"afedcl", Method::AFedCL, {}}, {"fedavg", Method::FedAvg, {}},
                                  {"local_only", Method::LocalOnly, {}}};
        for (const auto& [name, flags] : ablation_variants()) {
            if (name != "full") setups.push_back({name, Method::AFedCL, flags});
        }
        std::vector<std::pair<std::string, ExperimentConfig>> jobs;
        for (const auto& s : setups) {
            for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                ExperimentConfig cfg = desk_config();
                cfg.spec.method = s.method;
                cfg.spec.training.flags = s.flags;
                cfg.spec.seed = seed;
                cfg.variant = s.name;
                jobs.emplace_back(s.name, cfg);
            }
        }
        const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
        std::vector<RunSummary> results(jobs.size());
        std::size_t next = 0;
        std::mutex mu;
        {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < std::min(workers, jobs.size()); ++w) {
                pool.emplace_back([&] {
                    for (;;) {
                        std::size_t i;
                        {
                            std::lock_guard lock(mu);
                            if (next == jobs.size()) return;
                            i = next++;
                        }
                        results[i] = run_single(jobs[i].second, false);
                    }
                });
            }
        }
        DeskRuns r;
        for (std::size_t i = 0; i < jobs.size(); ++i) r.by_variant[jobs[i].first].push_back(results[i]);
        return r;
    }();
    return runs;
}

double median_accuracy(const std::string& variant) {
    std::vector<double> acc;
    for (const auto& s : desk_runs().by_variant.at(variant)) acc.push_back(s.mean_test_accuracy);
    return median(acc);
}

Outcome desk_trend() {
    const double full = median_accuracy("afedcl");
    const double fedavg = median_accuracy("fedavg");
    const double nofl = median_accuracy("local_only");
    bool pass = full >= fedavg + 0.03 && full >= nofl + 0.05;
    std::string d = fmt("median acc AFedCL %.4f", full) + fmt(", FedAvg %.4f", fedavg) +
                    fmt(" (need <= %.4f)", full - 0.03) + fmt(", No-FL %.4f", nofl) +
                    fmt(" (need <= %.4f)", full - 0.05);
    for (const char* v : {"no_dcc", "no_caa", "no_aff"}) {
        const double a = median_accuracy(v);
        pass = pass && full >= a - 0.01;
        d += std::string(", ") + v + fmt(" %.4f", a);
    }
    return {pass, d + fmt(" (ablations need <= %.4f)", full + 0.01)};
}

Outcome discriminator_dynamics() {
    auto med = [](const std::string& v) {
        std::vector<double> acc;
        for (const auto& s : desk_runs().by_variant.at(v)) acc.push_back(mean(s.final_discriminator_accuracy));
        return median(acc);
    };
    const double full = med("afedcl");
    const double ablated = med("no_encoder_adv");
    return {ablated - full >= 0.10, fmt("median final discriminator accuracy: full %.4f", full) +
                                        fmt(", no encoder adversarial update %.4f", ablated) +
                                        fmt(", gap %.4f (need >= 0.10)", ablated - full)};
}

Outcome fusion_sign() {
    std::vector<double> ld, a;
    for (const auto& s : desk_runs().by_variant.at("afedcl")) {
        ld.insert(ld.end(), s.final_discrimination_loss.begin(), s.final_discrimination_loss.end());
        a.insert(a.end(), s.final_fusion_weight.begin(), s.final_fusion_weight.end());
    }
    const LinearFit f = least_squares(ld, a);
    return {f.slope < 0.0, fmt("OLS slope of A_k on L_D %.4g", f.slope) + " over " + std::to_string(ld.size()) +
                               " client points" + fmt(", L_D range [%.4f", *std::min_element(ld.begin(), ld.end())) +
                               fmt(", %.4f]", *std::max_element(ld.begin(), ld.end()))};
}

// ---- 8-9: transport and formats -----------------------------------------

Outcome transport() {
    ExperimentConfig cfg = desk_config();
    cfg.spec.rounds = 3;
    cfg.spec.seed = 1;
    const FederatedData data = prepare_data(cfg);
    const BackendRun loop = run_loopback(cfg.spec, data);
    const BackendRun tcp = run_tcp_local(cfg.spec, data, "127.0.0.1", Millis(30000));
    std::size_t same = 0;
    for (std::size_t k = 0; k < loop.clients.size(); ++k) {
        if (checkpoint_save(client_checkpoint(tcp.clients[k], 3)) ==
            checkpoint_save(client_checkpoint(loop.clients[k], 3))) {
            ++same;
        }
    }
    const bool global_same = tcp.server.global_encoder == loop.server.global_encoder;
    return {same == loop.clients.size() && global_same && loop.clients.size() == 5,
            std::to_string(same) + "/" + std::to_string(loop.clients.size()) +
                " client checkpoints bit-identical, global encoder " + (global_same ? "identical" : "DIFFERS")};
}

double wild(Rng& rng) {
    switch (rng.index(6)) {
        case 0: return -0.0;
        case 1: return 4.9e-324 * static_cast<double>(1 + rng.index(1000));
        case 2: return rng.normal() * 1e300;
        default: return rng.normal();
    }
}

Outcome round_trips() {
    Rng rng(909);
    std::size_t ck_ok = 0, msg_ok = 0;
    const std::size_t cases = 500;
    for (std::size_t i = 0; i < cases; ++i) {
        NetworkConfig net;
        net.input_dim = 1 + rng.index(6);
        net.feature_dim = 1 + rng.index(5);
        net.num_classes = 2 + rng.index(4);
        net.encoder_hidden.resize(rng.index(3));
        for (auto& h : net.encoder_hidden) h = 1 + rng.index(6);
        net.classifier_hidden.resize(rng.index(2));
        for (auto& h : net.classifier_hidden) h = 1 + rng.index(6);
        net.discriminator_hidden = 1 + rng.index(6);
        Checkpoint ck{build_models(net, i), wild(rng), static_cast<std::uint32_t>(rng.index(1u << 30))};
        for (Mlp* m : {static_cast<Mlp*>(&ck.models.encoder), static_cast<Mlp*>(&ck.models.classifier),
                       static_cast<Mlp*>(&ck.models.discriminator)}) {
            ParamVector p = m->to_vector();
            for (double& v : p) v = wild(rng);
            m->assign(p);
        }
        const Bytes b = checkpoint_save(ck);
        const Checkpoint back = checkpoint_load(b, net);
        if (checkpoint_save(back) == b && back.models.encoder.to_vector() == ck.models.encoder.to_vector() &&
            std::signbit(back.fusion_weight) == std::signbit(ck.fusion_weight)) {
            ++ck_ok;
        }

        ParamVector params(rng.index(50));
        for (double& v : params) v = wild(rng);
        const auto r32 = [&] { return static_cast<std::uint32_t>(rng.index(1u << 31)); };
        Message m;
        switch (i % 5) {
            case 0: m = HelloMsg{r32()}; break;
            case 1: m = GlobalModelMsg{r32(), params}; break;
            case 2: m = ClientUpdateMsg{r32() % 64, r32(), wild(rng), params}; break;
            case 3: m = RoundDoneMsg{r32()}; break;
            default: m = ErrorMsg{static_cast<std::uint16_t>(rng.index(65536)), std::string(rng.index(40), 'x')};
        }
        const Bytes frame = encode_message(m);
        if (encode_message(decode_message(frame)) == frame) ++msg_ok;
    }
    return {ck_ok == cases && msg_ok == cases, std::to_string(ck_ok) + "/" + std::to_string(cases) +
                                                   " checkpoints and " + std::to_string(msg_ok) + "/" +
                                                   std::to_string(cases) + " messages bit-exact"};
}

}  // namespace

int main() {
    criterion(1, "gradient correctness", 30, gradients);
    criterion(2, "oracle round equivalence", 5, oracle_round);
    criterion(3, "aggregation properties", 5, aggregation);
    criterion(4, "reductions", 0, reductions);
    const auto t0 = Clock::now();
    desk_runs();
    std::printf("      desk benchmark: 35 runs (7 methods x 5 seeds) in %.1f s\n",
                std::chrono::duration<double>(Clock::now() - t0).count());
    criterion(5, "desk-scale accuracy trend", 0, desk_trend);
    criterion(6, "discriminator accuracy without encoder adversarial update", 0, discriminator_dynamics);
    criterion(7, "fusion weight vs discrimination loss slope", 0, fusion_sign);
    criterion(8, "TCP vs loopback checkpoints", 60, transport);
    criterion(9, "checkpoint and message round trips", 0, round_trips);
    std::printf("%d of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
