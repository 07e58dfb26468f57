#include "afedcl/harness.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "afedcl/transport.hpp"

namespace afedcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
            allowed.end()) {
            throw ConfigError(where + ": unknown key \"" + key + "\"");
        }
    }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

std::size_t read_count(const json& obj, const char* key, std::size_t fallback, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    if (!it->is_number_integer() || it->get<long long>() < 0) {
        throw ConfigError(where + "." + key + ": expected a non-negative integer");
    }
    return it->get<std::size_t>();
}

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::Direct: return "direct";
        case Backend::Loopback: return "loopback";
        case Backend::Tcp: return "tcp";
    }
    return "direct";
}

Backend parse_backend(const std::string& s) {
    if (s == "direct") return Backend::Direct;
    if (s == "loopback") return Backend::Loopback;
    if (s == "tcp") return Backend::Tcp;
    throw ConfigError("unknown backend \"" + s + "\"");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

json config_json(const ExperimentConfig& cfg) {
    const auto& s = cfg.spec;
    const auto& t = s.training;
    json j;
    j["method"] = to_string(s.method);
    j["rounds"] = s.rounds;
    j["clients"] = cfg.clients;
    j["seed"] = s.seed;
    j["seeds"] = cfg.seeds;
    j["threads"] = s.threads;
    j["lambda"] = t.lambda;
    j["mu"] = t.mu;
    j["dcc_epochs"] = t.dcc_epochs;
    j["aff_epochs"] = t.aff_epochs;
    j["batch_size"] = t.batch_size;
    j["full_batch_threshold"] = t.full_batch_threshold;
    j["initial_fusion_weight"] = t.initial_fusion_weight;
    j["optimizer"] = {{"kind", t.optimizer.kind == OptimizerKind::Adam ? "adam" : "sgd"},
                      {"learning_rate", t.optimizer.learning_rate},
                      {"beta1", t.optimizer.beta1},
                      {"beta2", t.optimizer.beta2},
                      {"epsilon", t.optimizer.epsilon}};
    j["flags"] = {{"dcc", t.flags.enable_dcc},
                  {"caa", t.flags.enable_caa},
                  {"aff", t.flags.enable_aff},
                  {"encoder_adversarial_update", t.flags.enable_encoder_adversarial_update}};
    j["network"] = {{"input_dim", s.network.input_dim},
                    {"feature_dim", s.network.feature_dim},
                    {"num_classes", s.network.num_classes},
                    {"encoder_hidden", s.network.encoder_hidden},
                    {"classifier_hidden", s.network.classifier_hidden},
                    {"discriminator_hidden", s.network.discriminator_hidden}};
    if (cfg.partition.scheme == PartitionScheme::Disjoint) {
        j["partition"] = {{"scheme", "disjoint"}, {"classes_per_client", cfg.partition.classes_per_client}};
    } else {
        j["partition"] = {{"scheme", "dirichlet"}, {"alpha", cfg.partition.alpha}};
    }
    j["per_client_train"] = cfg.per_client_train;
    if (cfg.data.synthetic) {
        j["data"] = {{"source", "synthetic"},
                     {"classes", cfg.data.spec.num_classes},
                     {"input_dim", cfg.data.spec.input_dim},
                     {"sigma", cfg.data.spec.sigma},
                     {"separation", cfg.data.spec.separation},
                     {"samples_per_class", cfg.data.spec.samples_per_class}};
        if (cfg.data.spec_seed_set) j["data"]["seed"] = cfg.data.spec.seed;
    } else {
        j["data"] = {{"source", "folder"}, {"path", cfg.data.folder.string()}, {"side", cfg.data.side}};
    }
    j["output_dir"] = cfg.output_dir.string();
    j["backend"] = backend_name(cfg.backend);
    j["host"] = cfg.host;
    j["port"] = cfg.port;
    j["timeout_ms"] = cfg.timeout_ms;
    j["variant"] = cfg.variant;
    return j;
}

}  // namespace

ExperimentConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(j,
                   {"method", "rounds", "clients", "seed", "seeds", "threads", "lambda", "mu",
                    "dcc_epochs", "aff_epochs", "batch_size", "full_batch_threshold",
                    "initial_fusion_weight", "optimizer", "flags", "network", "partition",
                    "per_client_train", "data", "output_dir", "backend", "host", "port",
                    "timeout_ms", "variant"},
                   "config");
    ExperimentConfig cfg;
    auto& s = cfg.spec;
    auto& t = s.training;
    if (j.contains("method")) {
        try {
            s.method = parse_method(j["method"].get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config.method: ") + e.what());
        }
    }
    s.rounds = read_count(j, "rounds", s.rounds, "config");
    cfg.clients = read_count(j, "clients", cfg.clients, "config");
    read_opt(j, "seed", s.seed, "config");
    read_opt(j, "seeds", cfg.seeds, "config");
    s.threads = read_count(j, "threads", s.threads, "config");
    read_opt(j, "lambda", t.lambda, "config");
    read_opt(j, "mu", t.mu, "config");
    t.dcc_epochs = read_count(j, "dcc_epochs", t.dcc_epochs, "config");
    t.aff_epochs = read_count(j, "aff_epochs", t.aff_epochs, "config");
    t.batch_size = read_count(j, "batch_size", t.batch_size, "config");
    t.full_batch_threshold = read_count(j, "full_batch_threshold", t.full_batch_threshold, "config");
    read_opt(j, "initial_fusion_weight", t.initial_fusion_weight, "config");

    if (auto it = j.find("optimizer"); it != j.end()) {
        const json& o = *it;
        reject_unknown(o, {"kind", "learning_rate", "beta1", "beta2", "epsilon"}, "config.optimizer");
        std::string kind = "adam";
        read_opt(o, "kind", kind, "config.optimizer");
        if (kind == "adam") t.optimizer.kind = OptimizerKind::Adam;
        else if (kind == "sgd") t.optimizer.kind = OptimizerKind::Sgd;
        else throw ConfigError("config.optimizer.kind: expected \"adam\" or \"sgd\"");
        read_opt(o, "learning_rate", t.optimizer.learning_rate, "config.optimizer");
        read_opt(o, "beta1", t.optimizer.beta1, "config.optimizer");
        read_opt(o, "beta2", t.optimizer.beta2, "config.optimizer");
        read_opt(o, "epsilon", t.optimizer.epsilon, "config.optimizer");
    }
    if (auto it = j.find("flags"); it != j.end()) {
        reject_unknown(*it, {"dcc", "caa", "aff", "encoder_adversarial_update"}, "config.flags");
        read_opt(*it, "dcc", t.flags.enable_dcc, "config.flags");
        read_opt(*it, "caa", t.flags.enable_caa, "config.flags");
        read_opt(*it, "aff", t.flags.enable_aff, "config.flags");
        read_opt(*it, "encoder_adversarial_update", t.flags.enable_encoder_adversarial_update,
                 "config.flags");
    }
    // Dimensions default to "take from the data".
    s.network.input_dim = 0;
    s.network.num_classes = 0;
    if (auto it = j.find("network"); it != j.end()) {
        const json& n = *it;
        reject_unknown(n,
                       {"input_dim", "feature_dim", "num_classes", "encoder_hidden",
                        "classifier_hidden", "discriminator_hidden"},
                       "config.network");
        s.network.input_dim = read_count(n, "input_dim", 0, "config.network");
        s.network.num_classes = read_count(n, "num_classes", 0, "config.network");
        s.network.feature_dim = read_count(n, "feature_dim", s.network.feature_dim, "config.network");
        read_opt(n, "encoder_hidden", s.network.encoder_hidden, "config.network");
        read_opt(n, "classifier_hidden", s.network.classifier_hidden, "config.network");
        s.network.discriminator_hidden =
            read_count(n, "discriminator_hidden", s.network.discriminator_hidden, "config.network");
    }
    if (auto it = j.find("partition"); it != j.end()) {
        const json& p = *it;
        reject_unknown(p, {"scheme", "classes_per_client", "alpha"}, "config.partition");
        std::string scheme = "disjoint";
        read_opt(p, "scheme", scheme, "config.partition");
        if (scheme == "disjoint") cfg.partition.scheme = PartitionScheme::Disjoint;
        else if (scheme == "dirichlet") cfg.partition.scheme = PartitionScheme::Dirichlet;
        else throw ConfigError("config.partition.scheme: expected \"disjoint\" or \"dirichlet\"");
        cfg.partition.classes_per_client =
            read_count(p, "classes_per_client", cfg.partition.classes_per_client, "config.partition");
        read_opt(p, "alpha", cfg.partition.alpha, "config.partition");
    }
    cfg.per_client_train = read_count(j, "per_client_train", cfg.per_client_train, "config");
    if (auto it = j.find("data"); it != j.end()) {
        const json& d = *it;
        reject_unknown(d,
                       {"source", "classes", "input_dim", "sigma", "separation", "samples_per_class",
                        "seed", "path", "side"},
                       "config.data");
        std::string source = "synthetic";
        read_opt(d, "source", source, "config.data");
        if (source == "synthetic") {
            cfg.data.synthetic = true;
        } else if (source == "folder") {
            cfg.data.synthetic = false;
            std::string path;
            read_opt(d, "path", path, "config.data");
            if (path.empty()) throw ConfigError("config.data.path is required for folder data");
            cfg.data.folder = path;
        } else {
            throw ConfigError("config.data.source: expected \"synthetic\" or \"folder\"");
        }
        auto& sp = cfg.data.spec;
        sp.num_classes = read_count(d, "classes", sp.num_classes, "config.data");
        sp.input_dim = read_count(d, "input_dim", sp.input_dim, "config.data");
        read_opt(d, "sigma", sp.sigma, "config.data");
        read_opt(d, "separation", sp.separation, "config.data");
        sp.samples_per_class = read_count(d, "samples_per_class", sp.samples_per_class, "config.data");
        if (d.contains("seed")) {
            read_opt(d, "seed", sp.seed, "config.data");
            cfg.data.spec_seed_set = true;
        }
        cfg.data.side = read_count(d, "side", cfg.data.side, "config.data");
    }
    std::string out = cfg.output_dir.string();
    read_opt(j, "output_dir", out, "config");
    cfg.output_dir = out;
    if (j.contains("backend")) cfg.backend = parse_backend(j["backend"].get<std::string>());
    read_opt(j, "host", cfg.host, "config");
    read_opt(j, "port", cfg.port, "config");
    read_opt(j, "timeout_ms", cfg.timeout_ms, "config");
    read_opt(j, "variant", cfg.variant, "config");

    if (cfg.clients == 0) throw ConfigError("config.clients must be at least 1");
    if (cfg.per_client_train == 0) throw ConfigError("config.per_client_train must be at least 1");
    try {
        t.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json_text(ss.str());
}

std::string config_to_json_text(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

FederatedData prepare_data(ExperimentConfig& cfg) {
    const std::uint64_t seed = cfg.spec.seed;
    Dataset full;
    if (cfg.data.synthetic) {
        SyntheticSpec sp = cfg.data.spec;
        if (!cfg.data.spec_seed_set) sp.seed = derive_seed(seed, 1);
        full = synth_generate(sp);
    } else {
        full = load_image_folder(cfg.data.folder, cfg.data.side);
    }
    PartitionSpec part = cfg.partition.scheme == PartitionScheme::Disjoint
                             ? partition_disjoint(full, cfg.clients, cfg.partition.classes_per_client,
                                                  derive_seed(seed, 2))
                             : partition_dirichlet(full, cfg.clients, cfg.partition.alpha,
                                                   derive_seed(seed, 2));
    FederatedData fd = subsample_train(full, cfg.per_client_train, part, derive_seed(seed, 3));
    auto& net = cfg.spec.network;
    if (net.input_dim == 0) net.input_dim = full.input_dim();
    if (net.num_classes == 0) net.num_classes = full.num_classes;
    return fd;
}

// ---- metrics ------------------------------------------------------------

const std::vector<std::string>& metrics_columns() {
    static const std::vector<std::string> cols{
        "round",          "client_id",     "L_C",        "L_D",
        "disc_accuracy",  "L_C_fused",     "A_k",        "train_accuracy",
        "test_accuracy",  "macro_f1",      "aggregation_weight", "pooled_accuracy",
        "pooled_macro_f1"};
    return cols;
}

namespace {

std::optional<double> MetricsRow::*const kValueFields[] = {
    &MetricsRow::classification_loss, &MetricsRow::discrimination_loss,
    &MetricsRow::discriminator_accuracy, &MetricsRow::fused_loss,
    &MetricsRow::fusion_weight, &MetricsRow::train_accuracy,
    &MetricsRow::test_accuracy, &MetricsRow::macro_f1,
    &MetricsRow::aggregation_weight, &MetricsRow::pooled_accuracy,
    &MetricsRow::pooled_macro_f1};

std::optional<double> mean_of(const std::vector<MetricsRow>& rows, std::optional<double> MetricsRow::*f) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (r.*f) {
            sum += *(r.*f);
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

}  // namespace

std::vector<MetricsRow> metrics_rows(const std::vector<RoundReport>& reports, Method method) {
    const bool adversarial = method == Method::AFedCL;
    std::vector<MetricsRow> out;
    for (const auto& rep : reports) {
        std::vector<MetricsRow> clients;
        for (std::size_t k = 0; k < rep.clients.size(); ++k) {
            const auto& s = rep.clients[k];
            MetricsRow r;
            r.round = rep.round;
            r.client = std::to_string(s.client_id);
            if (rep.round > 0) {
                r.classification_loss = s.classification_loss;
                if (adversarial) {
                    r.discrimination_loss = s.discrimination_loss;
                    r.discriminator_accuracy = s.discriminator_accuracy;
                    r.fused_loss = s.fused_loss;
                }
                if (k < rep.aggregation_weights.size()) r.aggregation_weight = rep.aggregation_weights[k];
            }
            if (adversarial) r.fusion_weight = s.fusion_weight;
            r.train_accuracy = s.train_accuracy;
            r.test_accuracy = s.test_accuracy;
            r.macro_f1 = s.macro_f1;
            clients.push_back(std::move(r));
        }
        MetricsRow g;
        g.round = rep.round;
        g.client = "global";
        for (auto f : kValueFields) g.*f = mean_of(clients, f);
        if (g.aggregation_weight) {
            double sum = 0.0;
            for (double w : rep.aggregation_weights) sum += w;
            g.aggregation_weight = sum;
        }
        out.insert(out.end(), clients.begin(), clients.end());
        out.push_back(std::move(g));
    }
    return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const auto& cols = metrics_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows) {
        out << r.round << ',' << r.client;
        for (auto f : kValueFields) {
            out << ',';
            if (r.*f) out << fmt_double(*(r.*f));
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing header");
    std::vector<MetricsRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (cells.size() != metrics_columns().size()) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                                     std::to_string(metrics_columns().size()) + " fields");
        }
        MetricsRow r;
        r.round = static_cast<std::uint32_t>(std::stoul(cells[0]));
        r.client = cells[1];
        for (std::size_t i = 0; i < std::size(kValueFields); ++i) {
            if (!cells[i + 2].empty()) r.*kValueFields[i] = std::strtod(cells[i + 2].c_str(), nullptr);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

void export_features_csv(const Encoder& encoder, const Dataset& dataset, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const std::size_t d = encoder.out_dim();
    for (std::size_t i = 0; i < d; ++i) out << 'f' << i << ',';
    out << "label\n";
    if (dataset.size() == 0) return;
    const Tensor feats = encode(encoder, dataset.features);
    for (std::size_t r = 0; r < dataset.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) out << fmt_double(feats(r, c)) << ',';
        out << dataset.labels[r] << '\n';
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---- runs ---------------------------------------------------------------

namespace {

Evaluation pooled_evaluation(const ExperimentSpec& spec, const ServerState& server,
                             const std::vector<ClientState>& clients, const FederatedData& data) {
    // Every client's deployed model on the union test set, averaged.
    Evaluation mean;
    for (const auto& c : clients) {
        auto fn = [&](const Tensor& x) { return deployed_predict(spec, server, c, x); };
        const Evaluation e = evaluate(fn, data.global_test);
        mean.accuracy += e.accuracy / static_cast<double>(clients.size());
        mean.macro_f1 += e.macro_f1 / static_cast<double>(clients.size());
    }
    return mean;
}

void write_bytes(const fs::path& path, const Bytes& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

}  // namespace

RunSummary summarize(const ExperimentConfig& cfg, const FederatedData& data, const ExperimentResult& result) {
    RunSummary s;
    s.variant = cfg.variant;
    s.seed = cfg.spec.seed;
    const RoundReport& last = result.reports.back();
    for (const auto& c : last.clients) {
        s.mean_test_accuracy += c.test_accuracy / static_cast<double>(last.clients.size());
        s.mean_macro_f1 += c.macro_f1 / static_cast<double>(last.clients.size());
        s.client_test_accuracy.push_back(c.test_accuracy);
        s.final_discrimination_loss.push_back(c.discrimination_loss);
        s.final_discriminator_accuracy.push_back(c.discriminator_accuracy);
    }
    for (const auto& c : result.clients) s.final_fusion_weight.push_back(c.fusion_weight);
    s.pooled_accuracy = pooled_evaluation(cfg.spec, result.server, result.clients, data).accuracy;
    return s;
}

RunSummary run_single(ExperimentConfig cfg, bool write_files) {
    FederatedData data = prepare_data(cfg);
    ExperimentResult result;
    if (cfg.backend == Backend::Direct) {
        result = run_experiment(cfg.spec, data);
    } else {
        BackendRun run = cfg.backend == Backend::Loopback
                             ? run_loopback(cfg.spec, data)
                             : run_tcp_local(cfg.spec, data, cfg.host, Millis(cfg.timeout_ms));
        result.server = std::move(run.server);
        result.clients = std::move(run.clients);
        RoundReport initial;
        initial.round = 0;
        result.reports.push_back(std::move(initial));
        for (auto& r : run.reports) result.reports.push_back(std::move(r));
        // Only the final state is evaluated for networked backends.
        RoundReport& last = result.reports.back();
        evaluate_round(cfg.spec, result.server, result.clients, data, last);
        for (std::size_t k = 0; k < result.clients.size(); ++k) {
            last.clients[k].fusion_weight = result.clients[k].fusion_weight;
        }
    }
    RunSummary summary = summarize(cfg, data, result);
    if (!write_files) return summary;

    std::vector<MetricsRow> rows = metrics_rows(result.reports, cfg.spec.method);
    if (cfg.backend != Backend::Direct) {
        // Client-side losses and per-round accuracies never reach the server.
        const std::uint32_t final_round = result.reports.back().round;
        for (auto& r : rows) {
            r.classification_loss.reset();
            r.discriminator_accuracy.reset();
            r.fused_loss.reset();
            if (r.round != final_round) {
                r.fusion_weight.reset();
                r.train_accuracy.reset();
                r.test_accuracy.reset();
                r.macro_f1.reset();
            }
        }
    }
    const Evaluation pooled = pooled_evaluation(cfg.spec, result.server, result.clients, data);
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        if (it->client == "global") {
            it->pooled_accuracy = pooled.accuracy;
            it->pooled_macro_f1 = pooled.macro_f1;
            break;
        }
    }

    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir / "checkpoints");
    write_metrics_csv(rows, dir / "metrics.csv");
    const Encoder& features_encoder =
        cfg.spec.method == Method::LocalOnly ? result.clients.front().models.encoder : result.server.global_encoder;
    export_features_csv(features_encoder, data.global_test, dir / "features.csv");
    const std::uint32_t completed = result.server.round - 1;
    for (const auto& c : result.clients) {
        write_bytes(dir / "checkpoints" / ("client_" + std::to_string(c.client_id) + ".ckpt"),
                    checkpoint_save(client_checkpoint(c, completed)));
    }
    ByteWriter enc;
    enc.f64s(result.server.global_encoder.to_vector());
    write_bytes(dir / "global_encoder.bin", enc.take());

    json manifest;
    manifest["tool"] = "afedcl";
    manifest["version"] = kVersion;
    manifest["variant"] = cfg.variant;
    manifest["config"] = config_json(cfg);
    manifest["seeds"] = {{"experiment", cfg.spec.seed},
                         {"data", cfg.data.spec_seed_set ? cfg.data.spec.seed : derive_seed(cfg.spec.seed, 1)},
                         {"partition", derive_seed(cfg.spec.seed, 2)},
                         {"subsample", derive_seed(cfg.spec.seed, 3)},
                         {"models", derive_seed(cfg.spec.seed, 100)}};
    manifest["rounds_completed"] = completed;
    manifest["summary"] = {{"mean_test_accuracy", summary.mean_test_accuracy},
                           {"mean_macro_f1", summary.mean_macro_f1},
                           {"pooled_accuracy", summary.pooled_accuracy}};
    manifest["compiler"] = __VERSION__;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return summary;
}

std::vector<std::pair<std::string, AblationFlags>> ablation_variants() {
    AblationFlags full;
    AblationFlags no_dcc;
    no_dcc.enable_dcc = false;
    AblationFlags no_caa;
    no_caa.enable_caa = false;
    AblationFlags no_aff;
    no_aff.enable_aff = false;
    AblationFlags no_adv;
    no_adv.enable_encoder_adversarial_update = false;
    return {{"full", full}, {"no_dcc", no_dcc}, {"no_caa", no_caa}, {"no_aff", no_aff},
            {"no_encoder_adv", no_adv}};
}

const std::vector<double>& lambda_candidates() {
    static const std::vector<double> c{0.01, 0.1, 1.0};
    return c;
}

std::size_t max_workers() {
    const char* env = std::getenv("AFEDCL_MAX_WORKERS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    errno = 0;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (errno != 0 || *end != '\0' || v == 0) return 1;
    return v;
}

LinearFit regression_discloss_vs_fusion(const std::vector<MetricsRow>& final_rows) {
    std::vector<double> x;
    std::vector<double> y;
    for (const auto& r : final_rows) {
        if (r.client == "global" || !r.discrimination_loss || !r.fusion_weight) continue;
        x.push_back(*r.discrimination_loss);
        y.push_back(*r.fusion_weight);
    }
    return least_squares(x, y);
}

// ---- command line -------------------------------------------------------

namespace {

struct Job {
    ExperimentConfig cfg;
};

// Runs jobs with at most max_workers() in flight; results in job order.
std::vector<RunSummary> run_jobs(std::vector<Job> jobs) {
    std::vector<RunSummary> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard lock(mu);
                if (next >= jobs.size()) return;
                i = next++;
            }
            try {
                results[i] = run_single(jobs[i].cfg);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::min(max_workers(), jobs.size());
    if (n <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

// Expands cfg.seeds into seed_<s> subdirectories.
void add_seed_jobs(std::vector<Job>& jobs, const ExperimentConfig& cfg) {
    if (cfg.seeds.empty()) {
        jobs.push_back({cfg});
        return;
    }
    for (std::uint64_t s : cfg.seeds) {
        ExperimentConfig c = cfg;
        c.spec.seed = s;
        c.seeds.clear();
        c.output_dir = cfg.output_dir / ("seed_" + std::to_string(s));
        jobs.push_back({std::move(c)});
    }
}

void print_summary(const std::vector<RunSummary>& results) {
    std::printf("%-16s %8s %10s %10s %10s\n", "variant", "seed", "test_acc", "macro_f1", "pooled");
    for (const auto& r : results) {
        std::printf("%-16s %8llu %10.4f %10.4f %10.4f\n", r.variant.c_str(),
                    static_cast<unsigned long long>(r.seed), r.mean_test_accuracy, r.mean_macro_f1,
                    r.pooled_accuracy);
    }
}

double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Groups every metrics.csv below `root` by its variant directory (the parent,
// skipping a seed_* level) and reports medians of the final global row.
int report(const fs::path& root) {
    if (!fs::is_directory(root)) {
        std::fprintf(stderr, "error: %s is not a directory\n", root.string().c_str());
        return 1;
    }
    std::map<std::string, std::vector<MetricsRow>> finals;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        fs::path dir = f.parent_path();
        if (dir.filename().string().rfind("seed_", 0) == 0) dir = dir.parent_path();
        std::string name = fs::relative(dir, root).string();
        if (name.empty()) name = ".";
        const auto rows = read_metrics_csv(f);
        for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
            if (it->client == "global") {
                finals[name].push_back(*it);
                break;
            }
        }
    }
    if (finals.empty()) {
        std::fprintf(stderr, "error: no metrics.csv found under %s\n", root.string().c_str());
        return 1;
    }
    std::ofstream out(root / "summary.csv", std::ios::binary);
    out << "variant,runs,median_test_accuracy,median_macro_f1,median_pooled_accuracy\n";
    std::printf("%-24s %5s %10s %10s %10s\n", "variant", "runs", "test_acc", "macro_f1", "pooled");
    for (const auto& [name, rows] : finals) {
        std::vector<double> acc, f1, pooled;
        for (const auto& r : rows) {
            if (r.test_accuracy) acc.push_back(*r.test_accuracy);
            if (r.macro_f1) f1.push_back(*r.macro_f1);
            if (r.pooled_accuracy) pooled.push_back(*r.pooled_accuracy);
        }
        out << name << ',' << rows.size() << ',' << fmt_double(median(acc)) << ','
            << fmt_double(median(f1)) << ',' << fmt_double(median(pooled)) << '\n';
        std::printf("%-24s %5zu %10.4f %10.4f %10.4f\n", name.c_str(), rows.size(), median(acc),
                    median(f1), median(pooled));
    }
    return 0;
}

ExperimentConfig load_with_overrides(const std::string& path, const std::string& out_dir) {
    ExperimentConfig cfg = load_config(path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Adversarial personalized federated learning simulator", "afedcl"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    std::string config_path;
    std::string out_dir;
    std::string report_dir;
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
    std::size_t client_id = 0;

    auto* run = app.add_subcommand("run", "Run one experiment (one per seed if `seeds` is set)");
    run->add_option("config", config_path, "JSON config file")->required();
    run->add_option("-o,--output", out_dir, "Output directory (overrides the config)");

    auto* ablate = app.add_subcommand("ablate", "Run the full method and its four ablations");
    ablate->add_option("config", config_path, "JSON config file")->required();
    ablate->add_option("-o,--output", out_dir, "Output directory (overrides the config)");

    auto* sweep = app.add_subcommand("sweep-lambda", "Run the method for lambda in {0.01, 0.1, 1}");
    sweep->add_option("config", config_path, "JSON config file")->required();
    sweep->add_option("-o,--output", out_dir, "Output directory (overrides the config)");

    auto* rep = app.add_subcommand("report", "Summarize metrics.csv files below a directory");
    rep->add_option("dir", report_dir, "Results directory")->required();

    auto* serve = app.add_subcommand("serve", "Act as the server of a TCP federation");
    serve->add_option("config", config_path, "JSON config file")->required();
    serve->add_option("--port", port, "Listening port (default from config)");

    auto* client = app.add_subcommand("client", "Act as one client of a TCP federation");
    client->add_option("config", config_path, "JSON config file")->required();
    client->add_option("--id", client_id, "Client index")->required();
    client->add_option("--host", host, "Server host");
    client->add_option("--port", port, "Server port")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*rep) return report(report_dir);

        ExperimentConfig cfg = load_with_overrides(config_path, out_dir);
        if (*run) {
            std::vector<Job> jobs;
            add_seed_jobs(jobs, cfg);
            print_summary(run_jobs(std::move(jobs)));
            return 0;
        }
        if (*ablate) {
            std::vector<Job> jobs;
            const fs::path base = cfg.output_dir;
            for (const auto& [name, flags] : ablation_variants()) {
                ExperimentConfig c = cfg;
                c.spec.method = Method::AFedCL;
                c.spec.training.flags = flags;
                c.variant = name;
                c.output_dir = base / name;
                add_seed_jobs(jobs, c);
            }
            print_summary(run_jobs(std::move(jobs)));
            return 0;
        }
        if (*sweep) {
            std::vector<Job> jobs;
            const fs::path base = cfg.output_dir;
            for (double lam : lambda_candidates()) {
                ExperimentConfig c = cfg;
                c.spec.training.lambda = lam;
                char name[32];
                std::snprintf(name, sizeof name, "lambda_%g", lam);
                c.variant = name;
                c.output_dir = base / name;
                add_seed_jobs(jobs, c);
            }
            print_summary(run_jobs(std::move(jobs)));
            return 0;
        }
        if (*serve) {
            FederatedData data = prepare_data(cfg);
            ExperimentResult init = initialize_experiment(cfg.spec, data);
            TcpListener listener(cfg.host, port ? port : cfg.port);
            std::fprintf(stderr, "listening on %s:%u\n", cfg.host.c_str(), listener.port());
            const std::size_t param_count = shared_params(init.server).size();
            TcpServerChannel channel(listener, init.server.roster, param_count, Millis(cfg.timeout_ms));
            try {
                serve_rounds(init.server, channel, cfg.spec.rounds, cfg.spec.training);
            } catch (const std::exception& e) {
                channel.abort(e.what());
                throw;
            }
            fs::create_directories(cfg.output_dir);
            ByteWriter enc;
            enc.f64s(init.server.global_encoder.to_vector());
            write_bytes(cfg.output_dir / "global_encoder.bin", enc.take());
            return 0;
        }
        if (*client) {
            FederatedData data = prepare_data(cfg);
            ExperimentResult init = initialize_experiment(cfg.spec, data);
            if (client_id >= init.clients.size()) throw ConfigError("client id out of range");
            ClientState& me = init.clients[client_id];
            tcp_client_session(me, cfg.spec.method, cfg.spec.training, host, port, cfg.spec.rounds,
                               Millis(cfg.timeout_ms));
            fs::create_directories(cfg.output_dir / "checkpoints");
            write_bytes(cfg.output_dir / "checkpoints" / ("client_" + std::to_string(client_id) + ".ckpt"),
                        checkpoint_save(client_checkpoint(me, static_cast<std::uint32_t>(cfg.spec.rounds))));
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

}  // namespace afedcl
