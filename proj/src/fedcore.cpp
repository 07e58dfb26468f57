#include "afedcl/fedcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iostream>
#include <numeric>
#include <thread>

#include "afedcl/metrics.hpp"

namespace afedcl {

const char* to_string(Method m) {
    switch (m) {
        case Method::AFedCL: return "afedcl";
        case Method::FedAvg: return "fedavg";
        case Method::FedProx: return "fedprox";
        case Method::LocalOnly: return "local_only";
    }
    return "?";
}

Method parse_method(std::string_view name) {
    if (name == "afedcl") return Method::AFedCL;
    if (name == "fedavg") return Method::FedAvg;
    if (name == "fedprox") return Method::FedProx;
    if (name == "local_only" || name == "no_fl") return Method::LocalOnly;
    throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

void TrainingConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(mu >= 0.0)) throw std::invalid_argument("mu must be >= 0");
    if (dcc_epochs == 0 || aff_epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!std::isfinite(initial_fusion_weight)) throw std::invalid_argument("fusion weight must be finite");
}

ClientState make_client(std::size_t client_id, ModelSet models, Dataset train_set,
                        const TrainingConfig& cfg, std::uint64_t seed) {
    train_set.validate();
    ClientState c;
    c.client_id = client_id;
    c.encoder_opt = OptimizerState(cfg.optimizer, models.encoder.parameter_count());
    c.classifier_opt = OptimizerState(cfg.optimizer, models.classifier.parameter_count());
    c.discriminator_opt = OptimizerState(cfg.optimizer, models.discriminator.parameter_count());
    c.fusion_opt = OptimizerState(cfg.optimizer, 1);
    c.global_encoder = models.encoder;
    c.models = std::move(models);
    c.fusion_weight = cfg.initial_fusion_weight;
    c.train_set = std::move(train_set);
    c.batch_rng = Rng(seed);
    return c;
}

namespace {

std::vector<std::size_t> label_subset(const Dataset& d, std::span<const std::size_t> idx) {
    std::vector<std::size_t> y;
    y.reserve(idx.size());
    for (auto i : idx) y.push_back(d.labels[i]);
    return y;
}

/// Full batch when the client is small, else shuffled minibatches.
std::vector<std::vector<std::size_t>> make_batches(ClientState& client, const TrainingConfig& cfg) {
    const std::size_t n = client.train_set.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (n <= cfg.full_batch_threshold) return {order};
    client.batch_rng.shuffle(std::span(order));
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < n; at += cfg.batch_size) {
        const std::size_t end = std::min(n, at + cfg.batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

void step(OptimizerState& opt, Mlp& net, std::span<const double> grads) {
    ParamVector p = net.to_vector();
    apply_optimizer_step(opt, p, grads);
    net.assign(p);
}

std::vector<std::size_t> origin_labels(std::size_t batch) {
    std::vector<std::size_t> y(2 * batch, 1);
    std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(batch), 0);
    return y;
}

double row_accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
    const auto pred = argmax_rows(logits);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

Tensor fuse(double a, const Tensor& global_features, const Tensor& local_features) {
    Tensor f = local_features;
    const double b = 1.0 - a;
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = a * global_features[i] + b * local_features[i];
    return f;
}

void warn_fusion_range(ClientState& client) {
    if (client.fusion_range_warned) return;
    if (client.fusion_weight < -0.25 || client.fusion_weight > 1.25) {
        client.fusion_range_warned = true;
        std::clog << "warning: client " << client.client_id << " fusion weight "
                  << client.fusion_weight << " left [-0.25, 1.25]\n";
    }
}

}  // namespace

ClassificationGrads classification_loss(const Encoder& encoder, const Classifier& classifier,
                                        const Tensor& batch, std::span<const std::size_t> labels) {
    if (batch.rows() == 0) throw ShapeError("classification_loss: empty batch");
    MlpCache ec, cc;
    const Tensor f = encoder.forward(batch, &ec);
    const CrossEntropy ce = softmax_cross_entropy(classifier.forward(f, &cc), labels);
    MlpGrads cg = classifier.backward(cc, ce.grad_logits);
    MlpGrads eg = encoder.backward(ec, cg.input);
    return {ce.loss, std::move(eg.params), std::move(cg.params)};
}

DiscriminationGrads discrimination_loss(const Encoder& local, const Encoder& global,
                                        const Discriminator& discriminator, const Tensor& batch) {
    if (batch.rows() == 0) throw ShapeError("discrimination_loss: empty batch");
    const std::size_t n = batch.rows();
    MlpCache ec, dc;
    const Tensor fl = local.forward(batch, &ec);
    const Tensor fg = global.forward(batch);
    const auto y = origin_labels(n);
    const Tensor logits = discriminator.forward(vstack(fl, fg), &dc);
    const CrossEntropy ce = softmax_cross_entropy(logits, y);
    MlpGrads dg = discriminator.backward(dc, ce.grad_logits);
    Tensor upstream = Tensor::matrix(n, fl.cols());
    std::copy_n(dg.input.values().begin(), upstream.size(), upstream.values().begin());
    MlpGrads eg = local.backward(ec, upstream);
    return {ce.loss, row_accuracy(logits, y), std::move(dg.params), std::move(eg.params)};
}

FusionGrads fused_classification_loss(const Encoder& local, const Encoder& global,
                                      const Classifier& classifier, double fusion_weight,
                                      const Tensor& batch, std::span<const std::size_t> labels) {
    if (batch.rows() == 0) throw ShapeError("fused_classification_loss: empty batch");
    MlpCache ec, cc;
    const Tensor fl = local.forward(batch, &ec);
    const Tensor fg = global.forward(batch);
    const CrossEntropy ce =
        softmax_cross_entropy(classifier.forward(fuse(fusion_weight, fg, fl), &cc), labels);
    MlpGrads cg = classifier.backward(cc, ce.grad_logits);
    double d_fusion = 0.0;
    Tensor d_local = cg.input;
    for (std::size_t i = 0; i < d_local.size(); ++i) {
        d_fusion += cg.input[i] * (fg[i] - fl[i]);
        d_local[i] = (1.0 - fusion_weight) * cg.input[i];
    }
    MlpGrads eg = local.backward(ec, d_local);
    return {ce.loss, std::move(eg.params), std::move(cg.params), d_fusion};
}

StageStats dcc_local_update(ClientState& client, const Encoder& global_encoder,
                            std::size_t epochs, double lambda, const AblationFlags& flags,
                            const TrainingConfig& cfg) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    const Dataset& data = client.train_set;
    const Tensor global_features = global_encoder.forward(data.features);
    const bool adversarial = flags.enable_dcc && flags.enable_encoder_adversarial_update && lambda != 0.0;
    auto& m = client.models;
    StageStats stats;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const auto batches = make_batches(client, cfg);
        const bool last = epoch + 1 == epochs;
        double lc_sum = 0.0, ld_sum = 0.0, acc_sum = 0.0, ld_max = 0.0;
        for (const auto& idx : batches) {
            const Tensor x = data.features.gather_rows(idx);
            const auto y = label_subset(data, idx);
            const std::size_t n = idx.size();

            MlpCache ec, cc, dc;
            const Tensor fl = m.encoder.forward(x, &ec);
            const CrossEntropy ce = softmax_cross_entropy(m.classifier.forward(fl, &cc), y);
            MlpGrads cg = m.classifier.backward(cc, ce.grad_logits);

            const auto dy = origin_labels(n);
            const Tensor dlogits =
                m.discriminator.forward(vstack(fl, global_features.gather_rows(idx)), &dc);
            const CrossEntropy ced = softmax_cross_entropy(dlogits, dy);

            Tensor upstream = std::move(cg.input);
            ParamVector disc_grad;
            if (flags.enable_dcc) {
                MlpGrads dg = m.discriminator.backward(dc, ced.grad_logits);
                if (adversarial) {
                    for (std::size_t i = 0; i < upstream.size(); ++i) {
                        upstream[i] -= lambda * dg.input[i];
                    }
                }
                disc_grad = std::move(dg.params);
                for (double& g : disc_grad) g *= lambda;
            }
            MlpGrads eg = m.encoder.backward(ec, upstream);

            step(client.encoder_opt, m.encoder, eg.params);
            step(client.classifier_opt, m.classifier, cg.params);
            if (flags.enable_dcc) step(client.discriminator_opt, m.discriminator, disc_grad);

            if (last) {
                lc_sum += ce.loss;
                ld_sum += ced.loss;
                ld_max = std::max(ld_max, ced.loss);
                acc_sum += row_accuracy(dlogits, dy);
            }
        }
        if (last) {
            const double nb = static_cast<double>(batches.size());
            stats.classification_loss = lc_sum / nb;
            stats.discrimination_loss = ld_sum / nb;
            stats.discriminator_accuracy = acc_sum / nb;
            stats.max_batch_discrimination_loss = ld_max;
        }
    }
    client.last_discrimination_loss = stats.discrimination_loss;
    return stats;
}

double aff_local_update(ClientState& client, const Encoder& global_encoder, std::size_t epochs,
                        const TrainingConfig& cfg) {
    if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    const Dataset& data = client.train_set;
    const Tensor global_features = global_encoder.forward(data.features);
    auto& m = client.models;
    double final_loss = 0.0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const auto batches = make_batches(client, cfg);
        double loss_sum = 0.0;
        for (const auto& idx : batches) {
            const Tensor x = data.features.gather_rows(idx);
            const auto y = label_subset(data, idx);
            const Tensor fg = global_features.gather_rows(idx);
            const double a = client.fusion_weight;

            MlpCache ec, cc;
            const Tensor fl = m.encoder.forward(x, &ec);
            const CrossEntropy ce = softmax_cross_entropy(m.classifier.forward(fuse(a, fg, fl), &cc), y);
            MlpGrads cg = m.classifier.backward(cc, ce.grad_logits);
            double d_fusion = 0.0;
            Tensor d_local = cg.input;
            for (std::size_t i = 0; i < d_local.size(); ++i) {
                d_fusion += cg.input[i] * (fg[i] - fl[i]);
                d_local[i] = (1.0 - a) * cg.input[i];
            }
            MlpGrads eg = m.encoder.backward(ec, d_local);

            step(client.encoder_opt, m.encoder, eg.params);
            step(client.classifier_opt, m.classifier, cg.params);
            double fw[1] = {client.fusion_weight};
            const double fg_grad[1] = {d_fusion};
            apply_optimizer_step(client.fusion_opt, fw, fg_grad);
            client.fusion_weight = fw[0];
            loss_sum += ce.loss;
        }
        final_loss = loss_sum / static_cast<double>(batches.size());
    }
    warn_fusion_range(client);
    return final_loss;
}

namespace {

double supervised_local_update(ClientState& client, std::size_t epochs, const TrainingConfig& cfg,
                               const Encoder* anchor_encoder, const Classifier* anchor_classifier,
                               double mu) {
    if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
    const Dataset& data = client.train_set;
    auto& m = client.models;
    const bool prox = anchor_encoder != nullptr && mu != 0.0;
    ParamVector anchor_e, anchor_c;
    if (prox) {
        anchor_e = anchor_encoder->to_vector();
        anchor_c = anchor_classifier->to_vector();
    }
    double final_loss = 0.0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const auto batches = make_batches(client, cfg);
        double loss_sum = 0.0;
        for (const auto& idx : batches) {
            const Tensor x = data.features.gather_rows(idx);
            const auto y = label_subset(data, idx);
            MlpCache ec, cc;
            const Tensor fl = m.encoder.forward(x, &ec);
            const CrossEntropy ce = softmax_cross_entropy(m.classifier.forward(fl, &cc), y);
            MlpGrads cg = m.classifier.backward(cc, ce.grad_logits);
            MlpGrads eg = m.encoder.backward(ec, cg.input);
            if (prox) {
                const ParamVector we = m.encoder.to_vector();
                const ParamVector wc = m.classifier.to_vector();
                for (std::size_t i = 0; i < we.size(); ++i) eg.params[i] += mu * (we[i] - anchor_e[i]);
                for (std::size_t i = 0; i < wc.size(); ++i) cg.params[i] += mu * (wc[i] - anchor_c[i]);
            }
            step(client.encoder_opt, m.encoder, eg.params);
            step(client.classifier_opt, m.classifier, cg.params);
            loss_sum += ce.loss;
        }
        final_loss = loss_sum / static_cast<double>(batches.size());
    }
    return final_loss;
}

}  // namespace

double classification_local_update(ClientState& client, std::size_t epochs,
                                   const TrainingConfig& cfg) {
    return supervised_local_update(client, epochs, cfg, nullptr, nullptr, 0.0);
}

double fedprox_local_update(ClientState& client, const Encoder& global_encoder,
                            const Classifier& global_classifier, std::size_t epochs, double mu,
                            const TrainingConfig& cfg) {
    if (!(mu >= 0.0)) throw std::invalid_argument("mu must be >= 0");
    return supervised_local_update(client, epochs, cfg, &global_encoder, &global_classifier, mu);
}

std::vector<double> consensus_weights(std::span<const double> losses) {
    if (losses.empty()) throw std::invalid_argument("no losses to aggregate");
    double total = 0.0;
    for (double l : losses) {
        if (!(l >= 0.0) || !std::isfinite(l)) {
            throw std::invalid_argument("discrimination loss must be finite and >= 0");
        }
        total += l;
    }
    std::vector<double> w(losses.size());
    if (total < 1e-12) {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(losses.size()));
    } else {
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = losses[k] / total;
    }
    return w;
}

std::vector<double> sample_weights(std::span<const std::size_t> counts) {
    if (counts.empty()) throw std::invalid_argument("no sample counts");
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) throw std::invalid_argument("zero total sample count");
    std::vector<double> w(counts.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
        w[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
    }
    return w;
}

ParamVector weighted_sum(std::span<const ParamVector> vectors, std::span<const double> weights) {
    if (vectors.empty() || vectors.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: " + std::to_string(vectors.size()) +
                                    " vectors, " + std::to_string(weights.size()) + " weights");
    }
    ParamVector out(vectors.front().size(), 0.0);
    for (std::size_t k = 0; k < vectors.size(); ++k) {
        if (vectors[k].size() != out.size()) throw ShapeError("weighted_sum: vector length mismatch");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * vectors[k][i];
    }
    return out;
}

ParamVector consensus_aggregate(std::span<const ParamVector> encoders,
                                std::span<const double> losses) {
    if (encoders.size() != losses.size()) throw std::invalid_argument("length mismatch");
    return weighted_sum(encoders, consensus_weights(losses));
}

ParamVector fedavg_aggregate(std::span<const ParamVector> encoders,
                             std::span<const std::size_t> sample_counts) {
    if (encoders.size() != sample_counts.size()) throw std::invalid_argument("length mismatch");
    return weighted_sum(encoders, sample_weights(sample_counts));
}

ParamVector shared_params(const ServerState& server) {
    switch (server.method) {
        case Method::AFedCL: return server.global_encoder.to_vector();
        case Method::FedAvg:
        case Method::FedProx: {
            ParamVector p = server.global_encoder.to_vector();
            const ParamVector c = server.global_classifier.to_vector();
            p.insert(p.end(), c.begin(), c.end());
            return p;
        }
        case Method::LocalOnly: return {};
    }
    return {};
}

namespace {

void split_full_model(std::span<const double> params, Encoder& enc, Classifier& cls) {
    const std::size_t ne = enc.parameter_count();
    if (params.size() != ne + cls.parameter_count()) {
        throw ShapeError("global model has " + std::to_string(params.size()) + " parameters, expected " +
                         std::to_string(ne + cls.parameter_count()));
    }
    enc.assign(params.first(ne));
    cls.assign(params.subspan(ne));
}

}  // namespace

ClientUpload client_local_round(ClientState& client, Method method,
                                std::span<const double> global_params, std::uint32_t round,
                                const TrainingConfig& cfg, ClientRoundStats* stats) {
    ClientUpload up;
    up.client_id = client.client_id;
    up.round = round;
    ClientRoundStats local;
    ClientRoundStats& s = stats ? *stats : local;
    s.client_id = client.client_id;
    auto& m = client.models;
    switch (method) {
        case Method::AFedCL: {
            client.global_encoder.assign(global_params);
            const StageStats st = dcc_local_update(client, client.global_encoder, cfg.dcc_epochs,
                                                   cfg.lambda, cfg.flags, cfg);
            s.classification_loss = st.classification_loss;
            s.discrimination_loss = st.discrimination_loss;
            s.discriminator_accuracy = st.discriminator_accuracy;
            up.discrimination_loss = st.discrimination_loss;
            up.params = m.encoder.to_vector();
            break;
        }
        case Method::FedAvg:
        case Method::FedProx: {
            split_full_model(global_params, m.encoder, m.classifier);
            client.global_encoder = m.encoder;
            if (method == Method::FedAvg) {
                s.classification_loss = classification_local_update(client, cfg.baseline_epochs(), cfg);
            } else {
                const Encoder ge = m.encoder;
                const Classifier gc = m.classifier;
                s.classification_loss =
                    fedprox_local_update(client, ge, gc, cfg.baseline_epochs(), cfg.mu, cfg);
            }
            up.params = m.encoder.to_vector();
            const ParamVector c = m.classifier.to_vector();
            up.params.insert(up.params.end(), c.begin(), c.end());
            break;
        }
        case Method::LocalOnly:
            s.classification_loss = classification_local_update(client, cfg.baseline_epochs(), cfg);
            break;
    }
    s.fusion_weight = client.fusion_weight;
    return up;
}

void client_finish_round(ClientState& client, Method method, const TrainingConfig& cfg,
                         ClientRoundStats* stats) {
    if (method != Method::AFedCL) return;
    double loss = 0.0;
    if (cfg.flags.enable_aff) {
        loss = aff_local_update(client, client.global_encoder, cfg.aff_epochs, cfg);
    } else {
        loss = classification_local_update(client, cfg.aff_epochs, cfg);
    }
    if (stats) {
        stats->fused_loss = loss;
        stats->fusion_weight = client.fusion_weight;
    }
}

std::vector<double> server_aggregate(ServerState& server, std::span<const ClientUpload> uploads,
                                     const TrainingConfig& cfg) {
    (void)cfg;
    if (uploads.size() != server.roster.size()) {
        throw std::runtime_error("round " + std::to_string(server.round) + ": " +
                                 std::to_string(uploads.size()) + " uploads for " +
                                 std::to_string(server.roster.size()) + " clients");
    }
    std::vector<const ClientUpload*> ordered(server.roster.size(), nullptr);
    for (const auto& u : uploads) {
        auto it = std::find(server.roster.begin(), server.roster.end(), u.client_id);
        if (it == server.roster.end()) throw RoundError(u.client_id, "not in roster");
        auto& slot = ordered[static_cast<std::size_t>(it - server.roster.begin())];
        if (slot) throw RoundError(u.client_id, "duplicate upload");
        if (u.round != server.round) {
            throw RoundError(u.client_id, "upload for round " + std::to_string(u.round) +
                                              " during round " + std::to_string(server.round));
        }
        slot = &u;
    }
    std::vector<double> weights;
    if (server.method != Method::LocalOnly) {
        std::vector<ParamVector> params;
        std::vector<double> losses;
        params.reserve(ordered.size());
        for (const auto* u : ordered) {
            params.push_back(u->params);
            losses.push_back(u->discrimination_loss);
        }
        switch (server.aggregation) {
            case AggregationMode::ConsensusAware: weights = consensus_weights(losses); break;
            case AggregationMode::SampleWeighted: weights = sample_weights(server.sample_counts); break;
            case AggregationMode::Uniform:
                weights.assign(params.size(), 1.0 / static_cast<double>(params.size()));
                break;
        }
        const ParamVector agg = weighted_sum(params, weights);
        if (server.method == Method::AFedCL) {
            server.global_encoder.assign(agg);
        } else {
            split_full_model(agg, server.global_encoder, server.global_classifier);
        }
    }
    ++server.round;
    return weights;
}

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const TrainingConfig& cfg, const RoundOptions& opts) {
    if (clients.empty()) throw std::invalid_argument("run_round needs at least one client");
    RoundReport report;
    report.round = server.round;
    report.clients.resize(clients.size());
    std::vector<ClientUpload> uploads(clients.size());
    std::vector<std::exception_ptr> errors(clients.size());
    const ParamVector global = shared_params(server);

    auto work = [&](std::size_t k) {
        try {
            uploads[k] = client_local_round(clients[k], server.method, global, server.round, cfg,
                                            &report.clients[k]);
            client_finish_round(clients[k], server.method, cfg, &report.clients[k]);
        } catch (...) {
            errors[k] = std::current_exception();
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(opts.threads, 1), clients.size());
    if (threads == 1) {
        for (std::size_t k = 0; k < clients.size(); ++k) work(k);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t k = next++; k < clients.size(); k = next++) work(k);
            });
        }
    }
    for (std::size_t k = 0; k < clients.size(); ++k) {
        if (!errors[k]) continue;
        try {
            std::rethrow_exception(errors[k]);
        } catch (const std::exception& e) {
            throw RoundError(clients[k].client_id, e.what());
        }
    }
    report.aggregation_weights = server_aggregate(server, uploads, cfg);
    for (std::size_t k = 0; k < report.aggregation_weights.size() && k < clients.size(); ++k) {
        report.clients[k].aggregation_weight = report.aggregation_weights[k];
    }
    return report;
}

std::vector<std::size_t> predict(const ClientState& client, const Encoder& global_encoder,
                                 const Tensor& batch, const AblationFlags& flags) {
    const auto& m = client.models;
    const Tensor fl = m.encoder.forward(batch);
    if (!flags.enable_aff) return argmax_rows(m.classifier.forward(fl));
    const Tensor fg = global_encoder.forward(batch);
    return argmax_rows(m.classifier.forward(fuse(client.fusion_weight, fg, fl)));
}

std::vector<std::size_t> deployed_predict(const ExperimentSpec& spec, const ServerState& server,
                                          const ClientState& client, const Tensor& batch) {
    switch (spec.method) {
        case Method::AFedCL: return predict(client, client.global_encoder, batch, spec.training.flags);
        case Method::FedAvg:
        case Method::FedProx:
            return argmax_rows(server.global_classifier.forward(server.global_encoder.forward(batch)));
        case Method::LocalOnly: {
            AblationFlags local_only;
            local_only.enable_aff = false;
            return predict(client, client.global_encoder, batch, local_only);
        }
    }
    return {};
}

ExperimentResult initialize_experiment(const ExperimentSpec& spec, const FederatedData& data) {
    spec.network.validate();
    spec.training.validate();
    if (data.clients.empty()) throw std::invalid_argument("no clients in federated data");
    const std::size_t input_dim = data.clients.front().train.input_dim();
    const std::size_t classes = data.clients.front().train.num_classes;
    if (input_dim != spec.network.input_dim || classes != spec.network.num_classes) {
        throw std::invalid_argument("network config (" + std::to_string(spec.network.input_dim) + " in, " +
                                    std::to_string(spec.network.num_classes) + " classes) does not match data (" +
                                    std::to_string(input_dim) + " in, " + std::to_string(classes) +
                                    " classes)");
    }
    const ModelSet base = build_models(spec.network, derive_seed(spec.seed, 100));
    ExperimentResult r;
    r.server.method = spec.method;
    r.server.global_encoder = base.encoder;
    r.server.global_classifier = base.classifier;
    r.server.round = 1;
    r.server.aggregation = (spec.method == Method::AFedCL && spec.training.flags.enable_caa)
                               ? AggregationMode::ConsensusAware
                               : AggregationMode::SampleWeighted;
    TrainingConfig cfg = spec.training;
    if (spec.method != Method::AFedCL || !cfg.flags.enable_aff) cfg.initial_fusion_weight = 0.0;
    for (std::size_t k = 0; k < data.clients.size(); ++k) {
        ModelSet m = base;
        glorot_init(m.discriminator, derive_seed(spec.seed, 200 + k));
        r.clients.push_back(
            make_client(k, std::move(m), data.clients[k].train, cfg, derive_seed(spec.seed, 300 + k)));
        r.server.roster.push_back(k);
        r.server.sample_counts.push_back(data.clients[k].train.size());
    }
    return r;
}

void evaluate_round(const ExperimentSpec& spec, const ServerState& server,
                    const std::vector<ClientState>& clients, const FederatedData& data,
                    RoundReport& report) {
    if (report.clients.size() != clients.size()) {
        report.clients.resize(clients.size());
        for (std::size_t k = 0; k < clients.size(); ++k) {
            report.clients[k].client_id = clients[k].client_id;
            report.clients[k].fusion_weight = clients[k].fusion_weight;
        }
    }
    for (std::size_t k = 0; k < clients.size(); ++k) {
        auto fn = [&](const Tensor& x) { return deployed_predict(spec, server, clients[k], x); };
        const Evaluation test = evaluate(fn, data.clients[k].test);
        const Evaluation train = evaluate(fn, clients[k].train_set);
        report.clients[k].test_accuracy = test.accuracy;
        report.clients[k].macro_f1 = test.macro_f1;
        report.clients[k].train_accuracy = train.accuracy;
    }
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const FederatedData& data) {
    ExperimentResult r = initialize_experiment(spec, data);
    RoundReport initial;
    initial.round = 0;
    evaluate_round(spec, r.server, r.clients, data, initial);
    r.reports.push_back(std::move(initial));
    const RoundOptions opts{spec.threads};
    for (std::size_t t = 0; t < spec.rounds; ++t) {
        RoundReport rep = run_round(r.server, r.clients, spec.training, opts);
        evaluate_round(spec, r.server, r.clients, data, rep);
        r.reports.push_back(std::move(rep));
    }
    return r;
}

Checkpoint client_checkpoint(const ClientState& client, std::uint32_t round) {
    return Checkpoint{client.models, client.fusion_weight, round};
}

}  // namespace afedcl
