// Federated training: adversarial consensus construction, consensus-aware
// aggregation, adaptive feature fusion, and the FedAvg / FedProx / local-only
// baselines.
//
// A round of the adversarial method runs in this order:
//   1. the server broadcasts the global encoder E_G^t;
//   2. each client trains encoder, classifier and discriminator jointly
//      (stage one) and uploads its encoder with its discrimination loss;
//   3. each client tunes encoder, classifier and the fusion weight A_k on
//      fused features built with the same E_G^t (stage two);
//   4. the server aggregates the uploads into E_G^{t+1}.
// Stage two does not influence the upload, so (3) and (4) commute.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "afedcl/data.hpp"
#include "afedcl/model.hpp"
#include "afedcl/numerics.hpp"
#include "afedcl/random.hpp"

namespace afedcl {

enum class Method : std::uint8_t { AFedCL, FedAvg, FedProx, LocalOnly };

const char* to_string(Method m);
/// Parses "afedcl", "fedavg", "fedprox" or "local_only".
Method parse_method(std::string_view name);

enum class AggregationMode : std::uint8_t { ConsensusAware, SampleWeighted, Uniform };

struct AblationFlags {
    bool enable_dcc = true;   // adversarial stage one (discriminator + encoder term)
    bool enable_caa = true;   // weight uploads by discrimination loss
    bool enable_aff = true;   // fused features in stage two and at inference
    bool enable_encoder_adversarial_update = true;  // the -lambda dL_D/dE term only

    friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct TrainingConfig {
    OptimizerSettings optimizer{};
    double lambda = 0.1;
    double mu = 0.01;  // FedProx proximal weight
    std::size_t dcc_epochs = 3;
    std::size_t aff_epochs = 1;
    std::size_t full_batch_threshold = 64;  // full-batch when n <= this
    std::size_t batch_size = 32;
    double initial_fusion_weight = 0.5;
    AblationFlags flags{};

    /// Epochs of plain local training per round for the baselines.
    std::size_t baseline_epochs() const { return dcc_epochs + aff_epochs; }
    void validate() const;
};

struct ClientState {
    std::size_t client_id = 0;
    ModelSet models;
    double fusion_weight = 0.5;
    OptimizerState encoder_opt;
    OptimizerState classifier_opt;
    OptimizerState discriminator_opt;
    OptimizerState fusion_opt;
    Dataset train_set;
    double last_discrimination_loss = 0.0;
    /// The global encoder most recently received; stage two and prediction fuse with it.
    Encoder global_encoder;
    Rng batch_rng{0};
    bool fusion_range_warned = false;
};

/// Fresh client with per-network optimizer states sized for `models`.
ClientState make_client(std::size_t client_id, ModelSet models, Dataset train_set,
                        const TrainingConfig& cfg, std::uint64_t seed);

struct ServerState {
    Method method = Method::AFedCL;
    Encoder global_encoder;
    Classifier global_classifier;  // used by FedAvg / FedProx only
    std::uint32_t round = 1;
    std::vector<std::size_t> roster;         // client ids, aggregation order
    std::vector<std::size_t> sample_counts;  // parallel to roster
    AggregationMode aggregation = AggregationMode::ConsensusAware;
};

// ---- losses and gradients ----------------------------------------------

struct ClassificationGrads {
    double loss = 0.0;
    ParamVector encoder;
    ParamVector classifier;
};

/// Mean cross-entropy of C(E(x)) and its gradients.
ClassificationGrads classification_loss(const Encoder& encoder, const Classifier& classifier,
                                        const Tensor& batch, std::span<const std::size_t> labels);

struct DiscriminationGrads {
    double loss = 0.0;
    double accuracy = 0.0;
    ParamVector discriminator;  // dL_D/dD with features held constant
    ParamVector encoder;        // dL_D/dE_local through the local rows only
};

/// Cross-entropy of D over {(E_local(x), 0)} u {(E_global(x), 1)}, normalized
/// by 2|batch|. No gradient flows into the global encoder.
DiscriminationGrads discrimination_loss(const Encoder& local, const Encoder& global,
                                        const Discriminator& discriminator, const Tensor& batch);

struct FusionGrads {
    double loss = 0.0;
    ParamVector encoder;
    ParamVector classifier;
    double fusion_weight = 0.0;
};

/// Cross-entropy of C(A*E_G(x) + (1-A)*E_local(x)) and its gradients with
/// respect to the local encoder, the classifier and A.
FusionGrads fused_classification_loss(const Encoder& local, const Encoder& global,
                                      const Classifier& classifier, double fusion_weight,
                                      const Tensor& batch, std::span<const std::size_t> labels);

// ---- local updates -----------------------------------------------------

struct StageStats {
    double classification_loss = 0.0;     // mean over the final epoch's batches
    double discrimination_loss = 0.0;     // mean over the final epoch's batches
    double discriminator_accuracy = 0.0;  // mean over the final epoch's batches
    double max_batch_discrimination_loss = 0.0;
};

/// Stage one. Per batch, from one forward pass:
///   encoder       <- dL_C/dE - lambda * dL_D/dE   (adversarial term optional)
///   classifier    <- dL_C/dC
///   discriminator <- lambda * dL_D/dD
/// Stores the final-epoch mean L_D in the client.
StageStats dcc_local_update(ClientState& client, const Encoder& global_encoder,
                            std::size_t epochs, double lambda, const AblationFlags& flags,
                            const TrainingConfig& cfg);

/// Stage two: minimizes the fused loss over encoder, classifier and A_k.
/// Returns the mean final-epoch fused loss.
double aff_local_update(ClientState& client, const Encoder& global_encoder, std::size_t epochs,
                        const TrainingConfig& cfg);

/// Plain classification training of encoder and classifier (FedAvg local step
/// and local-only training). Returns the mean final-epoch loss.
double classification_local_update(ClientState& client, std::size_t epochs,
                                   const TrainingConfig& cfg);

/// Classification training with an added mu * (w - w_global) on every
/// encoder and classifier parameter.
double fedprox_local_update(ClientState& client, const Encoder& global_encoder,
                            const Classifier& global_classifier, std::size_t epochs, double mu,
                            const TrainingConfig& cfg);

// ---- aggregation -------------------------------------------------------

/// L_D^k / sum L_D, or uniform when the sum is below 1e-12.
std::vector<double> consensus_weights(std::span<const double> losses);
std::vector<double> sample_weights(std::span<const std::size_t> counts);

/// sum_k w_k * v_k, accumulated in list order.
ParamVector weighted_sum(std::span<const ParamVector> vectors, std::span<const double> weights);

ParamVector consensus_aggregate(std::span<const ParamVector> encoders,
                                std::span<const double> losses);
ParamVector fedavg_aggregate(std::span<const ParamVector> encoders,
                             std::span<const std::size_t> sample_counts);

// ---- rounds ------------------------------------------------------------

struct RoundError : std::runtime_error {
    RoundError(std::size_t client, const std::string& what)
        : std::runtime_error("client " + std::to_string(client) + ": " + what), client_id(client) {}
    std::size_t client_id;
};

/// What a client returns to the server after stage one.
struct ClientUpload {
    std::size_t client_id = 0;
    std::uint32_t round = 0;
    double discrimination_loss = 0.0;
    ParamVector params;
};

/// Per-client quantities for one round.
struct ClientRoundStats {
    std::size_t client_id = 0;
    double classification_loss = 0.0;
    double discrimination_loss = 0.0;
    double discriminator_accuracy = 0.0;
    double fused_loss = 0.0;
    double fusion_weight = 0.0;
    double aggregation_weight = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double macro_f1 = 0.0;
};

struct RoundReport {
    std::uint32_t round = 0;
    std::vector<ClientRoundStats> clients;
    std::vector<double> aggregation_weights;  // roster order; empty for local-only
};

/// Parameters the server broadcasts: the encoder for the adversarial method,
/// encoder followed by classifier for FedAvg / FedProx, nothing for local-only.
ParamVector shared_params(const ServerState& server);

/// Client side of a round up to the upload (stage one, or baseline training).
ClientUpload client_local_round(ClientState& client, Method method,
                                std::span<const double> global_params, std::uint32_t round,
                                const TrainingConfig& cfg, ClientRoundStats* stats = nullptr);

/// Client side after the upload (stage two for the adversarial method).
void client_finish_round(ClientState& client, Method method, const TrainingConfig& cfg,
                         ClientRoundStats* stats = nullptr);

/// Aggregates uploads (must cover the roster exactly) into the server state
/// and advances the round. Returns the aggregation weights in roster order.
std::vector<double> server_aggregate(ServerState& server, std::span<const ClientUpload> uploads,
                                     const TrainingConfig& cfg);

struct RoundOptions {
    std::size_t threads = 1;  // 1 is the bit-exact reference
};

/// One full round by direct calls.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const TrainingConfig& cfg, const RoundOptions& opts = {});

/// Class predictions of the client's personalized model: argmax of C_k over
/// A_k*E_G(x) + (1-A_k)*E_k(x), or over E_k(x) alone when fusion is disabled
/// (and for every non-adversarial method).
std::vector<std::size_t> predict(const ClientState& client, const Encoder& global_encoder,
                                 const Tensor& batch, const AblationFlags& flags = {});

// ---- experiments -------------------------------------------------------

struct ExperimentSpec {
    Method method = Method::AFedCL;
    std::size_t rounds = 200;
    TrainingConfig training{};
    NetworkConfig network{};
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct ExperimentResult {
    ServerState server;
    std::vector<ClientState> clients;
    std::vector<RoundReport> reports;  // reports[0] describes the initial state
};

/// Server and clients at round 1, before any training. Every client starts
/// from the same encoder and classifier as the server; discriminators and
/// batch order are seeded per client.
ExperimentResult initialize_experiment(const ExperimentSpec& spec, const FederatedData& data);

/// Per-client personalized accuracy / macro-F1 on each client's test set.
void evaluate_round(const ExperimentSpec& spec, const ServerState& server,
                    const std::vector<ClientState>& clients, const FederatedData& data,
                    RoundReport& report);

/// Model each client would deploy: personalized for the adversarial method
/// and local-only, the server's global model for FedAvg / FedProx.
std::vector<std::size_t> deployed_predict(const ExperimentSpec& spec, const ServerState& server,
                                          const ClientState& client, const Tensor& batch);

/// Runs `spec.rounds` rounds; reports are evaluated after every round.
ExperimentResult run_experiment(const ExperimentSpec& spec, const FederatedData& data);

/// Checkpoint of a client's personalized state at the given round.
Checkpoint client_checkpoint(const ClientState& client, std::uint32_t round);

}  // namespace afedcl
