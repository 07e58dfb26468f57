// Experiment configuration, metrics files and the command-line driver.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "afedcl/data.hpp"
#include "afedcl/fedcore.hpp"
#include "afedcl/metrics.hpp"

namespace afedcl {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Backend : std::uint8_t { Direct, Loopback, Tcp };

struct DataConfig {
    bool synthetic = true;
    SyntheticSpec spec{};  // seed is derived from the experiment seed unless set
    bool spec_seed_set = false;
    std::filesystem::path folder;
    std::size_t side = 16;
};

struct PartitionConfig {
    PartitionScheme scheme = PartitionScheme::Disjoint;
    std::size_t classes_per_client = 2;
    double alpha = 0.1;
};

struct ExperimentConfig {
    ExperimentSpec spec{};  // network dims of 0 are filled from the data
    std::size_t clients = 5;
    PartitionConfig partition{};
    std::size_t per_client_train = 20;
    DataConfig data{};
    std::vector<std::uint64_t> seeds;  // optional; run one experiment per seed
    std::filesystem::path output_dir = "out";
    Backend backend = Backend::Direct;
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
    std::uint32_t timeout_ms = 60000;
    std::string variant = "run";
};

/// Parses the JSON document described by configs/config.schema.json. Unknown
/// keys are rejected so typos do not silently fall back to defaults.
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Resolved configuration as JSON text (pretty-printed).
std::string config_to_json_text(const ExperimentConfig& cfg);

/// Generates or loads the dataset, partitions it and splits train/test.
/// Fills zero network dimensions from the data.
FederatedData prepare_data(ExperimentConfig& cfg);

struct MetricsRow {
    std::uint32_t round = 0;
    std::string client;  // client id, or "global"
    std::optional<double> classification_loss;
    std::optional<double> discrimination_loss;
    std::optional<double> discriminator_accuracy;
    std::optional<double> fused_loss;
    std::optional<double> fusion_weight;
    std::optional<double> train_accuracy;
    std::optional<double> test_accuracy;
    std::optional<double> macro_f1;
    std::optional<double> aggregation_weight;
    std::optional<double> pooled_accuracy;
    std::optional<double> pooled_macro_f1;

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

/// Column order of metrics.csv.
const std::vector<std::string>& metrics_columns();

/// One row per (round, client) plus a "global" row per round holding client
/// means (and the summed aggregation weight).
std::vector<MetricsRow> metrics_rows(const std::vector<RoundReport>& reports, Method method);

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// Header f0..f{d-1},label then one row per sample of encoder features.
void export_features_csv(const Encoder& encoder, const Dataset& dataset,
                         const std::filesystem::path& path);

struct RunSummary {
    std::string variant;
    std::uint64_t seed = 0;
    double mean_test_accuracy = 0.0;
    double mean_macro_f1 = 0.0;
    double pooled_accuracy = 0.0;
    std::vector<double> final_discrimination_loss;   // per client
    std::vector<double> final_fusion_weight;         // per client
    std::vector<double> final_discriminator_accuracy;
    std::vector<double> client_test_accuracy;
};

/// Runs one experiment (single seed) and writes metrics.csv, manifest.json,
/// features.csv, global_encoder.bin and checkpoints/ under cfg.output_dir.
/// With write_files = false nothing touches the disk.
RunSummary run_single(ExperimentConfig cfg, bool write_files = true);

/// Summary of an in-memory experiment result.
RunSummary summarize(const ExperimentConfig& cfg, const FederatedData& data,
                     const ExperimentResult& result);

/// Flag sets of the ablation study, in output order: full, no_dcc, no_caa,
/// no_aff, no_encoder_adv.
std::vector<std::pair<std::string, AblationFlags>> ablation_variants();

/// lambda candidates swept by `sweep-lambda`.
const std::vector<double>& lambda_candidates();

/// Worker cap from AFEDCL_MAX_WORKERS (default 1).
std::size_t max_workers();

/// OLS of final fusion weight on final discrimination loss.
LinearFit regression_discloss_vs_fusion(const std::vector<MetricsRow>& final_rows);

/// Command-line entry point; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace afedcl
