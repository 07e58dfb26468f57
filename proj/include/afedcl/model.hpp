// Encoder, classifier and discriminator networks, parameter vectorization and
// the binary checkpoint format.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "afedcl/bytes.hpp"
#include "afedcl/numerics.hpp"

namespace afedcl {

/// Flat parameters of one network. Layer order is input to output; within a
/// layer the row-major [in x out] weights come first, then the bias.
using ParamVector = std::vector<double>;

struct NetworkConfig {
    std::size_t input_dim = 64;
    std::size_t feature_dim = 32;
    std::size_t num_classes = 6;
    std::vector<std::size_t> encoder_hidden{128, 64};
    std::vector<std::size_t> classifier_hidden{};
    std::size_t discriminator_hidden = 32;

    /// Throws std::invalid_argument on zero widths or num_classes < 2.
    void validate() const;

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Activations retained by a forward pass for the matching backward pass.
struct MlpCache {
    std::vector<Tensor> layer_inputs;
    std::vector<Tensor> pre_activations;
};

struct MlpGrads {
    ParamVector params;
    Tensor input;
};

/// Stack of affine layers with ReLU between consecutive layers and a linear
/// output.
class Mlp {
public:
    Mlp() = default;
    explicit Mlp(std::vector<AffineLayer> layers);
    /// Zero-initialized stack with the given widths (widths.size() >= 2).
    static Mlp zeros(std::span<const std::size_t> widths);

    const std::vector<AffineLayer>& layers() const noexcept { return layers_; }
    std::vector<AffineLayer>& layers() noexcept { return layers_; }
    std::size_t in_dim() const;
    std::size_t out_dim() const;
    std::size_t parameter_count() const;

    Tensor forward(const Tensor& input, MlpCache* cache = nullptr) const;
    MlpGrads backward(const MlpCache& cache, const Tensor& upstream) const;

    ParamVector to_vector() const;
    /// Overwrites parameters from `params` (length must equal parameter_count()).
    void assign(std::span<const double> params);

    friend bool operator==(const Mlp&, const Mlp&) = default;

private:
    void check_chain() const;

    std::vector<AffineLayer> layers_;
};

class Encoder : public Mlp {
public:
    Encoder() = default;
    explicit Encoder(Mlp m) : Mlp(std::move(m)) {}
};

class Classifier : public Mlp {
public:
    Classifier() = default;
    explicit Classifier(Mlp m) : Mlp(std::move(m)) {}
};

class Discriminator : public Mlp {
public:
    Discriminator() = default;
    explicit Discriminator(Mlp m);
};

struct ModelSet {
    Encoder encoder;
    Classifier classifier;
    Discriminator discriminator;

    friend bool operator==(const ModelSet&, const ModelSet&) = default;
};

/// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
/// Same (config, seed) gives bit-identical models.
ModelSet build_models(const NetworkConfig& config, std::uint64_t seed);

/// Fills every layer of `net` with Glorot-uniform weights and zero biases.
void glorot_init(Mlp& net, std::uint64_t seed);

Tensor encode(const Encoder& e, const Tensor& batch);
Tensor classify(const Classifier& c, const Tensor& features);
Tensor discriminate(const Discriminator& d, const Tensor& features);

inline ParamVector params_to_vector(const Mlp& net) { return net.to_vector(); }
inline void vector_to_params(Mlp& net, std::span<const double> params) { net.assign(params); }

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;
/// Fixed prefix: magic(4) + version u16 + round u32 + fusion weight f64.
inline constexpr std::size_t kCheckpointPrefixBytes = 4 + 2 + 4 + 8;

struct Checkpoint {
    ModelSet models;
    double fusion_weight = 0.5;
    std::uint32_t round = 0;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Layout (all little-endian): "AFCL", version u16, round u32, fusion f64,
/// then for encoder, classifier, discriminator: layer count u16 and per layer
/// in_dim u32, out_dim u32, weights f64[in*out] row-major, bias f64[out].
Bytes checkpoint_save(const Checkpoint& ckpt);
/// Rejects bad magic, version mismatch, truncation, trailing bytes and layer
/// shapes that do not chain (or do not match `expected` when given).
Checkpoint checkpoint_load(std::span<const std::uint8_t> bytes,
                           const std::optional<NetworkConfig>& expected = std::nullopt);

/// Exact serialized size: prefix + 2 bytes per network + 8 per layer + 8 per parameter.
std::size_t checkpoint_size(const ModelSet& models);

}  // namespace afedcl
