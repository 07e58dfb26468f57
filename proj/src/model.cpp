#include "afedcl/model.hpp"

#include <cmath>
#include <string>

#include "afedcl/random.hpp"

namespace afedcl {

void NetworkConfig::validate() const {
    auto positive = [](std::size_t v, const char* what) {
        if (v == 0) throw std::invalid_argument(std::string(what) + " must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(feature_dim, "feature_dim");
    positive(discriminator_hidden, "discriminator_hidden");
    for (auto w : encoder_hidden) positive(w, "encoder hidden width");
    for (auto w : classifier_hidden) positive(w, "classifier hidden width");
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
}

Mlp::Mlp(std::vector<AffineLayer> layers) : layers_(std::move(layers)) { check_chain(); }

Mlp Mlp::zeros(std::span<const std::size_t> widths) {
    if (widths.size() < 2) throw std::invalid_argument("an MLP needs at least two widths");
    std::vector<AffineLayer> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        if (widths[i] == 0 || widths[i + 1] == 0) throw std::invalid_argument("zero layer width");
        layers.emplace_back(widths[i], widths[i + 1]);
    }
    return Mlp(std::move(layers));
}

void Mlp::check_chain() const {
    if (layers_.empty()) throw ShapeError("network has no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.weights.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.out_dim()) {
            throw ShapeError("layer " + std::to_string(i) + " has inconsistent weight/bias shapes");
        }
        if (i > 0 && layers_[i - 1].out_dim() != l.in_dim()) {
            throw ShapeError("layer " + std::to_string(i) + " input width does not chain");
        }
    }
}

std::size_t Mlp::in_dim() const { return layers_.front().in_dim(); }
std::size_t Mlp::out_dim() const { return layers_.back().out_dim(); }

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
}

Tensor Mlp::forward(const Tensor& input, MlpCache* cache) const {
    if (cache) {
        cache->layer_inputs.clear();
        cache->pre_activations.clear();
    }
    Tensor x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Tensor z = affine_forward(layers_[i], x);
        const bool last = i + 1 == layers_.size();
        if (cache) cache->layer_inputs.push_back(std::move(x));
        if (last) {
            if (cache) cache->pre_activations.push_back(z);
            return z;
        }
        x = relu(z);
        if (cache) cache->pre_activations.push_back(std::move(z));
    }
    return x;  // unreachable: layers_ is never empty
}

MlpGrads Mlp::backward(const MlpCache& cache, const Tensor& upstream) const {
    if (cache.layer_inputs.size() != layers_.size()) {
        throw ShapeError("backward called with a cache from a different network");
    }
    std::vector<AffineGrads> per_layer(layers_.size());
    Tensor g = upstream;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        if (i + 1 != layers_.size()) g = relu_backward(cache.pre_activations[i], g);
        per_layer[i] = affine_backward(layers_[i], cache.layer_inputs[i], g);
        g = per_layer[i].input;
    }
    MlpGrads out;
    out.params.reserve(parameter_count());
    for (const auto& lg : per_layer) {
        out.params.insert(out.params.end(), lg.weights.values().begin(), lg.weights.values().end());
        out.params.insert(out.params.end(), lg.bias.values().begin(), lg.bias.values().end());
    }
    out.input = std::move(g);
    return out;
}

ParamVector Mlp::to_vector() const {
    ParamVector v;
    v.reserve(parameter_count());
    for (const auto& l : layers_) {
        v.insert(v.end(), l.weights.values().begin(), l.weights.values().end());
        v.insert(v.end(), l.bias.values().begin(), l.bias.values().end());
    }
    return v;
}

void Mlp::assign(std::span<const double> params) {
    if (params.size() != parameter_count()) {
        throw ShapeError("parameter vector of length " + std::to_string(params.size()) +
                         " for network with " + std::to_string(parameter_count()) + " parameters");
    }
    std::size_t k = 0;
    for (auto& l : layers_) {
        for (double& w : l.weights.values()) w = params[k++];
        for (double& b : l.bias.values()) b = params[k++];
    }
}

Discriminator::Discriminator(Mlp m) : Mlp(std::move(m)) {
    if (layers().size() != 2 || out_dim() != 2) {
        throw ShapeError("discriminator must have exactly two affine layers and output width 2");
    }
}

void glorot_init(Mlp& net, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& l : net.layers()) {
        const double limit =
            std::sqrt(6.0 / static_cast<double>(l.in_dim() + l.out_dim()));
        for (double& w : l.weights.values()) w = rng.uniform(-limit, limit);
        for (double& b : l.bias.values()) b = 0.0;
    }
}

ModelSet build_models(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    std::vector<std::size_t> enc{config.input_dim};
    enc.insert(enc.end(), config.encoder_hidden.begin(), config.encoder_hidden.end());
    enc.push_back(config.feature_dim);
    std::vector<std::size_t> cls{config.feature_dim};
    cls.insert(cls.end(), config.classifier_hidden.begin(), config.classifier_hidden.end());
    cls.push_back(config.num_classes);
    const std::size_t disc[] = {config.feature_dim, config.discriminator_hidden, 2};

    ModelSet m{Encoder(Mlp::zeros(enc)), Classifier(Mlp::zeros(cls)),
               Discriminator(Mlp::zeros(disc))};
    glorot_init(m.encoder, derive_seed(seed, 1));
    glorot_init(m.classifier, derive_seed(seed, 2));
    glorot_init(m.discriminator, derive_seed(seed, 3));
    return m;
}

Tensor encode(const Encoder& e, const Tensor& batch) { return e.forward(batch); }
Tensor classify(const Classifier& c, const Tensor& features) { return c.forward(features); }
Tensor discriminate(const Discriminator& d, const Tensor& features) { return d.forward(features); }

namespace {

constexpr std::uint8_t kMagic[4] = {'A', 'F', 'C', 'L'};

void write_network(ByteWriter& w, const Mlp& net) {
    w.u16(static_cast<std::uint16_t>(net.layers().size()));
    for (const auto& l : net.layers()) {
        w.u32(static_cast<std::uint32_t>(l.in_dim()));
        w.u32(static_cast<std::uint32_t>(l.out_dim()));
        w.f64s(l.weights.values());
        w.f64s(l.bias.values());
    }
}

Mlp read_network(ByteReader& r) {
    const std::uint16_t count = r.u16();
    if (count == 0) throw CheckpointError("shape-count mismatch: network with zero layers");
    std::vector<AffineLayer> layers;
    for (std::uint16_t i = 0; i < count; ++i) {
        const std::uint32_t in = r.u32();
        const std::uint32_t out = r.u32();
        if (in == 0 || out == 0) throw CheckpointError("shape-count mismatch: zero layer width");
        if (!layers.empty() && layers.back().out_dim() != in) {
            throw CheckpointError("shape-count mismatch: layer widths do not chain");
        }
        const std::uint64_t n = std::uint64_t{in} * out;
        if (n > r.remaining() / 8) throw TruncatedInput("layer weights");
        Tensor w({in, out}, r.f64s(n));
        Tensor b({out}, r.f64s(out));
        layers.emplace_back(std::move(w), std::move(b));
    }
    return Mlp(std::move(layers));
}

std::vector<std::size_t> widths_of(const Mlp& net) {
    std::vector<std::size_t> w{net.in_dim()};
    for (const auto& l : net.layers()) w.push_back(l.out_dim());
    return w;
}

}  // namespace

Bytes checkpoint_save(const Checkpoint& ckpt) {
    ByteWriter w;
    w.raw(kMagic);
    w.u16(kCheckpointVersion);
    w.u32(ckpt.round);
    w.f64(ckpt.fusion_weight);
    write_network(w, ckpt.models.encoder);
    write_network(w, ckpt.models.classifier);
    write_network(w, ckpt.models.discriminator);
    return w.take();
}

Checkpoint checkpoint_load(std::span<const std::uint8_t> bytes,
                           const std::optional<NetworkConfig>& expected) {
    ByteReader r(bytes);
    try {
        auto magic = r.raw(4);
        if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
            throw CheckpointError("bad magic");
        }
        const std::uint16_t version = r.u16();
        if (version != kCheckpointVersion) {
            throw CheckpointError("version mismatch: file has " + std::to_string(version) +
                                  ", expected " + std::to_string(kCheckpointVersion));
        }
        Checkpoint c;
        c.round = r.u32();
        c.fusion_weight = r.f64();
        c.models.encoder = Encoder(read_network(r));
        c.models.classifier = Classifier(read_network(r));
        Mlp disc = read_network(r);
        if (disc.layers().size() != 2 || disc.out_dim() != 2) {
            throw CheckpointError("shape-count mismatch: discriminator must be 2 layers ending in 2");
        }
        c.models.discriminator = Discriminator(std::move(disc));
        if (r.remaining() != 0) {
            throw CheckpointError("shape-count mismatch: " + std::to_string(r.remaining()) +
                                  " trailing bytes");
        }
        if (expected) {
            const ModelSet ref = build_models(*expected, 0);
            if (widths_of(ref.encoder) != widths_of(c.models.encoder) ||
                widths_of(ref.classifier) != widths_of(c.models.classifier) ||
                widths_of(ref.discriminator) != widths_of(c.models.discriminator)) {
                throw CheckpointError("shape-count mismatch: layers differ from expected config");
            }
        }
        if (c.models.encoder.out_dim() != c.models.classifier.in_dim() ||
            c.models.encoder.out_dim() != c.models.discriminator.in_dim()) {
            throw CheckpointError("shape-count mismatch: feature widths disagree");
        }
        return c;
    } catch (const TruncatedInput& e) {
        throw CheckpointError(std::string("truncated stream: ") + e.what());
    } catch (const ShapeError& e) {
        throw CheckpointError(std::string("shape-count mismatch: ") + e.what());
    }
}

std::size_t checkpoint_size(const ModelSet& models) {
    std::size_t n = kCheckpointPrefixBytes;
    for (const Mlp* net : {static_cast<const Mlp*>(&models.encoder),
                           static_cast<const Mlp*>(&models.classifier),
                           static_cast<const Mlp*>(&models.discriminator)}) {
        n += 2 + 8 * net->layers().size() + 8 * net->parameter_count();
    }
    return n;
}

}  // namespace afedcl
