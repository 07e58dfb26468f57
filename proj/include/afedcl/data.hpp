// Datasets, the synthetic defect-style generator, a PGM image-folder loader
// and the non-IID partitioners.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "afedcl/numerics.hpp"

namespace afedcl {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Provenance : std::uint8_t { Synthetic, Folder, Subset };

struct Dataset {
    Tensor features;  // [n x input_dim]
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    Provenance provenance = Provenance::Synthetic;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t input_dim() const { return features.cols(); }

    /// Rows `indices` in the given order; provenance becomes Subset.
    Dataset subset(std::span<const std::size_t> indices) const;
    /// Per-class sample counts, length num_classes.
    std::vector<std::size_t> histogram() const;
    /// Throws DataError unless n >= 1, labels < num_classes and rows match.
    void validate() const;
};

struct SyntheticSpec {
    std::size_t num_classes = 6;
    std::size_t input_dim = 64;
    double sigma = 1.0;        // within-class isotropic noise
    double separation = 3.0;   // norm of every class mean
    std::size_t samples_per_class = 100;
    std::uint64_t seed = 0;
};

/// Class means: seeded uniform directions on the unit sphere scaled by
/// `separation`. Row c is the mean of class c.
Tensor synth_means(const SyntheticSpec& spec);

/// Samples are class mean + N(0, sigma^2 I), grouped by class in label order.
Dataset synth_generate(const SyntheticSpec& spec);

/// Reads `<root>/<class>/*.pgm` (binary P5, maxval <= 255). Each image is
/// average-pooled to side x side, scaled to [0,1] and flattened. Classes are
/// numbered by sorted directory name; files within a class by sorted name.
Dataset load_image_folder(const std::filesystem::path& root, std::size_t side);

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

GrayImage read_pgm(const std::filesystem::path& file);
/// Mean of each of side x side cells, cell (i, j) covering rows
/// [i*h/side, (i+1)*h/side) and the analogous columns; result in [0,1].
std::vector<double> average_pool(const GrayImage& img, std::size_t side);

enum class PartitionScheme : std::uint8_t { Disjoint, Dirichlet };

struct PartitionSpec {
    PartitionScheme scheme = PartitionScheme::Disjoint;
    std::size_t classes_per_client = 2;  // disjoint
    double alpha = 0.1;                  // dirichlet
    std::size_t num_clients = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::size_t>> assignment;  // per client, ascending indices
};

/// Every client receives `c` distinct random classes (classes may be shared
/// between clients); each class's samples are shuffled and split evenly over
/// the clients holding it.
PartitionSpec partition_disjoint(const Dataset& data, std::size_t num_clients, std::size_t c,
                                 std::uint64_t seed);

/// Per class, a Dirichlet(alpha) draw splits the class across clients with
/// largest-remainder rounding. Any client left empty triggers a full redraw.
PartitionSpec partition_dirichlet(const Dataset& data, std::size_t num_clients, double alpha,
                                  std::uint64_t seed);

struct ClientSplit {
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
    Dataset train;
    Dataset test;
};

struct FederatedData {
    std::vector<ClientSplit> clients;
    Dataset global_test;  // union of all personalized test sets
};

/// Picks `per_client_n` training rows from each client's assignment; the rest
/// of the assignment is that client's test set and must be non-empty.
FederatedData subsample_train(const Dataset& data, std::size_t per_client_n,
                              const PartitionSpec& spec, std::uint64_t seed);

}  // namespace afedcl
