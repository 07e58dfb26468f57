#include "afedcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "afedcl/random.hpp"

namespace afedcl {

namespace fs = std::filesystem;

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset d;
    d.features = features.gather_rows(indices);
    d.labels.reserve(indices.size());
    for (auto i : indices) d.labels.push_back(labels.at(i));
    d.num_classes = num_classes;
    d.provenance = Provenance::Subset;
    return d;
}

std::vector<std::size_t> Dataset::histogram() const {
    std::vector<std::size_t> h(num_classes, 0);
    for (auto l : labels) ++h.at(l);
    return h;
}

void Dataset::validate() const {
    if (labels.empty()) throw DataError("dataset is empty");
    if (features.rank() != 2 || features.rows() != labels.size()) {
        throw DataError("feature rows do not match label count");
    }
    for (auto l : labels) {
        if (l >= num_classes) throw DataError("label " + std::to_string(l) + " >= class count");
    }
}

Tensor synth_means(const SyntheticSpec& spec) {
    if (spec.num_classes < 2 || spec.input_dim == 0) {
        throw DataError("synthetic spec needs >= 2 classes and input_dim >= 1");
    }
    Rng rng(derive_seed(spec.seed, 0x6d65616e73));
    Tensor means = Tensor::matrix(spec.num_classes, spec.input_dim);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        double norm2 = 0.0;
        while (norm2 == 0.0) {
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                means(c, j) = rng.normal();
                norm2 += means(c, j) * means(c, j);
            }
        }
        const double scale = spec.separation / std::sqrt(norm2);
        for (std::size_t j = 0; j < spec.input_dim; ++j) means(c, j) *= scale;
    }
    for (std::size_t a = 0; a < spec.num_classes; ++a) {
        for (std::size_t b = a + 1; b < spec.num_classes; ++b) {
            if (std::equal(means.row(a).begin(), means.row(a).end(), means.row(b).begin())) {
                throw DataError("synthetic class means are not distinct");
            }
        }
    }
    return means;
}

Dataset synth_generate(const SyntheticSpec& spec) {
    if (!(spec.sigma > 0.0)) throw DataError("synthetic sigma must be positive");
    if (!(spec.separation > 0.0)) throw DataError("synthetic separation must be positive");
    if (spec.samples_per_class == 0) throw DataError("samples_per_class must be >= 1");
    const Tensor means = synth_means(spec);
    Rng rng(derive_seed(spec.seed, 0x73616d70));
    const std::size_t n = spec.num_classes * spec.samples_per_class;
    Dataset d;
    d.features = Tensor::matrix(n, spec.input_dim);
    d.labels.resize(n);
    d.num_classes = spec.num_classes;
    d.provenance = Provenance::Synthetic;
    std::size_t r = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++r) {
            d.labels[r] = c;
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                d.features(r, j) = means(c, j) + spec.sigma * rng.normal();
            }
        }
    }
    return d;
}

GrayImage read_pgm(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < buf.size()) {
            if (buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_uint = [&]() -> std::size_t {
        skip_space();
        std::size_t v = 0;
        std::size_t digits = 0;
        while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
            v = v * 10 + static_cast<std::size_t>(buf[pos++] - '0');
            if (++digits > 9) throw DataError(file.string() + ": header number too large");
        }
        if (digits == 0) throw DataError(file.string() + ": malformed PGM header");
        return v;
    };
    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') {
        throw DataError(file.string() + ": not a binary PGM (P5) file");
    }
    pos = 2;
    GrayImage img;
    img.width = read_uint();
    img.height = read_uint();
    const std::size_t maxval = read_uint();
    if (img.width == 0 || img.height == 0) throw DataError(file.string() + ": empty image");
    if (maxval == 0 || maxval > 255) {
        throw DataError(file.string() + ": only 8-bit PGM (maxval <= 255) is supported");
    }
    if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
        throw DataError(file.string() + ": malformed PGM header");
    }
    ++pos;
    const std::size_t n = img.width * img.height;
    if (buf.size() - pos < n) throw DataError(file.string() + ": truncated pixel data");
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<std::uint8_t>(buf[pos + i]);
    return img;
}

std::vector<double> average_pool(const GrayImage& img, std::size_t side) {
    if (side == 0) throw DataError("pool side must be >= 1");
    if (img.width < side || img.height < side) {
        throw DataError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        " smaller than pool side " + std::to_string(side));
    }
    std::vector<double> out(side * side);
    for (std::size_t i = 0; i < side; ++i) {
        const std::size_t r0 = i * img.height / side;
        const std::size_t r1 = (i + 1) * img.height / side;
        for (std::size_t j = 0; j < side; ++j) {
            const std::size_t c0 = j * img.width / side;
            const std::size_t c1 = (j + 1) * img.width / side;
            std::uint64_t sum = 0;
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t c = c0; c < c1; ++c) sum += img.pixels[r * img.width + c];
            }
            const double count = static_cast<double>((r1 - r0) * (c1 - c0));
            out[i * side + j] = static_cast<double>(sum) / count / 255.0;
        }
    }
    return out;
}

Dataset load_image_folder(const fs::path& root, std::size_t side) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw DataError("not a directory: " + root.string());
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("no class directories under " + root.string());

    std::vector<double> flat;
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
            if (entry.is_regular_file() && entry.path().extension() == ".pgm") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) throw DataError("empty class directory " + class_dirs[c].string());
        for (const auto& f : files) {
            const auto pooled = average_pool(read_pgm(f), side);
            flat.insert(flat.end(), pooled.begin(), pooled.end());
            labels.push_back(c);
        }
    }
    Dataset d;
    d.features = Tensor({labels.size(), side * side}, std::move(flat));
    d.labels = std::move(labels);
    d.num_classes = class_dirs.size();
    d.provenance = Provenance::Folder;
    return d;
}

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& data) {
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) by_class.at(data.labels[i]).push_back(i);
    return by_class;
}

/// Floors of n * p, then +1 to the largest fractional parts (lowest index on ties).
std::vector<std::size_t> largest_remainder(std::size_t n, std::span<const double> p) {
    std::vector<std::size_t> counts(p.size());
    std::vector<double> frac(p.size());
    std::size_t used = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double exact = static_cast<double>(n) * p[k];
        counts[k] = static_cast<std::size_t>(std::floor(exact));
        frac[k] = exact - static_cast<double>(counts[k]);
        used += counts[k];
    }
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t i = 0; used < n; ++i, ++used) ++counts[order[i % order.size()]];
    while (used > n) {  // rounding overshoot; only possible through float error
        for (std::size_t k = p.size(); k-- > 0 && used > n;) {
            if (counts[k] > 0) {
                --counts[k];
                --used;
            }
        }
    }
    return counts;
}

}  // namespace

PartitionSpec partition_disjoint(const Dataset& data, std::size_t num_clients, std::size_t c,
                                 std::uint64_t seed) {
    data.validate();
    if (num_clients == 0) throw DataError("need at least one client");
    if (c == 0) throw DataError("classes per client must be >= 1");
    if (c > data.num_classes) {
        throw DataError("classes per client " + std::to_string(c) + " exceeds class count " +
                        std::to_string(data.num_classes));
    }
    Rng rng(derive_seed(seed, 0x646973));
    std::vector<std::vector<std::size_t>> holders(data.num_classes);
    std::vector<std::size_t> classes(data.num_classes);
    for (std::size_t k = 0; k < num_clients; ++k) {
        std::iota(classes.begin(), classes.end(), 0);
        rng.shuffle(std::span(classes));
        std::vector<std::size_t> mine(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(c));
        std::sort(mine.begin(), mine.end());
        for (auto cls : mine) holders[cls].push_back(k);
    }
    PartitionSpec spec;
    spec.scheme = PartitionScheme::Disjoint;
    spec.classes_per_client = c;
    spec.num_clients = num_clients;
    spec.seed = seed;
    spec.assignment.resize(num_clients);
    auto by_class = indices_by_class(data);
    for (std::size_t cls = 0; cls < data.num_classes; ++cls) {
        const auto& h = holders[cls];
        if (h.empty()) continue;
        auto& idx = by_class[cls];
        rng.shuffle(std::span(idx));
        const std::size_t base = idx.size() / h.size();
        const std::size_t extra = idx.size() % h.size();
        std::size_t at = 0;
        for (std::size_t j = 0; j < h.size(); ++j) {
            const std::size_t take = base + (j < extra ? 1 : 0);
            auto& dst = spec.assignment[h[j]];
            dst.insert(dst.end(), idx.begin() + static_cast<std::ptrdiff_t>(at),
                       idx.begin() + static_cast<std::ptrdiff_t>(at + take));
            at += take;
        }
    }
    for (auto& a : spec.assignment) std::sort(a.begin(), a.end());
    return spec;
}

PartitionSpec partition_dirichlet(const Dataset& data, std::size_t num_clients, double alpha,
                                  std::uint64_t seed) {
    data.validate();
    if (num_clients == 0) throw DataError("need at least one client");
    if (!(alpha > 0.0)) throw DataError("dirichlet alpha must be positive");
    if (data.size() < num_clients) throw DataError("fewer samples than clients");
    Rng rng(derive_seed(seed, 0x646972));
    const auto by_class = indices_by_class(data);
    constexpr int kMaxAttempts = 1000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        std::vector<std::vector<std::size_t>> assignment(num_clients);
        for (const auto& cls_idx : by_class) {
            if (cls_idx.empty()) continue;
            std::vector<double> p(num_clients);
            double total = 0.0;
            while (total == 0.0) {
                total = 0.0;
                for (auto& v : p) total += (v = rng.gamma(alpha));
            }
            for (auto& v : p) v /= total;
            const auto counts = largest_remainder(cls_idx.size(), p);
            auto idx = cls_idx;
            rng.shuffle(std::span(idx));
            std::size_t at = 0;
            for (std::size_t k = 0; k < num_clients; ++k) {
                assignment[k].insert(assignment[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(at),
                                     idx.begin() + static_cast<std::ptrdiff_t>(at + counts[k]));
                at += counts[k];
            }
        }
        if (std::all_of(assignment.begin(), assignment.end(),
                        [](const auto& a) { return !a.empty(); })) {
            PartitionSpec spec;
            spec.scheme = PartitionScheme::Dirichlet;
            spec.alpha = alpha;
            spec.num_clients = num_clients;
            spec.seed = seed;
            for (auto& a : assignment) std::sort(a.begin(), a.end());
            spec.assignment = std::move(assignment);
            return spec;
        }
    }
    throw DataError("dirichlet partition left a client empty after " +
                    std::to_string(kMaxAttempts) + " draws");
}

FederatedData subsample_train(const Dataset& data, std::size_t per_client_n,
                              const PartitionSpec& spec, std::uint64_t seed) {
    if (per_client_n == 0) throw DataError("per-client training size must be >= 1");
    FederatedData fd;
    std::vector<std::size_t> pooled;
    for (std::size_t k = 0; k < spec.assignment.size(); ++k) {
        auto idx = spec.assignment[k];
        if (per_client_n >= idx.size()) {
            throw DataError("insufficient samples: client " + std::to_string(k) + " holds " +
                            std::to_string(idx.size()) + ", needs " +
                            std::to_string(per_client_n) + " for training plus >= 1 for testing");
        }
        Rng rng(derive_seed(seed, 0x7370000 + k));
        rng.shuffle(std::span(idx));
        ClientSplit s;
        s.train_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_client_n));
        s.test_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(per_client_n), idx.end());
        std::sort(s.test_indices.begin(), s.test_indices.end());
        s.train = data.subset(s.train_indices);
        s.test = data.subset(s.test_indices);
        pooled.insert(pooled.end(), s.test_indices.begin(), s.test_indices.end());
        fd.clients.push_back(std::move(s));
    }
    std::sort(pooled.begin(), pooled.end());
    fd.global_test = data.subset(pooled);
    return fd;
}

}  // namespace afedcl
