#include "tokenseg/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace tokenseg {

std::vector<PhantomSpec> make_phantom_specs(int count, Dims dims, std::uint64_t seed) {
    if (count <= 0) throw std::invalid_argument("make_phantom_specs: count must be positive");
    if (dims.count() == 0) throw std::invalid_argument("make_phantom_specs: empty dims");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> n_blobs(1, 3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    double extent = double(std::min({dims.d, dims.h, dims.w}));
    std::vector<PhantomSpec> specs;
    specs.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) {
        PhantomSpec spec;
        spec.dims = dims;
        spec.background = 0.1;
        spec.noise_sigma = 0.05;
        spec.seed = seed + std::uint64_t(i) * 0x9e3779b97f4a7c15ULL;

        int nb = n_blobs(rng);
        for (int b = 0; b < nb; ++b) {
            Blob blob;
            // Keep centers away from the faces so blobs stay mostly inside.
            blob.center = {(0.25 + 0.5 * unit(rng)) * dims.d,
                           (0.25 + 0.5 * unit(rng)) * dims.h,
                           (0.25 + 0.5 * unit(rng)) * dims.w};
            double base = (0.12 + 0.13 * unit(rng)) * extent;
            blob.radii = {base * (0.8 + 0.4 * unit(rng)),
                          base * (0.8 + 0.4 * unit(rng)),
                          base * (0.8 + 0.4 * unit(rng))};
            blob.intensity = 0.7 + 0.2 * unit(rng);
            spec.blobs.push_back(blob);
        }
        specs.push_back(std::move(spec));
    }
    return specs;
}

void write_dataset_index(const std::string& dir, const std::vector<DatasetEntry>& entries) {
    fs::path index = fs::path(dir) / "index.txt";
    std::ofstream f(index, std::ios::trunc);
    if (!f) throw std::runtime_error("dataset: cannot write " + index.string());
    for (const DatasetEntry& e : entries) f << e.volume_path << "\t" << e.mask_path << "\n";
    if (!f) throw std::runtime_error("dataset: write failed for " + index.string());
}

std::vector<DatasetEntry> read_dataset_index(const std::string& dir) {
    fs::path index = fs::path(dir) / "index.txt";
    std::ifstream f(index);
    if (!f) throw std::runtime_error("dataset: missing index " + index.string());
    std::vector<DatasetEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("dataset: malformed line " + std::to_string(lineno) +
                                     " in " + index.string());
        entries.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    return entries;
}

std::vector<Case> load_dataset(const std::string& dir) {
    std::vector<Case> cases;
    for (const DatasetEntry& e : read_dataset_index(dir)) {
        Case c;
        c.volume = load_volume((fs::path(dir) / e.volume_path).string());
        c.mask = load_mask((fs::path(dir) / e.mask_path).string());
        if (!(c.volume.dims == c.mask.dims))
            throw std::runtime_error("dataset: dims mismatch between " + e.volume_path +
                                     " and " + e.mask_path);
        cases.push_back(std::move(c));
    }
    if (cases.empty()) throw std::runtime_error("dataset: no cases indexed in " + dir);
    return cases;
}

}  // namespace tokenseg
