#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokenseg/trainer.hpp"
#include "tokenseg/volume.hpp"

namespace tokenseg {

struct DatasetEntry {
    std::string volume_path;  // relative to the index directory
    std::string mask_path;
};

// Seeded random phantom specs for one dataset: 1-3 ellipsoid blobs per case,
// background 0.1, foreground around 0.8, noise sigma 0.05, radii scaled to
// the volume extent.
std::vector<PhantomSpec> make_phantom_specs(int count, Dims dims, std::uint64_t seed);

// Index file "index.txt": one "volume<TAB>mask" line per case.
void write_dataset_index(const std::string& dir, const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_dataset_index(const std::string& dir);

// Loads every indexed case; throws with the offending path on failure.
std::vector<Case> load_dataset(const std::string& dir);

}  // namespace tokenseg
