#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace tokenseg {

struct Dims {
    std::uint32_t d = 0, h = 0, w = 0;

    std::size_t count() const { return std::size_t(d) * h * w; }
    bool operator==(const Dims&) const = default;
};

// Dense scalar field, row-major with w fastest.
struct Volume3D {
    Dims dims;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::vector<float> voxels;

    std::size_t index(std::uint32_t d, std::uint32_t h, std::uint32_t w) const {
        return (std::size_t(d) * dims.h + h) * dims.w + w;
    }
    float at(std::uint32_t d, std::uint32_t h, std::uint32_t w) const {
        return voxels[index(d, h, w)];
    }
    float& at(std::uint32_t d, std::uint32_t h, std::uint32_t w) {
        return voxels[index(d, h, w)];
    }
    void validate() const;
};

struct MaskVolume {
    Dims dims;
    std::vector<std::uint8_t> labels;

    std::size_t index(std::uint32_t d, std::uint32_t h, std::uint32_t w) const {
        return (std::size_t(d) * dims.h + h) * dims.w + w;
    }
    void validate() const;
};

struct Blob {
    std::array<double, 3> center;  // (d, h, w) voxel coordinates
    std::array<double, 3> radii;   // in voxels
    double intensity = 1.0;
};

struct PhantomSpec {
    Dims dims;
    std::vector<Blob> blobs;
    double background = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct NormalizeResult {
    Volume3D volume;
    bool degenerate = false;  // constant input, output all zero
};

struct Phantom {
    Volume3D volume;
    MaskVolume mask;
};

// TSV3 container (see README): magic "TSV3", version u16, dtype u8
// (0 = f32 volume, 1 = u8 mask), reserved u8, dims u32x3 LE, spacing f32x3 LE,
// payload row-major.
Volume3D load_volume(const std::string& path);
MaskVolume load_mask(const std::string& path);
void save_volume(const Volume3D& v, const std::string& path);
void save_mask(const MaskVolume& m, const std::string& path);

NormalizeResult normalize_intensity(const Volume3D& v);

Phantom generate_phantom(const PhantomSpec& spec);

}  // namespace tokenseg
