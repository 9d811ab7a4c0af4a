#include "tokenseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

namespace tokenseg {

namespace {

constexpr char kMagic[4] = {'T', 'S', 'V', '3'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kDtypeVolume = 0;
constexpr std::uint8_t kDtypeMask = 1;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::runtime_error("TSV3 " + path + ": " + what);
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::string path;
    std::string bytes;
    std::size_t pos = 0;

    std::uint8_t u8() {
        if (pos >= bytes.size()) fail(path, "truncated header");
        return std::uint8_t(bytes[pos++]);
    }
    std::uint16_t u16() { return std::uint16_t(u8()) | std::uint16_t(u8()) << 8; }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

Reader open_file(const std::string& path, std::uint8_t expect_dtype, Dims& dims,
                 std::array<float, 3>& spacing) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open file");
    Reader r;
    r.path = path;
    r.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

    if (r.bytes.size() < 4 || std::memcmp(r.bytes.data(), kMagic, 4) != 0)
        fail(path, "bad magic bytes");
    r.pos = 4;
    if (std::uint16_t ver = r.u16(); ver != kVersion)
        fail(path, "unsupported version " + std::to_string(ver));
    std::uint8_t dtype = r.u8();
    if (dtype != expect_dtype)
        fail(path, "dtype " + std::to_string(dtype) + ", expected " +
                       std::to_string(expect_dtype));
    r.u8();  // reserved
    dims.d = r.u32();
    dims.h = r.u32();
    dims.w = r.u32();
    if (dims.d == 0 || dims.h == 0 || dims.w == 0) fail(path, "zero dimension");
    for (auto& s : spacing) {
        s = r.f32();
        if (!(s > 0.0f) || !std::isfinite(s)) fail(path, "non-positive spacing");
    }
    return r;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(path, "cannot open for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) fail(path, "write failed");
}

std::string header(std::uint8_t dtype, const Dims& dims, const std::array<float, 3>& spacing) {
    std::string out(kMagic, 4);
    put_u16(out, kVersion);
    out.push_back(char(dtype));
    out.push_back(0);  // reserved
    put_u32(out, dims.d);
    put_u32(out, dims.h);
    put_u32(out, dims.w);
    for (float s : spacing) put_f32(out, s);
    return out;
}

}  // namespace

void Volume3D::validate() const {
    if (dims.count() == 0) throw std::invalid_argument("Volume3D: empty dims");
    if (voxels.size() != dims.count())
        throw std::invalid_argument("Volume3D: voxel count does not match dims");
    for (float s : spacing)
        if (!(s > 0.0f)) throw std::invalid_argument("Volume3D: spacing must be > 0");
    for (std::size_t i = 0; i < voxels.size(); ++i)
        if (!std::isfinite(voxels[i]))
            throw std::invalid_argument("Volume3D: non-finite voxel at offset " +
                                        std::to_string(i));
}

void MaskVolume::validate() const {
    if (labels.size() != dims.count())
        throw std::invalid_argument("MaskVolume: label count does not match dims");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] > 1)
            throw std::invalid_argument("MaskVolume: label not in {0,1} at offset " +
                                        std::to_string(i));
}

void PhantomSpec::validate() const {
    if (dims.count() == 0) throw std::invalid_argument("PhantomSpec: empty dims");
    if (noise_sigma < 0) throw std::invalid_argument("PhantomSpec: negative noise sigma");
    for (const auto& b : blobs) {
        if (b.center[0] < 0 || b.center[0] >= dims.d || b.center[1] < 0 ||
            b.center[1] >= dims.h || b.center[2] < 0 || b.center[2] >= dims.w)
            throw std::invalid_argument("PhantomSpec: blob center outside dims");
        for (double r : b.radii)
            if (!(r > 0)) throw std::invalid_argument("PhantomSpec: blob radius must be > 0");
    }
}

Volume3D load_volume(const std::string& path) {
    Volume3D v;
    Reader r = open_file(path, kDtypeVolume, v.dims, v.spacing);
    std::size_t n = v.dims.count();
    if (r.bytes.size() - r.pos != n * 4)
        fail(path, "payload holds " + std::to_string((r.bytes.size() - r.pos) / 4) +
                       " scalars, dims require " + std::to_string(n));
    v.voxels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        v.voxels[i] = r.f32();
        if (!std::isfinite(v.voxels[i]))
            fail(path, "non-finite voxel at offset " + std::to_string(i));
    }
    return v;
}

MaskVolume load_mask(const std::string& path) {
    MaskVolume m;
    std::array<float, 3> spacing;  // masks carry spacing too; ignored on load
    Reader r = open_file(path, kDtypeMask, m.dims, spacing);
    std::size_t n = m.dims.count();
    if (r.bytes.size() - r.pos != n)
        fail(path, "payload holds " + std::to_string(r.bytes.size() - r.pos) +
                       " bytes, dims require " + std::to_string(n));
    m.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint8_t b = std::uint8_t(r.bytes[r.pos + i]);
        if (b > 1) fail(path, "mask byte not in {0,1} at offset " + std::to_string(i));
        m.labels[i] = b;
    }
    return m;
}

void save_volume(const Volume3D& v, const std::string& path) {
    v.validate();
    std::string out = header(kDtypeVolume, v.dims, v.spacing);
    out.reserve(out.size() + v.voxels.size() * 4);
    for (float x : v.voxels) put_f32(out, x);
    write_file(path, out);
}

void save_mask(const MaskVolume& m, const std::string& path) {
    m.validate();
    std::string out = header(kDtypeMask, m.dims, {1.0f, 1.0f, 1.0f});
    out.reserve(out.size() + m.labels.size());
    for (std::uint8_t b : m.labels) out.push_back(char(b));
    write_file(path, out);
}

NormalizeResult normalize_intensity(const Volume3D& v) {
    v.validate();
    auto [lo_it, hi_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
    float lo = *lo_it, hi = *hi_it;
    NormalizeResult res;
    res.volume.dims = v.dims;
    res.volume.spacing = v.spacing;
    res.volume.voxels.resize(v.voxels.size());
    if (lo == hi) {
        res.degenerate = true;
        std::fill(res.volume.voxels.begin(), res.volume.voxels.end(), 0.0f);
        return res;
    }
    double scale = 1.0 / (double(hi) - double(lo));
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        res.volume.voxels[i] = float((double(v.voxels[i]) - lo) * scale);
    return res;
}

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Phantom out;
    out.volume.dims = spec.dims;
    out.mask.dims = spec.dims;
    std::size_t n = spec.dims.count();
    out.volume.voxels.assign(n, float(spec.background));
    out.mask.labels.assign(n, 0);

    // Labels first, noise after, so masks stay noise-free.
    for (std::uint32_t d = 0; d < spec.dims.d; ++d)
        for (std::uint32_t h = 0; h < spec.dims.h; ++h)
            for (std::uint32_t w = 0; w < spec.dims.w; ++w) {
                std::size_t i = out.volume.index(d, h, w);
                for (const auto& b : spec.blobs) {
                    double x = (d - b.center[0]) / b.radii[0];
                    double y = (h - b.center[1]) / b.radii[1];
                    double z = (w - b.center[2]) / b.radii[2];
                    if (x * x + y * y + z * z <= 1.0) {
                        out.mask.labels[i] = 1;
                        out.volume.voxels[i] = float(spec.background + b.intensity);
                        break;
                    }
                }
            }

    if (spec.noise_sigma > 0) {
        std::mt19937_64 rng(spec.seed);
        std::normal_distribution<double> gauss(0.0, spec.noise_sigma);
        double clip = 8.0 * spec.noise_sigma;
        for (std::size_t i = 0; i < n; ++i) {
            double eps = std::clamp(gauss(rng), -clip, clip);
            out.volume.voxels[i] = float(out.volume.voxels[i] + eps);
        }
    }
    return out;
}

}  // namespace tokenseg
