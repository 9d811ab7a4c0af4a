#pragma once

#include <cstdint>
#include <vector>

#include "tokenseg/graph.hpp"
#include "tokenseg/volume.hpp"

namespace tokenseg {

struct EncoderConfig {
    int levels = 4;
    std::vector<int> channels = {16, 32, 64, 128};  // fine to coarse
    std::vector<int> layout = {256, 96, 36, 12};    // tokens per level, fine first
    int token_width = 64;

    int pool_size() const {
        int n = 0;
        for (int c : layout) n += c;
        return n;
    }
};

struct EncoderParams {
    // stage l maps channels[l-1] (or the 1-channel input for the stem) to
    // channels[l] at stride 2; proj maps each level to the common token width
    std::vector<Parameter> conv_w, conv_b;
    std::vector<Parameter> proj_w, proj_b;

    void init(const EncoderConfig& cfg, std::uint64_t seed);
    std::vector<Parameter*> all();
};

struct LevelDims {
    int d = 0, h = 0, w = 0;
    std::size_t count() const { return std::size_t(d) * h * w; }
};

// floor-halving dims for levels 1..L; throws if any dim < 2^levels
std::vector<LevelDims> pyramid_dims(const Dims& in, int levels);

// Partition a level lattice into exactly `count` cells: the factor triple
// (nd, nh, nw) with nd*nh*nw == count closest (log-space) to the isotropic
// ideal, each factor bounded by its dim; the last cell along each axis
// absorbs the remainder. Cells are emitted lexicographically in (d, h, w).
// Throws when no admissible factorization exists.
std::vector<Cell> make_cells(const LevelDims& dims, int count);
bool layout_feasible(const LevelDims& dims, int count);

// Clamp a requested per-level layout to what the lattice can host, pushing
// excess tokens toward finer levels; the total is preserved.
std::vector<int> resolve_layout(const Dims& in, const EncoderConfig& cfg);

struct TokenAnchor {
    int level = 0;  // 1-based
    int d = 0, h = 0, w = 0;
    Cell cell;
};

struct CandidatePool {
    NodeId tokens = -1;                 // (token_width, N) column per candidate
    std::vector<NodeId> level_tokens;   // raw pooled features per level
    std::vector<TokenAnchor> anchors;   // pool order: level-major fine first
    std::vector<std::vector<Cell>> cells;  // per level
    std::vector<int> layout;
    int token_width = 0;

    int size() const { return int(anchors.size()); }
};

// Stride-2 conv + ReLU stages; returns one node per level, fine to coarse.
std::vector<NodeId> build_pyramid(Graph& g, NodeId input, EncoderParams& params,
                                  const EncoderConfig& cfg);

CandidatePool pool_candidates(Graph& g, const std::vector<NodeId>& pyramid,
                              EncoderParams& params, const EncoderConfig& cfg,
                              const std::vector<int>& layout);

}  // namespace tokenseg
