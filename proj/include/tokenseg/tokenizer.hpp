#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tokenseg/encoder.hpp"
#include "tokenseg/graph.hpp"
#include "tokenseg/volume.hpp"

namespace tokenseg {

struct QuantizedPool {
    std::vector<int> codes;        // nearest prototype per candidate
    std::vector<double> distance;  // L2 distance to it
};

// tokens laid out as (C, N) with column per candidate, codebook as (M, C)
// rows contiguous. Ties go to the lowest prototype index.
QuantizedPool quantize(std::span<const double> tokens, int width, int count,
                       std::span<const double> codebook, int prototypes);

std::vector<int> prototype_freq(const QuantizedPool& q, int prototypes);

struct ScoreRecord {
    std::vector<double> norm;       // ||t^q||_2
    std::vector<double> boundary;   // P_b in [0,1]
    std::vector<double> diversity;  // ln(N / freq)
    std::vector<double> total;      // product of the three
};

// Per-level min-max-normalized mean gradient magnitude over each cell.
// The volume is block-averaged down to each level's lattice; gradients are
// clamped-index central differences (one-sided halved at the edges).
std::vector<double> boundary_proximity(const Volume3D& normalized,
                                       const std::vector<LevelDims>& levels,
                                       const std::vector<std::vector<Cell>>& cells);

double score(double qnorm, double boundary, int freq, int pool_size);

ScoreRecord score_pool(std::span<const double> qtokens, int width, int count,
                       const std::vector<double>& boundary,
                       const std::vector<int>& codes, const std::vector<int>& freq);

struct SelectedToken {
    int pool_index = 0;
    int level = 0;
    int d = 0, h = 0, w = 0;
    Cell cell;
    int code = 0;
    double score = 0.0;
};

// Sorted by descending score, ties by ascending pool index.
using SparseTokenSet = std::vector<SelectedToken>;

enum class SelectStrategy { Random, UniformGrid, Hierarchical, Boundary, VQ, Combined };

SelectStrategy parse_strategy(const std::string& name);
std::string strategy_name(SelectStrategy s);

SparseTokenSet select_topk(const CandidatePool& pool, const QuantizedPool& q,
                           const ScoreRecord& scores, int k);

SparseTokenSet select_strategy(const CandidatePool& pool, const QuantizedPool& q,
                               const ScoreRecord& scores, SelectStrategy strategy,
                               int k, std::uint64_t seed);

// Gaussian codebook init scaled so the expected row norm matches `target_norm`
// (typically the mean candidate-token norm of the first batch).
void init_codebook(Parameter& codebook, double target_norm, std::uint64_t seed);

}  // namespace tokenseg
