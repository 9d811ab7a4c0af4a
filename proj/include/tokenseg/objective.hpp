#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tokenseg/graph.hpp"
#include "tokenseg/tokenizer.hpp"
#include "tokenseg/volume.hpp"

namespace tokenseg {

struct LossWeights {
    double dice = 1.0;
    double bce = 0.5;
    double vq = 0.1;
    double beta = 0.25;
    double eps = 1e-5;
    double bce_clamp = 1e-7;
};

NodeId total_loss(Graph& g, NodeId dice, NodeId bce, NodeId vq, const LossWeights& w);

struct OverlapCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

OverlapCounts count_overlap(const MaskVolume& pred, const MaskVolume& target);

// Empty denominators yield nullopt ("undefined" in reports), never 0.
std::optional<double> dice_score(const MaskVolume& pred, const MaskVolume& target);
std::optional<double> iou(const MaskVolume& pred, const MaskVolume& target);
std::optional<double> sensitivity(const MaskVolume& pred, const MaskVolume& target);
std::optional<double> precision(const MaskVolume& pred, const MaskVolume& target);

// Surface voxels are foreground voxels with a 6-connected background neighbor
// (volume border counts as background). Distances are physical via spacing;
// the 95th percentile interpolates linearly between order statistics.
// Brute-force O(S^2), intended for desk-scale masks.
std::optional<double> hd95(const MaskVolume& a, const MaskVolume& b,
                           const std::array<float, 3>& spacing);

double codebook_utilization(const std::vector<int>& freq);

// Fraction of selected tokens whose full-resolution cell footprint intersects
// the Euclidean dilation of the ground-truth surface by radius voxels.
std::optional<double> boundary_token_ratio(const SparseTokenSet& ts, const MaskVolume& gt,
                                           const std::vector<LevelDims>& levels,
                                           double radius_voxels = 2.0);

double compression_ratio(const Dims& dims, int k);

struct MetricsReport {
    std::optional<double> dice, iou, hd95, sensitivity, precision, boundary_token_ratio;
    double codebook_utilization = 0.0;
    double compression_ratio = 0.0;
    double inference_ms = 0.0;

    std::string to_kv_text() const;
};

}  // namespace tokenseg
