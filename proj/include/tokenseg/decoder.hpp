#pragma once

#include <cstdint>
#include <vector>

#include "tokenseg/encoder.hpp"
#include "tokenseg/graph.hpp"
#include "tokenseg/tokenizer.hpp"
#include "tokenseg/volume.hpp"

namespace tokenseg {

struct DecoderParams {
    // back-projection from the common token width to each level's channels
    std::vector<Parameter> back_w, back_b;
    // coarse refiner (phi): two 3x3x3 conv + ReLU layers at level L
    Parameter phi_w1, phi_b1, phi_w2, phi_b2;
    // fusion refiners (psi) for stages s = L-1 .. 1, finest last in storage order
    std::vector<Parameter> psi_w1, psi_b1, psi_w2, psi_b2;
    Parameter head_w, head_b;  // 1x1x1 projection to one channel

    void init(const EncoderConfig& cfg, std::uint64_t seed);
    std::vector<Parameter*> all();
};

struct SparseGrids {
    std::vector<NodeId> grids;                    // per level, (C_s, D_s, H_s, W_s)
    std::vector<std::vector<std::size_t>> sites;  // anchored flat sites per level
};

// Place selected tokens (columns of qtokens) back at their anchors after the
// per-level reverse projection; all other sites are exactly zero.
SparseGrids reproject(Graph& g, NodeId qtokens, const SparseTokenSet& selected,
                      const std::vector<LevelDims>& levels, DecoderParams& params,
                      const EncoderConfig& cfg);

NodeId refine_coarse(Graph& g, NodeId coarse_grid, DecoderParams& params);

// psi(Concat(U2(g_next), skip)); the upsampled tensor is cropped by at most
// one voxel per dim to absorb floor-halving.
NodeId fuse_step(Graph& g, NodeId g_next, NodeId skip, DecoderParams& params,
                 int stage_index);

// Head + final 2x trilinear upsample back to the input lattice + sigmoid.
// Odd input dims are restored by replicating the last slice.
NodeId predict_mask(Graph& g, NodeId g1, DecoderParams& params, const Dims& out_dims);

// Full sparse-to-dense pass: refine the coarsest sparse grid, then fuse with
// the dense encoder skips stage by stage and predict the mask.
NodeId decode(Graph& g, const SparseGrids& grids, const std::vector<NodeId>& enc_levels,
              DecoderParams& params, const Dims& out_dims);

MaskVolume binarize(const Volume3D& prob, double theta);

}  // namespace tokenseg
