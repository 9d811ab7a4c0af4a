#pragma once

#include <cstdint>
#include <vector>

#include "tokenseg/decoder.hpp"
#include "tokenseg/encoder.hpp"
#include "tokenseg/graph.hpp"
#include "tokenseg/objective.hpp"
#include "tokenseg/tokenizer.hpp"
#include "tokenseg/volume.hpp"

namespace tokenseg {

struct ModelConfig {
    EncoderConfig encoder;
    int codebook_size = 512;
    int k = 100;
    double theta = 0.5;
    SelectStrategy strategy = SelectStrategy::Combined;
    LossWeights loss;
    std::uint64_t seed = 0;
};

// Encoder, codebook and decoder parameters plus the wiring of one forward
// pass. The codebook is initialized lazily from the first pool of candidate
// tokens it sees, scaled to their mean norm.
struct Model {
    ModelConfig cfg;
    EncoderParams encoder;
    DecoderParams decoder;
    Parameter codebook;
    bool codebook_ready = false;

    void init(const ModelConfig& config);
    std::vector<Parameter*> parameters();
};

struct ForwardResult {
    NodeId prob = -1;          // (1, D, H, W) probabilities
    NodeId loss = -1;          // scalar, valid when a target was given
    NodeId dice = -1, bce = -1, vq = -1;
    CandidatePool pool;
    QuantizedPool qpool;
    ScoreRecord scores;
    std::vector<int> freq;
    SparseTokenSet selected;
    std::vector<LevelDims> levels;
};

// target may be null (inference). select_seed feeds the random strategy only.
ForwardResult forward(Graph& g, Model& model, const Volume3D& raw_volume,
                      const MaskVolume* target, std::uint64_t select_seed);

Volume3D probability_volume(const Graph& g, NodeId prob, const Volume3D& like);

}  // namespace tokenseg
