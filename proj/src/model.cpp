#include "tokenseg/model.hpp"

#include <cmath>
#include <stdexcept>

namespace tokenseg {

void Model::init(const ModelConfig& config) {
    cfg = config;
    encoder.init(cfg.encoder, cfg.seed);
    decoder.init(cfg.encoder, cfg.seed + 0x9e3779b97f4a7c15ULL);
    codebook = Parameter("codebook",
                         Shape{cfg.codebook_size, cfg.encoder.token_width, 1, 1});
    codebook_ready = false;
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out = encoder.all();
    out.push_back(&codebook);
    auto dec = decoder.all();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
}

ForwardResult forward(Graph& g, Model& model, const Volume3D& raw_volume,
                      const MaskVolume* target, std::uint64_t select_seed) {
    const ModelConfig& cfg = model.cfg;
    NormalizeResult norm = normalize_intensity(raw_volume);
    const Volume3D& vol = norm.volume;

    ForwardResult res;
    res.levels = pyramid_dims(vol.dims, cfg.encoder.levels);
    auto layout = resolve_layout(vol.dims, cfg.encoder);

    std::vector<double> vox(vol.voxels.begin(), vol.voxels.end());
    NodeId x = g.input(Shape{1, int(vol.dims.d), int(vol.dims.h), int(vol.dims.w)}, vox);

    auto pyramid = build_pyramid(g, x, model.encoder, cfg.encoder);
    res.pool = pool_candidates(g, pyramid, model.encoder, cfg.encoder, layout);

    const int n = res.pool.size();
    const int width = cfg.encoder.token_width;
    auto tokens = g.value(res.pool.tokens);

    if (!model.codebook_ready) {
        double mean_norm = 0.0;
        for (int j = 0; j < n; ++j) {
            double n2 = 0.0;
            for (int c = 0; c < width; ++c) {
                double v = tokens[std::size_t(c) * n + j];
                n2 += v * v;
            }
            mean_norm += std::sqrt(n2);
        }
        mean_norm = n > 0 ? mean_norm / n : 1.0;
        if (mean_norm <= 0.0) mean_norm = 1.0;
        init_codebook(model.codebook, mean_norm, cfg.seed + 0x1234567ULL);
        model.codebook_ready = true;
    }

    res.qpool = quantize(tokens, width, n, model.codebook.value, cfg.codebook_size);
    res.freq = prototype_freq(res.qpool, cfg.codebook_size);

    NodeId cb = g.use(model.codebook);
    res.vq = g.vq_penalty(res.pool.tokens, cb, res.qpool.codes, cfg.loss.beta);
    NodeId qtokens = g.vq_lookup(res.pool.tokens, cb, res.qpool.codes);

    auto boundary = boundary_proximity(vol, res.levels, res.pool.cells);
    res.scores = score_pool(g.value(qtokens), width, n, boundary, res.qpool.codes,
                            res.freq);
    res.selected = select_strategy(res.pool, res.qpool, res.scores, cfg.strategy,
                                   cfg.k, select_seed);

    SparseGrids grids =
        reproject(g, qtokens, res.selected, res.levels, model.decoder, cfg.encoder);
    res.prob = decode(g, grids, pyramid, model.decoder, vol.dims);

    if (target) {
        if (!(target->dims == vol.dims))
            throw std::invalid_argument("forward: target dims mismatch");
        std::vector<double> y(target->labels.begin(), target->labels.end());
        res.dice = g.dice_loss(res.prob, y, cfg.loss.eps);
        res.bce = g.bce_loss(res.prob, y, cfg.loss.bce_clamp);
        res.loss = total_loss(g, res.dice, res.bce, res.vq, cfg.loss);
    }
    return res;
}

Volume3D probability_volume(const Graph& g, NodeId prob, const Volume3D& like) {
    Volume3D out;
    out.dims = like.dims;
    out.spacing = like.spacing;
    auto vals = g.value(prob);
    out.voxels.resize(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) out.voxels[i] = float(vals[i]);
    return out;
}

}  // namespace tokenseg
