#include "tokenseg/decoder.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace tokenseg {

namespace {

void fill_gaussian(Parameter& p, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> gauss(0.0, stddev);
    for (double& v : p.value) v = gauss(rng);
}

Parameter conv_param(const std::string& name, int cout, int cin, std::mt19937_64& rng) {
    Parameter p(name, Shape{cout * cin, 3, 3, 3});
    fill_gaussian(p, rng, std::sqrt(2.0 / (cin * 27.0)));
    return p;
}

}  // namespace

void DecoderParams::init(const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    back_w.clear();
    back_b.clear();
    psi_w1.clear();
    psi_b1.clear();
    psi_w2.clear();
    psi_b2.clear();
    int L = cfg.levels;
    for (int l = 0; l < L; ++l) {
        int cs = cfg.channels[l];
        back_w.emplace_back("dec.back" + std::to_string(l + 1) + ".w",
                            Shape{cs, cfg.token_width, 1, 1});
        back_b.emplace_back("dec.back" + std::to_string(l + 1) + ".b", Shape{cs, 1, 1, 1});
        fill_gaussian(back_w.back(), rng, std::sqrt(2.0 / double(cfg.token_width)));
    }
    int cl = cfg.channels[L - 1];
    phi_w1 = conv_param("dec.phi1.w", cl, cl, rng);
    phi_b1 = Parameter("dec.phi1.b", Shape{cl, 1, 1, 1});
    phi_w2 = conv_param("dec.phi2.w", cl, cl, rng);
    phi_b2 = Parameter("dec.phi2.b", Shape{cl, 1, 1, 1});
    for (int s = L - 1; s >= 1; --s) {
        int cs = cfg.channels[s - 1];
        int cin = cfg.channels[s] + cs;  // upsampled + skip
        std::string tag = "dec.psi" + std::to_string(s);
        psi_w1.push_back(conv_param(tag + ".1.w", cs, cin, rng));
        psi_b1.emplace_back(tag + ".1.b", Shape{cs, 1, 1, 1});
        psi_w2.push_back(conv_param(tag + ".2.w", cs, cs, rng));
        psi_b2.emplace_back(tag + ".2.b", Shape{cs, 1, 1, 1});
    }
    head_w = Parameter("dec.head.w", Shape{1, cfg.channels[0], 1, 1});
    fill_gaussian(head_w, rng, std::sqrt(1.0 / double(cfg.channels[0])));
    head_b = Parameter("dec.head.b", Shape{1, 1, 1, 1});
}

std::vector<Parameter*> DecoderParams::all() {
    std::vector<Parameter*> out;
    for (auto& p : back_w) out.push_back(&p);
    for (auto& p : back_b) out.push_back(&p);
    out.push_back(&phi_w1);
    out.push_back(&phi_b1);
    out.push_back(&phi_w2);
    out.push_back(&phi_b2);
    for (auto& p : psi_w1) out.push_back(&p);
    for (auto& p : psi_b1) out.push_back(&p);
    for (auto& p : psi_w2) out.push_back(&p);
    for (auto& p : psi_b2) out.push_back(&p);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

SparseGrids reproject(Graph& g, NodeId qtokens, const SparseTokenSet& selected,
                      const std::vector<LevelDims>& levels, DecoderParams& params,
                      const EncoderConfig& cfg) {
    SparseGrids out;
    out.sites.resize(levels.size());
    std::vector<std::vector<std::size_t>> columns(levels.size());
    for (const SelectedToken& t : selected) {
        int l = t.level - 1;
        if (l < 0 || l >= int(levels.size()))
            throw std::invalid_argument("reproject: token level out of range");
        const LevelDims& s = levels[l];
        if (t.d >= s.d || t.h >= s.h || t.w >= s.w)
            throw std::invalid_argument("reproject: anchor out of bounds");
        columns[l].push_back(std::size_t(t.pool_index));
        out.sites[l].push_back((std::size_t(t.d) * s.h + t.h) * s.w + t.w);
    }
    for (std::size_t l = 0; l < levels.size(); ++l) {
        Shape grid{cfg.channels[l], levels[l].d, levels[l].h, levels[l].w};
        if (columns[l].empty()) {
            std::vector<double> zeros(grid.count(), 0.0);
            out.grids.push_back(g.input(grid, zeros));
            continue;
        }
        NodeId picked = g.gather_sites(qtokens, columns[l]);
        NodeId bw = g.use(params.back_w[l]);
        NodeId bb = g.use(params.back_b[l]);
        NodeId feats = g.pointwise(picked, bw, bb);
        out.grids.push_back(g.scatter_sites(feats, out.sites[l], grid));
    }
    return out;
}

NodeId refine_coarse(Graph& g, NodeId coarse_grid, DecoderParams& params) {
    NodeId x = g.relu(g.conv3d(coarse_grid, g.use(params.phi_w1), g.use(params.phi_b1), 3, 1));
    return g.relu(g.conv3d(x, g.use(params.phi_w2), g.use(params.phi_b2), 3, 1));
}

NodeId fuse_step(Graph& g, NodeId g_next, NodeId skip, DecoderParams& params,
                 int stage_index) {
    const Shape& ss = g.shape(skip);
    NodeId up = g.upsample2_trilinear(g_next);
    const Shape& us = g.shape(up);
    if (us.d - ss.d > 1 || us.h - ss.h > 1 || us.w - ss.w > 1 || us.d < ss.d ||
        us.h < ss.h || us.w < ss.w)
        throw std::invalid_argument("fuse_step: spatial mismatch " + us.str() + " vs " +
                                    ss.str());
    up = g.crop_spatial(up, ss.d, ss.h, ss.w);
    NodeId cat = g.concat_channels(up, skip);
    NodeId x = g.relu(g.conv3d(cat, g.use(params.psi_w1[stage_index]),
                               g.use(params.psi_b1[stage_index]), 3, 1));
    return g.relu(g.conv3d(x, g.use(params.psi_w2[stage_index]),
                           g.use(params.psi_b2[stage_index]), 3, 1));
}

NodeId predict_mask(Graph& g, NodeId g1, DecoderParams& params, const Dims& out_dims) {
    NodeId logits = g.pointwise(g1, g.use(params.head_w), g.use(params.head_b));
    NodeId up = g.upsample2_trilinear(logits);
    const Shape& us = g.shape(up);
    int d = int(out_dims.d), h = int(out_dims.h), w = int(out_dims.w);
    if (us.d > d || us.h > h || us.w > w)
        up = g.crop_spatial(up, std::min(us.d, d), std::min(us.h, h), std::min(us.w, w));
    const Shape& cs = g.shape(up);
    if (cs.d < d || cs.h < h || cs.w < w) up = g.pad_replicate_to(up, d, h, w);
    return g.sigmoid(up);
}

NodeId decode(Graph& g, const SparseGrids& grids, const std::vector<NodeId>& enc_levels,
              DecoderParams& params, const Dims& out_dims) {
    int L = int(grids.grids.size());
    NodeId cur = refine_coarse(g, grids.grids[L - 1], params);
    for (int s = L - 1; s >= 1; --s) {
        NodeId skip = enc_levels[s - 1];
        cur = fuse_step(g, cur, skip, params, (L - 1) - s);
    }
    return predict_mask(g, cur, params, out_dims);
}

MaskVolume binarize(const Volume3D& prob, double theta) {
    if (theta < 0.0 || theta > 1.0)
        throw std::invalid_argument("binarize: theta outside [0,1]");
    MaskVolume m;
    m.dims = prob.dims;
    m.labels.resize(prob.voxels.size());
    for (std::size_t i = 0; i < prob.voxels.size(); ++i)
        m.labels[i] = prob.voxels[i] >= theta ? 1 : 0;
    return m;
}

}  // namespace tokenseg
