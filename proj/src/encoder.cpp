#include "tokenseg/encoder.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace tokenseg {

namespace {

void fill_gaussian(Parameter& p, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> gauss(0.0, stddev);
    for (double& v : p.value) v = gauss(rng);
}

}  // namespace

void EncoderParams::init(const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    conv_w.clear();
    conv_b.clear();
    proj_w.clear();
    proj_b.clear();
    int cin = 1;
    for (int l = 0; l < cfg.levels; ++l) {
        int cout = cfg.channels[l];
        conv_w.emplace_back("enc.conv" + std::to_string(l + 1) + ".w",
                            Shape{cout * cin, 3, 3, 3});
        conv_b.emplace_back("enc.conv" + std::to_string(l + 1) + ".b",
                            Shape{cout, 1, 1, 1});
        fill_gaussian(conv_w.back(), rng, std::sqrt(2.0 / (cin * 27.0)));
        proj_w.emplace_back("enc.proj" + std::to_string(l + 1) + ".w",
                            Shape{cfg.token_width, cout, 1, 1});
        proj_b.emplace_back("enc.proj" + std::to_string(l + 1) + ".b",
                            Shape{cfg.token_width, 1, 1, 1});
        fill_gaussian(proj_w.back(), rng, std::sqrt(2.0 / double(cout)));
        cin = cout;
    }
}

std::vector<Parameter*> EncoderParams::all() {
    std::vector<Parameter*> out;
    for (auto& p : conv_w) out.push_back(&p);
    for (auto& p : conv_b) out.push_back(&p);
    for (auto& p : proj_w) out.push_back(&p);
    for (auto& p : proj_b) out.push_back(&p);
    return out;
}

std::vector<LevelDims> pyramid_dims(const Dims& in, int levels) {
    int min_dim = 1 << levels;
    if (int(in.d) < min_dim || int(in.h) < min_dim || int(in.w) < min_dim)
        throw std::invalid_argument("pyramid_dims: volume smaller than 2^" +
                                    std::to_string(levels) + " per dim");
    std::vector<LevelDims> out;
    int d = int(in.d), h = int(in.h), w = int(in.w);
    for (int l = 0; l < levels; ++l) {
        d /= 2;
        h /= 2;
        w /= 2;
        out.push_back({d, h, w});
    }
    return out;
}

namespace {

struct FactorTriple {
    int nd = 0, nh = 0, nw = 0;
    double score = 0.0;
};

bool best_factors(const LevelDims& dims, int count, FactorTriple& best) {
    double total = double(dims.count());
    double cube = std::cbrt(double(count) / total);
    bool found = false;
    for (int nd = 1; nd <= dims.d && nd <= count; ++nd) {
        if (count % nd != 0) continue;
        int rest = count / nd;
        for (int nh = 1; nh <= dims.h && nh <= rest; ++nh) {
            if (rest % nh != 0) continue;
            int nw = rest / nh;
            if (nw > dims.w) continue;
            double sd = std::log(double(nd)) - std::log(dims.d * cube);
            double sh = std::log(double(nh)) - std::log(dims.h * cube);
            double sw = std::log(double(nw)) - std::log(dims.w * cube);
            double score = sd * sd + sh * sh + sw * sw;
            if (!found || score < best.score) {
                best = {nd, nh, nw, score};
                found = true;
            }
        }
    }
    return found;
}

}  // namespace

bool layout_feasible(const LevelDims& dims, int count) {
    FactorTriple t;
    return count >= 1 && best_factors(dims, count, t);
}

std::vector<Cell> make_cells(const LevelDims& dims, int count) {
    FactorTriple t;
    if (count < 1 || !best_factors(dims, count, t))
        throw std::invalid_argument("make_cells: cannot partition (" +
                                    std::to_string(dims.d) + "," + std::to_string(dims.h) +
                                    "," + std::to_string(dims.w) + ") into " +
                                    std::to_string(count) + " cells");
    auto bounds = [](int dim, int n, int i) {
        int base = dim / n;
        int lo = i * base;
        int hi = (i == n - 1) ? dim : (i + 1) * base;
        return std::pair<int, int>(lo, hi);
    };
    std::vector<Cell> cells;
    cells.reserve(count);
    for (int id = 0; id < t.nd; ++id) {
        auto [d0, d1] = bounds(dims.d, t.nd, id);
        for (int ih = 0; ih < t.nh; ++ih) {
            auto [h0, h1] = bounds(dims.h, t.nh, ih);
            for (int iw = 0; iw < t.nw; ++iw) {
                auto [w0, w1] = bounds(dims.w, t.nw, iw);
                cells.push_back({d0, h0, w0, d1, h1, w1});
            }
        }
    }
    return cells;
}

std::vector<int> resolve_layout(const Dims& in, const EncoderConfig& cfg) {
    auto dims = pyramid_dims(in, cfg.levels);
    const int n = cfg.pool_size();
    const int L = cfg.levels;

    // Per-level counts that the lattice can actually be partitioned into.
    std::vector<std::vector<int>> feasible(L);
    for (int l = 0; l < L; ++l) {
        int cap = int(std::min<std::size_t>(dims[l].count(), std::size_t(n)));
        for (int c = 1; c <= cap; ++c)
            if (layout_feasible(dims[l], c)) feasible[l].push_back(c);
    }

    // Pick one feasible count per level summing to N with the smallest total
    // deviation from the configured split. Small DP: levels x running total.
    constexpr int kInf = std::numeric_limits<int>::max() / 2;
    std::vector<std::vector<int>> cost(L + 1, std::vector<int>(n + 1, kInf));
    std::vector<std::vector<int>> pick(L, std::vector<int>(n + 1, -1));
    cost[L][n] = 0;
    for (int l = L - 1; l >= 0; --l)
        for (int t = 0; t <= n; ++t)
            for (int c : feasible[l]) {
                if (t + c > n) break;
                if (cost[l + 1][t + c] == kInf) continue;
                int v = cost[l + 1][t + c] + std::abs(c - cfg.layout[l]);
                if (v < cost[l][t]) {
                    cost[l][t] = v;
                    pick[l][t] = c;
                }
            }
    if (cost[0][0] == kInf)
        throw std::invalid_argument("resolve_layout: lattice cannot host " +
                                    std::to_string(n) + " tokens");
    std::vector<int> out(L);
    for (int l = 0, t = 0; l < L; ++l) {
        out[l] = pick[l][t];
        t += out[l];
    }
    return out;
}

std::vector<NodeId> build_pyramid(Graph& g, NodeId input, EncoderParams& params,
                                  const EncoderConfig& cfg) {
    const Shape& s = g.shape(input);
    pyramid_dims(Dims{std::uint32_t(s.d), std::uint32_t(s.h), std::uint32_t(s.w)},
                 cfg.levels);
    std::vector<NodeId> levels;
    NodeId cur = input;
    for (int l = 0; l < cfg.levels; ++l) {
        NodeId w = g.use(params.conv_w[l]);
        NodeId b = g.use(params.conv_b[l]);
        cur = g.relu(g.conv3d(cur, w, b, 3, 2));
        levels.push_back(cur);
    }
    return levels;
}

CandidatePool pool_candidates(Graph& g, const std::vector<NodeId>& pyramid,
                              EncoderParams& params, const EncoderConfig& cfg,
                              const std::vector<int>& layout) {
    if (int(layout.size()) != cfg.levels)
        throw std::invalid_argument("pool_candidates: layout size mismatch");
    CandidatePool pool;
    pool.layout = layout;
    pool.token_width = cfg.token_width;
    std::vector<NodeId> projected;
    for (int l = 0; l < cfg.levels; ++l) {
        const Shape& fs = g.shape(pyramid[l]);
        auto cells = make_cells(LevelDims{fs.d, fs.h, fs.w}, layout[l]);
        NodeId pooled = g.pool_cells(pyramid[l], cells);
        pool.level_tokens.push_back(pooled);
        NodeId pw = g.use(params.proj_w[l]);
        NodeId pb = g.use(params.proj_b[l]);
        projected.push_back(g.pointwise(pooled, pw, pb));
        for (const Cell& c : cells)
            pool.anchors.push_back({l + 1, c.d0, c.h0, c.w0, c});
        pool.cells.push_back(std::move(cells));
    }
    pool.tokens = g.concat_sites(projected);
    return pool;
}

}  // namespace tokenseg
