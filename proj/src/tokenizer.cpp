#include "tokenseg/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tokenseg {

QuantizedPool quantize(std::span<const double> tokens, int width, int count,
                       std::span<const double> codebook, int prototypes) {
    if (tokens.size() != std::size_t(width) * count)
        throw std::invalid_argument("quantize: token buffer size mismatch");
    if (codebook.size() != std::size_t(prototypes) * width)
        throw std::invalid_argument("quantize: codebook width mismatch");
    QuantizedPool out;
    out.codes.resize(count);
    out.distance.resize(count);
    for (int j = 0; j < count; ++j) {
        double best = std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (int k = 0; k < prototypes; ++k) {
            double d2 = 0.0;
            const double* row = codebook.data() + std::size_t(k) * width;
            for (int c = 0; c < width; ++c) {
                double diff = tokens[std::size_t(c) * count + j] - row[c];
                d2 += diff * diff;
            }
            if (d2 < best) {
                best = d2;
                best_k = k;
            }
        }
        out.codes[j] = best_k;
        out.distance[j] = std::sqrt(best);
    }
    return out;
}

std::vector<int> prototype_freq(const QuantizedPool& q, int prototypes) {
    std::vector<int> freq(prototypes, 0);
    for (int k : q.codes) {
        if (k < 0 || k >= prototypes)
            throw std::invalid_argument("prototype_freq: code out of range");
        ++freq[k];
    }
    return freq;
}

namespace {

std::vector<double> downsample_block_mean(const Volume3D& v, const LevelDims& out) {
    std::vector<double> res(out.count());
    int D = int(v.dims.d), H = int(v.dims.h), W = int(v.dims.w);
    auto bounds = [](int dim, int n, int i) {
        return std::pair<int, int>(i * dim / n, (i + 1) * dim / n);
    };
    for (int d = 0; d < out.d; ++d) {
        auto [d0, d1] = bounds(D, out.d, d);
        for (int h = 0; h < out.h; ++h) {
            auto [h0, h1] = bounds(H, out.h, h);
            for (int w = 0; w < out.w; ++w) {
                auto [w0, w1] = bounds(W, out.w, w);
                double acc = 0.0;
                for (int id = d0; id < d1; ++id)
                    for (int ih = h0; ih < h1; ++ih)
                        for (int iw = w0; iw < w1; ++iw)
                            acc += v.at(std::uint32_t(id), std::uint32_t(ih),
                                        std::uint32_t(iw));
                res[(std::size_t(d) * out.h + h) * out.w + w] =
                    acc / (double(d1 - d0) * (h1 - h0) * (w1 - w0));
            }
        }
    }
    return res;
}

std::vector<double> gradient_magnitude(const std::vector<double>& f, const LevelDims& s) {
    std::vector<double> g(f.size());
    auto at = [&](int d, int h, int w) {
        d = std::clamp(d, 0, s.d - 1);
        h = std::clamp(h, 0, s.h - 1);
        w = std::clamp(w, 0, s.w - 1);
        return f[(std::size_t(d) * s.h + h) * s.w + w];
    };
    for (int d = 0; d < s.d; ++d)
        for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w) {
                double gd = (at(d + 1, h, w) - at(d - 1, h, w)) * 0.5;
                double gh = (at(d, h + 1, w) - at(d, h - 1, w)) * 0.5;
                double gw = (at(d, h, w + 1) - at(d, h, w - 1)) * 0.5;
                g[(std::size_t(d) * s.h + h) * s.w + w] =
                    std::sqrt(gd * gd + gh * gh + gw * gw);
            }
    return g;
}

}  // namespace

std::vector<double> boundary_proximity(const Volume3D& normalized,
                                       const std::vector<LevelDims>& levels,
                                       const std::vector<std::vector<Cell>>& cells) {
    std::vector<double> out;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const LevelDims& s = levels[l];
        auto field = downsample_block_mean(normalized, s);
        auto grad = gradient_magnitude(field, s);
        std::vector<double> raw;
        raw.reserve(cells[l].size());
        for (const Cell& c : cells[l]) {
            double acc = 0.0;
            for (int d = c.d0; d < c.d1; ++d)
                for (int h = c.h0; h < c.h1; ++h)
                    for (int w = c.w0; w < c.w1; ++w)
                        acc += grad[(std::size_t(d) * s.h + h) * s.w + w];
            raw.push_back(acc / double(c.volume()));
        }
        double lo = raw.empty() ? 0.0 : *std::min_element(raw.begin(), raw.end());
        double hi = raw.empty() ? 0.0 : *std::max_element(raw.begin(), raw.end());
        for (double r : raw)
            out.push_back(hi > lo ? (r - lo) / (hi - lo) : 0.0);
    }
    return out;
}

double score(double qnorm, double boundary, int freq, int pool_size) {
    if (freq < 1 || freq > pool_size)
        throw std::invalid_argument("score: freq outside [1, N]");
    return qnorm * boundary * std::log(double(pool_size) / double(freq));
}

ScoreRecord score_pool(std::span<const double> qtokens, int width, int count,
                       const std::vector<double>& boundary,
                       const std::vector<int>& codes, const std::vector<int>& freq) {
    ScoreRecord rec;
    rec.norm.resize(count);
    rec.boundary = boundary;
    rec.diversity.resize(count);
    rec.total.resize(count);
    for (int j = 0; j < count; ++j) {
        double n2 = 0.0;
        for (int c = 0; c < width; ++c) {
            double v = qtokens[std::size_t(c) * count + j];
            n2 += v * v;
        }
        rec.norm[j] = std::sqrt(n2);
        rec.diversity[j] = std::log(double(count) / double(freq[codes[j]]));
        rec.total[j] = rec.norm[j] * boundary[j] * rec.diversity[j];
    }
    return rec;
}

SelectStrategy parse_strategy(const std::string& name) {
    if (name == "random") return SelectStrategy::Random;
    if (name == "uniform-grid") return SelectStrategy::UniformGrid;
    if (name == "hierarchical") return SelectStrategy::Hierarchical;
    if (name == "boundary") return SelectStrategy::Boundary;
    if (name == "vq") return SelectStrategy::VQ;
    if (name == "combined") return SelectStrategy::Combined;
    throw std::invalid_argument("unknown selection strategy '" + name + "'");
}

std::string strategy_name(SelectStrategy s) {
    switch (s) {
        case SelectStrategy::Random: return "random";
        case SelectStrategy::UniformGrid: return "uniform-grid";
        case SelectStrategy::Hierarchical: return "hierarchical";
        case SelectStrategy::Boundary: return "boundary";
        case SelectStrategy::VQ: return "vq";
        case SelectStrategy::Combined: return "combined";
    }
    return "?";
}

namespace {

// indices of the k largest keys, ties to the lower index
std::vector<int> topk_indices(const std::vector<double>& keys, int k) {
    std::vector<int> idx(keys.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return keys[a] > keys[b]; });
    idx.resize(k);
    return idx;
}

SparseTokenSet finalize(const CandidatePool& pool, const QuantizedPool& q,
                        const ScoreRecord& scores, std::vector<int> chosen) {
    SparseTokenSet out;
    out.reserve(chosen.size());
    for (int i : chosen) {
        const TokenAnchor& a = pool.anchors[i];
        out.push_back({i, a.level, a.d, a.h, a.w, a.cell, q.codes[i], scores.total[i]});
    }
    std::sort(out.begin(), out.end(), [](const SelectedToken& a, const SelectedToken& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.pool_index < b.pool_index;
    });
    return out;
}

}  // namespace

SparseTokenSet select_topk(const CandidatePool& pool, const QuantizedPool& q,
                           const ScoreRecord& scores, int k) {
    int n = pool.size();
    if (k < 1 || k > n) throw std::invalid_argument("select_topk: K outside [1, N]");
    return finalize(pool, q, scores, topk_indices(scores.total, k));
}

SparseTokenSet select_strategy(const CandidatePool& pool, const QuantizedPool& q,
                               const ScoreRecord& scores, SelectStrategy strategy,
                               int k, std::uint64_t seed) {
    int n = pool.size();
    if (k < 1 || k > n) throw std::invalid_argument("select_strategy: K outside [1, N]");
    std::vector<int> chosen;
    switch (strategy) {
        case SelectStrategy::Combined:
            return select_topk(pool, q, scores, k);
        case SelectStrategy::Random: {
            std::vector<int> idx(n);
            std::iota(idx.begin(), idx.end(), 0);
            std::mt19937_64 rng(seed);
            for (int j = 0; j < k; ++j) {
                std::uniform_int_distribution<int> pick(j, n - 1);
                std::swap(idx[j], idx[pick(rng)]);
            }
            chosen.assign(idx.begin(), idx.begin() + k);
            break;
        }
        case SelectStrategy::UniformGrid: {
            for (int j = 0; j < k; ++j)
                chosen.push_back(int(std::size_t(j) * n / k));
            break;
        }
        case SelectStrategy::Boundary:
            chosen = topk_indices(scores.boundary, k);
            break;
        case SelectStrategy::VQ: {
            std::vector<double> key(n);
            for (int i = 0; i < n; ++i) key[i] = scores.norm[i] * scores.diversity[i];
            chosen = topk_indices(key, k);
            break;
        }
        case SelectStrategy::Hierarchical: {
            // per-level quotas proportional to the layout, largest remainder
            int levels = int(pool.layout.size());
            std::vector<int> quota(levels, 0);
            std::vector<std::pair<double, int>> rem;
            int assigned = 0;
            for (int l = 0; l < levels; ++l) {
                double exact = double(k) * pool.layout[l] / double(n);
                quota[l] = int(std::floor(exact));
                assigned += quota[l];
                rem.push_back({exact - quota[l], l});
            }
            std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (int j = 0; assigned < k; ++j, ++assigned) ++quota[rem[j % levels].second];
            // fill each level's quota by score within the level
            int offset = 0;
            for (int l = 0; l < levels; ++l) {
                int nl = pool.layout[l];
                std::vector<int> idx(nl);
                std::iota(idx.begin(), idx.end(), offset);
                std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
                    return scores.total[a] > scores.total[b];
                });
                int take = std::min(quota[l], nl);
                chosen.insert(chosen.end(), idx.begin(), idx.begin() + take);
                offset += nl;
            }
            // layouts with tiny levels can leave a shortfall; fill by global score
            if (int(chosen.size()) < k) {
                std::vector<bool> used(n, false);
                for (int i : chosen) used[i] = true;
                for (int i : topk_indices(scores.total, n)) {
                    if (int(chosen.size()) == k) break;
                    if (!used[i]) chosen.push_back(i);
                }
            }
            break;
        }
    }
    return finalize(pool, q, scores, std::move(chosen));
}

void init_codebook(Parameter& codebook, double target_norm, std::uint64_t seed) {
    int width = codebook.shape.d;
    double stddev = target_norm / std::sqrt(double(width));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, stddev);
    for (double& v : codebook.value) v = gauss(rng);
}

}  // namespace tokenseg
