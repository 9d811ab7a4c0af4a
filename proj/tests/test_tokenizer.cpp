#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "tokenseg/tokenizer.hpp"

using namespace tokenseg;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

// A tiny pool over a 2-level pyramid for selection tests.
struct Fixture {
    Graph g;
    CandidatePool pool;
    QuantizedPool q;
    ScoreRecord scores;
    std::vector<double> qtokens;
    int n = 0;

    explicit Fixture(std::uint64_t seed, std::vector<int> layout = {12, 4},
                     LevelDims fine = {4, 4, 4}, LevelDims coarse = {2, 2, 2}) {
        std::mt19937_64 rng(seed);
        std::vector<LevelDims> dims{fine, coarse};
        pool.token_width = 4;
        pool.layout = layout;
        for (int l = 0; l < 2; ++l) {
            auto cells = make_cells(dims[std::size_t(l)], layout[std::size_t(l)]);
            for (const Cell& c : cells)
                pool.anchors.push_back({l + 1, c.d0, c.h0, c.w0, c});
            pool.cells.push_back(std::move(cells));
        }
        n = pool.size();
        auto feats = random_values(std::size_t(4) * n, rng);
        pool.tokens = g.input({4, n, 1, 1}, feats);

        auto book = random_values(4 * 8, rng);
        q = quantize(g.value(pool.tokens), 4, n, book, 8);
        qtokens.resize(std::size_t(4) * n);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < 4; ++c)
                qtokens[std::size_t(c) * n + i] = book[std::size_t(q.codes[std::size_t(i)]) * 4 + c];

        auto boundary = random_values(std::size_t(n), rng);
        for (double& b : boundary) b = std::abs(b);
        auto freq = prototype_freq(q, 8);
        scores = score_pool(qtokens, 4, n, boundary, q.codes, freq);
    }
};

}  // namespace

TEST_CASE("quantize: exact row match and tie rule") {
    // codebook rows 0..4 in 2-D
    std::vector<double> book{0, 0, 1, 0, 2, 0, 3, 3, 1, 0};  // rows 1 and 4 equal
    std::vector<double> tokens{3, 1, 3, 0};                  // columns: (3,3), (1,0)
    auto q = quantize(tokens, 2, 2, book, 5);
    CHECK(q.codes[0] == 3);
    CHECK(q.distance[0] == doctest::Approx(0.0));
    CHECK(q.codes[1] == 1);  // equidistant rows 1 and 4 -> lowest index
    CHECK(q.distance[1] == doctest::Approx(0.0));
}

TEST_CASE("quantize matches the exhaustive oracle on 200 random instances") {
    std::mt19937_64 rng(17);
    for (int it = 0; it < 200; ++it) {
        int width = int(rng() % 6 + 1);
        int count = int(rng() % 400 + 1);
        int protos = int(rng() % 512 + 1);
        auto tokens = random_values(std::size_t(width) * count, rng);
        auto book = random_values(std::size_t(protos) * width, rng);
        auto q = quantize(tokens, width, count, book, protos);
        for (int i = 0; i < count; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int m = 0; m < protos; ++m) {
                double d2 = 0;
                for (int c = 0; c < width; ++c) {
                    double diff = tokens[std::size_t(c) * count + i] -
                                  book[std::size_t(m) * width + c];
                    d2 += diff * diff;
                }
                if (d2 < best_d) {
                    best_d = d2;
                    best = m;
                }
            }
            REQUIRE(q.codes[std::size_t(i)] == best);
            REQUIRE(q.distance[std::size_t(i)] ==
                    doctest::Approx(std::sqrt(best_d)).epsilon(1e-12));
        }
    }
}

TEST_CASE("prototype_freq sums to N and matches a histogram oracle") {
    QuantizedPool q;
    q.codes = {0, 0, 0, 0};
    auto f = prototype_freq(q, 3);
    CHECK(f == std::vector<int>{4, 0, 0});

    q.codes.assign(400, 0);
    for (int i = 0; i < 400; ++i) q.codes[std::size_t(i)] = i % 8;
    f = prototype_freq(q, 8);
    for (int c : f) CHECK(c == 50);

    std::mt19937_64 rng(19);
    q.codes.clear();
    std::vector<int> hist(16, 0);
    for (int i = 0; i < 333; ++i) {
        int c = int(rng() % 16);
        q.codes.push_back(c);
        ++hist[std::size_t(c)];
    }
    CHECK(prototype_freq(q, 16) == hist);
}

TEST_CASE("score formula, zeros and the worked example") {
    CHECK(score(2.0, 0.5, 400, 400) == 0.0);   // freq = N
    CHECK(score(0.0, 0.9, 1, 400) == 0.0);     // zero norm
    CHECK(score(2.0, 0.5, 1, 400) == doctest::Approx(std::log(400.0)).epsilon(1e-12));
    CHECK(score(2.0, 0.5, 1, 400) == doctest::Approx(5.9915).epsilon(1e-4));
    CHECK_THROWS(score(1.0, 1.0, 0, 400));
    CHECK_THROWS(score(1.0, 1.0, 401, 400));
}

TEST_CASE("boundary proximity: uniform volume scores 0, step edge scores 1") {
    Volume3D v;
    v.dims = {4, 4, 4};
    v.voxels.assign(64, 0.5f);
    std::vector<LevelDims> levels{{4, 4, 4}};
    std::vector<std::vector<Cell>> cells{make_cells({4, 4, 4}, 8)};
    auto pb = boundary_proximity(v, levels, cells);
    for (double x : pb) CHECK(x == 0.0);

    // off-center planar step along d: cells touching the edge hit 1.0 after
    // per-level min-max normalization, the far cells stay at 0
    for (std::uint32_t d = 0; d < 4; ++d)
        for (std::uint32_t h = 0; h < 4; ++h)
            for (std::uint32_t w = 0; w < 4; ++w)
                v.at(d, h, w) = d < 1 ? 0.f : 1.f;
    pb = boundary_proximity(v, levels, cells);
    double mx = *std::max_element(pb.begin(), pb.end());
    CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("boundary proximity agrees with an independent reimplementation") {
    std::mt19937_64 rng(23);
    Volume3D v;
    v.dims = {8, 8, 8};
    v.voxels.resize(512);
    for (float& x : v.voxels) x = float(rng() % 1000) / 1000.f;
    std::vector<LevelDims> levels{{4, 4, 4}, {2, 2, 2}};
    std::vector<std::vector<Cell>> cells{make_cells({4, 4, 4}, 8), make_cells({2, 2, 2}, 4)};
    auto got = boundary_proximity(v, levels, cells);

    // oracle: block-average to the level, central differences with clamped
    // indices (halved at the edges), mean over the cell, min-max per level
    std::size_t off = 0;
    std::vector<double> expect;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const LevelDims& ld = levels[l];
        int bd = int(v.dims.d) / ld.d, bh = int(v.dims.h) / ld.h, bw = int(v.dims.w) / ld.w;
        std::vector<double> down(ld.count());
        for (int d = 0; d < ld.d; ++d)
            for (int h = 0; h < ld.h; ++h)
                for (int w = 0; w < ld.w; ++w) {
                    double acc = 0;
                    for (int dd = 0; dd < bd; ++dd)
                        for (int hh = 0; hh < bh; ++hh)
                            for (int ww = 0; ww < bw; ++ww)
                                acc += v.at(std::uint32_t(d * bd + dd),
                                            std::uint32_t(h * bh + hh),
                                            std::uint32_t(w * bw + ww));
                    down[(std::size_t(d) * ld.h + h) * ld.w + w] = acc / double(bd * bh * bw);
                }
        auto at = [&](int d, int h, int w) {
            d = std::clamp(d, 0, ld.d - 1);
            h = std::clamp(h, 0, ld.h - 1);
            w = std::clamp(w, 0, ld.w - 1);
            return down[(std::size_t(d) * ld.h + h) * ld.w + w];
        };
        std::vector<double> mag(ld.count());
        for (int d = 0; d < ld.d; ++d)
            for (int h = 0; h < ld.h; ++h)
                for (int w = 0; w < ld.w; ++w) {
                    double gd = (at(d + 1, h, w) - at(d - 1, h, w)) / 2.0;
                    double gh = (at(d, h + 1, w) - at(d, h - 1, w)) / 2.0;
                    double gw = (at(d, h, w + 1) - at(d, h, w - 1)) / 2.0;
                    mag[(std::size_t(d) * ld.h + h) * ld.w + w] =
                        std::sqrt(gd * gd + gh * gh + gw * gw);
                }
        std::vector<double> raw;
        for (const Cell& c : cells[l]) {
            double acc = 0;
            for (int d = c.d0; d < c.d1; ++d)
                for (int h = c.h0; h < c.h1; ++h)
                    for (int w = c.w0; w < c.w1; ++w)
                        acc += mag[(std::size_t(d) * ld.h + h) * ld.w + w];
            raw.push_back(acc / double(c.volume()));
        }
        double mn = *std::min_element(raw.begin(), raw.end());
        double mx = *std::max_element(raw.begin(), raw.end());
        for (double r : raw) expect.push_back(mx > mn ? (r - mn) / (mx - mn) : 0.0);
        off += raw.size();
    }
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("select_topk: K=N, size, tie rule and scale invariance") {
    Fixture fx(31);
    auto all = select_topk(fx.pool, fx.q, fx.scores, fx.n);
    CHECK(int(all.size()) == fx.n);
    for (std::size_t i = 1; i < all.size(); ++i) {
        CHECK(all[i - 1].score >= all[i].score);
        if (all[i - 1].score == all[i].score)
            CHECK(all[i - 1].pool_index < all[i].pool_index);
    }

    auto top = select_topk(fx.pool, fx.q, fx.scores, 5);
    CHECK(top.size() == 5);
    CHECK_THROWS(select_topk(fx.pool, fx.q, fx.scores, 0));
    CHECK_THROWS(select_topk(fx.pool, fx.q, fx.scores, fx.n + 1));

    ScoreRecord scaled = fx.scores;
    for (double& s : scaled.total) s *= 7.0;
    auto top7 = select_topk(fx.pool, fx.q, scaled, 5);
    std::set<int> a, b;
    for (const auto& t : top) a.insert(t.pool_index);
    for (const auto& t : top7) b.insert(t.pool_index);
    CHECK(a == b);
}

TEST_CASE("every strategy returns exactly K distinct pool entries") {
    Fixture fx(37);
    for (auto s : {SelectStrategy::Random, SelectStrategy::UniformGrid,
                   SelectStrategy::Hierarchical, SelectStrategy::Boundary,
                   SelectStrategy::VQ, SelectStrategy::Combined}) {
        auto sel = select_strategy(fx.pool, fx.q, fx.scores, s, 7, 123);
        CHECK(sel.size() == 7);
        std::set<int> seen;
        for (const auto& t : sel) CHECK(seen.insert(t.pool_index).second);
    }
}

TEST_CASE("combined equals select_topk; random is seed-deterministic") {
    Fixture fx(41);
    auto combined = select_strategy(fx.pool, fx.q, fx.scores, SelectStrategy::Combined, 6, 5);
    auto topk = select_topk(fx.pool, fx.q, fx.scores, 6);
    REQUIRE(combined.size() == topk.size());
    for (std::size_t i = 0; i < topk.size(); ++i)
        CHECK(combined[i].pool_index == topk[i].pool_index);

    auto r1 = select_strategy(fx.pool, fx.q, fx.scores, SelectStrategy::Random, 6, 99);
    auto r2 = select_strategy(fx.pool, fx.q, fx.scores, SelectStrategy::Random, 6, 99);
    REQUIRE(r1.size() == r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i].pool_index == r2[i].pool_index);
}

TEST_CASE("hierarchical quotas follow largest-remainder rounding") {
    // layout (256, 96, 36, 12), K=100 -> (64, 24, 9, 3)
    std::mt19937_64 rng(43);
    CandidatePool pool;
    pool.token_width = 2;
    pool.layout = {256, 96, 36, 12};
    std::vector<LevelDims> dims{{16, 16, 16}, {16, 16, 16}, {6, 6, 6}, {4, 4, 4}};
    for (int l = 0; l < 4; ++l) {
        auto cells = make_cells(dims[std::size_t(l)], pool.layout[std::size_t(l)]);
        for (const Cell& c : cells) pool.anchors.push_back({l + 1, c.d0, c.h0, c.w0, c});
        pool.cells.push_back(std::move(cells));
    }
    int n = pool.size();
    REQUIRE(n == 400);
    Graph g;
    pool.tokens = g.input({2, n, 1, 1}, random_values(std::size_t(2) * n, rng));

    QuantizedPool q;
    ScoreRecord scores;
    q.codes.assign(std::size_t(n), 0);
    q.distance.assign(std::size_t(n), 0.0);
    scores.total = random_values(std::size_t(n), rng);
    for (double& s : scores.total) s = std::abs(s);
    scores.norm = scores.boundary = scores.diversity = scores.total;

    auto sel = select_strategy(pool, q, scores, SelectStrategy::Hierarchical, 100, 7);
    REQUIRE(sel.size() == 100);
    std::vector<int> per_level(5, 0);
    for (const auto& t : sel) ++per_level[std::size_t(t.level)];
    CHECK(per_level[1] == 64);
    CHECK(per_level[2] == 24);
    CHECK(per_level[3] == 9);
    CHECK(per_level[4] == 3);
}

TEST_CASE("strategy names parse and round trip") {
    for (const char* name :
         {"random", "uniform-grid", "hierarchical", "boundary", "vq", "combined"})
        CHECK(strategy_name(parse_strategy(name)) == name);
    CHECK_THROWS(parse_strategy("attention"));
}

TEST_CASE("codebook init hits a target norm on average") {
    Parameter book("codebook", {64, 16, 1, 1});
    init_codebook(book, 3.0, 71);
    double mean_norm = 0;
    for (int m = 0; m < 64; ++m) {
        double n2 = 0;
        for (int c = 0; c < 16; ++c) {
            double v = book.value[std::size_t(m) * 16 + c];
            n2 += v * v;
        }
        mean_norm += std::sqrt(n2);
    }
    mean_norm /= 64.0;
    CHECK(mean_norm > 1.5);
    CHECK(mean_norm < 4.5);
}
