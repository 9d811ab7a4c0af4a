#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "tokenseg/graph.hpp"

using namespace tokenseg;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                  double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

// Wraps "build a graph from one input tensor, reduce to a scalar" as a
// grad_check callable.
using Builder = std::function<NodeId(Graph&, NodeId)>;

GradCheckReport check_input_grad(const Shape& s, const Builder& build,
                                 std::vector<double> x, double tol = 1e-4) {
    auto f = [&](std::span<const double> xs, std::vector<double>* grad) {
        Graph g;
        NodeId in = g.input(s, xs);
        NodeId loss = build(g, in);
        if (grad) {
            g.backward(loss);
            grad->assign(g.grad(in).begin(), g.grad(in).end());
        }
        return g.scalar(loss);
    };
    return grad_check(f, std::move(x), tol);
}

}  // namespace

TEST_CASE("identity 1x1x1 conv reproduces the input") {
    std::mt19937_64 rng(1);
    Shape s{1, 3, 3, 3};
    auto x = random_values(s.count(), rng);
    Graph g;
    NodeId in = g.input(s, x);
    NodeId k = g.input({1, 1, 1, 1}, std::vector<double>{1.0});
    NodeId b = g.input({1, 1, 1, 1}, std::vector<double>{0.0});
    NodeId out = g.conv3d(in, k, b, 1, 1);
    auto ov = g.value(out);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(ov[i] == x[i]);
}

TEST_CASE("3x3x3 all-ones kernel on constant input counts the window") {
    Shape s{1, 5, 5, 5};
    std::vector<double> x(s.count(), 1.0);
    Graph g;
    NodeId in = g.input(s, x);
    NodeId k = g.input({1, 3, 3, 3}, std::vector<double>(27, 1.0));
    NodeId b = g.input({1, 1, 1, 1}, std::vector<double>{0.0});
    NodeId out = g.conv3d(in, k, b, 3, 1);
    // interior voxel sees the full 27-window; corner sees 8
    auto os = g.shape(out);
    auto ov = g.value(out);
    CHECK(ov[(std::size_t(2) * os.h + 2) * os.w + 2] == doctest::Approx(27.0));
    CHECK(ov[0] == doctest::Approx(8.0));
}

TEST_CASE("stride-2 conv output dims are ceil(dim/2) for dims 1..9") {
    std::mt19937_64 rng(2);
    for (int d = 1; d <= 9; ++d)
        for (int w : {1, 4, 9}) {
            Shape s{1, d, 3, w};
            Graph g;
            NodeId in = g.input(s, random_values(s.count(), rng));
            NodeId k = g.input({1, 3, 3, 3}, random_values(27, rng));
            NodeId b = g.input({1, 1, 1, 1}, random_values(1, rng));
            NodeId out = g.conv3d(in, k, b, 3, 2);
            CHECK(g.shape(out).d == (d + 1) / 2);
            CHECK(g.shape(out).h == 2);
            CHECK(g.shape(out).w == (w + 1) / 2);
        }
}

TEST_CASE("avg_pool3d identity cell and hand-computed means") {
    std::mt19937_64 rng(3);
    Shape s{2, 4, 4, 4};
    auto x = random_values(s.count(), rng);
    Graph g;
    NodeId in = g.input(s, x);
    NodeId same = g.avg_pool3d(in, 1, 1, 1);
    auto sv = g.value(same);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(sv[i] == x[i]);

    NodeId pooled = g.avg_pool3d(in, 2, 2, 2);
    CHECK(g.shape(pooled) == Shape{2, 2, 2, 2});
    // hand-compute the (c=1, 0,0,0) cell mean
    double acc = 0;
    for (int d = 0; d < 2; ++d)
        for (int h = 0; h < 2; ++h)
            for (int w = 0; w < 2; ++w) acc += x[((std::size_t(1) * 4 + d) * 4 + h) * 4 + w];
    CHECK(g.value(pooled)[8] == doctest::Approx(acc / 8.0).epsilon(1e-12));
}

TEST_CASE("avg_pool3d on constant input is constant") {
    Shape s{1, 3, 5, 6};
    std::vector<double> x(s.count(), 4.25);
    Graph g;
    NodeId out = g.avg_pool3d(g.input(s, x), 2, 2, 2);
    for (double v : g.value(out)) CHECK(v == doctest::Approx(4.25).epsilon(1e-15));
}

TEST_CASE("upsample2 maps constants to constants and halves ramp slope") {
    Shape s{1, 2, 2, 4};
    std::vector<double> c(s.count(), 3.5);
    Graph g;
    NodeId up = g.upsample2_trilinear(g.input(s, c));
    CHECK(g.shape(up) == Shape{1, 4, 4, 8});
    for (double v : g.value(up)) CHECK(v == doctest::Approx(3.5).epsilon(1e-15));

    // ramp along W: interior output steps are half the input step
    std::vector<double> ramp(s.count());
    for (int d = 0; d < 2; ++d)
        for (int h = 0; h < 2; ++h)
            for (int w = 0; w < 4; ++w) ramp[(std::size_t(d) * 2 + h) * 4 + w] = double(w);
    Graph g2;
    NodeId up2 = g2.upsample2_trilinear(g2.input(s, ramp));
    auto v = g2.value(up2);
    // row d=0,h=0 of the output; align-corners-false interior slope = 0.5
    for (int w = 2; w < 6; ++w) CHECK(v[w] - v[w - 1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("sigmoid, relu, concat basics") {
    Graph g;
    NodeId z = g.input({1, 1, 1, 1}, std::vector<double>{0.0});
    CHECK(g.value(g.sigmoid(z))[0] == doctest::Approx(0.5).epsilon(1e-15));

    Shape sa{2, 1, 1, 2}, sb{3, 1, 1, 2};
    std::vector<double> a{1, 2, 3, 4}, b{5, 6, 7, 8, 9, 10};
    NodeId cat = g.concat_channels(g.input(sa, a), g.input(sb, b));
    CHECK(g.shape(cat) == Shape{5, 1, 1, 2});
    auto cv = g.value(cat);
    for (int i = 0; i < 4; ++i) CHECK(cv[i] == a[std::size_t(i)]);
    for (int i = 0; i < 6; ++i) CHECK(cv[4 + i] == b[std::size_t(i)]);

    NodeId neg = g.input({1, 1, 1, 2}, std::vector<double>{-1.0, 2.0});
    auto rv = g.value(g.relu(neg));
    CHECK(rv[0] == 0.0);
    CHECK(rv[1] == 2.0);
}

TEST_CASE("backward of sum is ones; backward of sum(x^2)/2 is x") {
    std::mt19937_64 rng(5);
    Shape s{2, 2, 2, 2};
    auto x = random_values(s.count(), rng);
    {
        Graph g;
        NodeId in = g.input(s, x);
        g.backward(g.sum(in));
        for (double v : g.grad(in)) CHECK(v == 1.0);
    }
    {
        Graph g;
        NodeId in = g.input(s, x);
        g.backward(g.scale(g.sum(g.mul(in, in)), 0.5));
        auto gr = g.grad(in);
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK(gr[i] == doctest::Approx(x[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward on a non-scalar node throws") {
    Graph g;
    NodeId in = g.input({1, 1, 1, 2}, std::vector<double>{1.0, 2.0});
    CHECK_THROWS(g.backward(in));
}

TEST_CASE("grad_check is near machine epsilon on linear maps") {
    std::mt19937_64 rng(6);
    auto rep = check_input_grad({1, 2, 2, 2},
                                [](Graph& g, NodeId in) { return g.sum(g.scale(in, 3.0)); },
                                random_values(8, rng), 1e-6);
    CHECK(rep.pass);
}

TEST_CASE("grad_check passes sigmoid-of-sum and fails a sign flip") {
    std::mt19937_64 rng(7);
    auto x = random_values(8, rng);
    auto good = [&](std::span<const double> xs, std::vector<double>* grad) {
        Graph g;
        NodeId in = g.input({1, 2, 2, 2}, xs);
        NodeId loss = g.sigmoid(g.sum(in));
        if (grad) {
            g.backward(loss);
            grad->assign(g.grad(in).begin(), g.grad(in).end());
        }
        return g.scalar(loss);
    };
    CHECK(grad_check(good, x, 1e-4).pass);

    auto flipped = [&](std::span<const double> xs, std::vector<double>* grad) {
        double v = good(xs, grad);
        if (grad)
            for (double& gje : *grad) gje = -gje;
        return v;
    };
    CHECK(!grad_check(flipped, x, 1e-4).pass);
}

TEST_CASE("every kernel passes finite-difference checks on 20+ random shapes") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> cdist(1, 4), sdist(1, 6);
    int instances = 0;
    for (int it = 0; it < 24; ++it) {
        Shape s{cdist(rng), sdist(rng), sdist(rng), sdist(rng)};
        auto x = random_values(s.count(), rng);

        int cout = cdist(rng);
        auto kern = random_values(std::size_t(cout) * s.c * 27, rng);
        auto bias = random_values(std::size_t(cout), rng);
        int stride = 1 + (it % 2);
        auto conv = [&](Graph& g, NodeId in) {
            NodeId k = g.input({cout * s.c, 3, 3, 3}, kern);
            NodeId b = g.input({cout, 1, 1, 1}, bias);
            return g.sum(g.sigmoid(g.conv3d(in, k, b, 3, stride)));
        };
        CHECK(check_input_grad(s, conv, x).pass);

        auto pool = [&](Graph& g, NodeId in) {
            return g.sum(g.sigmoid(g.avg_pool3d(in, 2, 1, 2)));
        };
        CHECK(check_input_grad(s, pool, x).pass);

        auto up = [&](Graph& g, NodeId in) {
            return g.sum(g.sigmoid(g.upsample2_trilinear(in)));
        };
        CHECK(check_input_grad(s, up, x).pass);

        auto pw_w = random_values(std::size_t(cout) * s.c, rng);
        auto pw_b = random_values(std::size_t(cout), rng);
        auto pw = [&](Graph& g, NodeId in) {
            NodeId w = g.input({cout, s.c, 1, 1}, pw_w);
            NodeId b = g.input({cout, 1, 1, 1}, pw_b);
            return g.sum(g.sigmoid(g.pointwise(in, w, b)));
        };
        CHECK(check_input_grad(s, pw, x).pass);
        ++instances;
    }
    CHECK(instances >= 20);
}

TEST_CASE("composite conv-relu-pointwise-sigmoid-BCE graph matches finite differences") {
    std::mt19937_64 rng(9);
    Shape s{1, 4, 4, 4};
    auto x = random_values(s.count(), rng);
    auto kern = random_values(2 * 27, rng);
    auto pw_w = random_values(2, rng);
    std::vector<double> target(s.count());
    for (double& t : target) t = double(rng() & 1);
    auto build = [&](Graph& g, NodeId in) {
        NodeId k = g.input({2, 3, 3, 3}, kern);
        NodeId kb = g.input({2, 1, 1, 1}, std::vector<double>{0.1, -0.2});
        NodeId feats = g.relu(g.conv3d(in, k, kb, 3, 1));
        NodeId w = g.input({1, 2, 1, 1}, pw_w);
        NodeId wb = g.input({1, 1, 1, 1}, std::vector<double>{0.05});
        NodeId prob = g.sigmoid(g.pointwise(feats, w, wb));
        return g.bce_loss(prob, target, 1e-7);
    };
    CHECK(check_input_grad(s, build, x).pass);
}

TEST_CASE("dice and bce losses pass gradient checks") {
    std::mt19937_64 rng(10);
    Shape s{1, 3, 3, 3};
    auto x = random_values(s.count(), rng);
    std::vector<double> target(s.count());
    for (double& t : target) t = double(rng() & 1);

    auto dice = [&](Graph& g, NodeId in) {
        return g.dice_loss(g.sigmoid(in), target, 1e-5);
    };
    CHECK(check_input_grad(s, dice, x).pass);

    auto bce = [&](Graph& g, NodeId in) {
        return g.bce_loss(g.sigmoid(in), target, 1e-7);
    };
    CHECK(check_input_grad(s, bce, x).pass);
}

TEST_CASE("vq_lookup passes gradients straight through") {
    std::mt19937_64 rng(11);
    int width = 3, count = 4, protos = 5;
    auto tokens = random_values(std::size_t(width) * count, rng);
    auto book = random_values(std::size_t(protos) * width, rng);
    std::vector<int> codes{2, 0, 4, 2};
    auto weights = random_values(std::size_t(width) * count, rng);

    Graph g;
    NodeId t = g.input({width, count, 1, 1}, tokens);
    NodeId cb = g.input({protos, width, 1, 1}, book);
    NodeId q = g.vq_lookup(t, cb, codes);
    // downstream scalar: sum(weights * q)
    NodeId wnode = g.input({width, count, 1, 1}, weights);
    g.backward(g.sum(g.mul(q, wnode)));
    auto tg = g.grad(t);
    // straight-through: dL/dt == dL/dq == weights, element-wise
    for (std::size_t i = 0; i < weights.size(); ++i)
        CHECK(tg[i] == doctest::Approx(weights[i]).epsilon(1e-12));
    // and the quantized values really are the selected codebook rows
    auto qv = g.value(q);
    for (int i = 0; i < count; ++i)
        for (int c = 0; c < width; ++c)
            CHECK(qv[std::size_t(c) * count + i] ==
                  book[std::size_t(codes[std::size_t(i)]) * width + c]);
}

TEST_CASE("vq_penalty value and gradient split") {
    // one token at distance d from its prototype: loss = (1 + beta) d^2 / N
    Graph g;
    std::vector<double> token{1.0, 2.0};
    std::vector<double> book{1.0, 5.0};  // one prototype, distance 3 along dim 2
    NodeId t = g.input({2, 1, 1, 1}, token);
    NodeId cb = g.input({1, 2, 1, 1}, book);
    NodeId pen = g.vq_penalty(t, cb, {0}, 0.25);
    CHECK(g.scalar(pen) == doctest::Approx(1.25 * 9.0).epsilon(1e-12));
    g.backward(pen);
    // tokens get only the commitment term: 2*beta*(t - q)/N
    CHECK(g.grad(t)[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(g.grad(t)[1] == doctest::Approx(2 * 0.25 * (2.0 - 5.0)).epsilon(1e-12));
    // codebook gets only the embedding term: 2*(q - t)/N
    CHECK(g.grad(cb)[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(g.grad(cb)[1] == doctest::Approx(2 * (5.0 - 2.0)).epsilon(1e-12));
}

TEST_CASE("vq_penalty is zero with zero gradients at the fixed point") {
    std::mt19937_64 rng(12);
    auto vals = random_values(6, rng);
    Graph g;
    NodeId t = g.input({3, 2, 1, 1},
                       std::vector<double>{vals[0], vals[3], vals[1], vals[4], vals[2], vals[5]});
    NodeId cb = g.input({2, 3, 1, 1},
                        std::vector<double>{vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]});
    NodeId pen = g.vq_penalty(t, cb, {0, 1}, 0.25);
    CHECK(g.scalar(pen) == doctest::Approx(0.0).epsilon(1e-15));
    g.backward(pen);
    for (double v : g.grad(t)) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
    for (double v : g.grad(cb)) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("unreachable parameters keep zero gradients") {
    Parameter used("used", {1, 1, 1, 1});
    Parameter unused("unused", {1, 1, 1, 1});
    used.value = {2.0};
    unused.value = {3.0};
    Graph g;
    NodeId u = g.use(used);
    g.use(unused);
    g.backward(g.sum(u));
    CHECK(used.grad[0] == 1.0);
    CHECK(unused.grad[0] == 0.0);
}
