#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace tokenseg {

// Shape of a dense node, (C, D, H, W) row-major with W fastest.
// Token matrices reuse the same layout as (C, N, 1, 1).
// Conv kernels (Cout, Cin, k, k, k) are stored as (Cout*Cin, k, k, k).
struct Shape {
    int c = 1, d = 1, h = 1, w = 1;

    std::size_t spatial() const { return std::size_t(d) * h * w; }
    std::size_t count() const { return std::size_t(c) * spatial(); }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

// Learnable tensor with a persistent gradient accumulator.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, Shape s)
        : name(std::move(n)), shape(s), value(s.count(), 0.0), grad(s.count(), 0.0) {}

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// Half-open cell on a level lattice, used by pooling and boundary scoring.
struct Cell {
    int d0 = 0, h0 = 0, w0 = 0;
    int d1 = 0, h1 = 0, w1 = 0;

    std::size_t volume() const {
        return std::size_t(d1 - d0) * (h1 - h0) * (w1 - w0);
    }
};

using NodeId = std::int32_t;

// Tape-based reverse-mode graph over dense double tensors. One training step
// owns one graph; forward calls append to the tape, backward() replays it in
// reverse. All loop nests are fixed (C, D, H, W order) so forward and backward
// are bitwise deterministic.
class Graph {
public:
    NodeId input(const Shape& s, std::span<const double> values);
    NodeId use(Parameter& p);  // leaf whose backward accumulates into p.grad

    // dense kernels
    NodeId conv3d(NodeId x, NodeId kernel, NodeId bias, int k, int stride);
    NodeId pointwise(NodeId x, NodeId weight, NodeId bias);  // weight (Cout, Cin)
    NodeId avg_pool3d(NodeId x, int cd, int ch, int cw);
    NodeId upsample2_trilinear(NodeId x);
    NodeId concat_channels(NodeId a, NodeId b);
    NodeId relu(NodeId x);
    NodeId sigmoid(NodeId x);

    // elementwise / reductions
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, double s);
    NodeId sum(NodeId x);  // scalar
    NodeId weighted_sum(const std::vector<std::pair<NodeId, double>>& terms);

    // site-indexed ops for token flow; sites index the flattened (D,H,W) lattice
    NodeId pool_cells(NodeId x, const std::vector<Cell>& cells);
    NodeId gather_sites(NodeId x, const std::vector<std::size_t>& sites);
    NodeId scatter_sites(NodeId tokens, const std::vector<std::size_t>& sites,
                         const Shape& grid);
    NodeId concat_sites(const std::vector<NodeId>& parts);
    NodeId crop_spatial(NodeId x, int d, int h, int w);
    NodeId pad_replicate_to(NodeId x, int d, int h, int w);

    // losses (targets are constants)
    NodeId dice_loss(NodeId pred, std::span<const double> target, double eps);
    NodeId bce_loss(NodeId pred, std::span<const double> target, double clamp_delta);

    // vector quantization; codes[i] selects a codebook row for token column i.
    // Lookup passes downstream gradients straight through to the tokens.
    NodeId vq_lookup(NodeId tokens, NodeId codebook, const std::vector<int>& codes);
    // (1/N) sum(||t - sg[q]||^2 + beta ||sg[t] - q||^2); codebook rows receive
    // the embedding-term gradient, tokens the beta-weighted commitment gradient.
    NodeId vq_penalty(NodeId tokens, NodeId codebook, const std::vector<int>& codes,
                      double beta);

    void backward(NodeId loss);

    const Shape& shape(NodeId id) const { return nodes_[id].shape; }
    std::span<const double> value(NodeId id) const { return nodes_[id].val; }
    std::span<const double> grad(NodeId id) const { return nodes_[id].grad; }
    double scalar(NodeId id) const { return nodes_[id].val[0]; }

private:
    struct Node {
        Shape shape;
        std::vector<double> val;
        std::vector<double> grad;
    };

    NodeId alloc(const Shape& s);
    Node& node(NodeId id) { return nodes_[id]; }

    // deque keeps node references stable while the tape grows
    std::deque<Node> nodes_;
    std::vector<std::function<void(Graph&)>> tape_;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
};

// f(x, grad_out) returns the scalar value at x; when grad_out is non-null it
// must also fill the analytic gradient. Central differences with the given
// step, relative error against max(|analytic|, |numeric|, 1).
GradCheckReport grad_check(
    const std::function<double(std::span<const double>, std::vector<double>*)>& f,
    std::vector<double> x, double tol, double step = 1e-4);

}  // namespace tokenseg
