#include "tokenseg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tokenseg {

std::string Shape::str() const {
    return "(" + std::to_string(c) + "," + std::to_string(d) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
}

NodeId Graph::alloc(const Shape& s) {
    Node n;
    n.shape = s;
    n.val.assign(s.count(), 0.0);
    n.grad.assign(s.count(), 0.0);
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size() - 1);
}

NodeId Graph::input(const Shape& s, std::span<const double> values) {
    if (values.size() != s.count())
        throw std::invalid_argument("input: value count does not match shape " + s.str());
    NodeId id = alloc(s);
    std::copy(values.begin(), values.end(), nodes_[id].val.begin());
    return id;
}

NodeId Graph::use(Parameter& p) {
    NodeId id = alloc(p.shape);
    std::copy(p.value.begin(), p.value.end(), nodes_[id].val.begin());
    Parameter* pp = &p;
    tape_.push_back([id, pp](Graph& g) {
        const auto& gr = g.nodes_[id].grad;
        for (std::size_t i = 0; i < gr.size(); ++i) pp->grad[i] += gr[i];
    });
    return id;
}

NodeId Graph::conv3d(NodeId x, NodeId kernel, NodeId bias, int k, int stride) {
    const Shape& xs = nodes_[x].shape;
    const Shape& ks = nodes_[kernel].shape;
    const Shape& bs = nodes_[bias].shape;
    if (k != 1 && k != 3) throw std::invalid_argument("conv3d: kernel size must be 1 or 3");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
    if (ks.d != k || ks.h != k || ks.w != k)
        throw std::invalid_argument("conv3d: kernel shape " + ks.str() + " mismatch");
    int cin = xs.c;
    if (ks.c % cin != 0)
        throw std::invalid_argument("conv3d: kernel channels not a multiple of input channels");
    int cout = ks.c / cin;
    if (bs.count() != std::size_t(cout))
        throw std::invalid_argument("conv3d: bias size mismatch");

    Shape os{cout, (xs.d + stride - 1) / stride, (xs.h + stride - 1) / stride,
             (xs.w + stride - 1) / stride};
    NodeId out = alloc(os);

    const int D = xs.d, H = xs.h, W = xs.w;
    const int p = k / 2;
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    const auto& kv = nodes_[kernel].val;
    const auto& bv = nodes_[bias].val;
    const std::size_t xsp = xs.spatial();

    for (int co = 0; co < cout; ++co)
        for (int od = 0; od < os.d; ++od)
            for (int oh = 0; oh < os.h; ++oh)
                for (int ow = 0; ow < os.w; ++ow) {
                    double acc = bv[co];
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* xc = xv.data() + std::size_t(ci) * xsp;
                        const double* wc =
                            kv.data() + (std::size_t(co) * cin + ci) * k * k * k;
                        for (int kd = 0; kd < k; ++kd) {
                            int id = od * stride + kd - p;
                            if (id < 0 || id >= D) continue;
                            for (int kh = 0; kh < k; ++kh) {
                                int ih = oh * stride + kh - p;
                                if (ih < 0 || ih >= H) continue;
                                for (int kw = 0; kw < k; ++kw) {
                                    int iw = ow * stride + kw - p;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xc[(std::size_t(id) * H + ih) * W + iw] *
                                           wc[(kd * k + kh) * k + kw];
                                }
                            }
                        }
                    }
                    ov[(std::size_t(co) * os.d + od) * os.h * os.w +
                       std::size_t(oh) * os.w + ow] = acc;
                }

    tape_.push_back([x, kernel, bias, out, k, stride, cin, cout](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const Shape& os = g.nodes_[out].shape;
        const int D = xs.d, H = xs.h, W = xs.w;
        const int p = k / 2;
        const auto& go = g.nodes_[out].grad;
        const auto& xv = g.nodes_[x].val;
        const auto& kv = g.nodes_[kernel].val;
        auto& gx = g.nodes_[x].grad;
        auto& gk = g.nodes_[kernel].grad;
        auto& gb = g.nodes_[bias].grad;
        const std::size_t xsp = xs.spatial(), osp = os.spatial();

        for (int co = 0; co < cout; ++co)
            for (int od = 0; od < os.d; ++od)
                for (int oh = 0; oh < os.h; ++oh)
                    for (int ow = 0; ow < os.w; ++ow) {
                        double gout = go[std::size_t(co) * osp +
                                         (std::size_t(od) * os.h + oh) * os.w + ow];
                        if (gout == 0.0) continue;
                        gb[co] += gout;
                        for (int ci = 0; ci < cin; ++ci) {
                            const double* xc = xv.data() + std::size_t(ci) * xsp;
                            double* gxc = gx.data() + std::size_t(ci) * xsp;
                            const std::size_t kbase =
                                (std::size_t(co) * cin + ci) * k * k * k;
                            for (int kd = 0; kd < k; ++kd) {
                                int id = od * stride + kd - p;
                                if (id < 0 || id >= D) continue;
                                for (int kh = 0; kh < k; ++kh) {
                                    int ih = oh * stride + kh - p;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int kw = 0; kw < k; ++kw) {
                                        int iw = ow * stride + kw - p;
                                        if (iw < 0 || iw >= W) continue;
                                        std::size_t xi =
                                            (std::size_t(id) * H + ih) * W + iw;
                                        std::size_t wi = kbase + (kd * k + kh) * k + kw;
                                        gk[wi] += gout * xc[xi];
                                        gxc[xi] += gout * kv[wi];
                                    }
                                }
                            }
                        }
                    }
    });
    return out;
}

NodeId Graph::pointwise(NodeId x, NodeId weight, NodeId bias) {
    const Shape& xs = nodes_[x].shape;
    const Shape& ws = nodes_[weight].shape;
    int cin = xs.c;
    if (ws.d != cin || ws.h != 1 || ws.w != 1)
        throw std::invalid_argument("pointwise: weight shape " + ws.str() +
                                    " incompatible with input channels");
    int cout = ws.c;
    if (nodes_[bias].shape.count() != std::size_t(cout))
        throw std::invalid_argument("pointwise: bias size mismatch");

    Shape os{cout, xs.d, xs.h, xs.w};
    NodeId out = alloc(os);
    const std::size_t S = xs.spatial();
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    const auto& wv = nodes_[weight].val;
    const auto& bv = nodes_[bias].val;
    for (int co = 0; co < cout; ++co)
        for (std::size_t s = 0; s < S; ++s) {
            double acc = bv[co];
            for (int ci = 0; ci < cin; ++ci)
                acc += wv[std::size_t(co) * cin + ci] * xv[std::size_t(ci) * S + s];
            ov[std::size_t(co) * S + s] = acc;
        }

    tape_.push_back([x, weight, bias, out, cin, cout, S](Graph& g) {
        const auto& go = g.nodes_[out].grad;
        const auto& xv = g.nodes_[x].val;
        const auto& wv = g.nodes_[weight].val;
        auto& gx = g.nodes_[x].grad;
        auto& gw = g.nodes_[weight].grad;
        auto& gb = g.nodes_[bias].grad;
        for (int co = 0; co < cout; ++co)
            for (std::size_t s = 0; s < S; ++s) {
                double gout = go[std::size_t(co) * S + s];
                if (gout == 0.0) continue;
                gb[co] += gout;
                for (int ci = 0; ci < cin; ++ci) {
                    gw[std::size_t(co) * cin + ci] += gout * xv[std::size_t(ci) * S + s];
                    gx[std::size_t(ci) * S + s] += gout * wv[std::size_t(co) * cin + ci];
                }
            }
    });
    return out;
}

NodeId Graph::avg_pool3d(NodeId x, int cd, int ch, int cw) {
    const Shape& xs = nodes_[x].shape;
    if (cd < 1 || ch < 1 || cw < 1)
        throw std::invalid_argument("avg_pool3d: zero-size cell");
    Shape os{xs.c, (xs.d + cd - 1) / cd, (xs.h + ch - 1) / ch, (xs.w + cw - 1) / cw};
    NodeId out = alloc(os);
    const double inv = 1.0 / (double(cd) * ch * cw);
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    const std::size_t xsp = xs.spatial(), osp = os.spatial();
    // Cells overhanging the edge are filled by replication (clamped index).
    for (int c = 0; c < xs.c; ++c)
        for (int od = 0; od < os.d; ++od)
            for (int oh = 0; oh < os.h; ++oh)
                for (int ow = 0; ow < os.w; ++ow) {
                    double acc = 0.0;
                    for (int jd = 0; jd < cd; ++jd) {
                        int id = std::min(od * cd + jd, xs.d - 1);
                        for (int jh = 0; jh < ch; ++jh) {
                            int ih = std::min(oh * ch + jh, xs.h - 1);
                            for (int jw = 0; jw < cw; ++jw) {
                                int iw = std::min(ow * cw + jw, xs.w - 1);
                                acc += xv[std::size_t(c) * xsp +
                                          (std::size_t(id) * xs.h + ih) * xs.w + iw];
                            }
                        }
                    }
                    ov[std::size_t(c) * osp + (std::size_t(od) * os.h + oh) * os.w + ow] =
                        acc * inv;
                }

    tape_.push_back([x, out, cd, ch, cw](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const Shape& os = g.nodes_[out].shape;
        const double inv = 1.0 / (double(cd) * ch * cw);
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        const std::size_t xsp = xs.spatial(), osp = os.spatial();
        for (int c = 0; c < xs.c; ++c)
            for (int od = 0; od < os.d; ++od)
                for (int oh = 0; oh < os.h; ++oh)
                    for (int ow = 0; ow < os.w; ++ow) {
                        double gout = go[std::size_t(c) * osp +
                                         (std::size_t(od) * os.h + oh) * os.w + ow] *
                                      inv;
                        if (gout == 0.0) continue;
                        for (int jd = 0; jd < cd; ++jd) {
                            int id = std::min(od * cd + jd, xs.d - 1);
                            for (int jh = 0; jh < ch; ++jh) {
                                int ih = std::min(oh * ch + jh, xs.h - 1);
                                for (int jw = 0; jw < cw; ++jw) {
                                    int iw = std::min(ow * cw + jw, xs.w - 1);
                                    gx[std::size_t(c) * xsp +
                                       (std::size_t(id) * xs.h + ih) * xs.w + iw] += gout;
                                }
                            }
                        }
                    }
    });
    return out;
}

namespace {

// align-corners-false source coordinate for a 2x upsample
inline void lerp_axis(int o, int n_in, int& i0, int& i1, double& t) {
    double src = (o + 0.5) * 0.5 - 0.5;
    double f = std::floor(src);
    t = src - f;
    i0 = std::clamp(int(f), 0, n_in - 1);
    i1 = std::clamp(int(f) + 1, 0, n_in - 1);
}

}  // namespace

NodeId Graph::upsample2_trilinear(NodeId x) {
    const Shape& xs = nodes_[x].shape;
    Shape os{xs.c, xs.d * 2, xs.h * 2, xs.w * 2};
    NodeId out = alloc(os);
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    const std::size_t xsp = xs.spatial(), osp = os.spatial();

    for (int c = 0; c < xs.c; ++c) {
        const double* xc = xv.data() + std::size_t(c) * xsp;
        double* oc = ov.data() + std::size_t(c) * osp;
        for (int od = 0; od < os.d; ++od) {
            int d0, d1; double td;
            lerp_axis(od, xs.d, d0, d1, td);
            for (int oh = 0; oh < os.h; ++oh) {
                int h0, h1; double th;
                lerp_axis(oh, xs.h, h0, h1, th);
                for (int ow = 0; ow < os.w; ++ow) {
                    int w0, w1; double tw;
                    lerp_axis(ow, xs.w, w0, w1, tw);
                    auto at = [&](int d, int h, int w) {
                        return xc[(std::size_t(d) * xs.h + h) * xs.w + w];
                    };
                    double v =
                        (1 - td) * ((1 - th) * ((1 - tw) * at(d0, h0, w0) + tw * at(d0, h0, w1)) +
                                    th * ((1 - tw) * at(d0, h1, w0) + tw * at(d0, h1, w1))) +
                        td * ((1 - th) * ((1 - tw) * at(d1, h0, w0) + tw * at(d1, h0, w1)) +
                              th * ((1 - tw) * at(d1, h1, w0) + tw * at(d1, h1, w1)));
                    oc[(std::size_t(od) * os.h + oh) * os.w + ow] = v;
                }
            }
        }
    }

    tape_.push_back([x, out](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const Shape& os = g.nodes_[out].shape;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        const std::size_t xsp = xs.spatial(), osp = os.spatial();
        for (int c = 0; c < xs.c; ++c) {
            double* gc = gx.data() + std::size_t(c) * xsp;
            const double* oc = go.data() + std::size_t(c) * osp;
            for (int od = 0; od < os.d; ++od) {
                int d0, d1; double td;
                lerp_axis(od, xs.d, d0, d1, td);
                for (int oh = 0; oh < os.h; ++oh) {
                    int h0, h1; double th;
                    lerp_axis(oh, xs.h, h0, h1, th);
                    for (int ow = 0; ow < os.w; ++ow) {
                        int w0, w1; double tw;
                        lerp_axis(ow, xs.w, w0, w1, tw);
                        double gout = oc[(std::size_t(od) * os.h + oh) * os.w + ow];
                        if (gout == 0.0) continue;
                        auto acc = [&](int d, int h, int w, double wgt) {
                            gc[(std::size_t(d) * xs.h + h) * xs.w + w] += gout * wgt;
                        };
                        acc(d0, h0, w0, (1 - td) * (1 - th) * (1 - tw));
                        acc(d0, h0, w1, (1 - td) * (1 - th) * tw);
                        acc(d0, h1, w0, (1 - td) * th * (1 - tw));
                        acc(d0, h1, w1, (1 - td) * th * tw);
                        acc(d1, h0, w0, td * (1 - th) * (1 - tw));
                        acc(d1, h0, w1, td * (1 - th) * tw);
                        acc(d1, h1, w0, td * th * (1 - tw));
                        acc(d1, h1, w1, td * th * tw);
                    }
                }
            }
        }
    });
    return out;
}

NodeId Graph::concat_channels(NodeId a, NodeId b) {
    const Shape& as = nodes_[a].shape;
    const Shape& bs = nodes_[b].shape;
    if (as.d != bs.d || as.h != bs.h || as.w != bs.w)
        throw std::invalid_argument("concat_channels: spatial mismatch " + as.str() +
                                    " vs " + bs.str());
    Shape os{as.c + bs.c, as.d, as.h, as.w};
    NodeId out = alloc(os);
    const std::size_t S = as.spatial();
    auto& ov = nodes_[out].val;
    std::copy(nodes_[a].val.begin(), nodes_[a].val.end(), ov.begin());
    std::copy(nodes_[b].val.begin(), nodes_[b].val.end(),
              ov.begin() + std::ptrdiff_t(as.c * S));

    tape_.push_back([a, b, out, S](Graph& g) {
        const auto& go = g.nodes_[out].grad;
        auto& ga = g.nodes_[a].grad;
        auto& gb = g.nodes_[b].grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[ga.size() + i];
    });
    return out;
}

NodeId Graph::relu(NodeId x) {
    NodeId out = alloc(nodes_[x].shape);
    const auto& xv = nodes_[x].val;
    auto& ov = nodes_[out].val;
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    tape_.push_back([x, out](Graph& g) {
        const auto& xv = g.nodes_[x].val;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        for (std::size_t i = 0; i < xv.size(); ++i)
            if (xv[i] > 0.0) gx[i] += go[i];
    });
    return out;
}

NodeId Graph::sigmoid(NodeId x) {
    NodeId out = alloc(nodes_[x].shape);
    const auto& xv = nodes_[x].val;
    auto& ov = nodes_[out].val;
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    tape_.push_back([x, out](Graph& g) {
        const auto& yv = g.nodes_[out].val;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        for (std::size_t i = 0; i < yv.size(); ++i) gx[i] += go[i] * yv[i] * (1.0 - yv[i]);
    });
    return out;
}

NodeId Graph::add(NodeId a, NodeId b) {
    if (!(nodes_[a].shape == nodes_[b].shape))
        throw std::invalid_argument("add: shape mismatch");
    NodeId out = alloc(nodes_[a].shape);
    const auto& av = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    auto& ov = nodes_[out].val;
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    tape_.push_back([a, b, out](Graph& g) {
        const auto& go = g.nodes_[out].grad;
        auto& ga = g.nodes_[a].grad;
        auto& gb = g.nodes_[b].grad;
        for (std::size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i];
            gb[i] += go[i];
        }
    });
    return out;
}

NodeId Graph::mul(NodeId a, NodeId b) {
    if (!(nodes_[a].shape == nodes_[b].shape))
        throw std::invalid_argument("mul: shape mismatch");
    NodeId out = alloc(nodes_[a].shape);
    const auto& av = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    auto& ov = nodes_[out].val;
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    tape_.push_back([a, b, out](Graph& g) {
        const auto& go = g.nodes_[out].grad;
        const auto& av = g.nodes_[a].val;
        const auto& bv = g.nodes_[b].val;
        auto& ga = g.nodes_[a].grad;
        auto& gb = g.nodes_[b].grad;
        for (std::size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i] * bv[i];
            gb[i] += go[i] * av[i];
        }
    });
    return out;
}

NodeId Graph::scale(NodeId x, double s) {
    NodeId out = alloc(nodes_[x].shape);
    const auto& xv = nodes_[x].val;
    auto& ov = nodes_[out].val;
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * s;
    tape_.push_back([x, out, s](Graph& g) {
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s;
    });
    return out;
}

NodeId Graph::sum(NodeId x) {
    NodeId out = alloc(Shape{});
    const auto& xv = nodes_[x].val;
    double acc = 0.0;
    for (double v : xv) acc += v;
    nodes_[out].val[0] = acc;
    tape_.push_back([x, out](Graph& g) {
        double gout = g.nodes_[out].grad[0];
        auto& gx = g.nodes_[x].grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout;
    });
    return out;
}

NodeId Graph::weighted_sum(const std::vector<std::pair<NodeId, double>>& terms) {
    NodeId out = alloc(Shape{});
    double acc = 0.0;
    for (auto [id, wgt] : terms) {
        if (nodes_[id].shape.count() != 1)
            throw std::invalid_argument("weighted_sum: term must be scalar");
        acc += wgt * nodes_[id].val[0];
    }
    nodes_[out].val[0] = acc;
    auto copy = terms;
    tape_.push_back([copy, out](Graph& g) {
        double gout = g.nodes_[out].grad[0];
        for (auto [id, wgt] : copy) g.nodes_[id].grad[0] += gout * wgt;
    });
    return out;
}

NodeId Graph::pool_cells(NodeId x, const std::vector<Cell>& cells) {
    const Shape& xs = nodes_[x].shape;
    Shape os{xs.c, int(cells.size()), 1, 1};
    NodeId out = alloc(os);
    const std::size_t S = xs.spatial(), N = cells.size();
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    for (int c = 0; c < xs.c; ++c) {
        const double* xc = xv.data() + std::size_t(c) * S;
        for (std::size_t j = 0; j < N; ++j) {
            const Cell& cl = cells[j];
            double acc = 0.0;
            for (int d = cl.d0; d < cl.d1; ++d)
                for (int h = cl.h0; h < cl.h1; ++h)
                    for (int w = cl.w0; w < cl.w1; ++w)
                        acc += xc[(std::size_t(d) * xs.h + h) * xs.w + w];
            ov[std::size_t(c) * N + j] = acc / double(cl.volume());
        }
    }
    auto copy = cells;
    tape_.push_back([x, out, copy, S, N](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        for (int c = 0; c < xs.c; ++c) {
            double* gc = gx.data() + std::size_t(c) * S;
            for (std::size_t j = 0; j < N; ++j) {
                const Cell& cl = copy[j];
                double gout = go[std::size_t(c) * N + j] / double(cl.volume());
                if (gout == 0.0) continue;
                for (int d = cl.d0; d < cl.d1; ++d)
                    for (int h = cl.h0; h < cl.h1; ++h)
                        for (int w = cl.w0; w < cl.w1; ++w)
                            gc[(std::size_t(d) * xs.h + h) * xs.w + w] += gout;
            }
        }
    });
    return out;
}

NodeId Graph::gather_sites(NodeId x, const std::vector<std::size_t>& sites) {
    const Shape& xs = nodes_[x].shape;
    const std::size_t S = xs.spatial();
    for (std::size_t s : sites)
        if (s >= S) throw std::invalid_argument("gather_sites: site out of range");
    Shape os{xs.c, int(sites.size()), 1, 1};
    NodeId out = alloc(os);
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    for (int c = 0; c < xs.c; ++c)
        for (std::size_t j = 0; j < sites.size(); ++j)
            ov[std::size_t(c) * sites.size() + j] = xv[std::size_t(c) * S + sites[j]];
    auto copy = sites;
    tape_.push_back([x, out, copy, S](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        for (int c = 0; c < xs.c; ++c)
            for (std::size_t j = 0; j < copy.size(); ++j)
                gx[std::size_t(c) * S + copy[j]] += go[std::size_t(c) * copy.size() + j];
    });
    return out;
}

NodeId Graph::scatter_sites(NodeId tokens, const std::vector<std::size_t>& sites,
                            const Shape& grid) {
    const Shape& ts = nodes_[tokens].shape;
    if (ts.c != grid.c || std::size_t(ts.d) != sites.size())
        throw std::invalid_argument("scatter_sites: token/site mismatch");
    const std::size_t S = grid.spatial();
    for (std::size_t s : sites)
        if (s >= S) throw std::invalid_argument("scatter_sites: anchor out of bounds");
    NodeId out = alloc(grid);
    auto& ov = nodes_[out].val;
    const auto& tv = nodes_[tokens].val;
    for (int c = 0; c < grid.c; ++c)
        for (std::size_t j = 0; j < sites.size(); ++j)
            ov[std::size_t(c) * S + sites[j]] = tv[std::size_t(c) * sites.size() + j];
    auto copy = sites;
    tape_.push_back([tokens, out, copy, S](Graph& g) {
        const Shape& os = g.nodes_[out].shape;
        const auto& go = g.nodes_[out].grad;
        auto& gt = g.nodes_[tokens].grad;
        for (int c = 0; c < os.c; ++c)
            for (std::size_t j = 0; j < copy.size(); ++j)
                gt[std::size_t(c) * copy.size() + j] += go[std::size_t(c) * S + copy[j]];
    });
    return out;
}

NodeId Graph::concat_sites(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_sites: empty");
    int c = nodes_[parts[0]].shape.c;
    int total = 0;
    for (NodeId p : parts) {
        const Shape& s = nodes_[p].shape;
        if (s.c != c || s.h != 1 || s.w != 1)
            throw std::invalid_argument("concat_sites: incompatible part " + s.str());
        total += s.d;
    }
    Shape os{c, total, 1, 1};
    NodeId out = alloc(os);
    auto& ov = nodes_[out].val;
    int off = 0;
    for (NodeId p : parts) {
        const auto& pv = nodes_[p].val;
        int n = nodes_[p].shape.d;
        for (int ch = 0; ch < c; ++ch)
            for (int j = 0; j < n; ++j)
                ov[std::size_t(ch) * total + off + j] = pv[std::size_t(ch) * n + j];
        off += n;
    }
    auto copy = parts;
    tape_.push_back([copy, out, c, total](Graph& g) {
        const auto& go = g.nodes_[out].grad;
        int off = 0;
        for (NodeId p : copy) {
            auto& gp = g.nodes_[p].grad;
            int n = g.nodes_[p].shape.d;
            for (int ch = 0; ch < c; ++ch)
                for (int j = 0; j < n; ++j)
                    gp[std::size_t(ch) * n + j] += go[std::size_t(ch) * total + off + j];
            off += n;
        }
    });
    return out;
}

NodeId Graph::crop_spatial(NodeId x, int d, int h, int w) {
    const Shape& xs = nodes_[x].shape;
    if (d > xs.d || h > xs.h || w > xs.w)
        throw std::invalid_argument("crop_spatial: target exceeds source");
    if (d == xs.d && h == xs.h && w == xs.w) return x;
    Shape os{xs.c, d, h, w};
    NodeId out = alloc(os);
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    const std::size_t xsp = xs.spatial(), osp = os.spatial();
    for (int c = 0; c < xs.c; ++c)
        for (int id = 0; id < d; ++id)
            for (int ih = 0; ih < h; ++ih)
                for (int iw = 0; iw < w; ++iw)
                    ov[std::size_t(c) * osp + (std::size_t(id) * h + ih) * w + iw] =
                        xv[std::size_t(c) * xsp + (std::size_t(id) * xs.h + ih) * xs.w + iw];
    tape_.push_back([x, out](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const Shape& os = g.nodes_[out].shape;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        const std::size_t xsp = xs.spatial(), osp = os.spatial();
        for (int c = 0; c < xs.c; ++c)
            for (int id = 0; id < os.d; ++id)
                for (int ih = 0; ih < os.h; ++ih)
                    for (int iw = 0; iw < os.w; ++iw)
                        gx[std::size_t(c) * xsp +
                           (std::size_t(id) * xs.h + ih) * xs.w + iw] +=
                            go[std::size_t(c) * osp +
                               (std::size_t(id) * os.h + ih) * os.w + iw];
    });
    return out;
}

NodeId Graph::pad_replicate_to(NodeId x, int d, int h, int w) {
    const Shape& xs = nodes_[x].shape;
    if (d < xs.d || h < xs.h || w < xs.w)
        throw std::invalid_argument("pad_replicate_to: target smaller than source");
    if (d == xs.d && h == xs.h && w == xs.w) return x;
    Shape os{xs.c, d, h, w};
    NodeId out = alloc(os);
    auto& ov = nodes_[out].val;
    const auto& xv = nodes_[x].val;
    const std::size_t xsp = xs.spatial(), osp = os.spatial();
    for (int c = 0; c < xs.c; ++c)
        for (int id = 0; id < d; ++id)
            for (int ih = 0; ih < h; ++ih)
                for (int iw = 0; iw < w; ++iw)
                    ov[std::size_t(c) * osp + (std::size_t(id) * h + ih) * w + iw] =
                        xv[std::size_t(c) * xsp +
                           (std::size_t(std::min(id, xs.d - 1)) * xs.h +
                            std::min(ih, xs.h - 1)) * xs.w + std::min(iw, xs.w - 1)];
    tape_.push_back([x, out](Graph& g) {
        const Shape& xs = g.nodes_[x].shape;
        const Shape& os = g.nodes_[out].shape;
        const auto& go = g.nodes_[out].grad;
        auto& gx = g.nodes_[x].grad;
        const std::size_t xsp = xs.spatial(), osp = os.spatial();
        for (int c = 0; c < os.c; ++c)
            for (int id = 0; id < os.d; ++id)
                for (int ih = 0; ih < os.h; ++ih)
                    for (int iw = 0; iw < os.w; ++iw)
                        gx[std::size_t(c) * xsp +
                           (std::size_t(std::min(id, xs.d - 1)) * xs.h +
                            std::min(ih, xs.h - 1)) * xs.w + std::min(iw, xs.w - 1)] +=
                            go[std::size_t(c) * osp +
                               (std::size_t(id) * os.h + ih) * os.w + iw];
    });
    return out;
}

NodeId Graph::dice_loss(NodeId pred, std::span<const double> target, double eps) {
    const Shape& ps = nodes_[pred].shape;
    if (target.size() != ps.count())
        throw std::invalid_argument("dice_loss: target size mismatch");
    const auto& pv = nodes_[pred].val;
    double inter = 0.0, sums = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        inter += target[i] * pv[i];
        sums += target[i] + pv[i];
    }
    double A = 2.0 * inter + eps, B = sums + eps;
    NodeId out = alloc(Shape{});
    nodes_[out].val[0] = 1.0 - A / B;
    std::vector<double> tcopy(target.begin(), target.end());
    tape_.push_back([pred, out, tcopy, A, B](Graph& g) {
        double gout = g.nodes_[out].grad[0];
        if (gout == 0.0) return;
        auto& gp = g.nodes_[pred].grad;
        double invB2 = 1.0 / (B * B);
        for (std::size_t i = 0; i < gp.size(); ++i)
            gp[i] += gout * (A - 2.0 * tcopy[i] * B) * invB2;
    });
    return out;
}

NodeId Graph::bce_loss(NodeId pred, std::span<const double> target, double clamp_delta) {
    const Shape& ps = nodes_[pred].shape;
    if (target.size() != ps.count())
        throw std::invalid_argument("bce_loss: target size mismatch");
    const auto& pv = nodes_[pred].val;
    const double lo = clamp_delta, hi = 1.0 - clamp_delta;
    const double invn = 1.0 / double(pv.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        double p = std::clamp(pv[i], lo, hi);
        acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
    }
    NodeId out = alloc(Shape{});
    nodes_[out].val[0] = acc * invn;
    std::vector<double> tcopy(target.begin(), target.end());
    tape_.push_back([pred, out, tcopy, lo, hi, invn](Graph& g) {
        double gout = g.nodes_[out].grad[0];
        if (gout == 0.0) return;
        const auto& pv = g.nodes_[pred].val;
        auto& gp = g.nodes_[pred].grad;
        for (std::size_t i = 0; i < pv.size(); ++i) {
            if (pv[i] <= lo || pv[i] >= hi) continue;  // clamped: zero slope
            gp[i] += gout * invn * (-tcopy[i] / pv[i] + (1.0 - tcopy[i]) / (1.0 - pv[i]));
        }
    });
    return out;
}

NodeId Graph::vq_lookup(NodeId tokens, NodeId codebook, const std::vector<int>& codes) {
    const Shape& ts = nodes_[tokens].shape;
    const Shape& cs = nodes_[codebook].shape;  // (M, C) rows contiguous
    if (cs.d != ts.c)
        throw std::invalid_argument("vq_lookup: codebook width mismatch");
    if (std::size_t(ts.d) != codes.size())
        throw std::invalid_argument("vq_lookup: code count mismatch");
    const int C = ts.c, N = ts.d;
    NodeId out = alloc(ts);
    auto& ov = nodes_[out].val;
    const auto& cv = nodes_[codebook].val;
    for (int c = 0; c < C; ++c)
        for (int j = 0; j < N; ++j)
            ov[std::size_t(c) * N + j] = cv[std::size_t(codes[j]) * C + c];
    tape_.push_back([tokens, out](Graph& g) {
        // straight-through: downstream gradient is copied to the tokens
        const auto& go = g.nodes_[out].grad;
        auto& gt = g.nodes_[tokens].grad;
        for (std::size_t i = 0; i < go.size(); ++i) gt[i] += go[i];
    });
    return out;
}

NodeId Graph::vq_penalty(NodeId tokens, NodeId codebook, const std::vector<int>& codes,
                         double beta) {
    const Shape& ts = nodes_[tokens].shape;
    const Shape& cs = nodes_[codebook].shape;
    if (cs.d != ts.c) throw std::invalid_argument("vq_penalty: codebook width mismatch");
    if (std::size_t(ts.d) != codes.size())
        throw std::invalid_argument("vq_penalty: code count mismatch");
    const int C = ts.c, N = ts.d;
    const auto& tv = nodes_[tokens].val;
    const auto& cv = nodes_[codebook].val;
    double acc = 0.0;
    for (int j = 0; j < N; ++j) {
        double d2 = 0.0;
        for (int c = 0; c < C; ++c) {
            double diff = tv[std::size_t(c) * N + j] - cv[std::size_t(codes[j]) * C + c];
            d2 += diff * diff;
        }
        acc += (1.0 + beta) * d2;
    }
    NodeId out = alloc(Shape{});
    nodes_[out].val[0] = acc / double(N);
    auto ccopy = codes;
    tape_.push_back([tokens, codebook, out, ccopy, beta, C, N](Graph& g) {
        double gout = g.nodes_[out].grad[0];
        if (gout == 0.0) return;
        const auto& tv = g.nodes_[tokens].val;
        const auto& cv = g.nodes_[codebook].val;
        auto& gt = g.nodes_[tokens].grad;
        auto& gc = g.nodes_[codebook].grad;
        const double wt = gout * 2.0 * beta / double(N);  // commitment -> tokens
        const double wc = gout * 2.0 / double(N);         // embedding -> codebook
        for (int j = 0; j < N; ++j)
            for (int c = 0; c < C; ++c) {
                double diff = tv[std::size_t(c) * N + j] -
                              cv[std::size_t(ccopy[j]) * C + c];
                gt[std::size_t(c) * N + j] += wt * diff;
                gc[std::size_t(ccopy[j]) * C + c] -= wc * diff;
            }
    });
    return out;
}

void Graph::backward(NodeId loss) {
    if (nodes_[loss].shape.count() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    nodes_[loss].shape.str());
    nodes_[loss].grad[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)(*this);
}

GradCheckReport grad_check(
    const std::function<double(std::span<const double>, std::vector<double>*)>& f,
    std::vector<double> x, double tol, double step) {
    std::vector<double> analytic;
    f(x, &analytic);
    if (analytic.size() != x.size())
        throw std::invalid_argument("grad_check: analytic gradient size mismatch");
    GradCheckReport rep;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + step;
        double fp = f(x, nullptr);
        x[i] = keep - step;
        double fm = f(x, nullptr);
        x[i] = keep;
        double numeric = (fp - fm) / (2.0 * step);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
        rep.max_rel_err = std::max(rep.max_rel_err, std::abs(analytic[i] - numeric) / denom);
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace tokenseg
