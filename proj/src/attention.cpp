#include "n3/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace n3 {

namespace {

void check_axis_extent(int e, const char* axis) {
    if (e == Extent::kAll) return;
    if (e < 1 || e % 2 == 0)
        throw std::invalid_argument(std::string("extent: ") + axis + " must be odd positive or all, got " +
                                    std::to_string(e));
}

struct AxisRange {
    int lo, hi;  // inclusive
};

AxisRange axis_window(int center, int dim, int e) {
    if (e == Extent::kAll) return {0, dim - 1};
    const int r = (e - 1) / 2;
    return {std::max(0, center - r), std::min(dim - 1, center + r)};
}

void check_pos(Grid3 dims, Coord3 p, const char* ctx) {
    if (!dims.contains(p))
        throw std::out_of_range(std::string(ctx) + ": position (" + std::to_string(p.i) + "," +
                                std::to_string(p.j) + "," + std::to_string(p.k) +
                                ") outside grid " + to_string(dims));
}

}  // namespace

void validate_extent(const Extent& e) {
    check_axis_extent(e.eh, "e_h");
    check_axis_extent(e.ew, "e_w");
    check_axis_extent(e.es, "e_s");
}

std::string to_string(const Extent& e) {
    auto one = [](int v) { return v == Extent::kAll ? std::string("all") : std::to_string(v); };
    return one(e.eh) + "," + one(e.ew) + "," + one(e.es);
}

Coord3 project_coord(Grid3 target_dims, Grid3 cond_dims, Coord3 pos) {
    check_pos(target_dims, pos, "project_coord");
    return Coord3{pos.i * cond_dims.h / target_dims.h, pos.j * cond_dims.w / target_dims.w,
                  pos.k * cond_dims.s / target_dims.s};
}

std::vector<int> neighborhood(Grid3 cond_dims, Coord3 center, const Extent& extent) {
    validate_extent(extent);
    check_pos(cond_dims, center, "neighborhood");
    const AxisRange ra = axis_window(center.i, cond_dims.h, extent.eh);
    const AxisRange rb = axis_window(center.j, cond_dims.w, extent.ew);
    const AxisRange rc = axis_window(center.k, cond_dims.s, extent.es);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(ra.hi - ra.lo + 1) * (rb.hi - rb.lo + 1) *
                (rc.hi - rc.lo + 1));
    for (int c = rc.lo; c <= rc.hi; ++c)
        for (int a = ra.lo; a <= ra.hi; ++a)
            for (int b = rb.lo; b <= rb.hi; ++b) out.push_back(cond_dims.flat(a, b, c));
    return out;
}

NeighborTable NeighborTable::from_mask(const AttnMask& mask) {
    NeighborTable t;
    t.offsets.reserve(mask.q_count() + 1);
    t.offsets.push_back(0);
    for (int q = 0; q < mask.q_count(); ++q) {
        for (int k = 0; k < mask.k_count(); ++k)
            if (mask.at(q, k)) t.keys.push_back(k);
        t.offsets.push_back(static_cast<int>(t.keys.size()));
    }
    return t;
}

NeighborTable NeighborTable::nearby(Grid3 target_dims, Grid3 cond_dims, const Extent& extent,
                                    bool causal) {
    if (causal && !(target_dims == cond_dims))
        throw std::invalid_argument("nearby: causal requires target dims " +
                                    to_string(target_dims) + " == condition dims " +
                                    to_string(cond_dims));
    NeighborTable t;
    t.offsets.reserve(target_dims.size() + 1);
    t.offsets.push_back(0);
    for (int q = 0; q < target_dims.size(); ++q) {
        const Coord3 center = project_coord(target_dims, cond_dims, target_dims.unflat(q));
        for (int u : neighborhood(cond_dims, center, extent))
            if (!causal || u <= q) t.keys.push_back(u);
        t.offsets.push_back(static_cast<int>(t.keys.size()));
    }
    return t;
}

AttnMask nearby_mask(Grid3 target_dims, Grid3 cond_dims, const Extent& extent, bool causal) {
    const NeighborTable t = NeighborTable::nearby(target_dims, cond_dims, extent, causal);
    AttnMask mask(target_dims, cond_dims);
    for (int q = 0; q < t.q_count(); ++q)
        for (int u : t.row(q)) mask.set(q, u);
    return mask;
}

AttnMask axial_mask(Grid3 dims, bool causal) {
    AttnMask mask(dims, dims);
    for (int q = 0; q < dims.size(); ++q) {
        const Coord3 a = dims.unflat(q);
        for (int u = 0; u <= (causal ? q : dims.size() - 1); ++u) {
            const Coord3 b = dims.unflat(u);
            const int diff = (a.i != b.i) + (a.j != b.j) + (a.k != b.k);
            if (diff <= 1) mask.set(q, u);
        }
    }
    return mask;
}

AttnMask block_mask(Grid3 dims, Grid3 block_dims, bool causal) {
    if (block_dims.h < 1 || block_dims.w < 1 || block_dims.s < 1 || dims.h % block_dims.h != 0 ||
        dims.w % block_dims.w != 0 || dims.s % block_dims.s != 0)
        throw std::invalid_argument("block_mask: block dims " + to_string(block_dims) +
                                    " do not divide " + to_string(dims));
    AttnMask mask(dims, dims);
    for (int q = 0; q < dims.size(); ++q) {
        const Coord3 a = dims.unflat(q);
        for (int u = 0; u <= (causal ? q : dims.size() - 1); ++u) {
            const Coord3 b = dims.unflat(u);
            if (a.i / block_dims.h == b.i / block_dims.h && a.j / block_dims.w == b.j / block_dims.w &&
                a.k / block_dims.s == b.k / block_dims.s)
                mask.set(q, u);
        }
    }
    return mask;
}

AttnMask full_mask(Grid3 q_dims, Grid3 k_dims, bool causal) {
    if (causal && !(q_dims == k_dims))
        throw std::invalid_argument("full_mask: causal requires query dims " + to_string(q_dims) +
                                    " == key dims " + to_string(k_dims));
    AttnMask mask(q_dims, k_dims);
    for (int q = 0; q < mask.q_count(); ++q)
        for (int u = 0; u <= (causal ? q : mask.k_count() - 1); ++u) mask.set(q, u);
    return mask;
}

double attention_scale(int d_in, int d_out, int heads) {
    if (heads < 1) throw std::invalid_argument("attention: heads must be >= 1");
    if (d_out % heads != 0)
        throw std::invalid_argument("attention: heads " + std::to_string(heads) +
                                    " do not divide d_out " + std::to_string(d_out));
    return heads == 1 ? 1.0 / std::sqrt(static_cast<double>(d_in))
                      : 1.0 / std::sqrt(static_cast<double>(d_out / heads));
}

namespace {

void check_widths(const Mat& x, const Mat& c, const ProjWeights& w) {
    const int d_in = w.wq.rows();
    if (x.cols() != d_in || c.cols() != d_in || w.wk.rows() != d_in || w.wv.rows() != d_in ||
        w.wq.cols() != w.wk.cols() || w.wq.cols() != w.wv.cols())
        throw std::invalid_argument("attention: width mismatch (x " + x.shape_str() + ", c " +
                                    c.shape_str() + ", wq " + w.wq.shape_str() + ", wk " +
                                    w.wk.shape_str() + ", wv " + w.wv.shape_str() + ")");
}

// Gathered forward over queries [q_begin, q_end); writes rows of `out`.
void gathered_forward_range(const Mat& q, const Mat& k, const Mat& v, const NeighborTable& nbrs,
                            int heads, double scale, Mat& out, int q_begin, int q_end) {
    const int dh = q.cols() / heads;
    std::vector<double> scores;
    for (int t = q_begin; t < q_end; ++t) {
        const auto keys = nbrs.row(t);
        if (keys.empty())
            throw std::invalid_argument("attention: empty key set for query " + std::to_string(t));
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            scores.assign(keys.size(), 0.0);
            for (std::size_t n = 0; n < keys.size(); ++n) {
                double acc = 0.0;
                for (int c = 0; c < dh; ++c) acc += q(t, c0 + c) * k(keys[n], c0 + c);
                scores[n] = acc * scale;
            }
            const auto p = detail::softmax_shifted(scores, false);
            for (std::size_t n = 0; n < keys.size(); ++n)
                for (int c = 0; c < dh; ++c) out(t, c0 + c) += p[n] * v(keys[n], c0 + c);
        }
    }
}

Mat gathered_forward(const Mat& x, const Mat& c, const ProjWeights& w, const NeighborTable& nbrs,
                     int heads) {
    check_widths(x, c, w);
    if (nbrs.q_count() != x.rows())
        throw std::invalid_argument("attention: neighbor table has " +
                                    std::to_string(nbrs.q_count()) + " queries for " +
                                    std::to_string(x.rows()) + " positions");
    const double scale = attention_scale(w.wq.rows(), w.wq.cols(), heads);
    const Mat q = matmul(x, w.wq);
    const Mat k = matmul(c, w.wk);
    const Mat v = matmul(c, w.wv);
    Mat out(x.rows(), w.wq.cols());
    gathered_forward_range(q, k, v, nbrs, heads, scale, out, 0, x.rows());
    return out;
}

// Backward of the gathered computation; accumulates into the five grads.
void gathered_backward(const Mat& x, const Mat& c, const ProjWeights& w, const NeighborTable& nbrs,
                       int heads, const Mat& gout, Mat& gx, Mat& gc, Mat& gwq, Mat& gwk, Mat& gwv) {
    const double scale = attention_scale(w.wq.rows(), w.wq.cols(), heads);
    const Mat q = matmul(x, w.wq);
    const Mat k = matmul(c, w.wk);
    const Mat v = matmul(c, w.wv);
    const int d_out = w.wq.cols();
    const int dh = d_out / heads;

    Mat dq(q.rows(), d_out), dk(k.rows(), d_out), dv(v.rows(), d_out);
    std::vector<double> scores, dp, ds;
    for (int t = 0; t < x.rows(); ++t) {
        const auto keys = nbrs.row(t);
        if (keys.empty())
            throw std::invalid_argument("attention: empty key set for query " + std::to_string(t));
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            scores.assign(keys.size(), 0.0);
            for (std::size_t n = 0; n < keys.size(); ++n) {
                double acc = 0.0;
                for (int cc = 0; cc < dh; ++cc) acc += q(t, c0 + cc) * k(keys[n], c0 + cc);
                scores[n] = acc * scale;
            }
            const auto p = detail::softmax_shifted(scores, false);
            dp.assign(keys.size(), 0.0);
            double pdot = 0.0;
            for (std::size_t n = 0; n < keys.size(); ++n) {
                double acc = 0.0;
                for (int cc = 0; cc < dh; ++cc) acc += gout(t, c0 + cc) * v(keys[n], c0 + cc);
                dp[n] = acc;
                pdot += acc * p[n];
                for (int cc = 0; cc < dh; ++cc) dv(keys[n], c0 + cc) += p[n] * gout(t, c0 + cc);
            }
            ds.assign(keys.size(), 0.0);
            for (std::size_t n = 0; n < keys.size(); ++n) {
                ds[n] = p[n] * (dp[n] - pdot);
                for (int cc = 0; cc < dh; ++cc) {
                    dq(t, c0 + cc) += scale * ds[n] * k(keys[n], c0 + cc);
                    dk(keys[n], c0 + cc) += scale * ds[n] * q(t, c0 + cc);
                }
            }
        }
    }
    // Pull projection grads back through Q = X Wq, K = C Wk, V = C Wv.
    auto accumulate_input = [](const Mat& d, const Mat& weight, Mat& g) {
        for (int r = 0; r < d.rows(); ++r)
            for (int a = 0; a < weight.rows(); ++a) {
                double acc = 0.0;
                for (int b = 0; b < weight.cols(); ++b) acc += d(r, b) * weight(a, b);
                g(r, a) += acc;
            }
    };
    auto accumulate_weight = [](const Mat& input, const Mat& d, Mat& g) {
        for (int r = 0; r < input.rows(); ++r)
            for (int a = 0; a < input.cols(); ++a) {
                const double xa = input(r, a);
                if (xa == 0.0) continue;
                for (int b = 0; b < d.cols(); ++b) g(a, b) += xa * d(r, b);
            }
    };
    accumulate_input(dq, w.wq, gx);
    accumulate_weight(x, dq, gwq);
    accumulate_input(dk, w.wk, gc);
    accumulate_weight(c, dk, gwk);
    accumulate_input(dv, w.wv, gc);
    accumulate_weight(c, dv, gwv);
}

struct AttendSparseOp final : Tape::Op {
    AttendSparseOp(NeighborTable nbrs, int heads) : nbrs_(std::move(nbrs)), heads_(heads) {}
    const char* name() const override { return "attend_sparse"; }
    Mat forward(std::span<const Mat* const> in) const override {
        return gathered_forward(*in[0], *in[1], ProjWeights{*in[2], *in[3], *in[4]}, nbrs_, heads_);
    }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& gout,
                  std::span<Mat* const> gin) const override {
        gathered_backward(*in[0], *in[1], ProjWeights{*in[2], *in[3], *in[4]}, nbrs_, heads_, gout,
                          *gin[0], *gin[1], *gin[2], *gin[3], *gin[4]);
    }
    NeighborTable nbrs_;
    int heads_;
};

}  // namespace

Tensor4 attend_sparse(const Tensor4& x, const Tensor4& c, const ProjWeights& w,
                      const Extent& extent, bool causal, int heads) {
    const NeighborTable nbrs = NeighborTable::nearby(x.grid(), c.grid(), extent, causal);
    const Mat out = gathered_forward(x.to_matrix(), c.to_matrix(), w, nbrs, heads);
    return Tensor4::from_matrix(x.grid(), out);
}

Tensor4 attend_dense_masked(const Tensor4& x, const Tensor4& c, const ProjWeights& w,
                            const AttnMask& mask, int heads) {
    const Mat xm = x.to_matrix();
    const Mat cm = c.to_matrix();
    check_widths(xm, cm, w);
    if (!(mask.q_dims == x.grid()) || !(mask.k_dims == c.grid()))
        throw std::invalid_argument("attend_dense_masked: mask " + to_string(mask.q_dims) + "x" +
                                    to_string(mask.k_dims) + " does not match inputs " +
                                    to_string(x.grid()) + "/" + to_string(c.grid()));
    const double scale = attention_scale(w.wq.rows(), w.wq.cols(), heads);
    const Mat q = matmul(xm, w.wq);
    const Mat k = matmul(cm, w.wk);
    const Mat v = matmul(cm, w.wv);
    const int dh = w.wq.cols() / heads;
    const double neg_inf = -std::numeric_limits<double>::infinity();

    Mat out(xm.rows(), w.wq.cols());
    std::vector<double> scores(cm.rows());
    for (int t = 0; t < xm.rows(); ++t) {
        bool any = false;
        for (int u = 0; u < cm.rows(); ++u) any = any || mask.at(t, u);
        if (!any)
            throw std::invalid_argument("attend_dense_masked: all-masked query row " +
                                        std::to_string(t));
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            for (int u = 0; u < cm.rows(); ++u) {
                if (!mask.at(t, u)) {
                    scores[u] = neg_inf;
                    continue;
                }
                double acc = 0.0;
                for (int cc = 0; cc < dh; ++cc) acc += q(t, c0 + cc) * k(u, c0 + cc);
                scores[u] = acc * scale;
            }
            const auto p = detail::softmax_shifted(scores, true);
            for (int u = 0; u < cm.rows(); ++u) {
                if (p[u] == 0.0) continue;
                for (int cc = 0; cc < dh; ++cc) out(t, c0 + cc) += p[u] * v(u, c0 + cc);
            }
        }
    }
    return Tensor4::from_matrix(x.grid(), out);
}

Tape::Var attend_sparse(Tape& tape, Tape::Var x, Tape::Var c, Tape::Var wq, Tape::Var wk,
                        Tape::Var wv, NeighborTable nbrs, int heads) {
    return tape.apply(std::make_shared<AttendSparseOp>(std::move(nbrs), heads),
                      {x, c, wq, wk, wv});
}

Mat attend_gathered_parallel(const Mat& x, const Mat& c, const ProjWeights& w,
                             const NeighborTable& nbrs, int heads, int threads) {
    check_widths(x, c, w);
    const double scale = attention_scale(w.wq.rows(), w.wq.cols(), heads);
    const Mat q = matmul(x, w.wq);
    const Mat k = matmul(c, w.wk);
    const Mat v = matmul(c, w.wv);
    Mat out(x.rows(), w.wq.cols());
    threads = std::max(1, std::min(threads, x.rows()));
    if (threads == 1) {
        gathered_forward_range(q, k, v, nbrs, heads, scale, out, 0, x.rows());
        return out;
    }
    std::vector<std::thread> pool;
    const int chunk = (x.rows() + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int b = t * chunk;
        const int e = std::min(x.rows(), b + chunk);
        if (b >= e) break;
        pool.emplace_back([&, b, e] { gathered_forward_range(q, k, v, nbrs, heads, scale, out, b, e); });
    }
    for (auto& th : pool) th.join();
    return out;
}

void write_mask_pgm(std::ostream& os, const AttnMask& mask) {
    os << "P5\n" << mask.k_count() << " " << mask.q_count() << "\n255\n";
    std::vector<unsigned char> row(mask.k_count());
    for (int q = 0; q < mask.q_count(); ++q) {
        for (int k = 0; k < mask.k_count(); ++k) row[k] = mask.at(q, k) ? 0 : 255;
        os.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
}

void write_mask_csv(std::ostream& os, const AttnMask& mask) {
    os << "flat_q,flat_k\n";
    for (int q = 0; q < mask.q_count(); ++q)
        for (int k = 0; k < mask.k_count(); ++k)
            if (mask.at(q, k)) os << q << "," << k << "\n";
}

}  // namespace n3
