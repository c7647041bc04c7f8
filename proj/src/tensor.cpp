#include "n3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "n3/wire.hpp"

namespace n3 {

std::string to_string(const Grid3& g) {
    std::ostringstream os;
    os << g.h << "x" << g.w << "x" << g.s;
    return os.str();
}

Mat::Mat(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), v_(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw std::invalid_argument("Mat: negative dims");
}

Mat Mat::from(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r == 0 ? 0 : static_cast<int>(rows.begin()->size());
    Mat m(r, c);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) throw std::invalid_argument("Mat::from: ragged rows");
        std::copy(row.begin(), row.end(), m.row(i).begin());
        ++i;
    }
    return m;
}

Mat Mat::identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

std::string Mat::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Tensor4::Tensor4(int h, int w, int s, int d, double fill)
    : grid_{h, w, s}, d_(d), data_(static_cast<std::size_t>(h) * w * s * d, fill) {
    if (h < 1 || w < 1 || s < 1 || d < 1)
        throw std::invalid_argument("Tensor4: all dims must be >= 1");
}

Tensor4 Tensor4::from_matrix(const Grid3& grid, const Mat& m) {
    if (m.rows() != grid.size())
        throw std::invalid_argument("Tensor4::from_matrix: " + std::to_string(m.rows()) +
                                    " rows vs grid " + to_string(grid));
    Tensor4 t(grid.h, grid.w, grid.s, m.cols());
    t.data_ = m.data();
    return t;
}

Mat Tensor4::to_matrix() const {
    Mat m(positions(), d_);
    m.data() = data_;
    return m;
}

void write_tensor(std::ostream& os, const Tensor4& t) {
    wire::put_magic(os, "N3DT");
    wire::put_u32(os, static_cast<std::uint32_t>(t.h()));
    wire::put_u32(os, static_cast<std::uint32_t>(t.w()));
    wire::put_u32(os, static_cast<std::uint32_t>(t.s()));
    wire::put_u32(os, static_cast<std::uint32_t>(t.d()));
    for (double v : t.data()) wire::put_f64(os, v);
}

Tensor4 read_tensor(std::istream& is) {
    wire::expect_magic(is, "N3DT", "tensor file");
    const int h = static_cast<int>(wire::get_u32(is));
    const int w = static_cast<int>(wire::get_u32(is));
    const int s = static_cast<int>(wire::get_u32(is));
    const int d = static_cast<int>(wire::get_u32(is));
    Tensor4 t(h, w, s, d);
    for (double& v : t.data()) v = wire::get_f64(is);
    return t;
}

void save_tensor(const std::string& path, const Tensor4& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
    write_tensor(os, t);
}

Tensor4 load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
    return read_tensor(is);
}

Mat Rng::matrix(int rows, int cols, double lo, double hi) {
    Mat m(rows, cols);
    for (double& v : m.data()) v = uniform(lo, hi);
    return m;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: shape mismatch (" + a.shape_str() + " vs " +
                                    b.shape_str() + ")");
    Mat out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        auto oi = out.row(i);
        auto ai = a.row(i);
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            auto bk = b.row(k);
            for (int j = 0; j < b.cols(); ++j) oi[j] += aik * bk[j];
        }
    }
    return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: shape mismatch (" + a.shape_str() + " vs " +
                                    b.shape_str() + "^T)");
    Mat out(a.rows(), b.rows());
    for (int i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        for (int j = 0; j < b.rows(); ++j) {
            auto bj = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k) acc += ai[k] * bj[k];
            out(i, j) = acc;
        }
    }
    return out;
}

namespace detail {

// Max-shifted softmax. With allow_mask set, -inf entries act as mask
// sentinels and receive weight 0; at least one entry must stay finite.
std::vector<double> softmax_shifted(std::span<const double> x, bool allow_mask) {
    if (x.empty()) throw std::invalid_argument("softmax_last: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) {
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity() ||
            (!allow_mask && v == -std::numeric_limits<double>::infinity()))
            throw std::domain_error("softmax_last: non-finite input");
        mx = std::max(mx, v);
    }
    if (mx == -std::numeric_limits<double>::infinity())
        throw std::domain_error("softmax_last: all entries masked");
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

}  // namespace detail

std::vector<double> softmax_last(std::span<const double> x) {
    return detail::softmax_shifted(x, false);
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
    const std::size_t d = x.size();
    if (d == 0 || gain.size() != d || bias.size() != d)
        throw std::invalid_argument("layer_norm: size mismatch");
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    std::vector<double> out(d);
    for (std::size_t c = 0; c < d; ++c) out[c] = (x[c] - mean) * inv * gain[c] + bias[c];
    return out;
}

double log_sum_exp(std::span<const double> x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : x) z += std::exp(v - mx);
    return mx + std::log(z);
}

double cross_entropy_logits(std::span<const double> logits, int target) {
    if (target < 0 || target >= static_cast<int>(logits.size()))
        throw std::out_of_range("cross_entropy_logits: target " + std::to_string(target) +
                                " out of vocabulary " + std::to_string(logits.size()));
    return log_sum_exp(logits) - logits[static_cast<std::size_t>(target)];
}

// ---------------------------------------------------------------------------
// Tape

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

struct AddOp final : Tape::Op {
    const char* name() const override { return "add"; }
    Mat forward(std::span<const Mat* const> in) const override {
        require(in[0]->same_shape(*in[1]),
                "add: shape mismatch (" + in[0]->shape_str() + " vs " + in[1]->shape_str() + ")");
        Mat out = *in[0];
        const auto& b = in[1]->data();
        for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += b[i];
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (int p = 0; p < 2; ++p)
            for (std::size_t i = 0; i < g.data().size(); ++i) gin[p]->data()[i] += g.data()[i];
    }
};

struct SubOp final : Tape::Op {
    const char* name() const override { return "sub"; }
    Mat forward(std::span<const Mat* const> in) const override {
        require(in[0]->same_shape(*in[1]),
                "sub: shape mismatch (" + in[0]->shape_str() + " vs " + in[1]->shape_str() + ")");
        Mat out = *in[0];
        const auto& b = in[1]->data();
        for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] -= b[i];
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (std::size_t i = 0; i < g.data().size(); ++i) {
            gin[0]->data()[i] += g.data()[i];
            gin[1]->data()[i] -= g.data()[i];
        }
    }
};

struct MulOp final : Tape::Op {
    const char* name() const override { return "mul"; }
    Mat forward(std::span<const Mat* const> in) const override {
        require(in[0]->same_shape(*in[1]),
                "mul: shape mismatch (" + in[0]->shape_str() + " vs " + in[1]->shape_str() + ")");
        Mat out = *in[0];
        const auto& b = in[1]->data();
        for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] *= b[i];
        return out;
    }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (std::size_t i = 0; i < g.data().size(); ++i) {
            gin[0]->data()[i] += g.data()[i] * in[1]->data()[i];
            gin[1]->data()[i] += g.data()[i] * in[0]->data()[i];
        }
    }
};

struct ScaleOp final : Tape::Op {
    explicit ScaleOp(double c) : c_(c) {}
    const char* name() const override { return "scale"; }
    Mat forward(std::span<const Mat* const> in) const override {
        Mat out = *in[0];
        for (double& v : out.data()) v *= c_;
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (std::size_t i = 0; i < g.data().size(); ++i) gin[0]->data()[i] += c_ * g.data()[i];
    }
    double c_;
};

struct AddRowOp final : Tape::Op {
    const char* name() const override { return "add_row"; }
    Mat forward(std::span<const Mat* const> in) const override {
        require(in[1]->rows() == 1 && in[1]->cols() == in[0]->cols(),
                "add_row: bias " + in[1]->shape_str() + " does not broadcast over " +
                    in[0]->shape_str());
        Mat out = *in[0];
        for (int r = 0; r < out.rows(); ++r)
            for (int c = 0; c < out.cols(); ++c) out(r, c) += (*in[1])(0, c);
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (std::size_t i = 0; i < g.data().size(); ++i) gin[0]->data()[i] += g.data()[i];
        for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) (*gin[1])(0, c) += g(r, c);
    }
};

struct AddConstOp final : Tape::Op {
    explicit AddConstOp(Mat c) : c_(std::move(c)) {}
    const char* name() const override { return "add_constant"; }
    Mat forward(std::span<const Mat* const> in) const override {
        require(in[0]->same_shape(c_), "add_constant: shape mismatch (" + in[0]->shape_str() +
                                           " vs " + c_.shape_str() + ")");
        Mat out = *in[0];
        for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += c_.data()[i];
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (std::size_t i = 0; i < g.data().size(); ++i) gin[0]->data()[i] += g.data()[i];
    }
    Mat c_;
};

struct MatmulOp final : Tape::Op {
    const char* name() const override { return "matmul"; }
    Mat forward(std::span<const Mat* const> in) const override { return matmul(*in[0], *in[1]); }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        // dA += G B^T, dB += A^T G
        const Mat& a = *in[0];
        const Mat& b = *in[1];
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < b.rows(); ++j) {
                double acc = 0.0;
                for (int k = 0; k < b.cols(); ++k) acc += g(i, k) * b(j, k);
                (*gin[0])(i, j) += acc;
            }
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < a.cols(); ++j) {
                const double aij = a(i, j);
                if (aij == 0.0) continue;
                for (int k = 0; k < g.cols(); ++k) (*gin[1])(j, k) += aij * g(i, k);
            }
    }
};

struct MatmulNtOp final : Tape::Op {
    const char* name() const override { return "matmul_nt"; }
    Mat forward(std::span<const Mat* const> in) const override { return matmul_nt(*in[0], *in[1]); }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        // C = A B^T: dA += G B, dB += G^T A
        const Mat& a = *in[0];
        const Mat& b = *in[1];
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < b.rows(); ++j) {
                const double gij = g(i, j);
                if (gij == 0.0) continue;
                for (int k = 0; k < a.cols(); ++k) {
                    (*gin[0])(i, k) += gij * b(j, k);
                    (*gin[1])(j, k) += gij * a(i, k);
                }
            }
    }
};

struct GatherRowsOp final : Tape::Op {
    explicit GatherRowsOp(std::vector<int> idx) : idx_(std::move(idx)) {}
    const char* name() const override { return "gather_rows"; }
    Mat forward(std::span<const Mat* const> in) const override {
        const Mat& table = *in[0];
        Mat out(static_cast<int>(idx_.size()), table.cols());
        for (std::size_t r = 0; r < idx_.size(); ++r) {
            if (idx_[r] < 0 || idx_[r] >= table.rows())
                throw std::out_of_range("gather_rows: index " + std::to_string(idx_[r]) +
                                        " out of " + std::to_string(table.rows()));
            std::copy(table.row(idx_[r]).begin(), table.row(idx_[r]).end(),
                      out.row(static_cast<int>(r)).begin());
        }
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (std::size_t r = 0; r < idx_.size(); ++r)
            for (int c = 0; c < g.cols(); ++c) (*gin[0])(idx_[r], c) += g(static_cast<int>(r), c);
    }
    std::vector<int> idx_;
};

struct ConcatRowsOp final : Tape::Op {
    const char* name() const override { return "concat_rows"; }
    Mat forward(std::span<const Mat* const> in) const override {
        require(in[0]->cols() == in[1]->cols(),
                "concat_rows: column mismatch (" + in[0]->shape_str() + " vs " +
                    in[1]->shape_str() + ")");
        Mat out(in[0]->rows() + in[1]->rows(), in[0]->cols());
        std::copy(in[0]->data().begin(), in[0]->data().end(), out.data().begin());
        std::copy(in[1]->data().begin(), in[1]->data().end(),
                  out.data().begin() + in[0]->data().size());
        return out;
    }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        const std::size_t na = in[0]->data().size();
        for (std::size_t i = 0; i < na; ++i) gin[0]->data()[i] += g.data()[i];
        for (std::size_t i = 0; i < in[1]->data().size(); ++i)
            gin[1]->data()[i] += g.data()[na + i];
    }
};

struct LayerNormOp final : Tape::Op {
    explicit LayerNormOp(double eps) : eps_(eps) {}
    const char* name() const override { return "layer_norm_rows"; }
    Mat forward(std::span<const Mat* const> in) const override {
        const Mat& x = *in[0];
        require(in[1]->rows() == 1 && in[1]->cols() == x.cols() && in[2]->rows() == 1 &&
                    in[2]->cols() == x.cols(),
                "layer_norm_rows: gain/bias must be 1x" + std::to_string(x.cols()));
        Mat out(x.rows(), x.cols());
        for (int r = 0; r < x.rows(); ++r) {
            auto y = layer_norm(x.row(r), in[1]->row(0), in[2]->row(0), eps_);
            std::copy(y.begin(), y.end(), out.row(r).begin());
        }
        return out;
    }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        const Mat& x = *in[0];
        const Mat& gain = *in[1];
        const int d = x.cols();
        std::vector<double> xhat(d), wg(d);
        for (int r = 0; r < x.rows(); ++r) {
            double mean = 0.0;
            for (int c = 0; c < d; ++c) mean += x(r, c);
            mean /= d;
            double var = 0.0;
            for (int c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + eps_);
            double mw = 0.0, mwx = 0.0;
            for (int c = 0; c < d; ++c) {
                xhat[c] = (x(r, c) - mean) * inv;
                wg[c] = g(r, c) * gain(0, c);
                mw += wg[c];
                mwx += wg[c] * xhat[c];
            }
            mw /= d;
            mwx /= d;
            for (int c = 0; c < d; ++c) {
                (*gin[0])(r, c) += (wg[c] - mw - xhat[c] * mwx) * inv;
                (*gin[1])(0, c) += g(r, c) * xhat[c];
                (*gin[2])(0, c) += g(r, c);
            }
        }
    }
    double eps_;
};

struct GeluOp final : Tape::Op {
    const char* name() const override { return "gelu"; }
    static double phi(double x) { return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
    Mat forward(std::span<const Mat* const> in) const override {
        Mat out = *in[0];
        for (double& v : out.data()) v *= phi(v);
        return out;
    }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.data().size(); ++i) {
            const double x = in[0]->data()[i];
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            gin[0]->data()[i] += g.data()[i] * (phi(x) + x * pdf);
        }
    }
};

struct SoftmaxRowsOp final : Tape::Op {
    const char* name() const override { return "softmax_rows"; }
    Mat forward(std::span<const Mat* const> in) const override {
        Mat out(in[0]->rows(), in[0]->cols());
        for (int r = 0; r < out.rows(); ++r) {
            auto p = detail::softmax_shifted(in[0]->row(r), true);
            std::copy(p.begin(), p.end(), out.row(r).begin());
        }
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat& out, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (int r = 0; r < out.rows(); ++r) {
            double dot = 0.0;
            for (int c = 0; c < out.cols(); ++c) dot += g(r, c) * out(r, c);
            for (int c = 0; c < out.cols(); ++c)
                (*gin[0])(r, c) += out(r, c) * (g(r, c) - dot);
        }
    }
};

struct DetachOp final : Tape::Op {
    const char* name() const override { return "detach"; }
    Mat forward(std::span<const Mat* const> in) const override { return *in[0]; }
    void backward(std::span<const Mat* const>, const Mat&, const Mat&,
                  std::span<Mat* const>) const override {}
};

struct SumOp final : Tape::Op {
    const char* name() const override { return "sum"; }
    Mat forward(std::span<const Mat* const> in) const override {
        Mat out(1, 1);
        for (double v : in[0]->data()) out(0, 0) += v;
        return out;
    }
    void backward(std::span<const Mat* const>, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        for (double& v : gin[0]->data()) v += g(0, 0);
    }
};

struct CeRowsOp final : Tape::Op {
    explicit CeRowsOp(std::vector<int> targets) : targets_(std::move(targets)) {}
    const char* name() const override { return "ce_rows"; }
    Mat forward(std::span<const Mat* const> in) const override {
        const Mat& logits = *in[0];
        require(static_cast<int>(targets_.size()) == logits.rows(),
                "ce_rows: " + std::to_string(targets_.size()) + " targets vs " +
                    std::to_string(logits.rows()) + " rows");
        Mat out(logits.rows(), 1);
        for (int r = 0; r < logits.rows(); ++r)
            out(r, 0) = cross_entropy_logits(logits.row(r), targets_[r]);
        return out;
    }
    void backward(std::span<const Mat* const> in, const Mat&, const Mat& g,
                  std::span<Mat* const> gin) const override {
        const Mat& logits = *in[0];
        for (int r = 0; r < logits.rows(); ++r) {
            auto p = softmax_last(logits.row(r));
            const double gr = g(r, 0);
            for (int c = 0; c < logits.cols(); ++c) (*gin[0])(r, c) += gr * p[c];
            (*gin[0])(r, targets_[r]) -= gr;
        }
    }
    std::vector<int> targets_;
};

}  // namespace

void Tape::check(Var v, const char* ctx) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument(std::string(ctx) + ": invalid tape variable");
}

Tape::Var Tape::record(std::shared_ptr<const Op> op, std::vector<Var> inputs) {
    std::vector<const Mat*> in;
    in.reserve(inputs.size());
    for (Var v : inputs) {
        check(v, op ? op->name() : "leaf");
        in.push_back(&values_[v.id]);
    }
    Mat out = op ? op->forward(in) : Mat();
    const Var id{static_cast<int>(nodes_.size())};
    nodes_.push_back(Node{std::move(op), std::move(inputs)});
    values_.push_back(std::move(out));
    return id;
}

Tape::Var Tape::leaf(Mat value) {
    const Var id{static_cast<int>(nodes_.size())};
    nodes_.push_back(Node{});
    values_.push_back(std::move(value));
    return id;
}

Tape::Var Tape::constant(Mat value) { return leaf(std::move(value)); }

Tape::Var Tape::apply(std::shared_ptr<const Op> op, std::vector<Var> inputs) {
    if (!op) throw std::invalid_argument("Tape::apply: null op");
    return record(std::move(op), std::move(inputs));
}

Tape::Var Tape::add(Var a, Var b) { return record(std::make_shared<AddOp>(), {a, b}); }
Tape::Var Tape::sub(Var a, Var b) { return record(std::make_shared<SubOp>(), {a, b}); }
Tape::Var Tape::mul(Var a, Var b) { return record(std::make_shared<MulOp>(), {a, b}); }
Tape::Var Tape::scale(Var a, double c) { return record(std::make_shared<ScaleOp>(c), {a}); }
Tape::Var Tape::add_row(Var a, Var row) { return record(std::make_shared<AddRowOp>(), {a, row}); }
Tape::Var Tape::add_constant(Var a, Mat c) {
    return record(std::make_shared<AddConstOp>(std::move(c)), {a});
}
Tape::Var Tape::matmul(Var a, Var b) { return record(std::make_shared<MatmulOp>(), {a, b}); }
Tape::Var Tape::matmul_nt(Var a, Var b) { return record(std::make_shared<MatmulNtOp>(), {a, b}); }
Tape::Var Tape::gather_rows(Var table, std::vector<int> idx) {
    return record(std::make_shared<GatherRowsOp>(std::move(idx)), {table});
}
Tape::Var Tape::concat_rows(Var a, Var b) {
    return record(std::make_shared<ConcatRowsOp>(), {a, b});
}
Tape::Var Tape::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
    return record(std::make_shared<LayerNormOp>(eps), {x, gain, bias});
}
Tape::Var Tape::gelu(Var x) { return record(std::make_shared<GeluOp>(), {x}); }
Tape::Var Tape::softmax_rows(Var x) { return record(std::make_shared<SoftmaxRowsOp>(), {x}); }
Tape::Var Tape::detach(Var x) { return record(std::make_shared<DetachOp>(), {x}); }
Tape::Var Tape::sum(Var x) { return record(std::make_shared<SumOp>(), {x}); }
Tape::Var Tape::ce_rows(Var logits, std::vector<int> targets) {
    return record(std::make_shared<CeRowsOp>(std::move(targets)), {logits});
}

const Mat& Tape::value(Var v) const {
    check(v, "value");
    return values_[v.id];
}

const Mat& Tape::grad(Var v) const {
    check(v, "grad");
    if (grads_.size() != values_.size())
        throw std::logic_error("grad: backward() has not run on this tape");
    return grads_[v.id];
}

void Tape::backward(Var loss) {
    check(loss, "backward");
    const Mat& l = values_[loss.id];
    if (l.rows() != 1 || l.cols() != 1)
        throw std::invalid_argument("backward: loss must be 1x1, got " + l.shape_str());
    grads_.clear();
    grads_.reserve(values_.size());
    for (const Mat& v : values_) grads_.emplace_back(v.rows(), v.cols());
    grads_[loss.id](0, 0) = 1.0;

    std::vector<const Mat*> in;
    std::vector<Mat*> gin;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        const Node& node = nodes_[id];
        if (!node.op) continue;
        in.clear();
        gin.clear();
        for (Var v : node.inputs) {
            in.push_back(&values_[v.id]);
            gin.push_back(&grads_[v.id]);
        }
        node.op->backward(in, values_[id], grads_[id], gin);
    }
}

double finite_diff_check(const ProbeFn& f, std::vector<Mat> params, double step) {
    const GradProbe base = f(params, true);
    if (base.grads.size() != params.size())
        throw std::invalid_argument("finite_diff_check: probe returned " +
                                    std::to_string(base.grads.size()) + " grads for " +
                                    std::to_string(params.size()) + " params");
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].data().size(); ++i) {
            const double saved = params[p].data()[i];
            params[p].data()[i] = saved + step;
            const double up = f(params, false).value;
            params[p].data()[i] = saved - step;
            const double dn = f(params, false).value;
            params[p].data()[i] = saved;
            const double fd = (up - dn) / (2.0 * step);
            const double g = base.grads[p].data()[i];
            worst = std::max(worst, std::abs(fd - g) / (std::abs(g) + 1e-8));
        }
    }
    return worst;
}

}  // namespace n3
