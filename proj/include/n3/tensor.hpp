#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace n3 {

// 3D position grid (h along i, w along j, s along k). Flattening is
// temporal-major raster order: flat(i,j,k) = k*h*w + i*w + j. This single
// order defines "previous" everywhere in the project.
struct Coord3 {
    int i = 0, j = 0, k = 0;
    bool operator==(const Coord3&) const = default;
};

struct Grid3 {
    int h = 1, w = 1, s = 1;

    int size() const { return h * w * s; }
    int flat(int i, int j, int k) const { return k * h * w + i * w + j; }
    int flat(Coord3 p) const { return flat(p.i, p.j, p.k); }
    Coord3 unflat(int t) const {
        const int hw = h * w;
        return Coord3{(t % hw) / w, t % w, t / hw};
    }
    bool contains(Coord3 p) const {
        return p.i >= 0 && p.i < h && p.j >= 0 && p.j < w && p.k >= 0 && p.k < s;
    }
    bool operator==(const Grid3&) const = default;
};

std::string to_string(const Grid3& g);

// Dense row-major matrix of 64-bit floats; the value type carried on the tape.
class Mat {
  public:
    Mat() = default;
    Mat(int rows, int cols, double fill = 0.0);
    static Mat from(std::initializer_list<std::initializer_list<double>> rows);
    static Mat identity(int n);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int numel() const { return rows_ * cols_; }

    double& operator()(int r, int c) { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
    std::span<double> row(int r) { return {v_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
    std::span<const double> row(int r) const { return {v_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }

    std::vector<double>& data() { return v_; }
    const std::vector<double>& data() const { return v_; }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const;

  private:
    int rows_ = 0, cols_ = 0;
    std::vector<double> v_;
};

// Rank-4 carrier (h,w,s,d): s outermost, then h, then w, channels innermost.
// Equivalently a (h*w*s) x d matrix whose row t is the vector at grid slot t.
class Tensor4 {
  public:
    Tensor4() = default;
    Tensor4(int h, int w, int s, int d, double fill = 0.0);
    static Tensor4 from_matrix(const Grid3& grid, const Mat& m);

    int h() const { return grid_.h; }
    int w() const { return grid_.w; }
    int s() const { return grid_.s; }
    int d() const { return d_; }
    Grid3 grid() const { return grid_; }
    int positions() const { return grid_.size(); }

    double& at(int i, int j, int k, int c) { return data_[static_cast<std::size_t>(grid_.flat(i, j, k)) * d_ + c]; }
    double at(int i, int j, int k, int c) const { return data_[static_cast<std::size_t>(grid_.flat(i, j, k)) * d_ + c]; }
    std::span<double> slot(int t) { return {data_.data() + static_cast<std::size_t>(t) * d_, static_cast<std::size_t>(d_)}; }
    std::span<const double> slot(int t) const { return {data_.data() + static_cast<std::size_t>(t) * d_, static_cast<std::size_t>(d_)}; }

    Mat to_matrix() const;
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

  private:
    Grid3 grid_{1, 1, 1};
    int d_ = 0;
    std::vector<double> data_;
};

// N3DT: magic "N3DT", u32 dims (h,w,s,d) little-endian, then h*w*s*d
// little-endian f64 in canonical layout.
void write_tensor(std::ostream& os, const Tensor4& t);
Tensor4 read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor4& t);
Tensor4 load_tensor(const std::string& path);

// Deterministic seeded generator. uniform() draws 53 bits so sequences are
// identical across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    std::uint64_t next_u64() { return gen_(); }
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }
    int index(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }
    Mat matrix(int rows, int cols, double lo, double hi);

  private:
    std::mt19937_64 gen_;
};

// Plain (untracked) kernels. The tape primitives below share these.
Mat matmul(const Mat& a, const Mat& b);
Mat matmul_nt(const Mat& a, const Mat& b);  // a * b^T
std::vector<double> softmax_last(std::span<const double> x);
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias, double eps);
double log_sum_exp(std::span<const double> x);
double cross_entropy_logits(std::span<const double> logits, int target);

namespace detail {
// allow_mask treats -inf entries as masked (weight 0); used by attention.
std::vector<double> softmax_shifted(std::span<const double> x, bool allow_mask);
}  // namespace detail

constexpr double kLayerNormEps = 1e-5;

// Reverse-mode tape. Records one node per primitive; values are immutable
// once produced. backward() walks nodes newest-to-oldest exactly once and
// accumulates gradients for every node; leaves not reachable from the loss
// end up with zero gradient.
class Tape {
  public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    // Extension point for fused primitives (the sparse attention node lives
    // in the attention module, not here).
    class Op {
      public:
        virtual ~Op() = default;
        virtual const char* name() const = 0;
        virtual Mat forward(std::span<const Mat* const> in) const = 0;
        // Accumulate into gin[i] (already shaped like in[i], zero-initialized
        // on first touch).
        virtual void backward(std::span<const Mat* const> in, const Mat& out, const Mat& gout,
                              std::span<Mat* const> gin) const = 0;
    };

    Var leaf(Mat value);
    Var constant(Mat value);
    Var apply(std::shared_ptr<const Op> op, std::vector<Var> inputs);

    // Built-in primitives.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);                  // elementwise
    Var scale(Var a, double c);
    Var add_row(Var a, Var row);            // broadcast a 1 x C row over all rows
    Var add_constant(Var a, Mat c);         // constant offset, no gradient into c
    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var gather_rows(Var table, std::vector<int> idx);
    Var concat_rows(Var a, Var b);
    Var layer_norm_rows(Var x, Var gain, Var bias, double eps = kLayerNormEps);
    Var gelu(Var x);
    Var softmax_rows(Var x);
    Var detach(Var x);
    Var sum(Var x);                         // all entries -> 1x1
    Var ce_rows(Var logits, std::vector<int> targets);  // per-row -log softmax[target], P x 1

    const Mat& value(Var v) const;
    const Mat& grad(Var v) const;           // valid after backward()
    int size() const { return static_cast<int>(nodes_.size()); }

    void backward(Var loss);

  private:
    struct Node {
        std::shared_ptr<const Op> op;       // null for leaf/constant
        std::vector<Var> inputs;
    };
    Var record(std::shared_ptr<const Op> op, std::vector<Var> inputs);
    void check(Var v, const char* ctx) const;

    std::vector<Node> nodes_;
    std::vector<Mat> values_;
    std::vector<Mat> grads_;
};

// Max over all parameter coordinates of |tape_grad - central_difference| /
// (|tape_grad| + 1e-8). The probe must be a deterministic function of params;
// need_grads=false evaluations may skip gradient work.
struct GradProbe {
    double value = 0.0;
    std::vector<Mat> grads;  // parallel to params, required when need_grads
};
using ProbeFn = std::function<GradProbe(const std::vector<Mat>& params, bool need_grads)>;
double finite_diff_check(const ProbeFn& f, std::vector<Mat> params, double step);

}  // namespace n3
