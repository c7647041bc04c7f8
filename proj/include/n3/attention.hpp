#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "n3/tensor.hpp"

namespace n3 {

// Per-axis neighborhood window sizes. A finite extent must be a positive odd
// integer (the window is centered on the projected coordinate); kAll admits
// the entire axis.
struct Extent {
    static constexpr int kAll = 0;
    int eh = kAll, ew = kAll, es = kAll;

    static Extent all() { return Extent{kAll, kAll, kAll}; }
    bool operator==(const Extent&) const = default;
};

void validate_extent(const Extent& e);
std::string to_string(const Extent& e);

// Boolean query x key matrix over flattened positions; the single source of
// truth for which pairs attend.
struct AttnMask {
    Grid3 q_dims, k_dims;
    std::vector<std::uint8_t> bits;  // row-major by query

    AttnMask() = default;
    AttnMask(Grid3 q, Grid3 k) : q_dims(q), k_dims(k), bits(static_cast<std::size_t>(q.size()) * k.size(), 0) {}
    int q_count() const { return q_dims.size(); }
    int k_count() const { return k_dims.size(); }
    bool at(int q, int k) const { return bits[static_cast<std::size_t>(q) * k_count() + k] != 0; }
    void set(int q, int k, bool v = true) { bits[static_cast<std::size_t>(q) * k_count() + k] = v ? 1 : 0; }
};

// Floor-scaling map from a target position to its counterpart in a condition
// grid of (possibly) different dims.
Coord3 project_coord(Grid3 target_dims, Grid3 cond_dims, Coord3 pos);

// Flat condition indices inside the clipped window around `center`, in
// canonical flattening order.
std::vector<int> neighborhood(Grid3 cond_dims, Coord3 center, const Extent& extent);

AttnMask nearby_mask(Grid3 target_dims, Grid3 cond_dims, const Extent& extent, bool causal);
AttnMask axial_mask(Grid3 dims, bool causal);
AttnMask block_mask(Grid3 dims, Grid3 block_dims, bool causal);
AttnMask full_mask(Grid3 q_dims, Grid3 k_dims, bool causal);

// Per-query admissible key lists (CSR layout), the gathered form of a mask.
struct NeighborTable {
    std::vector<int> offsets;  // size q_count + 1
    std::vector<int> keys;     // concatenated per-query key indices

    int q_count() const { return static_cast<int>(offsets.size()) - 1; }
    std::span<const int> row(int q) const {
        return {keys.data() + offsets[q], static_cast<std::size_t>(offsets[q + 1] - offsets[q])};
    }
    long long pair_count() const { return static_cast<long long>(keys.size()); }

    static NeighborTable from_mask(const AttnMask& mask);
    // Built directly from the window predicate, without materializing a mask.
    static NeighborTable nearby(Grid3 target_dims, Grid3 cond_dims, const Extent& extent,
                                bool causal);
};

struct ProjWeights {
    Mat wq, wk, wv;  // each d_in x d_out
};

// Softmax scale: 1/sqrt(d_in) single-head, 1/sqrt(d_out/heads) when the
// output channels are split into heads.
double attention_scale(int d_in, int d_out, int heads);

// Gathered attention over each position's admissible keys; cost is
// proportional to the number of attended pairs.
Tensor4 attend_sparse(const Tensor4& x, const Tensor4& c, const ProjWeights& w,
                      const Extent& extent, bool causal, int heads = 1);

// Dense oracle: full scores with -inf at masked entries before softmax.
Tensor4 attend_dense_masked(const Tensor4& x, const Tensor4& c, const ProjWeights& w,
                            const AttnMask& mask, int heads = 1);

// Same gathered computation as a differentiable tape node.
Tape::Var attend_sparse(Tape& tape, Tape::Var x, Tape::Var c, Tape::Var wq, Tape::Var wk,
                        Tape::Var wv, NeighborTable nbrs, int heads = 1);

// Forward-only gathered attention split across threads over disjoint query
// ranges; bit-identical to the sequential path.
Mat attend_gathered_parallel(const Mat& x, const Mat& c, const ProjWeights& w,
                             const NeighborTable& nbrs, int heads, int threads);

// Mask emission: PGM "P5" bitmap (0 = attend, 255 = masked) and a CSV listing
// true bits as (flat_q, flat_k) rows in canonical order.
void write_mask_pgm(std::ostream& os, const AttnMask& mask);
void write_mask_csv(std::ostream& os, const AttnMask& mask);

}  // namespace n3
