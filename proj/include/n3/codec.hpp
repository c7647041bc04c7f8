#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "n3/tensor.hpp"

namespace n3 {

// Learnable table of discrete visual token embeddings.
class Codebook {
  public:
    Codebook(Mat entries);

    int size() const { return entries_.rows(); }   // N
    int dim() const { return entries_.cols(); }    // d_B
    const Mat& entries() const { return entries_; }
    Mat& entries() { return entries_; }

  private:
    Mat entries_;
};

// Discrete token indices on a 3D grid; the autoregressive target.
struct TokenGrid {
    Grid3 dims;
    std::uint32_t vocab = 0;
    std::vector<std::uint32_t> ids;  // canonical flattening order, each < vocab

    bool operator==(const TokenGrid&) const = default;
};

// N3TG: magic "N3TG", u32 (h,w,s,N) little-endian, then h*w*s u32 ids.
void write_token_grid(std::ostream& os, const TokenGrid& g);
TokenGrid read_token_grid(std::istream& is);
void save_token_grid(const std::string& path, const TokenGrid& g);
TokenGrid load_token_grid(const std::string& path);

// Encoder output arranged on the token grid, one d_B-vector per cell.
struct FeatureGrid {
    Grid3 dims;
    Mat features;  // dims.size() x d_B
};

// Nearest codebook row per cell by squared distance; ties break to the
// lowest index.
TokenGrid quantize(const FeatureGrid& features, const Codebook& codebook);

// Table lookup: cell (i,j,k) of the result holds row ids[(i,j,k)].
Tensor4 embed(const TokenGrid& tokens, const Codebook& codebook);

// Quantize-then-embed with straight-through gradients: forward value is the
// assigned codebook row per cell, backward passes the incoming gradient to
// `features` unchanged and sends nothing into the codebook. Token
// assignments are fixed at the current feature values.
Tape::Var quantize_straight_through(Tape& tape, Tape::Var features, Grid3 dims,
                                    Tape::Var codebook, TokenGrid* tokens_out = nullptr);

// reconstruction_error + ||sg[f] - B[z]||^2 + ||f - sg[B[z]]||^2. The first
// term is the caller's decoder loss built on the straight-through path; the
// second trains only the codebook, the third only the features.
Tape::Var vq_loss(Tape& tape, Tape::Var features, Grid3 dims, Tape::Var reconstruction_error,
                  Tape::Var codebook);

// Token id sequence embedded as a (1,1,s,d) tensor; spatial axes are
// placeholders.
Tensor4 text_repr(std::span<const int> token_ids, const Mat& table);

// Segmentation classes as one-hot channels: (H,W,1,C) with exactly one 1 per
// pixel.
Tensor4 onehot_sketch(std::span<const int> seg, int height, int width, int num_classes);

}  // namespace n3
