#pragma once

#include "alter/numerics/tape.hpp"

#include <span>
#include <vector>

namespace alter {

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexGroups = std::vector<std::vector<Index>>;

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T without materialising the transpose.
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise and broadcasting arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
/// Adds a 1 x c row to every row of a.
Var add_rowwise(const Var& a, const Var& row);
Var scale(const Var& a, double c);
Var add_const(const Var& a, double c);
/// a * s for a 1 x 1 tensor s.
Var mul_scalar(const Var& a, const Var& s);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// Pointwise nonlinearities.
Var exp(const Var& a);
Var log(const Var& a);
/// Subgradient 0 at exactly zero.
Var sqrt(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var log_sigmoid(const Var& a);
Var relu(const Var& a);
/// Exact (erf) GELU.
Var gelu(const Var& a);
/// Gradient passes only where lo < a < hi.
Var clamp(const Var& a, double lo, double hi);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// n x 1 column of row sums.
Var row_sum(const Var& a);

// Row-wise normalisations. Masked entries (allowed == false) are excluded
// from the normaliser and produce 0 with no gradient.
Var softmax_rows(const Var& a, const BoolMatrix* allowed = nullptr);
Var log_softmax_rows(const Var& a, const BoolMatrix* allowed = nullptr);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// Indexing and assembly.
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Rows of `table` at `indices` (embedding lookup).
Var gather_rows(const Var& table, std::span<const Index> indices);
/// n x 1 column with a(i, cols[i]).
Var pick(const Var& a, std::span<const Index> cols);
/// One output row per group: the mean of the group's rows.
Var group_mean_rows(const Var& a, const IndexGroups& groups);
/// Copy of a with each listed row replaced by the 1 x c `row`.
Var overwrite_rows(const Var& a, std::span<const Index> rows, const Var& row);

struct AttentionMask {
    /// Per-key flag; empty means every key is visible.
    std::vector<bool> key_visible;
    /// Query i sees key j only when j <= i.
    bool causal = false;
};

/// Multi-head scaled dot-product attention core on already-projected
/// q (Lq x D), k and v (Lk x D). Heads split D into equal column blocks.
/// Output is Lq x D; each head's rows are convex combinations of v rows.
Var attention(const Var& q, const Var& k, const Var& v, int heads, const AttentionMask& mask = {});

/// Plain-matrix softmax used outside the tape; max-shifted.
Matrix softmax_rows(const Matrix& a);

}  // namespace alter
