#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "protoreg/errors.hpp"

namespace protoreg::attention {

/// n tokens x d channels.
template <typename Scalar>
using Tokens = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Row-wise softmax(Q K^T / sqrt(d)) with max subtraction.
template <typename DerivedQ, typename DerivedK>
Tokens<typename DerivedQ::Scalar> attention_weights(const Eigen::MatrixBase<DerivedQ>& q,
                                                    const Eigen::MatrixBase<DerivedK>& k) {
    using Scalar = typename DerivedQ::Scalar;
    if (q.cols() != k.cols()) {
        throw InvalidArgument("attention: query has " + std::to_string(q.cols()) + " channels, key has " +
                              std::to_string(k.cols()));
    }
    if (k.rows() < 1) throw InvalidArgument("attention: no keys");
    Tokens<Scalar> logits = (q * k.transpose()) / std::sqrt(Scalar(q.cols()));
    logits.colwise() -= logits.rowwise().maxCoeff();
    logits = logits.array().exp().matrix();
    logits.array().colwise() /= logits.rowwise().sum().array();
    return logits;
}

template <typename DerivedQ, typename DerivedK, typename DerivedV>
Tokens<typename DerivedQ::Scalar> cross_attention(const Eigen::MatrixBase<DerivedQ>& q,
                                                  const Eigen::MatrixBase<DerivedK>& k,
                                                  const Eigen::MatrixBase<DerivedV>& v) {
    if (k.rows() != v.rows()) {
        throw InvalidArgument("attention: " + std::to_string(k.rows()) + " keys but " + std::to_string(v.rows()) +
                              " values");
    }
    return attention_weights(q, k) * v;
}

/// Average of image->mask and mask->image cross-attention (K = V in each direction).
template <typename DerivedA, typename DerivedB>
Tokens<typename DerivedA::Scalar> fusion_attention(const Eigen::MatrixBase<DerivedA>& image,
                                                   const Eigen::MatrixBase<DerivedB>& mask) {
    if (image.rows() != mask.rows() || image.cols() != mask.cols()) {
        throw InvalidArgument("fusion_attention: image and mask token shapes differ");
    }
    using Scalar = typename DerivedA::Scalar;
    return Scalar(0.5) * (cross_attention(image, mask, mask) + cross_attention(mask, image, image));
}

/// Token grid cut into non-overlapping windows of edge `window`, optionally after a cyclic
/// roll by `shift` (rolled[i] = grid[(i + shift) mod n] on every axis). Grids are row-major
/// (last axis fastest) and may have 1 to 3 axes.
class WindowLayout {
public:
    WindowLayout(std::vector<int> grid, int window, int shift);

    const std::vector<int>& grid() const { return grid_; }
    int window() const { return window_; }
    int shift() const { return shift_; }
    Eigen::Index tokens() const { return Eigen::Index(source_.size()); }
    Eigen::Index tokens_per_window() const { return tokens_per_window_; }
    Eigen::Index num_windows() const { return tokens() / tokens_per_window_; }

    /// Partitioned row r holds grid token source(r). Rows are window-major.
    Eigen::Index source(Eigen::Index row) const { return source_[std::size_t(row)]; }
    /// Inverse of source().
    Eigen::Index row_of(Eigen::Index token) const { return row_of_[std::size_t(token)]; }
    Eigen::Index window_of(Eigen::Index token) const { return row_of(token) / tokens_per_window_; }

private:
    std::vector<int> grid_;
    int window_;
    int shift_;
    Eigen::Index tokens_per_window_ = 1;
    std::vector<Eigen::Index> source_;
    std::vector<Eigen::Index> row_of_;
};

template <typename Derived>
Tokens<typename Derived::Scalar> window_partition(const Eigen::MatrixBase<Derived>& tokens,
                                                  const WindowLayout& layout) {
    if (tokens.rows() != layout.tokens()) throw InvalidArgument("window_partition: token count does not match grid");
    Tokens<typename Derived::Scalar> out(tokens.rows(), tokens.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = tokens.row(layout.source(r));
    return out;
}

template <typename Derived>
Tokens<typename Derived::Scalar> window_reverse(const Eigen::MatrixBase<Derived>& windows,
                                                const WindowLayout& layout) {
    if (windows.rows() != layout.tokens()) throw InvalidArgument("window_reverse: token count does not match grid");
    Tokens<typename Derived::Scalar> out(windows.rows(), windows.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(layout.source(r)) = windows.row(r);
    return out;
}

/// Single-head windowed cross-attention: W-MCA with shift 0, SW-MCA with shift w/2.
template <typename DerivedQ, typename DerivedKV>
Tokens<typename DerivedQ::Scalar> window_cross_attention(const Eigen::MatrixBase<DerivedQ>& query,
                                                         const Eigen::MatrixBase<DerivedKV>& key_value,
                                                         const WindowLayout& layout) {
    using Scalar = typename DerivedQ::Scalar;
    const Tokens<Scalar> q = window_partition(query, layout);
    const Tokens<Scalar> kv = window_partition(key_value, layout);
    Tokens<Scalar> out(q.rows(), kv.cols());
    const Eigen::Index t = layout.tokens_per_window();
    for (Eigen::Index w = 0; w < layout.num_windows(); ++w) {
        out.middleRows(w * t, t) = cross_attention(q.middleRows(w * t, t), kv.middleRows(w * t, t),
                                                   kv.middleRows(w * t, t));
    }
    return window_reverse(out, layout);
}

}  // namespace protoreg::attention
