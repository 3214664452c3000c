#include "protoreg/attention.hpp"

namespace protoreg::attention {

WindowLayout::WindowLayout(std::vector<int> grid, int window, int shift)
    : grid_(std::move(grid)), window_(window), shift_(shift) {
    if (grid_.empty() || grid_.size() > 3) throw InvalidArgument("window layout: grid needs 1 to 3 axes");
    if (window_ < 1) throw InvalidArgument("window layout: window must be >= 1");
    if (shift_ != 0 && shift_ != window_ / 2) {
        throw InvalidArgument("window layout: shift must be 0 or window/2");
    }
    const std::size_t dims = grid_.size();
    Eigen::Index total = 1;
    for (int n : grid_) {
        if (n < 1 || n % window_ != 0) {
            throw InvalidArgument("window layout: grid extent " + std::to_string(n) + " not divisible by window " +
                                  std::to_string(window_));
        }
        total *= n;
        tokens_per_window_ *= window_;
    }
    source_.resize(std::size_t(total));
    row_of_.resize(std::size_t(total));

    std::vector<int> windows_per_axis(dims);
    for (std::size_t a = 0; a < dims; ++a) windows_per_axis[a] = grid_[a] / window_;

    // row = window_index * tokens_per_window + in_window_index, both row-major.
    std::vector<int> wc(dims);
    std::vector<int> ic(dims);
    for (Eigen::Index row = 0; row < total; ++row) {
        Eigen::Index widx = row / tokens_per_window_;
        Eigen::Index iidx = row % tokens_per_window_;
        for (std::size_t a = dims; a-- > 0;) {
            wc[a] = int(widx % windows_per_axis[a]);
            widx /= windows_per_axis[a];
            ic[a] = int(iidx % window_);
            iidx /= window_;
        }
        Eigen::Index src = 0;
        for (std::size_t a = 0; a < dims; ++a) {
            const int rolled = wc[a] * window_ + ic[a];
            src = src * grid_[a] + (rolled + shift_) % grid_[a];
        }
        source_[std::size_t(row)] = src;
        row_of_[std::size_t(src)] = row;
    }
}

}  // namespace protoreg::attention
