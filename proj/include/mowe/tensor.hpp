#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mowe/common.hpp"

namespace mowe {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// A named 2-D parameter with its gradient buffer. `frozen` parameters are skipped by
/// the optimizer.
template <typename T>
struct Param {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<T> value;
    std::vector<T> grad;
    bool frozen = false;

    Param() = default;
    Param(std::string n, int r, int c)
        : name(std::move(n)), rows(r), cols(c), value(static_cast<std::size_t>(r) * c, T(0)),
          grad(static_cast<std::size_t>(r) * c, T(0)) {}

    std::size_t size() const { return value.size(); }

    Eigen::Map<RowMat<T>> mat() { return {value.data(), rows, cols}; }
    Eigen::Map<const RowMat<T>> mat() const { return {value.data(), rows, cols}; }
    Eigen::Map<RowMat<T>> grad_mat() { return {grad.data(), rows, cols}; }

    T* row_ptr(int r) { return value.data() + static_cast<std::size_t>(r) * cols; }
    const T* row_ptr(int r) const { return value.data() + static_cast<std::size_t>(r) * cols; }
    T* grad_row_ptr(int r) { return grad.data() + static_cast<std::size_t>(r) * cols; }

    void init_normal(Rng& rng, double stddev) {
        for (auto& v : value) {
            v = static_cast<T>(rng.normal() * stddev);
        }
    }
    void fill(T v) { std::fill(value.begin(), value.end(), v); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

}  // namespace mowe
