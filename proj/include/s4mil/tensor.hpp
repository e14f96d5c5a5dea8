#pragma once

#include <Eigen/Dense>

#include <string>

namespace s4mil {

/// Row-major dense matrix. Sequences are stored token-major: one row per token.
template <typename Scalar>
using Tensor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Parameter {
    std::string name;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;

    Parameter() = default;
    Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Tensor<Scalar>::Zero(rows, cols)), grad(Tensor<Scalar>::Zero(rows, cols)) {}

    Eigen::Index size() const { return value.size(); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
    return shape_string(m.rows(), m.cols());
}

}  // namespace s4mil
