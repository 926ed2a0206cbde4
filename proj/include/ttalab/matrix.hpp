#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "ttalab/common.hpp"

namespace ttalab {

// Dense row-major matrix of doubles. This is the only numeric carrier in the
// engine; batches are rows, features are columns.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
    const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<double> row(std::size_t r) const;
    void set_row(std::size_t r, const std::vector<double>& values);
    void set_row(std::size_t r, const double* values, std::size_t n);

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    // Throws NumericError if any entry is NaN or infinite.
    void check_finite(const char* context) const;

    void fill(double v);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// C = A * B. Shapes must agree (A.cols == B.rows).
Matrix matmul(const Matrix& a, const Matrix& b);

// C = A * B^T, used for weight layouts stored as (out x in).
Matrix matmul_bt(const Matrix& a, const Matrix& b);

// C = A^T * B.
Matrix matmul_at(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);

// Elementwise product.
Matrix hadamard(const Matrix& a, const Matrix& b);

// Index of the row maximum; ties resolve to the lowest column index.
std::size_t argmax_row(const Matrix& m, std::size_t r);

double dot(const double* a, const double* b, std::size_t n);
double l2_norm(const double* a, std::size_t n);

// Sum that is invariant to the input order: values are sorted first, then
// reduced pairwise. Used where bit-stable aggregation is part of a contract.
double stable_sum(std::vector<double> values);

}  // namespace ttalab
