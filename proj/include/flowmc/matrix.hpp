#pragma once

#include <cstdint>
#include <vector>

namespace flowmc {

// Dense row-major matrix of doubles. Rows are samples in batch operations.
struct Matrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::int64_t r, std::int64_t c) : rows(r), cols(c), a(static_cast<std::size_t>(r * c), 0.0) {}

    // Reshape. A matrix whose element count changes comes back zeroed; when
    // the count is unchanged the storage (and its contents) are kept, which
    // lets scratch matrices be recycled across training steps without paying
    // a refill per call. Callers that need zeros on a same-size reuse must
    // say so with zero().
    void resize(std::int64_t r, std::int64_t c) {
        rows = r;
        cols = c;
        const std::size_t n = static_cast<std::size_t>(r * c);
        if (a.size() != n) a.assign(n, 0.0);
    }

    double* row(std::int64_t r) { return a.data() + r * cols; }
    const double* row(std::int64_t r) const { return a.data() + r * cols; }
    double& at(std::int64_t r, std::int64_t c) { return a[static_cast<std::size_t>(r * cols + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return a[static_cast<std::size_t>(r * cols + c)]; }
    std::int64_t size() const { return rows * cols; }

    void zero() { a.assign(a.size(), 0.0); }
};

// out = a * b. Shapes must agree; out is resized.
void matmul(const Matrix& a, const Matrix& b, Matrix& out);

// out = a^T * b (a: n x r, b: n x c, out: r x c). accumulate adds into out.
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate);

// out = a * b^T (a: n x c, b: r x c, out: n x r).
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);

}  // namespace flowmc
