#include "flowmc/matrix.hpp"

#include <Eigen/Dense>

#include "flowmc/common.hpp"

namespace flowmc {
namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

CMap cmap(const Matrix& m) { return CMap(m.a.data(), m.rows, m.cols); }
MMap mmap(Matrix& m) { return MMap(m.a.data(), m.rows, m.cols); }

}  // namespace

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.cols != b.rows)
        throw ShapeError(strfmt("matmul: %lld x %lld times %lld x %lld", (long long)a.rows,
                                (long long)a.cols, (long long)b.rows, (long long)b.cols));
    out.resize(a.rows, b.cols);
    mmap(out).noalias() = cmap(a) * cmap(b);
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate) {
    if (a.rows != b.rows)
        throw ShapeError(strfmt("matmul_tn: %lld x %lld times %lld x %lld", (long long)a.rows,
                                (long long)a.cols, (long long)b.rows, (long long)b.cols));
    if (!accumulate || out.rows != a.cols || out.cols != b.cols) out.resize(a.cols, b.cols);
    if (accumulate)
        mmap(out).noalias() += cmap(a).transpose() * cmap(b);
    else
        mmap(out).noalias() = cmap(a).transpose() * cmap(b);
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.cols != b.cols)
        throw ShapeError(strfmt("matmul_nt: %lld x %lld times %lld x %lld", (long long)a.rows,
                                (long long)a.cols, (long long)b.rows, (long long)b.cols));
    out.resize(a.rows, b.rows);
    mmap(out).noalias() = cmap(a) * cmap(b).transpose();
}

}  // namespace flowmc
