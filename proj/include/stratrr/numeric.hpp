#pragma once

// Special functions and small dense SPD linear algebra.
//
// Everything here is a pure function of its inputs. Matrices are row-major
// and small (covariate dimension, typically <= 32), so no blocking or
// vectorization tricks are attempted.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stratrr {

using Vector = std::vector<double>;

class DomainError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

class AccuracyError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Raised when a Cholesky pivot is not strictly positive. `pivot()` is the
// zero-based column where factorization broke down, i.e. the first covariate
// direction that is (numerically) a combination of the preceding ones.
class SingularMatrix : public std::runtime_error {
   public:
    SingularMatrix(std::size_t pivot, double value)
        : std::runtime_error("matrix is not positive definite: pivot " +
                             std::to_string(pivot) + " = " +
                             std::to_string(value)),
          pivot_(pivot) {}

    std::size_t pivot() const noexcept { return pivot_; }

   private:
    std::size_t pivot_;
};

namespace detail {
constexpr double kGammaEps = 1e-14;
constexpr int kGammaMaxIter = 500;

inline void require_finite(double v, const char* what) {
    if (!std::isfinite(v))
        throw DomainError(std::string(what) + " must be finite");
}
}  // namespace detail

/// Regularized lower incomplete gamma P(s, x).
inline double reg_lower_gamma(double s, double x) {
    detail::require_finite(s, "reg_lower_gamma: s");
    if (std::isnan(x) || x == -std::numeric_limits<double>::infinity())
        throw DomainError("reg_lower_gamma: x must be a number >= 0");
    if (!(s > 0.0)) throw DomainError("reg_lower_gamma: s must be > 0");
    if (x < 0.0) throw DomainError("reg_lower_gamma: x must be >= 0");
    if (x == 0.0) return 0.0;
    if (std::isinf(x)) return 1.0;

    const double log_prefactor = -x + s * std::log(x) - std::lgamma(s);

    if (x < s + 1.0) {
        // Series: P = e^{-x} x^s / Gamma(s) * sum_n x^n / (s (s+1) ... (s+n)).
        double ap = s;
        double term = 1.0 / s;
        double sum = term;
        for (int n = 0; n < detail::kGammaMaxIter; ++n) {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if (std::abs(term) < std::abs(sum) * detail::kGammaEps)
                return std::min(1.0, sum * std::exp(log_prefactor));
        }
        throw AccuracyError("reg_lower_gamma: series did not converge");
    }

    // Continued fraction for Q(s, x), modified Lentz.
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - s;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= detail::kGammaMaxIter; ++i) {
        const double an = -i * (i - s);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < detail::kGammaEps)
            return std::max(0.0, 1.0 - std::exp(log_prefactor) * h);
    }
    throw AccuracyError("reg_lower_gamma: continued fraction did not converge");
}

inline double chi2_cdf(int df, double x) {
    if (df < 1) throw DomainError("chi2_cdf: df must be >= 1");
    return reg_lower_gamma(0.5 * df, 0.5 * x);
}

inline double chi2_pdf(int df, double x) {
    if (df < 1) throw DomainError("chi2_pdf: df must be >= 1");
    if (x < 0.0) return 0.0;
    const double k = 0.5 * df;
    if (x == 0.0) return df == 2 ? 0.5 : (df < 2 ? std::numeric_limits<double>::infinity() : 0.0);
    return std::exp((k - 1.0) * std::log(x) - 0.5 * x - k * std::log(2.0) - std::lgamma(k));
}

/// Inverse of chi2_cdf: bracketing bisection refined by safeguarded Newton.
inline double chi2_quantile(int df, double prob) {
    if (df < 1) throw DomainError("chi2_quantile: df must be >= 1");
    if (!(prob > 0.0 && prob < 1.0))
        throw DomainError("chi2_quantile: prob must lie in (0, 1)");

    double lo = 0.0;
    double hi = std::max(1.0, static_cast<double>(df));
    while (chi2_cdf(df, hi) < prob) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e6) throw AccuracyError("chi2_quantile: failed to bracket");
    }

    // Coarse bisection so Newton starts inside the basin.
    for (int i = 0; i < 8; ++i) {
        const double mid = 0.5 * (lo + hi);
        (chi2_cdf(df, mid) < prob ? lo : hi) = mid;
    }

    double x = 0.5 * (lo + hi);
    for (int iter = 0; iter < 200; ++iter) {
        const double f = chi2_cdf(df, x) - prob;
        if (std::abs(f) <= 1e-15 * prob) return x;
        (f < 0.0 ? lo : hi) = x;
        const double dens = chi2_pdf(df, x);
        double next = x - f / dens;
        if (!(dens > 0.0) || !(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - x) <= 4.0 * std::numeric_limits<double>::epsilon() * x ||
            hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi)
            return next;
        x = next;
    }
    return x;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double normal_pdf(double z) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

/// Standard normal quantile: Acklam's rational approximation polished by
/// Halley steps on the erfc-based CDF.
inline double normal_quantile(double prob) {
    if (!(prob > 0.0 && prob < 1.0))
        throw DomainError("normal_quantile: prob must lie in (0, 1)");
    if (prob > 0.5) return -normal_quantile(1.0 - prob);
    if (prob == 0.5) return 0.0;

    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00, 2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};

    double z;
    if (prob < 0.02425) {
        const double q = std::sqrt(-2.0 * std::log(prob));
        z = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else {
        const double q = prob - 0.5;
        const double r = q * q;
        z = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }
    for (int i = 0; i < 3; ++i) {
        const double e = normal_cdf(z) - prob;
        const double u = e / normal_pdf(z);
        z -= u / (1.0 + 0.5 * z * u);
    }
    return z;
}

/// Dense row-major matrix.
class Matrix {
   public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw DomainError("Matrix::from_rows: ragged rows");
            std::copy(row.begin(), row.end(), m.data_.begin() + i * c);
            ++i;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    Matrix& operator+=(const Matrix& other) {
        if (rows_ != other.rows_ || cols_ != other.cols_)
            throw DomainError("Matrix::operator+=: shape mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator*(double s, Matrix m) { return m *= s; }
    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }

    friend Matrix operator*(const Matrix& a, const Matrix& b) {
        if (a.cols_ != b.rows_) throw DomainError("Matrix product: shape mismatch");
        Matrix out(a.rows_, b.cols_);
        for (std::size_t i = 0; i < a.rows_; ++i)
            for (std::size_t k = 0; k < a.cols_; ++k) {
                const double aik = a(i, k);
                for (std::size_t j = 0; j < b.cols_; ++j) out(i, j) += aik * b(k, j);
            }
        return out;
    }

    Matrix transpose() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Vector apply(std::span<const double> v) const {
        if (v.size() != cols_) throw DomainError("Matrix::apply: shape mismatch");
        Vector out(rows_, 0.0);
        for (std::size_t i = 0; i < rows_; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < cols_; ++j) s += (*this)(i, j) * v[j];
            out[i] = s;
        }
        return out;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

   private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Square symmetric matrix intended to be positive definite. Symmetry is
/// checked on construction; positive definiteness is certified by Cholesky.
class SpdMatrix {
   public:
    SpdMatrix() = default;

    explicit SpdMatrix(Matrix m) : m_(std::move(m)) {
        if (m_.rows() != m_.cols()) throw DomainError("SpdMatrix: matrix is not square");
        if (m_.rows() == 0) throw DomainError("SpdMatrix: dimension must be positive");
        const double scale = std::max(m_.max_abs(), std::numeric_limits<double>::min());
        for (std::size_t i = 0; i < dim(); ++i)
            for (std::size_t j = i + 1; j < dim(); ++j)
                if (std::abs(m_(i, j) - m_(j, i)) > 1e-12 * scale)
                    throw DomainError("SpdMatrix: matrix is not symmetric");
    }

    std::size_t dim() const noexcept { return m_.rows(); }
    const Matrix& matrix() const noexcept { return m_; }
    double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }

   private:
    Matrix m_;
};

/// Lower-triangular factor L with L L^T = A, plus the solves built on it.
class Cholesky {
   public:
    explicit Cholesky(const SpdMatrix& a) : l_(a.dim(), a.dim()) {
        const std::size_t n = a.dim();
        for (std::size_t j = 0; j < n; ++j) {
            double diag = a(j, j);
            for (std::size_t k = 0; k < j; ++k) diag -= l_(j, k) * l_(j, k);
            // Relative cutoff: pivots that lose all significant digits count as zero.
            if (!(diag > 1e-13 * std::abs(a(j, j))) || !(diag > 0.0))
                throw SingularMatrix(j, diag);
            const double ljj = std::sqrt(diag);
            l_(j, j) = ljj;
            for (std::size_t i = j + 1; i < n; ++i) {
                double s = a(i, j);
                for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
                l_(i, j) = s / ljj;
            }
        }
    }

    std::size_t dim() const noexcept { return l_.rows(); }
    const Matrix& lower() const noexcept { return l_; }

    /// y = L^{-1} b.
    Vector forward(std::span<const double> b) const {
        check(b.size());
        Vector y(b.begin(), b.end());
        forward_in_place(y);
        return y;
    }

    void forward_in_place(std::span<double> y) const {
        const std::size_t n = dim();
        for (std::size_t i = 0; i < n; ++i) {
            double s = y[i];
            for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * y[k];
            y[i] = s / l_(i, i);
        }
    }

    /// x = L^{-T} y.
    Vector backward(std::span<const double> y) const {
        check(y.size());
        const std::size_t n = dim();
        Vector x(y.begin(), y.end());
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * x[k];
            x[ii] = s / l_(ii, ii);
        }
        return x;
    }

    Vector solve(std::span<const double> b) const { return backward(forward(b)); }

    /// v^T A^{-1} v = |L^{-1} v|^2.
    double inverse_quad_form(std::span<const double> v) const {
        const Vector y = forward(v);
        double s = 0.0;
        for (double e : y) s += e * e;
        return s;
    }

    /// u^T A^{-1} v.
    double inverse_bilinear(std::span<const double> u, std::span<const double> v) const {
        const Vector yu = forward(u);
        const Vector yv = forward(v);
        double s = 0.0;
        for (std::size_t i = 0; i < yu.size(); ++i) s += yu[i] * yv[i];
        return s;
    }

   private:
    void check(std::size_t n) const {
        if (n != dim()) throw DomainError("Cholesky: vector length mismatch");
    }

    Matrix l_;
};

inline Cholesky cholesky(const SpdMatrix& m) { return Cholesky(m); }

inline Vector solve_spd(const SpdMatrix& m, std::span<const double> rhs) {
    return Cholesky(m).solve(rhs);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Neumaier-compensated running sum.
class CompensatedSum {
   public:
    void add(double v) {
        const double t = sum_ + v;
        if (std::abs(sum_) >= std::abs(v))
            comp_ += (sum_ - t) + v;
        else
            comp_ += (v - t) + sum_;
        sum_ = t;
    }
    double value() const noexcept { return sum_ + comp_; }

   private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

}  // namespace stratrr
