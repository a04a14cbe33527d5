#pragma once

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "airdist/errors.h"

// Clamped cubic B-spline basis on [0,1] with equispaced interior knots, plus
// the exact second-derivative Gram matrix used as a curvature penalty.
namespace airdist::bspline {

class CubicBasis {
   public:
    explicit CubicBasis(int interior_knots) {
        if (interior_knots < 1) throw ValidationError("need at least one interior knot");
        knots_.assign(4, 0.0);
        for (int i = 1; i <= interior_knots; ++i)
            knots_.push_back(static_cast<double>(i) / (interior_knots + 1));
        knots_.insert(knots_.end(), 4, 1.0);
        n_ = interior_knots + 4;
    }

    int size() const { return n_; }
    int interior_knots() const { return n_ - 4; }

    // mean of the three internal knots of basis function i; coefficients
    // sampled from a line at these abscissae reproduce that line exactly
    double greville(int i) const { return (knots_[i + 1] + knots_[i + 2] + knots_[i + 3]) / 3.0; }

    Eigen::VectorXd values(double t) const {
        check_domain(t);
        std::array<double, 4> b;
        const int start = basis_row(t, b);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n_);
        for (int k = 0; k < 4; ++k) out[start + k] = b[k];
        return out;
    }

    Eigen::VectorXd second_derivatives(double t) const {
        check_domain(t);
        std::array<std::array<double, 4>, 3> d;
        const int start = ders_row(t, d);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n_);
        for (int k = 0; k < 4; ++k) out[start + k] = d[2][k];
        return out;
    }

    // |ts| x size design matrix of basis values
    Eigen::MatrixXd design(const std::vector<double>& ts) const {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<int>(ts.size()), n_);
        std::array<double, 4> b;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            check_domain(ts[i]);
            const int start = basis_row(ts[i], b);
            for (int k = 0; k < 4; ++k) m(static_cast<int>(i), start + k) = b[k];
        }
        return m;
    }

    // G_ij = int_0^1 B_i'' B_j''; second derivatives of cubics are piecewise
    // linear, so two-point Gauss quadrature per knot span is exact
    Eigen::MatrixXd curvature_gram() const {
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n_, n_);
        std::array<std::array<double, 4>, 3> d;
        const double off = 0.5 / std::sqrt(3.0);
        for (int s = 3; s < n_; ++s) {
            const double a = knots_[s], b = knots_[s + 1];
            const double h = b - a;
            if (h <= 0.0) continue;
            for (double u : {0.5 - off, 0.5 + off}) {
                const double t = a + u * h;
                const int start = ders_row(t, d);
                const double w = 0.5 * h;
                // product first so (i,j) and (j,i) round identically
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        g(start + i, start + j) += w * (d[2][i] * d[2][j]);
            }
        }
        return g;
    }

   private:
    static void check_domain(double t) {
        if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("spline argument outside [0,1]");
    }

    int span(double t) const {
        if (t >= 1.0) return n_ - 1;
        int lo = 3, hi = n_ - 1;
        while (lo < hi) {
            const int mid = (lo + hi + 1) / 2;
            if (knots_[mid] <= t)
                lo = mid;
            else
                hi = mid - 1;
        }
        return lo;
    }

    // values of the four nonzero basis functions at t; returns their first
    // index
    int basis_row(double t, std::array<double, 4>& out) const {
        const int s = span(t);
        double left[4], right[4];
        out[0] = 1.0;
        for (int j = 1; j <= 3; ++j) {
            left[j] = t - knots_[s + 1 - j];
            right[j] = knots_[s + j] - t;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                const double tmp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            out[j] = saved;
        }
        return s - 3;
    }

    // values and first two derivatives of the four nonzero basis functions
    int ders_row(double t, std::array<std::array<double, 4>, 3>& ders) const {
        const int s = span(t);
        double ndu[4][4], left[4], right[4];
        ndu[0][0] = 1.0;
        for (int j = 1; j <= 3; ++j) {
            left[j] = t - knots_[s + 1 - j];
            right[j] = knots_[s + j] - t;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                ndu[j][r] = right[r + 1] + left[j - r];
                const double tmp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            ndu[j][j] = saved;
        }
        for (int j = 0; j <= 3; ++j) ders[0][j] = ndu[j][3];
        for (int r = 0; r <= 3; ++r) {
            double a[2][4] = {{1.0, 0.0, 0.0, 0.0}, {0.0, 0.0, 0.0, 0.0}};
            int s1 = 0, s2 = 1;
            for (int k = 1; k <= 2; ++k) {
                double dsum = 0.0;
                const int rk = r - k, pk = 3 - k;
                if (r >= k) {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    dsum = a[s2][0] * ndu[rk][pk];
                }
                const int j1 = rk >= -1 ? 1 : -rk;
                const int j2 = r - 1 <= pk ? k - 1 : 3 - r;
                for (int j = j1; j <= j2; ++j) {
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][rk + j];
                    dsum += a[s2][j] * ndu[rk + j][pk];
                }
                if (r <= pk) {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    dsum += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = dsum;
                std::swap(s1, s2);
            }
        }
        double fac = 3.0;
        for (int k = 1; k <= 2; ++k) {
            for (int j = 0; j <= 3; ++j) ders[k][j] *= fac;
            fac *= static_cast<double>(3 - k);
        }
        return s - 3;
    }

    std::vector<double> knots_;
    int n_ = 0;
};

}  // namespace airdist::bspline
