#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "airdist/errors.h"

namespace airdist::geom {

// ---------------------------------------------------------------------------
// Two-part compositions (below / above the regulatory threshold)
// ---------------------------------------------------------------------------

// Point of the 2-part simplex. Parts are strictly positive and sum to one.
struct Composition {
    double below = 0.5;  // mass below the threshold
    double above = 0.5;  // mass above the threshold
};

inline void check_composition(const Composition& c) {
    if (!(c.below > 0.0) || !(c.above > 0.0))
        throw ValidationError("composition parts must be strictly positive; apply zero_replace first");
    if (std::abs(c.below + c.above - 1.0) > 1e-12)
        throw ValidationError("composition parts must sum to 1");
}

// Isometric log-ratio of a 2-part composition: (1/sqrt(2)) * log(c1/c2).
inline double ilr(const Composition& c) {
    check_composition(c);
    return std::log(c.below / c.above) / std::sqrt(2.0);
}

// Inverse map from the real line back onto the simplex.
inline Composition ilr_inverse(double z) {
    const double t = std::sqrt(2.0) * z;
    // both parts through the stable logistic branch; never form 1 - p, which
    // destroys the small part's relative precision
    Composition c;
    if (t >= 0.0) {
        const double e = std::exp(-t);
        c.below = 1.0 / (1.0 + e);
        c.above = e / (1.0 + e);
    } else {
        const double e = std::exp(t);
        c.below = e / (1.0 + e);
        c.above = 1.0 / (1.0 + e);
    }
    // extreme tails: never return an exactly-zero part
    if (c.above == 0.0) c.above = std::numeric_limits<double>::min();
    if (c.below == 0.0) c.below = std::numeric_limits<double>::min();
    return c;
}

// Additive (+0.5) smoothing of exceedance counts into a valid composition.
inline Composition zero_replace(std::size_t below_count, std::size_t above_count) {
    const std::size_t n = below_count + above_count;
    if (n == 0) throw ValidationError("zero_replace: both counts are zero");
    Composition c;
    c.below = (static_cast<double>(below_count) + 0.5) / (static_cast<double>(n) + 1.0);
    c.above = (static_cast<double>(above_count) + 0.5) / (static_cast<double>(n) + 1.0);
    return c;
}

// Aitchison distance between 2-part compositions, by its log-ratio formula.
// Independent of ilr; used as an oracle for the isometry property.
inline double aitchison_distance(const Composition& a, const Composition& b) {
    check_composition(a);
    check_composition(b);
    const double d = std::log(a.below / a.above) - std::log(b.below / b.above);
    return std::abs(d) / std::sqrt(2.0);
}

// ---------------------------------------------------------------------------
// Densities on [0,1] in clr coordinates (Bayes space B^2([0,1]))
// ---------------------------------------------------------------------------

// Shared numerical contract across modules: every density lives on a fixed
// grid of kGridSize equispaced points on [0,1] with trapezoid quadrature.
inline constexpr std::size_t kGridSize = 256;

inline std::vector<double> unit_grid(std::size_t m = kGridSize) {
    std::vector<double> g(m);
    for (std::size_t i = 0; i < m; ++i) g[i] = static_cast<double>(i) / static_cast<double>(m - 1);
    return g;
}

// Trapezoid quadrature weights on the equispaced unit grid.
inline std::vector<double> quadrature_weights(std::size_t m = kGridSize) {
    const double h = 1.0 / static_cast<double>(m - 1);
    std::vector<double> w(m, h);
    w.front() = 0.5 * h;
    w.back() = 0.5 * h;
    return w;
}

inline double quadrature(const std::vector<double>& values) {
    const std::size_t m = values.size();
    const double h = 1.0 / static_cast<double>(m - 1);
    double s = 0.5 * (values.front() + values.back());
    for (std::size_t i = 1; i + 1 < m; ++i) s += values[i];
    return s * h;
}

// A density on [0,1] stored through its clr transform. The clr values
// integrate to zero; density() recovers the positive unit-integral function.
struct DensityOnUnit {
    std::vector<double> clr_values;  // length kGridSize, zero quadrature integral

    std::size_t size() const { return clr_values.size(); }
};

// Centered log-ratio of positive density values on the common grid:
// clr(f) = log f - integral of log f.
inline DensityOnUnit clr(const std::vector<double>& density_values) {
    std::vector<double> logf(density_values.size());
    for (std::size_t i = 0; i < density_values.size(); ++i) {
        if (!(density_values[i] > 0.0))
            throw ValidationError("clr: density values must be strictly positive");
        logf[i] = std::log(density_values[i]);
    }
    const double mean = quadrature(logf);
    for (double& v : logf) v -= mean;
    return DensityOnUnit{std::move(logf)};
}

// Inverse clr: f = exp(g) / integral exp(g), computed with max-subtraction so
// large clr values never overflow.
inline std::vector<double> clr_inverse(const DensityOnUnit& g) {
    const std::vector<double>& v = g.clr_values;
    double vmax = v.front();
    for (double x : v) vmax = std::max(vmax, x);
    std::vector<double> f(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) f[i] = std::exp(v[i] - vmax);
    const double z = quadrature(f);
    for (double& x : f) x /= z;
    return f;
}

inline std::vector<double> density_values(const DensityOnUnit& g) { return clr_inverse(g); }

// Re-centers clr values to exact zero quadrature integral.
inline void recenter(DensityOnUnit& g) {
    const double mean = quadrature(g.clr_values);
    for (double& v : g.clr_values) v -= mean;
}

inline DensityOnUnit density_from_clr(std::vector<double> clr_values) {
    DensityOnUnit d{std::move(clr_values)};
    recenter(d);
    return d;
}

inline void check_common_grid(const DensityOnUnit& f, const DensityOnUnit& g) {
    if (f.size() != g.size()) throw ValidationError("densities must share the common grid");
}

// Perturbation: renormalized pointwise product. In clr coordinates this is
// plain addition.
inline DensityOnUnit bayes_add(const DensityOnUnit& f, const DensityOnUnit& g) {
    check_common_grid(f, g);
    DensityOnUnit out;
    out.clr_values.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out.clr_values[i] = f.clr_values[i] + g.clr_values[i];
    recenter(out);
    return out;
}

// Powering: renormalized pointwise power, i.e. scalar multiplication in clr.
inline DensityOnUnit bayes_scale(double alpha, const DensityOnUnit& f) {
    DensityOnUnit out;
    out.clr_values.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out.clr_values[i] = alpha * f.clr_values[i];
    recenter(out);
    return out;
}

// Bayes-space inner product, computed as the L2 inner product of the clr
// images (the clr map is an isometry).
inline double bayes_inner(const DensityOnUnit& f, const DensityOnUnit& g) {
    check_common_grid(f, g);
    std::vector<double> prod(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) prod[i] = f.clr_values[i] * g.clr_values[i];
    return quadrature(prod);
}

inline double bayes_norm(const DensityOnUnit& f) { return std::sqrt(bayes_inner(f, f)); }

}  // namespace airdist::geom
