#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "airdist/errors.h"
#include "airdist/geojson.h"
#include "airdist/geom.h"
#include "airdist/sde.h"

namespace airdist::indicators {

enum class Method { kCfrk, kMqsr, kSde };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::kCfrk: return "CFRK";
        case Method::kMqsr: return "MQSR";
        case Method::kSde: return "SDE";
    }
    throw ValidationError("unknown method tag");
}

// Regulatory summary for one municipality under one method. q95 is undefined
// for the compositional method, which only resolves mass around the threshold.
struct MunicipalIndicator {
    std::string municipality_id;
    Method method = Method::kCfrk;
    double p = 0.0;
    double expected_days = 0.0;
    double q95 = std::numeric_limits<double>::quiet_NaN();
    bool has_q95 = false;
};

enum class ConsensusClass { kGreen, kYellow, kOrange, kRed };

inline const char* consensus_name(ConsensusClass c) {
    switch (c) {
        case ConsensusClass::kGreen: return "green";
        case ConsensusClass::kYellow: return "yellow";
        case ConsensusClass::kOrange: return "orange";
        case ConsensusClass::kRed: return "red";
    }
    throw ValidationError("unknown consensus class");
}

struct ConsensusResult {
    std::string municipality_id;
    int votes = 0;
    ConsensusClass cls = ConsensusClass::kGreen;
};

inline double exceedance_from_composition(const geom::Composition& c) {
    geom::check_composition(c);
    return c.above;
}

// Monotone CDF assembled from fitted quantile levels at one location: a
// Fritsch-Carlson cubic through the (Q_j, alpha_j) knots, closed by linear
// tails that reach 0 and 1 at the support bounds.
class PiecewiseCdf {
   public:
    PiecewiseCdf(std::vector<double> alphas, std::vector<double> values, double support_lo,
                 double support_hi)
        : lo_(support_lo), hi_(support_hi), levels_(alphas), level_values_(values) {
        if (alphas.size() != values.size() || alphas.empty())
            throw ValidationError("need matching, non-empty level and quantile lists");
        if (!(support_lo < support_hi)) throw ValidationError("support bounds must be ordered");
        for (std::size_t j = 0; j < alphas.size(); ++j) {
            if (!(alphas[j] > 0.0 && alphas[j] < 1.0))
                throw ValidationError("quantile levels must lie strictly inside (0,1)");
            if (j > 0 && !(alphas[j] > alphas[j - 1]))
                throw ValidationError("quantile levels must be strictly increasing");
            if (j > 0 && values[j] < values[j - 1])
                throw ValidationError("quantile values must be non-decreasing");
        }

        // collapse duplicated quantile values, averaging their levels
        const double tie_tol = 1e-12 * std::max(1.0, std::abs(values.back()));
        std::size_t j = 0;
        while (j < values.size()) {
            std::size_t k = j + 1;
            double asum = alphas[j];
            while (k < values.size() && values[k] - values[j] <= tie_tol) {
                asum += alphas[k];
                ++k;
            }
            if (k - j > 1) collapsed_ = true;
            q_.push_back(values[j]);
            f_.push_back(asum / static_cast<double>(k - j));
            j = k;
        }
        if (!(support_lo < q_.front()) || !(q_.back() < support_hi))
            throw ValidationError("support bounds must strictly contain the quantile range");

        // Fritsch-Carlson tangents keep the cubic monotone between knots
        const std::size_t n = q_.size();
        m_.assign(n, 0.0);
        if (n == 1) return;
        std::vector<double> slope(n - 1);
        for (std::size_t i = 0; i + 1 < n; ++i)
            slope[i] = (f_[i + 1] - f_[i]) / (q_[i + 1] - q_[i]);
        m_[0] = slope[0];
        m_[n - 1] = slope[n - 2];
        for (std::size_t i = 1; i + 1 < n; ++i) m_[i] = 0.5 * (slope[i - 1] + slope[i]);
        for (std::size_t i = 0; i + 1 < n; ++i) {
            if (slope[i] == 0.0) {
                m_[i] = m_[i + 1] = 0.0;
                continue;
            }
            const double a = m_[i] / slope[i], b = m_[i + 1] / slope[i];
            const double r2 = a * a + b * b;
            if (r2 > 9.0) {
                const double tau = 3.0 / std::sqrt(r2);
                m_[i] = tau * a * slope[i];
                m_[i + 1] = tau * b * slope[i];
            }
        }
    }

    double operator()(double t) const {
        if (t <= lo_) return 0.0;
        if (t >= hi_) return 1.0;
        if (t <= q_.front()) return f_.front() * (t - lo_) / (q_.front() - lo_);
        if (t >= q_.back())
            return f_.back() + (1.0 - f_.back()) * (t - q_.back()) / (hi_ - q_.back());
        const std::size_t i = segment(t);
        const double h = q_[i + 1] - q_[i];
        const double u = (t - q_[i]) / h;
        const double h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        const double h10 = u * (1.0 - u) * (1.0 - u);
        const double h01 = u * u * (3.0 - 2.0 * u);
        const double h11 = u * u * (u - 1.0);
        return h00 * f_[i] + h * h10 * m_[i] + h01 * f_[i + 1] + h * h11 * m_[i + 1];
    }

    // derivative of the interpolant; zero outside the support
    double density(double t) const {
        if (t < lo_ || t > hi_) return 0.0;
        if (t <= q_.front()) return f_.front() / (q_.front() - lo_);
        if (t >= q_.back()) return (1.0 - f_.back()) / (hi_ - q_.back());
        const std::size_t i = segment(t);
        const double h = q_[i + 1] - q_[i];
        const double u = (t - q_[i]) / h;
        const double d00 = 6.0 * u * (u - 1.0);
        const double d10 = (1.0 - u) * (1.0 - 3.0 * u);
        const double d11 = u * (3.0 * u - 2.0);
        return (d00 * (f_[i] - f_[i + 1])) / h + d10 * m_[i] + d11 * m_[i + 1];
    }

    // smallest t with cdf(t) = a, by bisection on the containing segment
    double invert(double a) const {
        if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("probability level outside [0,1]");
        if (a <= 0.0) return lo_;
        if (a >= 1.0) return hi_;
        if (a <= f_.front()) return lo_ + (q_.front() - lo_) * a / f_.front();
        if (a >= f_.back())
            return q_.back() + (hi_ - q_.back()) * (a - f_.back()) / (1.0 - f_.back());
        double left = q_.front(), right = q_.back();
        while (right - left > 1e-6 * std::max(1.0, std::abs(right))) {
            const double mid = 0.5 * (left + right);
            if ((*this)(mid) < a)
                left = mid;
            else
                right = mid;
        }
        return 0.5 * (left + right);
    }

    double support_lo() const { return lo_; }
    double support_hi() const { return hi_; }
    bool collapsed_duplicates() const { return collapsed_; }
    const std::vector<double>& levels() const { return levels_; }
    const std::vector<double>& level_values() const { return level_values_; }

   private:
    std::size_t segment(double t) const {
        const auto it = std::upper_bound(q_.begin(), q_.end(), t);
        const std::size_t i = static_cast<std::size_t>(it - q_.begin());
        return std::min(i == 0 ? 0 : i - 1, q_.size() - 2);
    }

    double lo_, hi_;
    std::vector<double> q_, f_, m_;         // collapsed knots and tangents
    std::vector<double> levels_, level_values_;  // as fitted, for grid-hit lookup
    bool collapsed_ = false;
};

inline PiecewiseCdf cdf_from_quantiles(const std::vector<double>& alphas,
                                       const std::vector<double>& values, double support_lo,
                                       double support_hi) {
    return PiecewiseCdf(alphas, values, support_lo, support_hi);
}

// trapezoid mass above the threshold; grid strictly increasing
inline double exceedance_from_density(const std::vector<double>& grid,
                                      const std::vector<double>& density, double threshold) {
    if (grid.size() != density.size() || grid.size() < 2)
        throw ValidationError("density needs a grid of matching length with 2+ points");
    if (threshold <= grid.front()) return 1.0;
    if (threshold >= grid.back()) return 0.0;
    double mass = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (grid[i] <= threshold) continue;
        double y0 = grid[i - 1], v0 = density[i - 1];
        if (y0 < threshold) {
            const double u = (threshold - y0) / (grid[i] - y0);
            v0 = v0 + u * (density[i] - v0);
            y0 = threshold;
        }
        mass += 0.5 * (v0 + density[i]) * (grid[i] - y0);
    }
    return std::clamp(mass, 0.0, 1.0);
}

inline double exceedance_from_density(const sde::ReconstructedDensity& d, double threshold) {
    return exceedance_from_density(d.grid(), d.values(), threshold);
}

inline double expected_days(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("exceedance probability outside [0,1]");
    return 365.0 * p;
}

// the regulation allows exactly 35 days; only more is a violation
inline bool flag_35(double p) { return expected_days(p) > 35.0; }

inline ConsensusResult consensus(const std::string& municipality_id,
                                 const std::vector<bool>& method_flags) {
    if (method_flags.size() != 3)
        throw ValidationError("consensus needs flags from exactly 3 methods, got " +
                              std::to_string(method_flags.size()));
    ConsensusResult r;
    r.municipality_id = municipality_id;
    for (bool f : method_flags) r.votes += f ? 1 : 0;
    switch (r.votes) {
        case 0: r.cls = ConsensusClass::kGreen; break;
        case 1: r.cls = ConsensusClass::kYellow; break;
        case 2: r.cls = ConsensusClass::kOrange; break;
        default: r.cls = ConsensusClass::kRed; break;
    }
    return r;
}

// A fitted representation at one municipality: threshold composition (CFRK),
// quantile CDF (MQSR), or reconstructed density (SDE).
using Representation = std::variant<geom::Composition, PiecewiseCdf, sde::ReconstructedDensity>;

inline Method method_of(const Representation& rep) {
    switch (rep.index()) {
        case 0: return Method::kCfrk;
        case 1: return Method::kMqsr;
        default: return Method::kSde;
    }
}

inline double exceedance(const Representation& rep, double threshold) {
    if (const auto* c = std::get_if<geom::Composition>(&rep)) {
        (void)threshold;  // the composition is already split at the threshold
        return exceedance_from_composition(*c);
    }
    if (const auto* cdf = std::get_if<PiecewiseCdf>(&rep))
        return std::clamp(1.0 - (*cdf)(threshold), 0.0, 1.0);
    return exceedance_from_density(std::get<sde::ReconstructedDensity>(rep), threshold);
}

inline double quantile_lookup(const Representation& rep, double level) {
    if (!(level > 0.0 && level < 1.0))
        throw ValidationError("quantile level must lie strictly inside (0,1)");
    if (std::holds_alternative<geom::Composition>(rep))
        throw ValidationError("quantiles unavailable for two-part compositions");
    if (const auto* cdf = std::get_if<PiecewiseCdf>(&rep)) {
        const auto& levels = cdf->levels();
        for (std::size_t j = 0; j < levels.size(); ++j)
            if (std::abs(levels[j] - level) <= 1e-12) return cdf->level_values()[j];
        return cdf->invert(level);
    }

    // numeric inversion of the density's cdf by bisection
    const auto& d = std::get<sde::ReconstructedDensity>(rep);
    const auto y = d.grid();
    const auto v = d.values();
    std::vector<double> cum(y.size(), 0.0);
    for (std::size_t i = 1; i < y.size(); ++i)
        cum[i] = cum[i - 1] + 0.5 * (v[i - 1] + v[i]) * (y[i] - y[i - 1]);
    const auto cdf_at = [&](double t) {
        if (t <= y.front()) return 0.0;
        if (t >= y.back()) return cum.back();
        const std::size_t i = static_cast<std::size_t>(
            std::upper_bound(y.begin(), y.end(), t) - y.begin() - 1);
        const double u = t - y[i];
        const double vt = v[i] + (v[i + 1] - v[i]) * u / (y[i + 1] - y[i]);
        return cum[i] + 0.5 * (v[i] + vt) * u;
    };
    const double target = level * cum.back();  // tolerate 1e-10 normalization slack
    double left = y.front(), right = y.back();
    while (right - left > 1e-6) {
        const double mid = 0.5 * (left + right);
        if (cdf_at(mid) < target)
            left = mid;
        else
            right = mid;
    }
    return 0.5 * (left + right);
}

inline MunicipalIndicator indicator(const std::string& municipality_id, const Representation& rep,
                                    double threshold, double q_level = 0.95) {
    MunicipalIndicator out;
    out.municipality_id = municipality_id;
    out.method = method_of(rep);
    out.p = exceedance(rep, threshold);
    out.expected_days = expected_days(out.p);
    if (out.method != Method::kCfrk) {
        out.q95 = quantile_lookup(rep, q_level);
        out.has_q95 = true;
    }
    return out;
}

inline void write_indicator_csv(std::ostream& os, const std::vector<MunicipalIndicator>& rows) {
    os << "municipality_id,method,p,expected_days,q95\n";
    os << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.municipality_id << "," << method_name(r.method) << "," << r.p << ","
           << r.expected_days << ",";
        if (r.has_q95) os << r.q95;
        os << "\n";
    }
}

// attaches votes and class to a copy of each region for direct rendering
inline Json consensus_geojson(const std::vector<RegionFeature>& regions,
                              const std::vector<ConsensusResult>& results) {
    if (regions.size() != results.size())
        throw ValidationError("consensus results do not match the region list");
    std::vector<RegionFeature> out = regions;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i].id != results[i].municipality_id)
            throw ValidationError("consensus result order does not match the region list");
        out[i].properties["votes"] = results[i].votes;
        out[i].properties["class"] = consensus_name(results[i].cls);
    }
    return feature_collection_json(out);
}

}  // namespace airdist::indicators
