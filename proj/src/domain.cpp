#include "finitekin/domain.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "finitekin/core/error.hpp"

namespace finitekin {

void DomainSpec::validate() const {
    std::vector<std::string> problems;
    if (!is_finite(box_lo) || !is_finite(box_hi)) problems.push_back("domain.box: non-finite bounds");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) problems.push_back("domain.sigma: must be > 0");
    if (n_particles < 1) problems.push_back("domain.n_particles: must be >= 1");
    if (!(mass > 0.0) || !std::isfinite(mass)) problems.push_back("domain.mass: must be > 0");
    const Vec3 e = extent();
    for (int a = 0; a < 3; ++a) {
        if (!(e[a] > sigma)) {
            problems.push_back("domain.box: extent along axis " + std::to_string(a) +
                               " must exceed sigma");
        }
    }
    if (!problems.empty()) throw ConfigError(problems);
}

double DomainSpec::volume() const {
    const Vec3 e = extent();
    return e.x * e.y * e.z;
}

double DomainSpec::admissible_volume() const {
    const Vec3 e = admissible_hi() - admissible_lo();
    return std::max(0.0, e.x) * std::max(0.0, e.y) * std::max(0.0, e.z);
}

bool DomainSpec::inside_box(const Vec3& r) const {
    for (int a = 0; a < 3; ++a) {
        if (!(r[a] >= box_lo[a] && r[a] <= box_hi[a])) return false;
    }
    return true;
}

bool DomainSpec::inside_admissible(const Vec3& r) const {
    const Vec3 lo = admissible_lo(), hi = admissible_hi();
    for (int a = 0; a < 3; ++a) {
        if (!(r[a] >= lo[a] && r[a] <= hi[a])) return false;
    }
    return true;
}

const char* to_string(ThetaVariant v) { return v == ThetaVariant::A ? "A" : "B"; }

int strong_heaviside(double y) { return y > 0.0 ? 1 : 0; }

double wall_distance(const Vec3& r, const DomainSpec& domain) {
    if (domain.inside_box(r)) {
        double d = HUGE_VAL;
        for (int a = 0; a < 3; ++a) {
            d = std::min(d, r[a] - domain.box_lo[a]);
            d = std::min(d, domain.box_hi[a] - r[a]);
        }
        return d;
    }
    // Outside: Euclidean distance to the box, reported negative.
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = std::clamp(r[a], domain.box_lo[a], domain.box_hi[a]);
    return -norm(r - p);
}

int boundary_theta(const Vec3& r, const DomainSpec& domain) {
    return strong_heaviside(wall_distance(r, domain) - 0.5 * domain.sigma);
}

int binary_theta_a(std::span<const Vec3> config, std::size_t i, double sigma) {
    for (std::size_t j = i + 1; j < config.size(); ++j) {
        if (!strong_heaviside(norm(config[i] - config[j]) - sigma)) return 0;
    }
    return 1;
}

int binary_theta_b(std::span<const Vec3> config, std::size_t i, double sigma) {
    if (!binary_theta_a(config, i, sigma)) return 0;
    const std::size_t n = config.size();
    for (std::size_t m = i + 1; m < n; ++m) {
        const double dim = norm(config[i] - config[m]);
        for (std::size_t k = m + 1; k < n; ++k) {
            const double din = norm(config[i] - config[k]);
            const double dmn = norm(config[m] - config[k]);
            if (!strong_heaviside(dim + din - 2.0 * sigma)) return 0;
            if (!strong_heaviside(dmn + dim - 2.0 * sigma)) return 0;
        }
    }
    return 1;
}

int ensemble_theta(std::span<const Vec3> config, const DomainSpec& domain, ThetaVariant variant) {
    for (std::size_t i = 0; i < config.size(); ++i) {
        if (!boundary_theta(config[i], domain)) return 0;
        const int bt = variant == ThetaVariant::A ? binary_theta_a(config, i, domain.sigma)
                                                  : binary_theta_b(config, i, domain.sigma);
        if (!bt) return 0;
    }
    return 1;
}

bool configuration_admissible(std::span<const Vec3> config, const DomainSpec& domain) {
    for (std::size_t i = 0; i < config.size(); ++i) {
        if (!boundary_theta(config[i], domain)) return false;
        for (std::size_t j = i + 1; j < config.size(); ++j) {
            if (!strong_heaviside(norm(config[i] - config[j]) - domain.sigma)) return false;
        }
    }
    return true;
}

}  // namespace finitekin
