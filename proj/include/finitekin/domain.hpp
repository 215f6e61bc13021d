#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "finitekin/core/vec3.hpp"

namespace finitekin {

// Axis-aligned vessel holding N spheres of diameter sigma.
struct DomainSpec {
    Vec3 box_lo{0.0, 0.0, 0.0};
    Vec3 box_hi{10.0, 10.0, 10.0};
    double sigma = 1.0;
    int n_particles = 1;
    double mass = 1.0;

    // Throws ConfigError if any invariant fails.
    void validate() const;

    Vec3 extent() const { return box_hi - box_lo; }
    double volume() const;
    // Region available to sphere centers (clearance sigma/2 from every wall).
    Vec3 admissible_lo() const { return box_lo + Vec3{1, 1, 1} * (0.5 * sigma); }
    Vec3 admissible_hi() const { return box_hi - Vec3{1, 1, 1} * (0.5 * sigma); }
    double admissible_volume() const;
    Vec3 center() const { return (box_lo + box_hi) * 0.5; }
    bool inside_box(const Vec3& r) const;
    // Closed admissible box test without the strict theta at the boundary.
    bool inside_admissible(const Vec3& r) const;
};

using NBodyConfiguration = std::vector<Vec3>;

struct NBodyState {
    std::vector<Vec3> r;
    std::vector<Vec3> v;
    double t = 0.0;

    std::size_t size() const { return r.size(); }
};

enum class ThetaVariant { A, B };

const char* to_string(ThetaVariant v);

int strong_heaviside(double y);

// Euclidean distance from r to the nearest point of the box surface; negative
// when r lies outside the box (distance to the box then).
double wall_distance(const Vec3& r, const DomainSpec& domain);

int boundary_theta(const Vec3& r, const DomainSpec& domain);

int binary_theta_a(std::span<const Vec3> config, std::size_t i, double sigma);
int binary_theta_b(std::span<const Vec3> config, std::size_t i, double sigma);

int ensemble_theta(std::span<const Vec3> config, const DomainSpec& domain, ThetaVariant variant);

// Same value as ensemble_theta for either variant (the variants coincide on the
// ensemble product), computed with early exit in O(N^2).
bool configuration_admissible(std::span<const Vec3> config, const DomainSpec& domain);

}  // namespace finitekin
