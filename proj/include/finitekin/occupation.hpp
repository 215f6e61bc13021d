#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "finitekin/core/parallel.hpp"
#include "finitekin/core/stats.hpp"
#include "finitekin/density.hpp"

namespace finitekin {

struct OccupationOptions {
    int grid = 9;  // cells per axis over the admissible box
    std::uint64_t samples = 1'000'000;  // configuration proposals per evaluation
    int max_iterations = 50;
    double tolerance = 1e-3;
    double damping = 0.5;
    double k_init = 1.0;
    ThetaVariant variant = ThetaVariant::B;
    int batches = kDefaultBatches;
    std::uint64_t seed = 1;
    Exec exec = Exec::Parallel;
};

// Regular grid of cell centers over the admissible box.
struct OccupationGrid {
    Vec3 lo, hi;
    int n = 9;

    Vec3 spacing() const { return (hi - lo) / double(n); }
    Vec3 center(int i, int j, int k) const;
    std::size_t index(int i, int j, int k) const { return (std::size_t(k) * n + j) * n + i; }
    std::size_t size() const { return std::size_t(n) * n * n; }
    // Node nearest to r.
    std::array<int, 3> nearest(const Vec3& r) const;
};

// k1 on the grid, from the self-consistent fixed point.
class OccupationField {
public:
    OccupationGrid grid;
    std::vector<double> values;   // reported k1 per cell
    std::vector<double> errors;   // batch-means stderr per cell
    std::vector<double> weights;  // k1 entering q ~ n / k1 (frozen fixed point)
    std::vector<double> residuals;
    int iterations = 0;
    bool converged = false;
    double inverse_mean = 1.0;    // E_n[1_adm / k_w], normalizes q
    double admissible_fraction = 1.0;
    std::uint64_t samples = 0;
    int n_particles = 1;
    double sigma = 1.0;
    ThetaVariant variant = ThetaVariant::B;

    double at(int i, int j, int k) const { return values[grid.index(i, j, k)]; }
    double error_at(int i, int j, int k) const { return errors[grid.index(i, j, k)]; }

    // Interpolated weight field (trilinear) and q(r) = n(r) 1_adm / (mass k_w c).
    double weight_k(const Vec3& r) const;
    Vec3 weight_k_gradient(const Vec3& r) const;
    double q(const PhaseSpaceDensity& pdf, const Vec3& r) const;
    Vec3 q_gradient(const PhaseSpaceDensity& pdf, const Vec3& r) const;

    // Smooth (Catmull-Rom) interpolation of the reported values.
    PointDerivs k1(const Vec3& r) const;

    // Least-squares derivative stencils with half-width hw along each axis at a node.
    Vec3 grid_gradient(int i, int j, int k, int hw = 2) const;
    double grid_laplacian(int i, int j, int k, int hw = 2) const;

    double min_value() const;
    double max_value() const;
};

OccupationField estimate_k1(const PhaseSpaceDensity& pdf, const OccupationOptions& options = {});

// Re-runs the final evaluation with the frozen weights of field at another budget/seed.
OccupationField reevaluate_k1(const PhaseSpaceDensity& pdf, const OccupationField& field, std::uint64_t samples,
                              std::uint64_t seed, Exec exec = Exec::Parallel);

// Direct MC of the (N-2)-fold integral with the fixed-point q; exactly 1 with zero error for N=2.
Estimate estimate_k2(const PhaseSpaceDensity& pdf, const OccupationField& field, const Vec3& r1, const Vec3& r2,
                     std::uint64_t samples, std::uint64_t seed, Exec exec = Exec::Parallel);

// Pool of admissible (N-2)-configurations drawn exactly from q; single-draw unbiased k2.
class PairOccupation {
public:
    PairOccupation(const PhaseSpaceDensity& pdf, const OccupationField& field, std::size_t pool_size,
                   std::uint64_t seed);
    // Constant k2 (used for the Boltzmann degenerate kernel or a frozen dilute value).
    explicit PairOccupation(double constant);

    double sample(const Vec3& r1, const Vec3& r2, CounterRng& rng) const;
    Estimate estimate(const Vec3& r1, const Vec3& r2, std::uint64_t draws, std::uint64_t seed) const;
    bool is_constant() const { return constant_ >= 0.0; }
    std::size_t pool_size() const { return pool_.size(); }

private:
    std::vector<std::vector<Vec3>> pool_;
    double sigma_ = 1.0;
    double constant_ = -1.0;
};

// Point in stratum i mod 512 of an 8^3 split of [lo, hi], jittered uniformly inside it.
inline Vec3 stratified_point(const Vec3& lo, const Vec3& hi, std::uint64_t i, CounterRng& rng) {
    const std::uint64_t s = i % 512;
    const double c[3] = {double(s % 8), double((s / 8) % 8), double(s / 64)};
    Vec3 r;
    for (int a = 0; a < 3; ++a) r[a] = lo[a] + (c[a] + rng.uniform()) * (hi[a] - lo[a]) / 8.0;
    return r;
}

// Integrand of a contact-pair integral. Receives both centers and n21 = (r2 - r1) / sigma
// and must include the partner density in the fixed-point normalization, n(r2) / (mass k_w).
using ContactIntegrand = std::function<double(const Vec3& r1, const Vec3& r2, const Vec3& n21, CounterRng& rng)>;

// (N-1) sigma^2 * integral over the admissible box of dr1 and over the unit sphere of dn21 of
// g * k2(r1, r2) * Z_{N-2}/Z_{N-1}, the same scaling the gradient identity uses. r1 is drawn
// uniformly (stratified). Without a rule both antipodal partners of one random direction are evaluated; with
// a rule every node of a randomly rotated copy is (weights summing to 4 pi).
struct SphereRule {
    std::vector<Vec3> nodes;
    std::vector<double> weights;
};
// Product Gauss-Legendre(cos theta) x uniform(phi) rule, exact to degree 2 n_theta - 1.
SphereRule sphere_rule(int n_theta = 9, int n_phi = 18);

Estimate contact_pair_integral(const PhaseSpaceDensity& pdf, const OccupationField& field, std::uint64_t samples,
                               std::uint64_t seed, Stream stream, Exec exec, const ContactIntegrand& g,
                               const SphereRule* rule = nullptr);

struct IdentityReport {
    std::string name;
    Vec3 point;
    Vec3 lhs;
    Vec3 rhs;
    Vec3 rhs_err;
    double discrepancy = 0.0;
    std::uint64_t samples = 0;
};

// grad k1 as a grid stencil vs the contact-sphere integral. r1 is snapped to the nearest node.
IdentityReport check_grad_k1_identity(const PhaseSpaceDensity& pdf, const OccupationField& field, const Vec3& r1,
                                      std::uint64_t samples, std::uint64_t seed, Exec exec = Exec::Parallel,
                                      int stencil = 2);

// Laplacian of k1 (grid) vs -(N-1) contact integral of n21 . grad rho_hat(x2). Scalars in .x.
IdentityReport check_laplacian_identity(const PhaseSpaceDensity& pdf, const OccupationField& field, const Vec3& r1,
                                        std::uint64_t samples, std::uint64_t seed, Exec exec = Exec::Parallel,
                                        int stencil = 2);

// (d/dt + v1 . grad) k1 with the time derivative from two fields at t -/+ dt, vs the flux integral.
IdentityReport check_streaming_identity(const PhaseSpaceDensity& pdf, const OccupationField& field,
                                        const OccupationField& before, const OccupationField& after, double dt,
                                        const Vec3& r1, const Vec3& v1, std::uint64_t samples, std::uint64_t seed,
                                        Exec exec = Exec::Parallel, int stencil = 2);

struct ContactGradientReport {
    Vec3 partial;      // d k2 / d r1 with r2 fixed, at contact
    Vec3 partial_err;
    Vec3 translation;  // derivative when both points move together
    Vec3 translation_err;
};

// Central differences of k2 at a contact pair (r2 = r1 + sigma n21) using common random numbers.
ContactGradientReport check_contact_k2_gradient(const PhaseSpaceDensity& pdf, const OccupationField& field,
                                                const Vec3& r1, const Vec3& n21, double h, std::uint64_t samples,
                                                std::uint64_t seed, Exec exec = Exec::Parallel);

struct BgMember {
    int n_particles = 4;
    double sigma = 1.0;
};

struct BgRow {
    int n_particles = 0;
    double sigma = 0.0;
    Estimate k1;
    Estimate k2;
    int iterations = 0;
    double residual = 0.0;
};

struct BgTable {
    std::vector<BgRow> rows;
    bool monotone = false;  // |k1 - 1| strictly decreasing along the family
};

// Each member uses the same box and velocity-free template; k1 at the box center and k2 at a
// contact pair straddling the center.
BgTable bg_sweep(const std::vector<BgMember>& members, const DomainSpec& box, const InitialPdfSpec& spec,
                 const OccupationOptions& options, std::uint64_t k2_samples);

void write_occupation_csv(std::ostream& os, const OccupationField& field);
void write_identity_json(std::ostream& os, const std::vector<IdentityReport>& reports);

}  // namespace finitekin
