#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <vector>

#include "finitekin/core/parallel.hpp"
#include "finitekin/density.hpp"
#include "finitekin/functionals.hpp"
#include "finitekin/occupation.hpp"

namespace finitekin {

enum class KernelMode { Master, Boltzmann };
const char* to_string(KernelMode k);

// P weighted samples of rho_1 / N.
struct KineticParticleSet {
    std::vector<Vec3> r, v;
    std::vector<double> w;
    double t = 0.0;
    KernelMode kernel = KernelMode::Master;
    Cbc cbc = Cbc::Causal;

    std::size_t size() const { return r.size(); }
    // Throws NumericalFault on bad weights or positions outside the admissible box.
    void validate(const DomainSpec& domain) const;
};

// Positions from pdf restricted to the admissible box, velocities from pdf, equal weights.
KineticParticleSet make_particle_set(const PhaseSpaceDensity& pdf, std::size_t count, std::uint64_t seed,
                                     KernelMode kernel = KernelMode::Master, Cbc cbc = Cbc::Causal);

// Where k1 and k2 come from. Constant: k1 = 1 and k2 = constant. Field: k1 from an occupation
// field and k2 from a pool of configurations, rebuilt from the particles every refresh_every steps.
struct OccupationSource {
    double constant = 1.0;
    std::shared_ptr<const OccupationField> k1;
    std::shared_ptr<const PairOccupation> k2;

    bool is_constant() const { return !k2; }
};

struct CollisionKernelConfig {
    DomainSpec domain;
    double dt = 0.5;
    double cell_size = 1.0;      // partner search cells
    double displacement = 1.0;   // |r2 - r1|; sigma in master mode, 0 in boltzmann mode
    bool wall_theta = true;      // reject partners whose center is not admissible
    double majorant_factor = 1.5;
    bool use_field = true;       // master mode: estimate k1, k2 from the particles
    double k2_constant = 1.0;    // used when use_field is off
    int refresh_every = 10;
    std::size_t kde_subsample = 4096;
    std::size_t pool_size = 4096;
    OccupationOptions refresh;

    static CollisionKernelConfig master(const DomainSpec& domain, double dt);
    static CollisionKernelConfig boltzmann(const DomainSpec& domain, double dt);
    // Range checks; dt against 0.2 x the mean free time of the given set.
    void validate(const KineticParticleSet& set) const;
};

double mean_free_time(const KineticParticleSet& set, const DomainSpec& domain);

// Ballistic motion with specular reflection at the admissible faces.
void stream_and_reflect(KineticParticleSet& set, double dt, const DomainSpec& domain, Exec exec = Exec::Parallel);

struct CollideStats {
    std::uint64_t candidates = 0;
    std::uint64_t accepted = 0;
    std::uint64_t wall_rejected = 0;
    int majorant_raises = 0;
};

// One null-collision step. The majorant is raised by majorant_factor and the step redone when
// an acceptance probability exceeds 1.
CollideStats collide_step(KineticParticleSet& set, const CollisionKernelConfig& cfg, const OccupationSource& occ,
                          std::uint64_t seed, std::uint64_t step, Exec exec = Exec::Parallel);

struct VelocityMoments {
    Vec3 mean, mean_err;
    double cov[3][3] = {};
    double cov_err[3][3] = {};
};
VelocityMoments velocity_moments(const KineticParticleSet& set);

// Kernel estimate from a deterministic subsample (reflecting boundary).
SmoothPdf particle_pdf(const KineticParticleSet& set, const DomainSpec& domain, std::size_t subsample,
                       std::uint64_t seed);

struct SolverDiagnostics {
    int every = 0;            // 0: first and last step only
    std::size_t subsample = 20000;
    std::uint64_t entropy_samples = 20000;
    std::uint64_t distance_samples = 20000;
    double A1 = 1.0;
    // Same subsample indices and MC draws at every row, so row differences carry little MC noise.
    bool common_random_numbers = true;
};

struct SolverRow {
    int step = 0;
    double t = 0.0;
    Estimate S;
    Estimate dist_maxwellian;
    MaxwellianFit maxwellian;
    VelocityMoments moments;
    std::uint64_t collisions = 0;  // accepted since the previous row
};

struct SolverRun {
    std::vector<SolverRow> rows;
    CollideStats totals;
    double wall_rejected_fraction = 0.0;
    int refreshes = 0;
};

using SnapshotHook = std::function<void(const KineticParticleSet&, int step)>;

SolverRun run_solver(KineticParticleSet& set, const CollisionKernelConfig& cfg, int steps, std::uint64_t seed,
                     const SolverDiagnostics& diag = {}, const SnapshotHook& hook = {}, Exec exec = Exec::Parallel);

void write_particles_csv(std::ostream& os, const KineticParticleSet& set, bool header = true);

}  // namespace finitekin
