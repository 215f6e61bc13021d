#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <vector>

#include "finitekin/core/parallel.hpp"
#include "finitekin/core/stats.hpp"
#include "finitekin/density.hpp"
#include "finitekin/dynamics.hpp"

namespace finitekin {

struct ReplicaEnsemble {
    DomainSpec domain;
    std::uint64_t seed = 0;
    std::vector<Trajectory> replicas;
    double acceptance = 1.0;
    std::uint64_t attempts = 0;

    double time() const { return replicas.empty() ? 0.0 : replicas.front().current.t; }
    std::vector<PhasePoint> phase_samples() const;
};

// Each replica draws N particles iid from spec over the box and keeps the draw iff
// ensemble_theta = 1. Replica r uses stream (seed, InitialState, r).
ReplicaEnsemble sample_initial(const InitialPdfSpec& spec, const DomainSpec& domain, std::size_t replicas,
                               std::uint64_t seed, Exec exec = Exec::Parallel);

void advance(ReplicaEnsemble& ensemble, double t, Exec exec = Exec::Parallel, bool record_events = false);

ReplicaEnsemble time_reverse(const ReplicaEnsemble& ensemble, double t_origin = 0.0);

SmoothPdf estimate_pdf(const ReplicaEnsemble& ensemble, const KdeOptions& options = {});

struct MaxwellianParams {
    double n_o = 1.0;
    double T_o = 1.0;
    Vec3 V_o;
};

struct MaxwellianFit {
    MaxwellianParams params;
    double T_err = 0.0;
    Vec3 V_err;
};

double maxwellian_eval(const Vec3& v, const MaxwellianParams& p, double mass);

// Moment matching on raw samples: n_o = N / V_adm, V_o = mean, T_o = m * trace(cov) / 3.
// Errors by batch means over contiguous sample blocks.
MaxwellianFit fit_maxwellian(const std::vector<PhasePoint>& samples, const DomainSpec& domain);
// Same on a density's velocity marginal (for a KDE this includes the kernel variance).
MaxwellianParams fit_maxwellian(const PhaseSpaceDensity& pdf);

// L2 distance over Gamma_1 between rho/mass and the Maxwellian normalized on the admissible
// box. Monte Carlo with draws from rho.
Estimate distance_to_maxwellian(const PhaseSpaceDensity& pdf, const MaxwellianParams& p, std::uint64_t samples,
                                std::uint64_t seed, Exec exec = Exec::Parallel);

inline constexpr double kUnboundedScale = std::numeric_limits<double>::infinity();

// inf over probes of 1 / |grad_r ln rho|; kUnboundedScale when every gradient is ~0.
double scale_length(const PhaseSpaceDensity& pdf, const std::vector<PhasePoint>& probes);
// Same with rho replaced by its spatial marginal n(r); equal for separable densities and far
// less noisy for a 6-D kernel estimate.
double scale_length_spatial(const PhaseSpaceDensity& pdf, const std::vector<PhasePoint>& probes);

// Stratified positions in the admissible box shrunk by margin. Velocities are drawn from pdf,
// or pinned to its mean velocity when core_velocity is set.
std::vector<PhasePoint> default_probes(const PhaseSpaceDensity& pdf, std::size_t count, double margin,
                                       std::uint64_t seed, bool core_velocity = false);

void write_ensemble_csv(std::ostream& os, const ReplicaEnsemble& ensemble, bool header = true);

}  // namespace finitekin
