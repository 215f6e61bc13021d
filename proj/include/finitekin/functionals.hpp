#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "finitekin/core/parallel.hpp"
#include "finitekin/core/stats.hpp"
#include "finitekin/density.hpp"
#include "finitekin/ensemble.hpp"
#include "finitekin/occupation.hpp"

namespace finitekin {

struct DirectionSpec {
    Vec3 b{1.0, 0.0, 0.0};

    DirectionSpec() = default;
    // Throws ConfigError unless |b| = 1 to 1e-9.
    explicit DirectionSpec(const Vec3& unit);
    static DirectionSpec axis(int a);
};

double directional_energy(const Vec3& v, const DirectionSpec& b);
double total_directional_energy(const Vec3& v1, const Vec3& v2, const DirectionSpec& b);
// Change of the total directional energy across a collision, written in the outgoing state.
double delta_M(const Vec3& v1_out, const Vec3& v2_out, const Vec3& n12, const DirectionSpec& b);

// -integral of rho ln(rho / A1) over Gamma_1, sampled from rho.
Estimate bs_entropy(const PhaseSpaceDensity& pdf, double A1, std::uint64_t samples, std::uint64_t seed,
                    Exec exec = Exec::Parallel);

struct KMOptions {
    std::uint64_t samples = 200'000;
    std::uint64_t seed = 1;
    bool cross_check = true;  // also evaluate the Laplacian form
    bool strict = true;       // throw InvariantViolation when K_M < -3 stderr
    Exec exec = Exec::Parallel;
};

struct KMResult {
    Estimate value;      // contact-sphere gradient form, the primary estimate
    Estimate laplacian;  // -integral k1 lap(m / k1)
    Estimate surface;    // wall flux of k1 d_n(m / k1), links the two forms
    double discrepancy = std::numeric_limits<double>::quiet_NaN();  // |value - laplacian| / |value|
    bool negative = false;  // value < -3 stderr
};

// m(r) = integral of (v.b)^2 rho dv. K_M = integral of grad(m / k1) . grad k1 over the admissible
// box, where grad k1 is the contact integral of the partner density.
KMResult compute_KM(const PhaseSpaceDensity& pdf, const OccupationField& occ, const DirectionSpec& b,
                    const KMOptions& options = {});

struct KMoResult {
    double value = 1.0;
    bool degenerate = false;  // K_M(initial) = 0 within noise
};
// max(1, K_M(initial)); degenerate when |K_M| <= 3 stderr.
KMoResult compute_KMo(const Estimate& K_M_initial);

struct IMResult {
    double value = 0.0;  // clamped into [0, 1] when the excursion is within 3 stderr
    double raw = 0.0;
    double stderr_ = 0.0;
    bool out_of_band = false;  // excursion beyond 3 stderr, not clamped
};
IMResult compute_IM(const Estimate& K_M, double K_Mo);

enum class Cbc { Causal, Anticausal };
const char* to_string(Cbc c);

struct WMOptions {
    std::uint64_t samples = 200'000;
    std::uint64_t seed = 1;
    double proposal_widen = 1.25;  // Gaussian velocity proposal width over the pdf's std
    bool quadrature = false;       // rotated sphere rule instead of one random direction per sample
    Exec exec = Exec::Parallel;
};

// Time derivative of K_M from the collision integral. Causal: incoming pairs, gradients at the
// outgoing velocities, overall minus sign. Anticausal: outgoing pairs, gradients at the
// pre-collision velocities, plus sign.
Estimate compute_WM(const PhaseSpaceDensity& pdf, const OccupationField& occ, const DirectionSpec& b, Cbc cbc,
                    const WMOptions& options = {});

struct FunctionalConfig {
    DirectionSpec b;
    bool average_axes = false;
    double A1 = 1.0;
    Cbc cbc = Cbc::Causal;
    std::uint64_t entropy_samples = 200'000;
    std::uint64_t km_samples = 200'000;
    std::uint64_t wm_samples = 200'000;
    std::uint64_t distance_samples = 100'000;
    bool km_cross_check = false;
    OccupationOptions occupation;
    KdeOptions kde;
    std::size_t probes = 512;
    std::uint64_t seed = 1;
    Exec exec = Exec::Parallel;
};

struct FunctionalSample {
    double t = 0.0;
    Estimate S;
    Estimate K_M;
    double K_Mo = 1.0;
    double I_M = 0.0;
    double I_M_raw = 0.0;
    Estimate W_M;
    double L_rho = kUnboundedScale;
    Estimate dist_maxwellian;
    MaxwellianFit maxwellian;
    Vec3 b{1.0, 0.0, 0.0};
    Cbc cbc = Cbc::Causal;
    double km_laplacian = std::numeric_limits<double>::quiet_NaN();
    double k1_min = 1.0, k1_max = 1.0;
    bool degenerate_start = false;
};

// Functionals of one snapshot with K_Mo given (pass 0 to derive it from this snapshot).
FunctionalSample evaluate_functionals(const ReplicaEnsemble& ensemble, const FunctionalConfig& config,
                                      double K_Mo = 0.0, int index = 0);

// Advances the ensemble through the times (ascending, >= current) and evaluates each; K_Mo is
// frozen from the first row.
std::vector<FunctionalSample> functional_timeseries(ReplicaEnsemble& ensemble, const std::vector<double>& times,
                                                    const FunctionalConfig& config);

void write_timeseries_csv(std::ostream& os, const std::vector<FunctionalSample>& rows, bool header = true);

}  // namespace finitekin
