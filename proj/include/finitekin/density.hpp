#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "finitekin/core/parallel.hpp"
#include "finitekin/core/rng.hpp"
#include "finitekin/domain.hpp"

namespace finitekin {

struct PointDerivs {
    double value = 0.0;
    Vec3 grad;
    double lap = 0.0;
};

struct PhasePoint {
    Vec3 r;
    Vec3 v;
};

// A 1-body phase-space density rho(r, v) integrating to mass() over Gamma_1.
class PhaseSpaceDensity {
public:
    virtual ~PhaseSpaceDensity() = default;

    virtual const DomainSpec& domain() const = 0;
    virtual double mass() const = 0;

    // rho and its spatial gradient / Laplacian at fixed v.
    virtual PointDerivs eval(const Vec3& r, const Vec3& v) const = 0;
    virtual double value(const Vec3& r, const Vec3& v) const { return eval(r, v).value; }

    // n(r) = integral of rho over v, with derivatives.
    virtual PointDerivs spatial(const Vec3& r) const = 0;
    // integral of (v.b)^2 rho over v, with derivatives.
    virtual PointDerivs directional_moment(const Vec3& r, const Vec3& b) const = 0;
    // integral of v rho over v.
    virtual Vec3 flux(const Vec3& r) const = 0;

    // Draws from rho / mass.
    virtual PhasePoint sample(CounterRng& rng) const = 0;
    virtual Vec3 sample_position(CounterRng& rng) const { return sample(rng).r; }

    virtual Vec3 velocity_mean() const = 0;
    // Per-axis standard deviation of the velocity marginal.
    virtual Vec3 velocity_std() const = 0;
};

enum class SpatialKind { Uniform, Ramp, Exponential };

// Density over a support box: Uniform, 1 + slope*(x_axis - center), or exp(slope*x_axis).
struct SpatialProfile {
    SpatialKind kind = SpatialKind::Uniform;
    int axis = 0;
    double slope = 0.0;
};

// Gaussian with per-axis temperature and drift; beam_speed > 0 makes it an equal mixture of
// two Gaussians displaced by +-beam_speed along beam_axis.
struct VelocityProfile {
    Vec3 drift;
    Vec3 temperature{1.0, 1.0, 1.0};
    double beam_speed = 0.0;
    int beam_axis = 0;
};

struct InitialPdfSpec {
    SpatialProfile spatial;
    VelocityProfile velocity;

    void validate(const DomainSpec& domain) const;
};

// Analytic product density mass * q(r) * f(v), q normalized on [lo, hi] and zero outside.
class ProfilePdf final : public PhaseSpaceDensity {
public:
    enum class Support { Box, Admissible };

    ProfilePdf(const InitialPdfSpec& spec, const DomainSpec& domain, double mass,
               Support support = Support::Admissible);

    const DomainSpec& domain() const override { return domain_; }
    double mass() const override { return mass_; }
    PointDerivs eval(const Vec3& r, const Vec3& v) const override;
    PointDerivs spatial(const Vec3& r) const override;
    PointDerivs directional_moment(const Vec3& r, const Vec3& b) const override;
    Vec3 flux(const Vec3& r) const override;
    PhasePoint sample(CounterRng& rng) const override;
    Vec3 sample_position(CounterRng& rng) const override;
    Vec3 velocity_mean() const override { return spec_.velocity.drift; }
    Vec3 velocity_std() const override;

    double velocity_value(const Vec3& v) const;
    Vec3 sample_velocity(CounterRng& rng) const;
    // Integral of rho^2 over Gamma_1, in closed form.
    double l2_norm_squared() const;
    const InitialPdfSpec& spec() const { return spec_; }

private:
    double shape(double x) const;
    double shape_d1(double x) const;
    double shape_d2(double x) const;

    InitialPdfSpec spec_;
    DomainSpec domain_;
    double mass_;
    Vec3 lo_, hi_;
    double q_norm_ = 1.0;  // 1 / integral of the unnormalized q
};

enum class KdeBoundary { None, Reflect };

struct KdeOptions {
    // Non-positive entries are replaced by the Silverman rule for that coordinate.
    Vec3 h_r{0.0, 0.0, 0.0};
    Vec3 h_v{0.0, 0.0, 0.0};
    double bandwidth_scale = 1.0;
    KdeBoundary boundary = KdeBoundary::None;
    double mass = 0.0;  // 0 means domain.n_particles
};

// Product-Gaussian kernel density estimate with analytic spatial derivatives.
class SmoothPdf final : public PhaseSpaceDensity {
public:
    SmoothPdf(std::vector<PhasePoint> samples, const DomainSpec& domain, const KdeOptions& options = {});

    const DomainSpec& domain() const override { return domain_; }
    double mass() const override { return mass_; }
    PointDerivs eval(const Vec3& r, const Vec3& v) const override;
    // Value only: one exponential per kernel away from the reflecting planes.
    double value(const Vec3& r, const Vec3& v) const override;
    PointDerivs spatial(const Vec3& r) const override;
    PointDerivs directional_moment(const Vec3& r, const Vec3& b) const override;
    Vec3 flux(const Vec3& r) const override;
    PhasePoint sample(CounterRng& rng) const override;
    Vec3 sample_position(CounterRng& rng) const override;
    Vec3 velocity_mean() const override { return v_mean_; }
    Vec3 velocity_std() const override { return v_std_; }

    const std::vector<PhasePoint>& samples() const { return samples_; }
    Vec3 h_r() const { return h_r_; }
    Vec3 h_v() const { return h_v_; }
    KdeBoundary boundary() const { return boundary_; }

    // Serial reference and OpenMP path for batched evaluation.
    void eval_many(std::span<const PhasePoint> points, std::span<PointDerivs> out, Exec exec) const;

private:
    template <class VelocityWeight>
    PointDerivs accumulate(const Vec3& r, VelocityWeight&& weight) const;
    // Mirror-fold a coordinate into the admissible interval.
    double fold(double x, int a) const;

    std::vector<PhasePoint> samples_;
    DomainSpec domain_;
    Vec3 h_r_, h_v_;
    KdeBoundary boundary_;
    double mass_;
    Vec3 lo_, hi_;
    Vec3 v_mean_, v_std_;
    double r_norm_ = 0.0, v_norm_ = 0.0;
};

}  // namespace finitekin
