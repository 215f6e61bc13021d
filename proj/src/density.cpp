#include "finitekin/density.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "finitekin/core/error.hpp"

namespace finitekin {

namespace {

constexpr double kCutoff = 40.0;  // skip kernels with exponent below exp(-40)

double gaussian_self_overlap(double s) { return 1.0 / (2.0 * s * std::sqrt(std::numbers::pi)); }

}  // namespace

void InitialPdfSpec::validate(const DomainSpec& domain) const {
    std::vector<std::string> problems;
    if (spatial.axis < 0 || spatial.axis > 2) problems.push_back("initial.spatial_axis: must be 0, 1 or 2");
    if (!std::isfinite(spatial.slope)) problems.push_back("initial.spatial_slope: must be finite");
    if (spatial.kind == SpatialKind::Ramp && spatial.axis >= 0 && spatial.axis <= 2) {
        const double L = domain.extent()[spatial.axis];
        if (!(std::fabs(spatial.slope) * 0.5 * L < 1.0)) {
            problems.push_back("initial.spatial_slope: ramp must stay strictly positive on the box");
        }
    }
    for (int a = 0; a < 3; ++a) {
        if (!(velocity.temperature[a] > 0.0) || !std::isfinite(velocity.temperature[a])) {
            problems.push_back("initial.temperature: components must be > 0");
            break;
        }
    }
    if (!is_finite(velocity.drift)) problems.push_back("initial.drift: must be finite");
    if (!(velocity.beam_speed >= 0.0)) problems.push_back("initial.beam_speed: must be >= 0");
    if (velocity.beam_axis < 0 || velocity.beam_axis > 2) problems.push_back("initial.beam_axis: must be 0, 1 or 2");
    if (!problems.empty()) throw ConfigError(problems);
}

ProfilePdf::ProfilePdf(const InitialPdfSpec& spec, const DomainSpec& domain, double mass, Support support)
    : spec_(spec), domain_(domain), mass_(mass) {
    spec_.validate(domain);
    lo_ = support == Support::Box ? domain.box_lo : domain.admissible_lo();
    hi_ = support == Support::Box ? domain.box_hi : domain.admissible_hi();
    const int ax = spec_.spatial.axis;
    const double L = hi_[ax] - lo_[ax];
    double area = 1.0;
    for (int a = 0; a < 3; ++a)
        if (a != ax) area *= hi_[a] - lo_[a];
    const double s = spec_.spatial.slope;
    double line = L;
    if (spec_.spatial.kind == SpatialKind::Exponential && s != 0.0) {
        line = 2.0 * std::sinh(0.5 * s * L) / s;
    }
    q_norm_ = 1.0 / (area * line);
}

double ProfilePdf::shape(double x) const {
    const int ax = spec_.spatial.axis;
    const double y = x - 0.5 * (lo_[ax] + hi_[ax]);
    switch (spec_.spatial.kind) {
        case SpatialKind::Uniform: return 1.0;
        case SpatialKind::Ramp: return 1.0 + spec_.spatial.slope * y;
        case SpatialKind::Exponential: return std::exp(spec_.spatial.slope * y);
    }
    return 1.0;
}

double ProfilePdf::shape_d1(double x) const {
    switch (spec_.spatial.kind) {
        case SpatialKind::Uniform: return 0.0;
        case SpatialKind::Ramp: return spec_.spatial.slope;
        case SpatialKind::Exponential: return spec_.spatial.slope * shape(x);
    }
    return 0.0;
}

double ProfilePdf::shape_d2(double x) const {
    if (spec_.spatial.kind == SpatialKind::Exponential) return spec_.spatial.slope * spec_.spatial.slope * shape(x);
    return 0.0;
}

PointDerivs ProfilePdf::spatial(const Vec3& r) const {
    for (int a = 0; a < 3; ++a)
        if (r[a] < lo_[a] || r[a] > hi_[a]) return {};
    const int ax = spec_.spatial.axis;
    const double x = r[ax];
    PointDerivs out;
    out.value = mass_ * q_norm_ * shape(x);
    out.grad[ax] = mass_ * q_norm_ * shape_d1(x);
    out.lap = mass_ * q_norm_ * shape_d2(x);
    return out;
}

double ProfilePdf::velocity_value(const Vec3& v) const {
    const auto& vp = spec_.velocity;
    const double m = domain_.mass;
    auto gauss = [&](const Vec3& c) {
        double e = 0.0, norm = 1.0;
        for (int a = 0; a < 3; ++a) {
            const double var = vp.temperature[a] / m;
            e += (v[a] - c[a]) * (v[a] - c[a]) / (2.0 * var);
            norm *= std::sqrt(2.0 * std::numbers::pi * var);
        }
        return std::exp(-e) / norm;
    };
    if (vp.beam_speed == 0.0) return gauss(vp.drift);
    Vec3 shift;
    shift[vp.beam_axis] = vp.beam_speed;
    return 0.5 * (gauss(vp.drift + shift) + gauss(vp.drift - shift));
}

PointDerivs ProfilePdf::eval(const Vec3& r, const Vec3& v) const {
    PointDerivs s = spatial(r);
    const double f = velocity_value(v);
    s.value *= f;
    s.grad *= f;
    s.lap *= f;
    return s;
}

PointDerivs ProfilePdf::directional_moment(const Vec3& r, const Vec3& b) const {
    const auto& vp = spec_.velocity;
    double mb = 0.0;
    for (int a = 0; a < 3; ++a) mb += b[a] * b[a] * vp.temperature[a] / domain_.mass;
    mb += dot(b, vp.drift) * dot(b, vp.drift);
    mb += vp.beam_speed * vp.beam_speed * b[vp.beam_axis] * b[vp.beam_axis];
    PointDerivs s = spatial(r);
    s.value *= mb;
    s.grad *= mb;
    s.lap *= mb;
    return s;
}

Vec3 ProfilePdf::flux(const Vec3& r) const { return spec_.velocity.drift * spatial(r).value; }

Vec3 ProfilePdf::sample_position(CounterRng& rng) const {
    Vec3 r;
    for (int a = 0; a < 3; ++a) r[a] = rng.uniform(lo_[a], hi_[a]);
    const int ax = spec_.spatial.axis;
    const double L = hi_[ax] - lo_[ax];
    const double c = 0.5 * (lo_[ax] + hi_[ax]);
    const double u = rng.uniform();
    const double s = spec_.spatial.slope;
    double y = (u - 0.5) * L;
    if (spec_.spatial.kind == SpatialKind::Ramp && s != 0.0) {
        // Root of (s/2) y^2 + y + C = 0 inside [-L/2, L/2].
        const double C = 0.5 * L - s * L * L / 8.0 - u * L;
        y = -2.0 * C / (1.0 + std::sqrt(std::max(0.0, 1.0 - 2.0 * s * C)));
    } else if (spec_.spatial.kind == SpatialKind::Exponential && s != 0.0) {
        const double a = std::exp(-0.5 * s * L), b = std::exp(0.5 * s * L);
        y = std::log(a + u * (b - a)) / s;
    }
    r[ax] = std::clamp(c + y, lo_[ax], hi_[ax]);
    return r;
}

Vec3 ProfilePdf::sample_velocity(CounterRng& rng) const {
    const auto& vp = spec_.velocity;
    Vec3 v = vp.drift;
    if (vp.beam_speed > 0.0) v[vp.beam_axis] += rng.uniform() < 0.5 ? vp.beam_speed : -vp.beam_speed;
    for (int a = 0; a < 3; ++a) v[a] += std::sqrt(vp.temperature[a] / domain_.mass) * rng.normal();
    return v;
}

PhasePoint ProfilePdf::sample(CounterRng& rng) const {
    const Vec3 r = sample_position(rng);
    return {r, sample_velocity(rng)};
}

Vec3 ProfilePdf::velocity_std() const {
    const auto& vp = spec_.velocity;
    Vec3 s;
    for (int a = 0; a < 3; ++a) {
        double var = vp.temperature[a] / domain_.mass;
        if (a == vp.beam_axis) var += vp.beam_speed * vp.beam_speed;
        s[a] = std::sqrt(var);
    }
    return s;
}

double ProfilePdf::l2_norm_squared() const {
    const int ax = spec_.spatial.axis;
    const double L = hi_[ax] - lo_[ax];
    double area = 1.0;
    for (int a = 0; a < 3; ++a)
        if (a != ax) area *= hi_[a] - lo_[a];
    const double s = spec_.spatial.slope;
    double line = L;
    if (spec_.spatial.kind == SpatialKind::Ramp) line = L + s * s * L * L * L / 12.0;
    if (spec_.spatial.kind == SpatialKind::Exponential && s != 0.0) line = std::sinh(s * L) / s;
    const double q2 = q_norm_ * q_norm_ * area * line;

    const auto& vp = spec_.velocity;
    double f2 = 1.0;
    for (int a = 0; a < 3; ++a) {
        const double sd = std::sqrt(vp.temperature[a] / domain_.mass);
        if (vp.beam_speed > 0.0 && a == vp.beam_axis) {
            const double u = vp.beam_speed;
            f2 *= 0.5 * gaussian_self_overlap(sd) * (1.0 + std::exp(-u * u / (sd * sd)));
        } else {
            f2 *= gaussian_self_overlap(sd);
        }
    }
    return mass_ * mass_ * q2 * f2;
}

SmoothPdf::SmoothPdf(std::vector<PhasePoint> samples, const DomainSpec& domain, const KdeOptions& options)
    : samples_(std::move(samples)), domain_(domain), boundary_(options.boundary) {
    if (samples_.empty()) throw NumericalFault("SmoothPdf: empty sample set");
    mass_ = options.mass > 0.0 ? options.mass : double(domain.n_particles);
    const auto n = double(samples_.size());
    Vec3 rm, vm;
    for (const auto& p : samples_) {
        rm += p.r;
        vm += p.v;
    }
    rm /= n;
    vm /= n;
    Vec3 rs, vs;
    for (const auto& p : samples_) {
        for (int a = 0; a < 3; ++a) {
            rs[a] += (p.r[a] - rm[a]) * (p.r[a] - rm[a]);
            vs[a] += (p.v[a] - vm[a]) * (p.v[a] - vm[a]);
        }
    }
    for (int a = 0; a < 3; ++a) {
        rs[a] = std::sqrt(rs[a] / std::max(1.0, n - 1.0));
        vs[a] = std::sqrt(vs[a] / std::max(1.0, n - 1.0));
    }
    v_mean_ = vm;
    const double factor = std::pow(4.0 / (8.0 * n), 0.1) * options.bandwidth_scale;
    for (int a = 0; a < 3; ++a) {
        h_r_[a] = options.h_r[a];
        h_v_[a] = options.h_v[a];
        if (!(h_r_[a] > 0.0)) {
            if (!(rs[a] > 0.0)) throw NumericalFault("SmoothPdf: degenerate bandwidth (zero position spread)");
            h_r_[a] = rs[a] * factor;
        }
        if (!(h_v_[a] > 0.0)) {
            if (!(vs[a] > 0.0)) throw NumericalFault("SmoothPdf: degenerate bandwidth (zero velocity spread)");
            h_v_[a] = vs[a] * factor;
        }
        v_std_[a] = std::sqrt(vs[a] * vs[a] + h_v_[a] * h_v_[a]);
    }
    lo_ = domain.admissible_lo();
    hi_ = domain.admissible_hi();
    const double tp3 = std::pow(2.0 * std::numbers::pi, 1.5);
    r_norm_ = 1.0 / (tp3 * h_r_.x * h_r_.y * h_r_.z);
    v_norm_ = 1.0 / (tp3 * h_v_.x * h_v_.y * h_v_.z);
}

template <class VelocityWeight>
PointDerivs SmoothPdf::accumulate(const Vec3& r, VelocityWeight&& weight) const {
    PointDerivs acc;
    if (boundary_ == KdeBoundary::Reflect) {
        for (int a = 0; a < 3; ++a)
            if (r[a] < lo_[a] || r[a] > hi_[a]) return acc;
    }
    const Vec3 inv{1.0 / h_r_.x, 1.0 / h_r_.y, 1.0 / h_r_.z};
    for (const auto& p : samples_) {
        const double w = weight(p);
        if (w == 0.0) continue;
        if (boundary_ == KdeBoundary::None) {
            const Vec3 u{(r.x - p.r.x) * inv.x, (r.y - p.r.y) * inv.y, (r.z - p.r.z) * inv.z};
            const double e = 0.5 * norm2(u);
            if (e > kCutoff) continue;
            const double k = w * std::exp(-e);
            acc.value += k;
            acc.grad.x -= k * u.x * inv.x;
            acc.grad.y -= k * u.y * inv.y;
            acc.grad.z -= k * u.z * inv.z;
            acc.lap += k * ((u.x * u.x - 1.0) * inv.x * inv.x + (u.y * u.y - 1.0) * inv.y * inv.y +
                            (u.z * u.z - 1.0) * inv.z * inv.z);
        } else {
            // Per-axis image sums at the admissible planes.
            double g[3], g1[3], g2[3];
            bool negligible = false;
            for (int a = 0; a < 3; ++a) {
                const double centers[3] = {p.r[a], 2.0 * lo_[a] - p.r[a], 2.0 * hi_[a] - p.r[a]};
                g[a] = g1[a] = g2[a] = 0.0;
                for (double c : centers) {
                    const double u = (r[a] - c) * inv[a];
                    if (0.5 * u * u > kCutoff) continue;
                    const double phi = std::exp(-0.5 * u * u);
                    g[a] += phi;
                    g1[a] -= phi * u * inv[a];
                    g2[a] += phi * (u * u - 1.0) * inv[a] * inv[a];
                }
                if (g[a] == 0.0) {
                    negligible = true;
                    break;
                }
            }
            if (negligible) continue;
            const double prod = g[0] * g[1] * g[2];
            acc.value += w * prod;
            acc.grad.x += w * g1[0] * g[1] * g[2];
            acc.grad.y += w * g[0] * g1[1] * g[2];
            acc.grad.z += w * g[0] * g[1] * g1[2];
            acc.lap += w * (g2[0] * g[1] * g[2] + g[0] * g2[1] * g[2] + g[0] * g[1] * g2[2]);
        }
    }
    const double scale = mass_ * r_norm_ / double(samples_.size());
    acc.value *= scale;
    acc.grad *= scale;
    acc.lap *= scale;
    return acc;
}

PointDerivs SmoothPdf::eval(const Vec3& r, const Vec3& v) const {
    const Vec3 inv{1.0 / h_v_.x, 1.0 / h_v_.y, 1.0 / h_v_.z};
    PointDerivs out = accumulate(r, [&](const PhasePoint& p) {
        const Vec3 w{(v.x - p.v.x) * inv.x, (v.y - p.v.y) * inv.y, (v.z - p.v.z) * inv.z};
        const double e = 0.5 * norm2(w);
        return e > kCutoff ? 0.0 : std::exp(-e);
    });
    out.value *= v_norm_;
    out.grad *= v_norm_;
    out.lap *= v_norm_;
    return out;
}

double SmoothPdf::value(const Vec3& r, const Vec3& v) const {
    bool near[3] = {false, false, false};
    const bool reflect = boundary_ == KdeBoundary::Reflect;
    if (reflect) {
        for (int a = 0; a < 3; ++a) {
            if (r[a] < lo_[a] || r[a] > hi_[a]) return 0.0;
            const double reach = std::sqrt(2.0 * kCutoff) * h_r_[a];
            near[a] = r[a] - lo_[a] < reach || hi_[a] - r[a] < reach;
        }
    }
    const Vec3 ir{1.0 / h_r_.x, 1.0 / h_r_.y, 1.0 / h_r_.z};
    const Vec3 iv{1.0 / h_v_.x, 1.0 / h_v_.y, 1.0 / h_v_.z};
    double acc = 0.0;
    for (const auto& p : samples_) {
        const Vec3 w{(v.x - p.v.x) * iv.x, (v.y - p.v.y) * iv.y, (v.z - p.v.z) * iv.z};
        const Vec3 u{(r.x - p.r.x) * ir.x, (r.y - p.r.y) * ir.y, (r.z - p.r.z) * ir.z};
        const double e = 0.5 * (norm2(w) + norm2(u));
        if (e > kCutoff) continue;
        double k = std::exp(-e);
        // Image at a plane relative to the direct term: exp(-2 d_r d_p / h^2), d the distances to the plane.
        for (int a = 0; a < 3; ++a) {
            if (!near[a]) continue;
            const double s = 2.0 * ir[a] * ir[a];
            const double x1 = s * (r[a] - lo_[a]) * (p.r[a] - lo_[a]);
            const double x2 = s * (hi_[a] - r[a]) * (hi_[a] - p.r[a]);
            k *= 1.0 + (x1 < kCutoff ? std::exp(-x1) : 0.0) + (x2 < kCutoff ? std::exp(-x2) : 0.0);
        }
        acc += k;
    }
    return acc * mass_ * r_norm_ * v_norm_ / double(samples_.size());
}

PointDerivs SmoothPdf::spatial(const Vec3& r) const {
    return accumulate(r, [](const PhasePoint&) { return 1.0; });
}

PointDerivs SmoothPdf::directional_moment(const Vec3& r, const Vec3& b) const {
    double smear = 0.0;
    for (int a = 0; a < 3; ++a) smear += b[a] * b[a] * h_v_[a] * h_v_[a];
    return accumulate(r, [&](const PhasePoint& p) {
        const double c = dot(p.v, b);
        return c * c + smear;
    });
}

Vec3 SmoothPdf::flux(const Vec3& r) const {
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        out[a] = accumulate(r, [a](const PhasePoint& p) { return p.v[a]; }).value;
    }
    return out;
}

Vec3 SmoothPdf::sample_position(CounterRng& rng) const {
    const auto& p = samples_[rng.below(samples_.size())];
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        double x = p.r[a] + h_r_[a] * rng.normal();
        if (boundary_ == KdeBoundary::Reflect) x = fold(x, a);
        out[a] = x;
    }
    return out;
}

double SmoothPdf::fold(double x, int a) const {
    const double L = hi_[a] - lo_[a];
    double y = std::fmod(x - lo_[a], 2.0 * L);
    if (y < 0.0) y += 2.0 * L;
    if (y > L) y = 2.0 * L - y;
    return lo_[a] + y;
}

PhasePoint SmoothPdf::sample(CounterRng& rng) const {
    const auto& p = samples_[rng.below(samples_.size())];
    PhasePoint out;
    for (int a = 0; a < 3; ++a) {
        double x = p.r[a] + h_r_[a] * rng.normal();
        if (boundary_ == KdeBoundary::Reflect) x = fold(x, a);
        out.r[a] = x;
        out.v[a] = p.v[a] + h_v_[a] * rng.normal();
    }
    return out;
}

void SmoothPdf::eval_many(std::span<const PhasePoint> points, std::span<PointDerivs> out, Exec exec) const {
    const auto n = std::int64_t(points.size());
    for_each_index(n, exec, [&](std::int64_t k) { out[k] = eval(points[k].r, points[k].v); });
}

}  // namespace finitekin
