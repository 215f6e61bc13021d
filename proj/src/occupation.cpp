#include "finitekin/occupation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include <json.hpp>

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"

namespace finitekin {

namespace {

constexpr double kFourPi = 4.0 * std::numbers::pi;

// Sequential configuration builder with early exit on the first overlap. Small
// systems use brute force, larger ones a cell list over the admissible box.
class Packer {
public:
    Packer(const DomainSpec& domain, int capacity)
        : lo_(domain.admissible_lo()), hi_(domain.admissible_hi()), sigma_(domain.sigma), sigma2_(sigma_ * sigma_) {
        pos_.reserve(capacity);
        if (capacity > 16) {
            const Vec3 ext = hi_ - lo_;
            for (int a = 0; a < 3; ++a) {
                n_[a] = std::clamp(int(ext[a] / sigma_), 1, 64);
                inv_[a] = double(n_[a]) / ext[a];
            }
            head_.assign(std::size_t(n_[0]) * n_[1] * n_[2], -1);
            stamp_.assign(head_.size(), 0);
            next_.resize(capacity);
            use_cells_ = true;
        }
    }

    void reset() {
        pos_.clear();
        ++cur_;
    }

    bool admissible(const Vec3& r) const {
        return r.x >= lo_.x && r.x <= hi_.x && r.y >= lo_.y && r.y <= hi_.y && r.z >= lo_.z && r.z <= hi_.z;
    }

    // Whether r clears every stored center (strictly farther than sigma).
    bool clear(const Vec3& r) const {
        if (!use_cells_) {
            for (const auto& p : pos_) {
                if (norm2(p - r) <= sigma2_) return false;
            }
            return true;
        }
        const auto c = cell_of(r);
        for (int dz = -1; dz <= 1; ++dz) {
            const int z = c[2] + dz;
            if (z < 0 || z >= n_[2]) continue;
            for (int dy = -1; dy <= 1; ++dy) {
                const int y = c[1] + dy;
                if (y < 0 || y >= n_[1]) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int x = c[0] + dx;
                    if (x < 0 || x >= n_[0]) continue;
                    const std::size_t id = (std::size_t(z) * n_[1] + y) * n_[0] + x;
                    if (stamp_[id] != cur_) continue;
                    for (int k = head_[id]; k >= 0; k = next_[k]) {
                        if (norm2(pos_[k] - r) <= sigma2_) return false;
                    }
                }
            }
        }
        return true;
    }

    // Appends r if it is admissible and clear; returns false otherwise.
    bool push(const Vec3& r) {
        if (!admissible(r) || !clear(r)) return false;
        const int k = int(pos_.size());
        pos_.push_back(r);
        if (use_cells_) {
            const auto c = cell_of(r);
            const std::size_t id = (std::size_t(c[2]) * n_[1] + c[1]) * n_[0] + c[0];
            if (stamp_[id] != cur_) {
                stamp_[id] = cur_;
                head_[id] = -1;
            }
            next_[k] = head_[id];
            head_[id] = k;
        }
        return true;
    }

    const std::vector<Vec3>& positions() const { return pos_; }

private:
    std::array<int, 3> cell_of(const Vec3& r) const {
        std::array<int, 3> c{};
        for (int a = 0; a < 3; ++a) c[a] = std::clamp(int((r[a] - lo_[a]) * inv_[a]), 0, n_[a] - 1);
        return c;
    }

    Vec3 lo_, hi_;
    double sigma_, sigma2_;
    std::vector<Vec3> pos_;
    bool use_cells_ = false;
    std::array<int, 3> n_{1, 1, 1};
    Vec3 inv_;
    std::vector<int> head_, next_;
    std::vector<std::uint32_t> stamp_;
    std::uint32_t cur_ = 0;
};

// Draws up to m positions from the spatial marginal; stops at the first
// inadmissible one. Returns the number placed.
int pack(const PhaseSpaceDensity& pdf, Packer& packer, CounterRng& rng, int m) {
    packer.reset();
    for (int j = 0; j < m; ++j) {
        if (!packer.push(pdf.sample_position(rng))) return j;
    }
    return m;
}

double n_unit(const PhaseSpaceDensity& pdf, const Vec3& r) { return pdf.spatial(r).value / pdf.mass(); }

OccupationGrid make_grid(const DomainSpec& domain, int n) {
    return {domain.admissible_lo(), domain.admissible_hi(), n};
}

// Weighted blocked-node accumulation for fixed weights. Returns per-cell ratio estimates.
struct Evaluation {
    std::vector<double> values, errors;
    std::uint64_t admitted = 0;
};

Evaluation evaluate(const PhaseSpaceDensity& pdf, const OccupationField& f, std::uint64_t samples,
                    std::uint64_t seed, int batches, Exec exec, std::vector<std::uint8_t>* admissible, bool first) {
    const DomainSpec& domain = pdf.domain();
    const int m = domain.n_particles - 1;
    const std::size_t cells = f.grid.size();
    const Vec3 d = f.grid.spacing();
    const double s = domain.sigma, s2 = s * s;
    std::vector<std::vector<double>> blocked(batches, std::vector<double>(cells, 0.0));
    std::vector<double> den(batches, 0.0);
    std::vector<std::uint64_t> admitted(batches, 0);

    for_each_index(batches, exec, [&](std::int64_t b) {
        Packer packer(domain, std::max(m, 1));
        std::vector<std::uint32_t> mark(cells, 0);
        std::uint32_t stamp = 0;
        auto& blk = blocked[b];
        const auto [lo, hi] = batch_range(samples, batches, int(b));
        for (std::uint64_t i = lo; i < hi; ++i) {
            if (!first && admissible && !(*admissible)[i]) continue;
            CounterRng rng(seed, Stream::Occupation, i);
            const bool ok = pack(pdf, packer, rng, m) == m;
            if (admissible && first) (*admissible)[i] = ok;
            if (!ok) continue;
            ++admitted[b];
            double w = 1.0;
            for (const auto& r : packer.positions()) w /= f.weight_k(r);
            den[b] += w;
            ++stamp;
            for (const auto& r : packer.positions()) {
                int ilo[3], ihi[3];
                for (int a = 0; a < 3; ++a) {
                    ilo[a] = std::max(0, int(std::ceil((r[a] - s - f.grid.lo[a]) / d[a] - 0.5)));
                    ihi[a] = std::min(f.grid.n - 1, int(std::floor((r[a] + s - f.grid.lo[a]) / d[a] - 0.5)));
                }
                for (int k = ilo[2]; k <= ihi[2]; ++k) {
                    for (int j = ilo[1]; j <= ihi[1]; ++j) {
                        for (int ii = ilo[0]; ii <= ihi[0]; ++ii) {
                            const std::size_t id = f.grid.index(ii, j, k);
                            if (mark[id] == stamp) continue;
                            if (norm2(f.grid.center(ii, j, k) - r) <= s2) {
                                mark[id] = stamp;
                                blk[id] += w;
                            }
                        }
                    }
                }
            }
        }
    });

    Evaluation ev;
    ev.values.resize(cells);
    ev.errors.resize(cells);
    for (auto a : admitted) ev.admitted += a;
    if (ev.admitted == 0) throw NumericalFault("occupation: no admissible configuration among the proposals");
    std::vector<double> num(batches);
    for (std::size_t c = 0; c < cells; ++c) {
        for (int b = 0; b < batches; ++b) num[b] = den[b] - blocked[b][c];
        const Estimate e = batch_ratio(num, den);
        ev.values[c] = e.value;
        ev.errors[c] = e.stderr_;
    }
    return ev;
}

double inverse_mean(const PhaseSpaceDensity& pdf, const OccupationField& f, std::uint64_t seed, Exec exec) {
    const Packer probe(pdf.domain(), 1);
    const std::uint64_t n = 400'000;
    return mc_mean(n, exec, [&](std::uint64_t i) {
               CounterRng rng(derive_seed(seed, 0x1A), Stream::Occupation, i);
               const Vec3 r = pdf.sample_position(rng);
               return probe.admissible(r) ? 1.0 / f.weight_k(r) : 0.0;
           }).value;
}

void check_range(const std::vector<double>& k, const char* where) {
    for (double v : k) {
        if (!(v > 0.0) || v > 1.0) throw NumericalFault(std::string(where) + ": occupation coefficient left (0, 1]");
    }
}

// 1-D Catmull-Rom weights and derivatives at t in [0, 1] for nodes -1, 0, 1, 2.
void catmull_rom(double t, double w[4], double dw[4], double ddw[4]) {
    const double t2 = t * t, t3 = t2 * t;
    w[0] = 0.5 * (-t3 + 2 * t2 - t);
    w[1] = 0.5 * (3 * t3 - 5 * t2 + 2);
    w[2] = 0.5 * (-3 * t3 + 4 * t2 + t);
    w[3] = 0.5 * (t3 - t2);
    dw[0] = 0.5 * (-3 * t2 + 4 * t - 1);
    dw[1] = 0.5 * (9 * t2 - 10 * t);
    dw[2] = 0.5 * (-9 * t2 + 8 * t + 1);
    dw[3] = 0.5 * (3 * t2 - 2 * t);
    ddw[0] = -3 * t + 2;
    ddw[1] = 9 * t - 5;
    ddw[2] = -9 * t + 4;
    ddw[3] = 3 * t - 1;
}

// Node value with linear extrapolation one node past each face.
double node_value(const OccupationField& f, int i, int j, int k) {
    const int n = f.grid.n;
    auto ext = [n](int x, int& a, int& b, double& wa, double& wb) {
        if (x < 0) {
            a = 0, b = std::min(1, n - 1), wa = 1.0 - x, wb = x;
        } else if (x >= n) {
            a = n - 1, b = std::max(n - 2, 0), wa = 1.0 + (x - n + 1), wb = -(x - n + 1);
        } else {
            a = b = x, wa = 1.0, wb = 0.0;
        }
    };
    int ia, ib, ja, jb, ka, kb;
    double wia, wib, wja, wjb, wka, wkb;
    ext(i, ia, ib, wia, wib);
    ext(j, ja, jb, wja, wjb);
    ext(k, ka, kb, wka, wkb);
    double v = 0.0;
    const int is[2] = {ia, ib}, js[2] = {ja, jb}, ks[2] = {ka, kb};
    const double wi[2] = {wia, wib}, wj[2] = {wja, wjb}, wk[2] = {wka, wkb};
    for (int c = 0; c < 2; ++c)
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) {
                const double w = wi[a] * wj[b] * wk[c];
                if (w != 0.0) v += w * f.at(is[a], js[b], ks[c]);
            }
    return v;
}

// Least-squares derivative coefficients for a symmetric stencil of half-width hw.
std::vector<double> slope_coefficients(int hw) {
    std::vector<double> c(2 * hw + 1);
    double s = 0.0;
    for (int j = -hw; j <= hw; ++j) s += double(j * j);
    for (int j = -hw; j <= hw; ++j) c[j + hw] = j / s;
    return c;
}

std::vector<double> curvature_coefficients(int hw) {
    std::vector<double> c(2 * hw + 1);
    double mean = 0.0;
    for (int j = -hw; j <= hw; ++j) mean += double(j * j);
    mean /= double(2 * hw + 1);
    double s = 0.0;
    for (int j = -hw; j <= hw; ++j) s += (j * j - mean) * (j * j - mean);
    for (int j = -hw; j <= hw; ++j) c[j + hw] = 2.0 * (j * j - mean) / s;
    return c;
}

int usable_halfwidth(int idx, int n, int hw) { return std::min({hw, idx, n - 1 - idx}); }

// Common machinery for the contact-sphere integrals: draws N-1 positions, the
// first N-2 act as the remaining particles for k2, all N-1 normalize.
template <class Integrand>
Vec3Estimate contact_ratio(const PhaseSpaceDensity& pdf, const OccupationField& f, const Vec3& r1,
                           std::uint64_t samples, std::uint64_t seed, Exec exec, Integrand&& g) {
    const DomainSpec& domain = pdf.domain();
    const int m = domain.n_particles - 2;
    const int batches = kDefaultBatches;
    std::vector<double> nx(batches, 0.0), ny(batches, 0.0), nz(batches, 0.0), den(batches, 0.0);
    for_each_index(batches, exec, [&](std::int64_t b) {
        Packer packer(domain, m + 1);
        Vec3 acc;
        double dacc = 0.0;
        const auto [lo, hi] = batch_range(samples, batches, int(b));
        for (std::uint64_t i = lo; i < hi; ++i) {
            CounterRng rng(seed, Stream::Identity, i);
            const Vec3 n = rng.unit_vector();
            if (pack(pdf, packer, rng, m) != m) continue;
            double w = 1.0;
            for (const auto& r : packer.positions()) w /= f.weight_k(r);
            if (packer.clear(r1)) {
                const Vec3 ra = r1 + n * domain.sigma, rb = r1 - n * domain.sigma;
                Vec3 v;
                if (packer.clear(ra)) v += g(ra, -n);
                if (packer.clear(rb)) v += g(rb, n);
                acc += v * (0.5 * w);
            }
            const Vec3 extra = pdf.sample_position(rng);
            if (packer.push(extra)) dacc += w / f.weight_k(extra);
        }
        nx[b] = acc.x, ny[b] = acc.y, nz[b] = acc.z, den[b] = dacc;
    });
    const double scale = double(domain.n_particles - 1) * kFourPi * domain.sigma * domain.sigma;
    const Estimate ex = batch_ratio(nx, den), ey = batch_ratio(ny, den), ez = batch_ratio(nz, den);
    return {Vec3{ex.value, ey.value, ez.value} * scale, Vec3{ex.stderr_, ey.stderr_, ez.stderr_} * scale};
}

double relative(const Vec3& lhs, const Vec3& rhs) {
    const double d = norm(rhs);
    return d > 0.0 ? norm(lhs - rhs) / d : norm(lhs - rhs);
}

}  // namespace

Vec3 OccupationGrid::center(int i, int j, int k) const {
    const Vec3 d = spacing();
    return {lo.x + (i + 0.5) * d.x, lo.y + (j + 0.5) * d.y, lo.z + (k + 0.5) * d.z};
}

std::array<int, 3> OccupationGrid::nearest(const Vec3& r) const {
    const Vec3 d = spacing();
    std::array<int, 3> out{};
    for (int a = 0; a < 3; ++a) out[a] = std::clamp(int(std::floor((r[a] - lo[a]) / d[a])), 0, n - 1);
    return out;
}

double OccupationField::weight_k(const Vec3& r) const {
    const Vec3 d = grid.spacing();
    const int n = grid.n;
    if (n == 1) return weights[0];
    int i0[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        const double u = std::clamp((r[a] - grid.lo[a]) / d[a] - 0.5, 0.0, double(n - 1));
        i0[a] = std::min(int(u), n - 2);
        t[a] = u - i0[a];
    }
    double v = 0.0;
    for (int c = 0; c < 2; ++c)
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) {
                const double w = (a ? t[0] : 1 - t[0]) * (b ? t[1] : 1 - t[1]) * (c ? t[2] : 1 - t[2]);
                v += w * weights[grid.index(i0[0] + a, i0[1] + b, i0[2] + c)];
            }
    return v;
}

Vec3 OccupationField::weight_k_gradient(const Vec3& r) const {
    const Vec3 d = grid.spacing();
    const int n = grid.n;
    if (n == 1) return {};
    int i0[3];
    double t[3];
    bool inside[3];
    for (int a = 0; a < 3; ++a) {
        const double raw = (r[a] - grid.lo[a]) / d[a] - 0.5;
        inside[a] = raw > 0.0 && raw < double(n - 1);
        const double u = std::clamp(raw, 0.0, double(n - 1));
        i0[a] = std::min(int(u), n - 2);
        t[a] = u - i0[a];
    }
    Vec3 g;
    for (int c = 0; c < 2; ++c)
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) {
                const double wx = a ? t[0] : 1 - t[0], wy = b ? t[1] : 1 - t[1], wz = c ? t[2] : 1 - t[2];
                const double v = weights[grid.index(i0[0] + a, i0[1] + b, i0[2] + c)];
                g.x += (a ? 1.0 : -1.0) * wy * wz * v;
                g.y += (b ? 1.0 : -1.0) * wx * wz * v;
                g.z += (c ? 1.0 : -1.0) * wx * wy * v;
            }
    for (int a = 0; a < 3; ++a) g[a] = inside[a] ? g[a] / d[a] : 0.0;
    return g;
}

double OccupationField::q(const PhaseSpaceDensity& pdf, const Vec3& r) const {
    if (!pdf.domain().inside_admissible(r)) return 0.0;
    return n_unit(pdf, r) / (weight_k(r) * inverse_mean);
}

Vec3 OccupationField::q_gradient(const PhaseSpaceDensity& pdf, const Vec3& r) const {
    if (!pdf.domain().inside_admissible(r)) return {};
    const PointDerivs s = pdf.spatial(r);
    const double k = weight_k(r);
    return (s.grad / k - weight_k_gradient(r) * (s.value / (k * k))) / (pdf.mass() * inverse_mean);
}

PointDerivs OccupationField::k1(const Vec3& r) const {
    const Vec3 d = grid.spacing();
    int base[3];
    double w[3][4], dw[3][4], ddw[3][4];
    for (int a = 0; a < 3; ++a) {
        const double u = (r[a] - grid.lo[a]) / d[a] - 0.5;
        // Past the outer centers the ghost nodes continue the field linearly up to the faces.
        const double uc = std::clamp(u, -0.5, double(grid.n) - 0.5 - 1e-12);
        base[a] = int(std::floor(uc));
        catmull_rom(uc - base[a], w[a], dw[a], ddw[a]);
    }
    PointDerivs out;
    for (int c = 0; c < 4; ++c)
        for (int b = 0; b < 4; ++b)
            for (int a = 0; a < 4; ++a) {
                const double v = node_value(*this, base[0] - 1 + a, base[1] - 1 + b, base[2] - 1 + c);
                out.value += w[0][a] * w[1][b] * w[2][c] * v;
                out.grad.x += dw[0][a] * w[1][b] * w[2][c] * v / d.x;
                out.grad.y += w[0][a] * dw[1][b] * w[2][c] * v / d.y;
                out.grad.z += w[0][a] * w[1][b] * dw[2][c] * v / d.z;
                out.lap += (ddw[0][a] * w[1][b] * w[2][c] / (d.x * d.x) +
                            w[0][a] * ddw[1][b] * w[2][c] / (d.y * d.y) +
                            w[0][a] * w[1][b] * ddw[2][c] / (d.z * d.z)) *
                           v;
            }
    return out;
}

Vec3 OccupationField::grid_gradient(int i, int j, int k, int hw) const {
    const Vec3 d = grid.spacing();
    const int idx[3] = {i, j, k};
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
        const int h = usable_halfwidth(idx[a], grid.n, hw);
        auto at_offset = [&](int off) {
            int p[3] = {i, j, k};
            p[a] += off;
            return at(p[0], p[1], p[2]);
        };
        if (h == 0) {
            if (grid.n < 2) continue;
            g[a] = idx[a] == 0 ? (at_offset(1) - at_offset(0)) / d[a] : (at_offset(0) - at_offset(-1)) / d[a];
            continue;
        }
        const auto c = slope_coefficients(h);
        double s = 0.0;
        for (int o = -h; o <= h; ++o) s += c[o + h] * at_offset(o);
        g[a] = s / d[a];
    }
    return g;
}

double OccupationField::grid_laplacian(int i, int j, int k, int hw) const {
    const Vec3 d = grid.spacing();
    const int idx[3] = {i, j, k};
    double lap = 0.0;
    for (int a = 0; a < 3; ++a) {
        const int h = usable_halfwidth(idx[a], grid.n, hw);
        if (h == 0) continue;
        const auto c = curvature_coefficients(h);
        double s = 0.0;
        for (int o = -h; o <= h; ++o) {
            int p[3] = {i, j, k};
            p[a] += o;
            s += c[o + h] * at(p[0], p[1], p[2]);
        }
        lap += s / (d[a] * d[a]);
    }
    return lap;
}

double OccupationField::min_value() const { return *std::min_element(values.begin(), values.end()); }
double OccupationField::max_value() const { return *std::max_element(values.begin(), values.end()); }

OccupationField estimate_k1(const PhaseSpaceDensity& pdf, const OccupationOptions& options) {
    const DomainSpec& domain = pdf.domain();
    domain.validate();
    std::vector<std::string> problems;
    if (options.grid < 1) problems.push_back("occupation.grid: must be >= 1");
    if (options.samples < std::uint64_t(options.batches)) problems.push_back("occupation.samples: fewer than batches");
    if (options.max_iterations < 1) problems.push_back("occupation.max_iterations: must be >= 1");
    if (!(options.damping > 0.0 && options.damping <= 1.0)) problems.push_back("occupation.damping: must be in (0, 1]");
    if (!(options.k_init > 0.0 && options.k_init <= 1.0)) problems.push_back("occupation.k_init: must be in (0, 1]");
    if (!problems.empty()) throw ConfigError(problems);

    OccupationField f;
    f.grid = make_grid(domain, options.grid);
    f.n_particles = domain.n_particles;
    f.sigma = domain.sigma;
    f.variant = options.variant;
    f.samples = options.samples;
    f.weights.assign(f.grid.size(), options.k_init);

    if (domain.n_particles < 2) {
        f.values.assign(f.grid.size(), 1.0);
        f.errors.assign(f.grid.size(), 0.0);
        f.weights = f.values;
        f.converged = true;
        f.residuals.push_back(0.0);
        f.inverse_mean = inverse_mean(pdf, f, options.seed, options.exec);
        return f;
    }

    // The proposals are common to all iterations, so the map k_w -> k is smooth
    // and only admissible proposals are revisited after the first pass.
    std::vector<std::uint8_t> admissible(options.samples, 0);
    Evaluation ev;
    for (int it = 0; it < options.max_iterations; ++it) {
        ev = evaluate(pdf, f, options.samples, options.seed, options.batches, options.exec, &admissible, it == 0);
        check_range(ev.values, "estimate_k1");
        double residual = 0.0;
        for (std::size_t c = 0; c < ev.values.size(); ++c) {
            residual = std::max(residual, std::abs(ev.values[c] - f.weights[c]) / f.weights[c]);
        }
        f.residuals.push_back(residual);
        f.iterations = it + 1;
        if (residual < options.tolerance) {
            f.converged = true;
            break;
        }
        for (std::size_t c = 0; c < ev.values.size(); ++c) {
            f.weights[c] = (1.0 - options.damping) * f.weights[c] + options.damping * ev.values[c];
        }
    }
    if (!f.converged) {
        throw NumericalFault("estimate_k1: fixed point not reached in " + std::to_string(options.max_iterations) +
                             " iterations (residual " + fmt_double(f.residuals.back()) + ")");
    }
    f.values = std::move(ev.values);
    f.errors = std::move(ev.errors);
    f.admissible_fraction = double(ev.admitted) / double(options.samples);
    f.inverse_mean = inverse_mean(pdf, f, options.seed, options.exec);
    return f;
}

OccupationField reevaluate_k1(const PhaseSpaceDensity& pdf, const OccupationField& field, std::uint64_t samples,
                              std::uint64_t seed, Exec exec) {
    OccupationField f = field;
    f.samples = samples;
    f.residuals.clear();
    f.iterations = 0;
    if (pdf.domain().n_particles >= 2) {
        std::vector<std::uint8_t> admissible(samples, 0);
        Evaluation ev = evaluate(pdf, f, samples, seed, kDefaultBatches, exec, &admissible, true);
        check_range(ev.values, "reevaluate_k1");
        f.values = std::move(ev.values);
        f.errors = std::move(ev.errors);
        f.admissible_fraction = double(ev.admitted) / double(samples);
    }
    f.inverse_mean = inverse_mean(pdf, f, seed, exec);
    return f;
}

Estimate estimate_k2(const PhaseSpaceDensity& pdf, const OccupationField& field, const Vec3& r1, const Vec3& r2,
                     std::uint64_t samples, std::uint64_t seed, Exec exec) {
    const DomainSpec& domain = pdf.domain();
    if (norm(r1 - r2) < domain.sigma * (1.0 - 1e-12)) {
        throw ConfigError(std::string("estimate_k2: |r1 - r2| below sigma"));
    }
    if (domain.n_particles <= 2) return {1.0, 0.0};
    const int m = domain.n_particles - 2;
    const int batches = kDefaultBatches;
    std::vector<double> num(batches, 0.0), den(batches, 0.0);
    for_each_index(batches, exec, [&](std::int64_t b) {
        Packer packer(domain, m);
        const auto [lo, hi] = batch_range(samples, batches, int(b));
        for (std::uint64_t i = lo; i < hi; ++i) {
            CounterRng rng(seed, Stream::PairOccupation, i);
            if (pack(pdf, packer, rng, m) != m) continue;
            double w = 1.0;
            for (const auto& r : packer.positions()) w /= field.weight_k(r);
            den[b] += w;
            if (packer.clear(r1) && packer.clear(r2)) num[b] += w;
        }
    });
    const Estimate e = batch_ratio(num, den);
    check_range({e.value}, "estimate_k2");
    return e;
}

PairOccupation::PairOccupation(const PhaseSpaceDensity& pdf, const OccupationField& field,
                               std::size_t pool_size, std::uint64_t seed)
    : sigma_(pdf.domain().sigma) {
    const int m = pdf.domain().n_particles - 2;
    if (m <= 0) {
        constant_ = 1.0;
        return;
    }
    const double k_min = *std::min_element(field.weights.begin(), field.weights.end());
    Packer packer(pdf.domain(), m);
    std::uint64_t index = 0;
    const std::uint64_t limit = std::max<std::uint64_t>(100'000'000 / std::uint64_t(m), 1000 * pool_size);
    pool_.reserve(pool_size);
    while (pool_.size() < pool_size) {
        if (index >= limit) throw NumericalFault("PairOccupation: pool acceptance too low");
        CounterRng rng(seed, Stream::PairOccupation, index++);
        if (pack(pdf, packer, rng, m) != m) continue;
        double accept = 1.0;
        for (const auto& r : packer.positions()) accept *= k_min / field.weight_k(r);
        if (rng.uniform() < accept) pool_.push_back(packer.positions());
    }
}

PairOccupation::PairOccupation(double constant) : constant_(constant) {
    if (!(constant > 0.0 && constant <= 1.0)) throw ConfigError(std::string("PairOccupation: constant must be in (0, 1]"));
}

double PairOccupation::sample(const Vec3& r1, const Vec3& r2, CounterRng& rng) const {
    if (is_constant()) return constant_;
    const auto& config = pool_[rng.below(pool_.size())];
    const double s2 = sigma_ * sigma_;
    for (const auto& p : config) {
        if (norm2(p - r1) <= s2 || norm2(p - r2) <= s2) return 0.0;
    }
    return 1.0;
}

Estimate PairOccupation::estimate(const Vec3& r1, const Vec3& r2, std::uint64_t draws, std::uint64_t seed) const {
    if (is_constant()) return {constant_, 0.0};
    return mc_mean(draws, Exec::Serial, [&](std::uint64_t i) {
        CounterRng rng(seed, Stream::PairOccupation, i);
        return sample(r1, r2, rng);
    });
}

SphereRule sphere_rule(int n_theta, int n_phi) {
    if (n_theta < 1 || n_phi < 1) throw ConfigError(std::string("sphere_rule: orders must be positive"));
    // Legendre roots by Newton from the Chebyshev guess.
    std::vector<double> x(n_theta), w(n_theta);
    for (int i = 0; i < n_theta; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n_theta + 0.5)), dp = 1.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = z;
            for (int k = 2; k <= n_theta; ++k) {
                const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n_theta * (z * p1 - p0) / (z * z - 1.0);
            const double dz = p1 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    SphereRule rule;
    for (int i = 0; i < n_theta; ++i) {
        const double s = std::sqrt(std::max(0.0, 1.0 - x[i] * x[i]));
        for (int j = 0; j < n_phi; ++j) {
            const double phi = 2.0 * std::numbers::pi * (j + 0.5) / n_phi;
            rule.nodes.push_back({s * std::cos(phi), s * std::sin(phi), x[i]});
            rule.weights.push_back(w[i] * 2.0 * std::numbers::pi / n_phi);
        }
    }
    return rule;
}

namespace {

// Uniform random rotation from a normalized Gaussian quaternion.
std::array<Vec3, 3> random_rotation(CounterRng& rng) {
    double q[4] = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const double s = 1.0 / std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (double& c : q) c *= s;
    const double a = q[0], b = q[1], c = q[2], d = q[3];
    return {Vec3{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
            Vec3{2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)},
            Vec3{2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d}};
}

}  // namespace

Estimate contact_pair_integral(const PhaseSpaceDensity& pdf, const OccupationField& field, std::uint64_t samples,
                               std::uint64_t seed, Stream stream, Exec exec, const ContactIntegrand& g,
                               const SphereRule* rule) {
    const DomainSpec& domain = pdf.domain();
    const int m = std::max(domain.n_particles - 2, 0);
    const int batches = kDefaultBatches;
    const Vec3 lo = domain.admissible_lo(), hi = domain.admissible_hi();
    std::vector<double> num(batches, 0.0), den(batches, 0.0);
    for_each_index(batches, exec, [&](std::int64_t b) {
        Packer packer(domain, m + 1);
        double acc = 0.0, dacc = 0.0;
        const auto [i0, i1] = batch_range(samples, batches, int(b));
        for (std::uint64_t i = i0; i < i1; ++i) {
            CounterRng rng(seed, stream, i);
            const Vec3 r1 = stratified_point(lo, hi, i, rng);
            const Vec3 n = rng.unit_vector();
            std::array<Vec3, 3> rot{};
            if (rule) rot = random_rotation(rng);
            if (pack(pdf, packer, rng, m) != m) continue;
            double w = 1.0;
            for (const auto& r : packer.positions()) w /= field.weight_k(r);
            if (packer.clear(r1)) {
                auto side = [&](const Vec3& n21) {
                    const Vec3 r2 = r1 + n21 * domain.sigma;
                    return domain.inside_admissible(r2) && packer.clear(r2) ? g(r1, r2, n21, rng) : 0.0;
                };
                double s = 0.0;
                if (rule) {
                    for (std::size_t k = 0; k < rule->nodes.size(); ++k) {
                        const Vec3& u = rule->nodes[k];
                        const Vec3 n21{dot(rot[0], u), dot(rot[1], u), dot(rot[2], u)};
                        s += rule->weights[k] / kFourPi * side(n21);
                    }
                } else {
                    s = 0.5 * (side(n) + side(-n));
                }
                acc += w * s;
            }
            const Vec3 extra = pdf.sample_position(rng);
            if (packer.push(extra)) dacc += w / field.weight_k(extra);
        }
        num[b] = acc;
        den[b] = dacc;
    });
    const double scale = double(domain.n_particles - 1) * kFourPi * domain.sigma * domain.sigma *
                         domain.admissible_volume();
    const Estimate e = batch_ratio(num, den);
    return {e.value * scale, e.stderr_ * scale};
}

IdentityReport check_grad_k1_identity(const PhaseSpaceDensity& pdf, const OccupationField& field, const Vec3& r1,
                                      std::uint64_t samples, std::uint64_t seed, Exec exec, int stencil) {
    const auto node = field.grid.nearest(r1);
    const Vec3 x = field.grid.center(node[0], node[1], node[2]);
    const Vec3Estimate rhs = contact_ratio(pdf, field, x, samples, seed, exec, [&](const Vec3& r2, const Vec3& n12) {
        if (!pdf.domain().inside_admissible(r2)) return Vec3{};
        return n12 * (n_unit(pdf, r2) / field.weight_k(r2));
    });
    IdentityReport rep;
    rep.name = "grad_k1";
    rep.point = x;
    rep.lhs = field.grid_gradient(node[0], node[1], node[2], stencil);
    rep.rhs = rhs.value;
    rep.rhs_err = rhs.stderr_;
    rep.discrepancy = relative(rep.lhs, rep.rhs);
    rep.samples = samples;
    return rep;
}

IdentityReport check_laplacian_identity(const PhaseSpaceDensity& pdf, const OccupationField& field, const Vec3& r1,
                                        std::uint64_t samples, std::uint64_t seed, Exec exec, int stencil) {
    const auto node = field.grid.nearest(r1);
    const Vec3 x = field.grid.center(node[0], node[1], node[2]);
    const Vec3Estimate rhs = contact_ratio(pdf, field, x, samples, seed, exec, [&](const Vec3& r2, const Vec3& n12) {
        if (!pdf.domain().inside_admissible(r2)) return Vec3{};
        // d/dr1 of the contact integral: n12 . grad_r2 of rho_hat, with rho_hat ~ n / k_w.
        const PointDerivs s = pdf.spatial(r2);
        const double k = field.weight_k(r2);
        const Vec3 g = (s.grad / k - field.weight_k_gradient(r2) * (s.value / (k * k))) / pdf.mass();
        return Vec3{dot(n12, g), 0.0, 0.0};
    });
    IdentityReport rep;
    rep.name = "laplacian_k1";
    rep.point = x;
    rep.lhs = {field.grid_laplacian(node[0], node[1], node[2], stencil), 0.0, 0.0};
    rep.rhs = {rhs.value.x, 0.0, 0.0};
    rep.rhs_err = {rhs.stderr_.x, 0.0, 0.0};
    rep.discrepancy = relative(rep.lhs, rep.rhs);
    rep.samples = samples;
    return rep;
}

IdentityReport check_streaming_identity(const PhaseSpaceDensity& pdf, const OccupationField& field,
                                        const OccupationField& before, const OccupationField& after, double dt,
                                        const Vec3& r1, const Vec3& v1, std::uint64_t samples, std::uint64_t seed,
                                        Exec exec, int stencil) {
    if (!(dt > 0.0)) throw ConfigError(std::string("check_streaming_identity: dt must be positive"));
    const auto node = field.grid.nearest(r1);
    const Vec3 x = field.grid.center(node[0], node[1], node[2]);
    const Vec3Estimate rhs = contact_ratio(pdf, field, x, samples, seed, exec, [&](const Vec3& r2, const Vec3& n12) {
        if (!pdf.domain().inside_admissible(r2)) return Vec3{};
        const double k = field.weight_k(r2);
        const double term = dot(v1, n12) * n_unit(pdf, r2) - dot(n12, pdf.flux(r2)) / pdf.mass();
        return Vec3{term / k, 0.0, 0.0};
    });
    const std::size_t id = field.grid.index(node[0], node[1], node[2]);
    const double dk_dt = (after.values[id] - before.values[id]) / (2.0 * dt);
    IdentityReport rep;
    rep.name = "streaming_k1";
    rep.point = x;
    rep.lhs = {dk_dt + dot(v1, field.grid_gradient(node[0], node[1], node[2], stencil)), 0.0, 0.0};
    rep.rhs = {rhs.value.x, 0.0, 0.0};
    rep.rhs_err = {rhs.stderr_.x, 0.0, 0.0};
    rep.discrepancy = relative(rep.lhs, rep.rhs);
    rep.samples = samples;
    return rep;
}

ContactGradientReport check_contact_k2_gradient(const PhaseSpaceDensity& pdf, const OccupationField& field,
                                                const Vec3& r1, const Vec3& n21, double h, std::uint64_t samples,
                                                std::uint64_t seed, Exec exec) {
    const DomainSpec& domain = pdf.domain();
    ContactGradientReport out;
    if (domain.n_particles <= 2) return out;
    const Vec3 r2 = r1 + normalized(n21) * domain.sigma;
    const int m = domain.n_particles - 2;
    const int batches = kDefaultBatches;
    std::vector<std::array<double, 6>> num(batches);
    std::vector<double> den(batches, 0.0);
    for_each_index(batches, exec, [&](std::int64_t b) {
        Packer packer(domain, m);
        std::array<double, 6> acc{};
        double dacc = 0.0;
        const auto [lo, hi] = batch_range(samples, batches, int(b));
        for (std::uint64_t i = lo; i < hi; ++i) {
            CounterRng rng(seed, Stream::PairOccupation, i);
            if (pack(pdf, packer, rng, m) != m) continue;
            double w = 1.0;
            for (const auto& r : packer.positions()) w /= field.weight_k(r);
            dacc += w;
            const double c2 = packer.clear(r2);
            for (int a = 0; a < 3; ++a) {
                Vec3 e;
                e[a] = h;
                const double p = packer.clear(r1 + e), q = packer.clear(r1 - e);
                acc[a] += w * (p - q) * c2;
                acc[3 + a] += w * (p * packer.clear(r2 + e) - q * packer.clear(r2 - e));
            }
        }
        num[b] = acc;
        den[b] = dacc;
    });
    std::vector<double> col(batches);
    for (int c = 0; c < 6; ++c) {
        for (int b = 0; b < batches; ++b) col[b] = num[b][c];
        const Estimate e = batch_ratio(col, den);
        if (c < 3) {
            out.partial[c] = e.value / (2 * h);
            out.partial_err[c] = e.stderr_ / (2 * h);
        } else {
            out.translation[c - 3] = e.value / (2 * h);
            out.translation_err[c - 3] = e.stderr_ / (2 * h);
        }
    }
    return out;
}

BgTable bg_sweep(const std::vector<BgMember>& members, const DomainSpec& box, const InitialPdfSpec& spec,
                 const OccupationOptions& options, std::uint64_t k2_samples) {
    if (members.size() < 3) throw ConfigError(std::string("bg_sweep: at least 3 family members required"));
    BgTable table;
    for (std::size_t k = 0; k < members.size(); ++k) {
        DomainSpec d = box;
        d.n_particles = members[k].n_particles;
        d.sigma = members[k].sigma;
        d.validate();
        const ProfilePdf pdf(spec, d, double(d.n_particles), ProfilePdf::Support::Admissible);
        OccupationOptions opt = options;
        opt.seed = derive_seed(options.seed, k);
        const OccupationField f = estimate_k1(pdf, opt);
        const int mid = f.grid.n / 2;
        BgRow row;
        row.n_particles = d.n_particles;
        row.sigma = d.sigma;
        const Vec3 c = f.grid.center(mid, mid, mid);
        row.k1 = {f.at(mid, mid, mid), f.error_at(mid, mid, mid)};
        const Vec3 half{0.5 * d.sigma, 0.0, 0.0};
        row.k2 = estimate_k2(pdf, f, c - half, c + half, k2_samples, opt.seed, opt.exec);
        row.iterations = f.iterations;
        row.residual = f.residuals.back();
        table.rows.push_back(row);
    }
    table.monotone = true;
    for (std::size_t k = 1; k < table.rows.size(); ++k) {
        if (!(std::abs(table.rows[k].k1.value - 1.0) < std::abs(table.rows[k - 1].k1.value - 1.0))) {
            table.monotone = false;
        }
    }
    return table;
}

void write_occupation_csv(std::ostream& os, const OccupationField& field) {
    os << "x,y,z,k1,stderr\n";
    for (int k = 0; k < field.grid.n; ++k)
        for (int j = 0; j < field.grid.n; ++j)
            for (int i = 0; i < field.grid.n; ++i) {
                const Vec3 c = field.grid.center(i, j, k);
                os << fmt_double(c.x) << ',' << fmt_double(c.y) << ',' << fmt_double(c.z) << ','
                   << fmt_double(field.at(i, j, k)) << ',' << fmt_double(field.error_at(i, j, k)) << '\n';
            }
}

void write_identity_json(std::ostream& os, const std::vector<IdentityReport>& reports) {
    nlohmann::json arr = nlohmann::json::array();
    auto vec = [](const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); };
    for (const auto& r : reports) {
        arr.push_back({{"identity", r.name},
                       {"point", vec(r.point)},
                       {"lhs", vec(r.lhs)},
                       {"rhs", vec(r.rhs)},
                       {"rhs_stderr", vec(r.rhs_err)},
                       {"discrepancy", r.discrepancy},
                       {"samples", r.samples}});
    }
    os << arr.dump(2) << '\n';
}

}  // namespace finitekin
