#include "finitekin/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <queue>
#include <sstream>
#include <string>

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"

namespace finitekin {

Trajectory make_trajectory(NBodyState state) {
    Trajectory traj;
    traj.initial = state;
    traj.current = std::move(state);
    return traj;
}

std::optional<double> predict_pair_collision(const NBodyState& state, std::size_t i, std::size_t j,
                                             double sigma) {
    const Vec3 r = state.r[i] - state.r[j];
    const Vec3 v = state.v[i] - state.v[j];
    const double b = dot(r, v);
    if (!(b < 0.0)) return std::nullopt;
    const double a = norm2(v);
    const double c = norm2(r) - sigma * sigma;
    const double disc = b * b - a * c;
    if (disc < 0.0) return std::nullopt;
    // Smaller root in the cancellation-free form c / (-b + sqrt(disc)).
    const double dt = c <= 0.0 ? 0.0 : c / (-b + std::sqrt(disc));
    return state.t + dt;
}

std::optional<WallHit> predict_wall_collision(const NBodyState& state, std::size_t i,
                                              const DomainSpec& domain) {
    const double half = 0.5 * domain.sigma;
    std::optional<WallHit> best;
    for (int a = 0; a < 3; ++a) {
        const double va = state.v[i][a];
        double dt;
        Vec3 n;
        if (va > 0.0) {
            dt = (domain.box_hi[a] - half - state.r[i][a]) / va;
            n[a] = -1.0;
        } else if (va < 0.0) {
            dt = (domain.box_lo[a] + half - state.r[i][a]) / va;
            n[a] = 1.0;
        } else {
            continue;
        }
        dt = std::max(dt, 0.0);
        if (!best || state.t + dt < best->t) best = WallHit{state.t + dt, n};
    }
    return best;
}

std::pair<Vec3, Vec3> apply_binary_collision(const Vec3& v1, const Vec3& v2, const Vec3& n12) {
    const double u = dot(n12, v1 - v2);
    if (!(u < 0.0)) throw NumericalFault("apply_binary_collision: pair is not incoming");
    return {v1 - n12 * u, v2 + n12 * u};
}

std::pair<Vec3, Vec3> invert_binary_collision(const Vec3& v1_out, const Vec3& v2_out, const Vec3& n12) {
    const double u = dot(n12, v1_out - v2_out);
    if (!(u > 0.0)) throw NumericalFault("invert_binary_collision: pair is not outgoing");
    return {v1_out - n12 * u, v2_out + n12 * u};
}

Vec3 apply_wall_reflection(const Vec3& v, const Vec3& n1) {
    const double u = dot(n1, v);
    if (!(u < 0.0)) throw NumericalFault("apply_wall_reflection: velocity is not incoming");
    return v - n1 * (2.0 * u);
}

namespace {

struct QueuedEvent {
    double t;
    EventKind kind;
    int i, j;
    std::uint64_t count_i, count_j;
    Vec3 normal;
};

struct Later {
    bool operator()(const QueuedEvent& a, const QueuedEvent& b) const {
        if (a.t != b.t) return a.t > b.t;
        if (a.kind != b.kind) return a.kind > b.kind;
        if (a.i != b.i) return a.i > b.i;
        return a.j > b.j;
    }
};

class EventLoop {
public:
    EventLoop(Trajectory& traj, const DomainSpec& domain, const SimulationOptions& options)
        : traj_(traj), s_(traj.current), domain_(domain), opt_(options), counts_(s_.size(), 0) {
        const double e = kinetic_energy(s_, 1.0);
        v_thermal_ = s_.size() > 0 ? std::sqrt(2.0 * e / double(s_.size())) : 0.0;
        for (std::size_t i = 0; i < s_.size(); ++i) predict(i, i + 1);
    }

    SimulationStats run(double t_end) {
        SimulationStats stats;
        while (!queue_.empty()) {
            const QueuedEvent ev = queue_.top();
            if (ev.t > t_end) break;
            queue_.pop();
            if (counts_[ev.i] != ev.count_i) continue;
            if (ev.kind == EventKind::Pair && counts_[ev.j] != ev.count_j) continue;
            advance_to(ev.t);
            if (ev.kind == EventKind::Wall) {
                s_.v[ev.i] = apply_wall_reflection(s_.v[ev.i], ev.normal);
                ++counts_[ev.i];
                ++stats.wall_events;
                record(ev, ev.normal);
                check_clearance(ev.i);
                predict(ev.i, 0);
            } else {
                const Vec3 n12 = normalized(s_.r[ev.i] - s_.r[ev.j]);
                const double u = dot(n12, s_.v[ev.i] - s_.v[ev.j]);
                if (std::fabs(u) < 1e-12 * v_thermal_ || !(u < 0.0)) {
                    ++stats.grazing_skipped;
                    continue;
                }
                auto [v1, v2] = apply_binary_collision(s_.v[ev.i], s_.v[ev.j], n12);
                s_.v[ev.i] = v1;
                s_.v[ev.j] = v2;
                ++counts_[ev.i];
                ++counts_[ev.j];
                ++stats.pair_events;
                record(ev, n12);
                check_clearance(ev.i);
                check_clearance(ev.j);
                predict(ev.i, 0);
                predict(ev.j, 0);
                if (stats.pair_events >= opt_.max_pair_events) {
                    stats.stopped_early = true;
                    return stats;
                }
            }
        }
        advance_to(t_end);
        return stats;
    }

private:
    // Schedules walls for i and pairs (i, j) for j >= first, j != i.
    void predict(std::size_t i, std::size_t first) {
        if (auto w = predict_wall_collision(s_, i, domain_)) {
            queue_.push({w->t, EventKind::Wall, int(i), -1, counts_[i], 0, w->normal});
        }
        for (std::size_t j = first; j < s_.size(); ++j) {
            if (j == i) continue;
            if (auto t = predict_pair_collision(s_, i, j, domain_.sigma)) {
                const auto lo = std::min(i, j), hi = std::max(i, j);
                queue_.push({*t, EventKind::Pair, int(lo), int(hi), counts_[lo], counts_[hi], {}});
            }
        }
    }

    void advance_to(double t) {
        const double dt = t - s_.t;
        if (dt != 0.0) {
            for (std::size_t k = 0; k < s_.size(); ++k) s_.r[k] += s_.v[k] * dt;
        }
        s_.t = t;
    }

    void record(const QueuedEvent& ev, const Vec3& n) {
        if (opt_.record_events) traj_.events.push_back({ev.t, ev.kind, ev.i, ev.j, n});
    }

    void check_clearance(std::size_t i) const {
        const double tol = opt_.overlap_tolerance;
        const double sig = domain_.sigma;
        if (wall_distance(s_.r[i], domain_) < 0.5 * sig * (1.0 - tol)) {
            throw NumericalFault("simulate: particle " + std::to_string(i) + " penetrated a wall at t=" +
                                 fmt_double(s_.t));
        }
        for (std::size_t j = 0; j < s_.size(); ++j) {
            if (j != i && norm(s_.r[i] - s_.r[j]) < sig * (1.0 - tol)) {
                throw NumericalFault("simulate: overlap between " + std::to_string(i) + " and " +
                                     std::to_string(j) + " at t=" + fmt_double(s_.t));
            }
        }
    }

    Trajectory& traj_;
    NBodyState& s_;
    const DomainSpec& domain_;
    const SimulationOptions& opt_;
    std::vector<std::uint64_t> counts_;
    std::priority_queue<QueuedEvent, std::vector<QueuedEvent>, Later> queue_;
    double v_thermal_ = 0.0;
};

}  // namespace

SimulationStats simulate(Trajectory& traj, double t_end, const DomainSpec& domain,
                         const SimulationOptions& options) {
    if (t_end < traj.current.t) throw NumericalFault("simulate: t_end precedes current time");
    EventLoop loop(traj, domain, options);
    return loop.run(t_end);
}

NBodyState time_reverse(const NBodyState& state, double t_origin) {
    NBodyState out = state;
    for (auto& v : out.v) v = -v;
    out.t = 2.0 * t_origin - state.t;
    return out;
}

double kinetic_energy(const NBodyState& state, double mass) {
    double e = 0.0;
    for (const auto& v : state.v) e += norm2(v);
    return 0.5 * mass * e;
}

Vec3 total_momentum(const NBodyState& state, double mass) {
    Vec3 p;
    for (const auto& v : state.v) p += v;
    return p * mass;
}

void write_snapshot(std::ostream& os, const NBodyState& state) {
    os << fmt_double(state.t);
    for (std::size_t k = 0; k < state.size(); ++k) {
        for (int a = 0; a < 3; ++a) os << ' ' << fmt_double(state.r[k][a]);
        for (int a = 0; a < 3; ++a) os << ' ' << fmt_double(state.v[k][a]);
    }
    os << '\n';
}

NBodyState read_snapshot(std::istream& is, std::size_t n) {
    std::string line;
    if (!std::getline(is, line)) throw IoError("read_snapshot: missing record");
    std::istringstream ls(line);
    NBodyState s;
    s.r.resize(n);
    s.v.resize(n);
    ls >> s.t;
    for (std::size_t k = 0; k < n; ++k) {
        for (int a = 0; a < 3; ++a) ls >> s.r[k][a];
        for (int a = 0; a < 3; ++a) ls >> s.v[k][a];
    }
    if (!ls) throw IoError("read_snapshot: truncated record");
    return s;
}

void write_events_csv(std::ostream& os, const std::vector<CollisionEvent>& events, bool header) {
    if (header) os << "t,kind,i,j,nx,ny,nz\n";
    for (const auto& e : events) {
        os << fmt_double(e.t) << ',' << (e.kind == EventKind::Wall ? "wall" : "pair") << ',' << e.i << ','
           << e.j << ',' << fmt_double(e.normal.x) << ',' << fmt_double(e.normal.y) << ','
           << fmt_double(e.normal.z) << '\n';
    }
}

}  // namespace finitekin
