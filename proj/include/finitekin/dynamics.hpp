#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <utility>
#include <vector>

#include "finitekin/domain.hpp"

namespace finitekin {

enum class EventKind { Wall = 0, Pair = 1 };

struct CollisionEvent {
    double t = 0.0;
    EventKind kind = EventKind::Wall;
    int i = 0;
    int j = -1;
    Vec3 normal;  // wall: inward n1; pair: n12 = (r1 - r2)/sigma
};

struct Trajectory {
    NBodyState initial;
    NBodyState current;
    std::vector<CollisionEvent> events;
};

Trajectory make_trajectory(NBodyState state);

struct WallHit {
    double t = 0.0;
    Vec3 normal;
};

std::optional<double> predict_pair_collision(const NBodyState& state, std::size_t i, std::size_t j,
                                             double sigma);
std::optional<WallHit> predict_wall_collision(const NBodyState& state, std::size_t i,
                                              const DomainSpec& domain);

// Throws NumericalFault unless v12.n12 < 0.
std::pair<Vec3, Vec3> apply_binary_collision(const Vec3& v1, const Vec3& v2, const Vec3& n12);
// Recovers incoming velocities from outgoing ones (v12.n12 > 0 required). The map is an
// involution, so this is the same formula with the opposite precondition.
std::pair<Vec3, Vec3> invert_binary_collision(const Vec3& v1_out, const Vec3& v2_out, const Vec3& n12);
// Throws NumericalFault unless n1.v < 0.
Vec3 apply_wall_reflection(const Vec3& v, const Vec3& n1);

struct SimulationOptions {
    bool record_events = true;
    double overlap_tolerance = 1e-9;
    // Stop right after this many pair collisions (state left at that event time).
    std::uint64_t max_pair_events = UINT64_MAX;
};

struct SimulationStats {
    std::uint64_t pair_events = 0;
    std::uint64_t wall_events = 0;
    std::uint64_t grazing_skipped = 0;
    bool stopped_early = false;
};

// Advances traj.current to t_end. Throws NumericalFault on overlap beyond tolerance.
SimulationStats simulate(Trajectory& traj, double t_end, const DomainSpec& domain,
                         const SimulationOptions& options = {});

// Positions kept, velocities negated, time mapped to 2*t_origin - t.
NBodyState time_reverse(const NBodyState& state, double t_origin = 0.0);

double kinetic_energy(const NBodyState& state, double mass);
Vec3 total_momentum(const NBodyState& state, double mass);

// One text record: t followed by N x (x y z vx vy vz).
void write_snapshot(std::ostream& os, const NBodyState& state);
NBodyState read_snapshot(std::istream& is, std::size_t n);
void write_events_csv(std::ostream& os, const std::vector<CollisionEvent>& events, bool header = true);

}  // namespace finitekin
