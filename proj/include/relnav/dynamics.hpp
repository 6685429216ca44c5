#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <utility>

#include "relnav/attitude.hpp"

namespace relnav {

// Augmented filter state layout. Every module indexes the state through
// these constants; nothing else may hard-code offsets.
namespace sv {
inline constexpr int kPosition = 0;   // LVLH relative position [m], 3
inline constexpr int kVelocity = 3;   // LVLH relative velocity [m/s], 3
inline constexpr int kMrp = 6;        // relative attitude MRPs, 3
inline constexpr int kRate = 9;       // relative angular rate [rad/s], 3
inline constexpr int kInertia = 12;   // inertia elements (xx,yy,zz,xy,xz,yz), 6
inline constexpr int kBias = 18;      // depth bias [m], 1
inline constexpr int kDim = 19;
}  // namespace sv

using StateVec = Eigen::Matrix<double, sv::kDim, 1>;
using InertiaVec = Eigen::Matrix<double, 6, 1>;

/// Chaser two-body orbit in polar coordinates.
struct ChaserOrbitState {
    double radius = 0.0;        // m
    double radius_rate = 0.0;   // m/s
    double true_anomaly = 0.0;  // rad
    double anomaly_rate = 0.0;  // rad/s
};

/// Relative kinematic state of the target with respect to the chaser.
struct RelativeState {
    Vec3 position = Vec3::Zero();      // m, LVLH
    Vec3 velocity = Vec3::Zero();      // m/s, LVLH
    Vec3 mrp = Vec3::Zero();           // target-to-chaser attitude
    Vec3 angular_rate = Vec3::Zero();  // rad/s, target frame
};

/// The six independent inertia elements (xx, yy, zz, xy, xz, yz).
///
/// Off-diagonal entries are stored as the literal matrix elements, so
/// matrix()(0,1) == elements[3] with no sign flip.
struct InertiaParams {
    InertiaVec elements = InertiaVec::Zero();

    InertiaParams() = default;
    explicit InertiaParams(const InertiaVec& e) : elements(e) {}
    InertiaParams(double xx, double yy, double zz, double xy, double xz, double yz) {
        elements << xx, yy, zz, xy, xz, yz;
    }

    Mat3 matrix() const {
        Mat3 j;
        // clang-format off
        j << elements[0], elements[3], elements[4],
             elements[3], elements[1], elements[5],
             elements[4], elements[5], elements[2];
        // clang-format on
        return j;
    }

    static InertiaParams from_matrix(const Mat3& j) {
        return InertiaParams(j(0, 0), j(1, 1), j(2, 2), j(0, 1), j(0, 2), j(1, 2));
    }

    double trace() const { return elements[0] + elements[1] + elements[2]; }
};

inline Mat3 inertia_from_params(const InertiaParams& params) { return params.matrix(); }

/// Divides all six elements by the trace so the diagonal sums to one.
inline InertiaParams normalize_inertia(const InertiaParams& params) {
    const double tr = params.trace();
    if (!(tr > 0.0)) {
        throw std::domain_error("normalize_inertia: trace must be positive");
    }
    return InertiaParams(InertiaVec(params.elements / tr));
}

inline double gravitational_parameter_earth() { return 3.986004418e14; }  // m^3/s^2

/// Two-body polar equations of motion for the chaser.
/// Returns (radial acceleration, anomaly acceleration).
inline std::pair<double, double> chaser_orbit_deriv(const ChaserOrbitState& s, double mu) {
    if (!(s.radius > 0.0)) {
        throw std::domain_error("chaser_orbit_deriv: orbital radius must be positive");
    }
    const double r_accel = s.radius * s.anomaly_rate * s.anomaly_rate - mu / (s.radius * s.radius);
    const double theta_accel = -2.0 * s.radius_rate * s.anomaly_rate / s.radius;
    return {r_accel, theta_accel};
}

/// Nonlinear LVLH relative acceleration of the target w.r.t. the chaser.
inline Vec3 relative_translation_accel(const Vec3& position, const Vec3& velocity,
                                       const ChaserOrbitState& orbit, double mu) {
    const double x = position.x(), y = position.y(), z = position.z();
    const double xd = velocity.x(), yd = velocity.y();
    const double rb = orbit.radius;
    const double td = orbit.anomaly_rate;
    const auto [rb_accel, tdd] = chaser_orbit_deriv(orbit, mu);
    (void)rb_accel;

    const double rho2 = (rb + x) * (rb + x) + y * y + z * z;
    if (!(rho2 > 0.0)) {
        throw std::domain_error("relative_translation_accel: degenerate target radius");
    }
    const double rho3 = rho2 * std::sqrt(rho2);

    Vec3 accel;
    accel.x() = 2.0 * td * yd + tdd * y + td * td * x - mu * (rb + x) / rho3 + mu / (rb * rb);
    accel.y() = -2.0 * td * xd - tdd * x + td * td * y - mu * y / rho3;
    accel.z() = -mu * z / rho3;
    return accel;
}

inline constexpr double kInertiaCondLimitDefault = 1e12;

/// Inertia matrix with a prepared inverse for repeated Euler-equation
/// evaluations along one trajectory (the inertia elements are constant
/// under the process model, so the factorization is reusable).
///
/// Near-singular matrices are re-regularized once by adding eps*I with
/// eps = 1e-9 * trace; if the matrix is still numerically singular the
/// constructor throws and the caller surfaces the failure.
struct RigidBody {
    Mat3 inertia;
    Mat3 inertia_inv;

    static RigidBody from_params(const InertiaParams& params,
                                 double cond_limit = kInertiaCondLimitDefault) {
        RigidBody body;
        body.inertia = params.matrix();
        if (!singularish(body.inertia, cond_limit)) {
            body.inertia_inv = body.inertia.inverse();
            return body;
        }
        body.inertia += 1e-9 * body.inertia.trace() * Mat3::Identity();
        if (singularish(body.inertia, cond_limit)) {
            throw std::runtime_error("RigidBody: inertia matrix is numerically singular");
        }
        body.inertia_inv = body.inertia.inverse();
        return body;
    }

    /// Relative Euler equation: J wdot + w x (J w) = torque.
    Vec3 angular_accel(const Vec3& rate, const Vec3& torque) const {
        return inertia_inv * (torque - rate.cross(inertia * rate));
    }

private:
    // |det| test equivalent to a condition-number bound for 3x3 symmetric
    // matrices: cond > limit implies |det| < (scale^3) / limit.
    static bool singularish(const Mat3& j, double cond_limit) {
        const double scale = j.norm() / std::sqrt(3.0);
        const double det = j.determinant();
        return !(std::abs(det) > scale * scale * scale / cond_limit);
    }
};

/// Angular acceleration from the torque-free relative Euler equation
/// (torque hook defaults to zero).
inline Vec3 rotational_deriv(const Vec3& rate, const InertiaParams& params,
                             const Vec3& torque = Vec3::Zero(),
                             double cond_limit = kInertiaCondLimitDefault) {
    return RigidBody::from_params(params, cond_limit).angular_accel(rate, torque);
}

/// Full 19-state process model derivative. The inertia elements and the
/// depth bias are random-walk parameters: their deterministic derivative
/// is exactly zero and process noise enters only through Q.
inline StateVec state_derivative(const StateVec& x, const ChaserOrbitState& orbit, double mu,
                                 const Vec3& torque = Vec3::Zero(),
                                 double cond_limit = kInertiaCondLimitDefault) {
    const Vec3 position = x.segment<3>(sv::kPosition);
    const Vec3 velocity = x.segment<3>(sv::kVelocity);
    const Vec3 mrp = x.segment<3>(sv::kMrp);
    const Vec3 rate = x.segment<3>(sv::kRate);
    const InertiaParams params{InertiaVec(x.segment<6>(sv::kInertia))};

    StateVec dx = StateVec::Zero();
    dx.segment<3>(sv::kPosition) = velocity;
    dx.segment<3>(sv::kVelocity) = relative_translation_accel(position, velocity, orbit, mu);
    dx.segment<3>(sv::kMrp) = mrp_kinematics(mrp, rate);
    dx.segment<3>(sv::kRate) = rotational_deriv(rate, params, torque, cond_limit);
    return dx;
}

/// Classical fixed-step RK4 for any Eigen vector type.
template <typename Derivative, typename Vec>
Vec rk4_step(Derivative&& f, const Vec& x, double t, double dt) {
    if (!(dt > 0.0)) {
        throw std::domain_error("rk4_step: dt must be positive");
    }
    const Vec k1 = f(t, x);
    const Vec k2 = f(t + 0.5 * dt, Vec(x + 0.5 * dt * k1));
    const Vec k3 = f(t + 0.5 * dt, Vec(x + 0.5 * dt * k2));
    const Vec k4 = f(t + dt, Vec(x + dt * k3));
    Vec next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) {
        throw std::runtime_error("rk4_step: non-finite intermediate state");
    }
    return next;
}

/// Advances the coupled chaser-orbit + relative-state system over one
/// measurement interval using `substeps` internal RK4 steps. The MRP
/// block is shadow-enforced after every integration step. The rigid-body
/// factorization is prepared once since the inertia state is constant
/// along the trajectory.
inline void propagate_state(StateVec& x, ChaserOrbitState& orbit, double mu, const Vec3& torque,
                            double dt, int substeps,
                            double cond_limit = kInertiaCondLimitDefault) {
    if (substeps < 1) {
        throw std::domain_error("propagate_state: substeps must be >= 1");
    }
    const RigidBody body =
        RigidBody::from_params(InertiaParams{InertiaVec(x.segment<6>(sv::kInertia))}, cond_limit);

    using AugVec = Eigen::Matrix<double, 4 + sv::kDim, 1>;
    AugVec aug;
    aug << orbit.radius, orbit.radius_rate, orbit.true_anomaly, orbit.anomaly_rate, x;

    const auto deriv = [&](double /*t*/, const AugVec& s) -> AugVec {
        ChaserOrbitState o{s[0], s[1], s[2], s[3]};
        const auto [r_accel, theta_accel] = chaser_orbit_deriv(o, mu);
        AugVec ds = AugVec::Zero();
        ds[0] = o.radius_rate;
        ds[1] = r_accel;
        ds[2] = o.anomaly_rate;
        ds[3] = theta_accel;
        ds.segment<3>(4 + sv::kPosition) = s.segment<3>(4 + sv::kVelocity);
        ds.segment<3>(4 + sv::kVelocity) = relative_translation_accel(
            s.segment<3>(4 + sv::kPosition), s.segment<3>(4 + sv::kVelocity), o, mu);
        ds.segment<3>(4 + sv::kMrp) =
            mrp_kinematics(s.segment<3>(4 + sv::kMrp), s.segment<3>(4 + sv::kRate));
        ds.segment<3>(4 + sv::kRate) = body.angular_accel(s.segment<3>(4 + sv::kRate), torque);
        return ds;
    };

    const double h = dt / substeps;
    for (int i = 0; i < substeps; ++i) {
        aug = rk4_step(deriv, aug, i * h, h);
        aug.segment<3>(4 + sv::kMrp) = mrp_shadow(aug.segment<3>(4 + sv::kMrp));
    }

    orbit = ChaserOrbitState{aug[0], aug[1], aug[2], aug[3]};
    x = aug.tail<sv::kDim>();
}

inline StateVec pack_state(const RelativeState& rel, const InertiaParams& inertia, double bias) {
    StateVec x;
    x.segment<3>(sv::kPosition) = rel.position;
    x.segment<3>(sv::kVelocity) = rel.velocity;
    x.segment<3>(sv::kMrp) = rel.mrp;
    x.segment<3>(sv::kRate) = rel.angular_rate;
    x.segment<6>(sv::kInertia) = inertia.elements;
    x[sv::kBias] = bias;
    return x;
}

}  // namespace relnav
