#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace relnav {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Cross-product matrix: skew(v) * w == v.cross(w).
inline Mat3 skew(const Vec3& v) {
    Mat3 m;
    // clang-format off
    m <<     0.0, -v.z(),  v.y(),
           v.z(),    0.0, -v.x(),
          -v.y(),  v.x(),    0.0;
    // clang-format on
    return m;
}

/// Rotation matrix for a Modified Rodrigues Parameter vector.
///
/// Maps target-body vectors into the chaser frame. Valid for any finite p,
/// including shadow-set representations with |p| > 1.
inline Mat3 mrp_to_rotation(const Vec3& p) {
    const double p2 = p.squaredNorm();
    const double denom = (1.0 + p2) * (1.0 + p2);
    const double eps1 = 4.0 * (1.0 - p2) / denom;
    const double eps2 = 8.0 / denom;
    const Mat3 px = skew(p);
    return Mat3::Identity() - eps1 * px + eps2 * px * px;
}

/// MRP kinematics: dp/dt = 1/4 [(1 - p'p) I + 2 p p' + 2 skew(p)] w.
inline Vec3 mrp_kinematics(const Vec3& p, const Vec3& rate) {
    const double p2 = p.squaredNorm();
    const Mat3 b = (1.0 - p2) * Mat3::Identity() + 2.0 * p * p.transpose() + 2.0 * skew(p);
    return 0.25 * b * rate;
}

/// Switch to the shadow set when |p| > 1; otherwise returns p unchanged.
/// Both representations encode the same rotation.
inline Vec3 mrp_shadow(const Vec3& p) {
    const double p2 = p.squaredNorm();
    if (p2 > 1.0) {
        return -p / p2;
    }
    return p;
}

}  // namespace relnav
