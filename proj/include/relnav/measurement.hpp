#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "relnav/attitude.hpp"
#include "relnav/dynamics.hpp"

namespace relnav {

/// Thrown when a marker projects behind the camera; the filter treats the
/// epoch that produced it as degenerate geometry and routes it to the
/// dropout path.
struct BehindCameraError : std::runtime_error {
    explicit BehindCameraError(int marker_id)
        : std::runtime_error("marker " + std::to_string(marker_id) + " is behind the camera"),
          marker(marker_id) {}
    int marker;
};

/// Pinhole camera. The boresight is the +Y axis of the camera frame, so
/// depth is the camera-frame Y coordinate; image axes map X -> u, Z -> v.
struct CameraModel {
    double fx = 1920.0;  // px
    double fy = 1280.0;  // px
    double cx = 960.0;   // px
    double cy = 640.0;   // px
    double fov_deg = 45.0;
    double width = 1920.0;   // px
    double height = 1280.0;  // px
    Mat3 mount_rotation = Mat3::Identity();  // chaser -> camera
    Vec3 mount_offset = Vec3::Zero();        // camera position in chaser frame, m

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) {
            throw std::invalid_argument("CameraModel: focal lengths must be positive");
        }
        if (!(cx > 0.0 && cx < width) || !(cy > 0.0 && cy < height)) {
            throw std::invalid_argument("CameraModel: principal point outside image bounds");
        }
    }
};

struct Marker {
    Vec3 position = Vec3::Zero();  // target body frame, m
    Vec3 normal = Vec3::UnitX();   // outward normal, target body frame
};

struct MarkerSet {
    std::vector<Marker> markers;

    int size() const { return static_cast<int>(markers.size()); }

    void validate() const {
        if (size() < 4) {
            throw std::invalid_argument("MarkerSet: at least 4 markers required");
        }
        for (int i = 0; i < size(); ++i) {
            for (int j = i + 1; j < size(); ++j) {
                if ((markers[i].position - markers[j].position).norm() < 1e-12) {
                    throw std::invalid_argument("MarkerSet: duplicate marker positions");
                }
            }
        }
    }
};

/// The 8 corners of a rectangular bus with the given full dimensions.
/// Each corner's normal is the average of its three face normals.
inline MarkerSet box_corner_markers(double size_x, double size_y, double size_z) {
    if (!(size_x > 0.0 && size_y > 0.0 && size_z > 0.0)) {
        throw std::invalid_argument("box_corner_markers: dimensions must be positive");
    }
    MarkerSet set;
    for (int sx : {-1, 1}) {
        for (int sy : {-1, 1}) {
            for (int sz : {-1, 1}) {
                Marker m;
                m.position = Vec3(0.5 * sx * size_x, 0.5 * sy * size_y, 0.5 * sz * size_z);
                m.normal = Vec3(sx, sy, sz).normalized();
                set.markers.push_back(m);
            }
        }
    }
    return set;
}

struct MeasurementEntry {
    int marker_id = 0;
    double u = 0.0;  // px
    double d = 0.0;  // m
    double v = 0.0;  // px
};

/// Per-epoch stack of [u, d, v] triples for the visible markers.
struct MeasurementFrame {
    double epoch = 0.0;  // s
    std::vector<MeasurementEntry> entries;  // visible markers, ascending marker id
    std::vector<bool> visibility;           // one flag per marker in the set

    int visible_count() const { return static_cast<int>(entries.size()); }
};

/// Marker position in the camera frame for the given filter state.
inline Vec3 marker_to_camera(const StateVec& x, const Vec3& marker_body, const CameraModel& cam) {
    const Vec3 in_chaser =
        mrp_to_rotation(x.segment<3>(sv::kMrp)) * marker_body + x.segment<3>(sv::kPosition);
    return cam.mount_rotation * (in_chaser - cam.mount_offset);
}

/// Pinhole projection; throws BehindCameraError when the point is not in
/// front of the camera (boresight coordinate Y <= 0).
inline std::pair<double, double> camera_project(const Vec3& pt_cam, const CameraModel& cam,
                                                int marker_id = -1) {
    if (!(pt_cam.y() > 0.0)) {
        throw BehindCameraError(marker_id);
    }
    const double u = cam.cx + cam.fx * pt_cam.x() / pt_cam.y();
    const double v = cam.cy + cam.fy * pt_cam.z() / pt_cam.y();
    return {u, v};
}

/// Geometric line-of-sight visibility: in front of the camera, inside the
/// image bounds, and with the marker's outward normal facing the camera
/// (the stand-in for ray-cast self-occlusion).
inline bool visibility(int marker_id, const StateVec& x, const MarkerSet& markers,
                       const CameraModel& cam) {
    const Marker& marker = markers.markers.at(static_cast<size_t>(marker_id));
    const Vec3 pt_cam = marker_to_camera(x, marker.position, cam);
    if (!(pt_cam.y() > 0.0)) {
        return false;
    }
    const double u = cam.cx + cam.fx * pt_cam.x() / pt_cam.y();
    const double v = cam.cy + cam.fy * pt_cam.z() / pt_cam.y();
    if (u < 0.0 || u > cam.width || v < 0.0 || v > cam.height) {
        return false;
    }
    const Vec3 normal_cam =
        cam.mount_rotation * mrp_to_rotation(x.segment<3>(sv::kMrp)) * marker.normal;
    return normal_cam.dot(pt_cam) < 0.0;  // pt_cam is the camera-to-marker line of sight
}

/// Synthetic RGB-D frame for the truth state: exact projections of the
/// visible markers plus additive Gaussian pixel/depth noise, with depth
/// d = Y + b_true. Deterministic for a given generator state. Noisy
/// pixels are clamped to the image bounds and depth to a small positive
/// floor so every emitted frame satisfies the frame invariants.
inline MeasurementFrame simulate_frame(const StateVec& x_true, const MarkerSet& markers,
                                       const CameraModel& cam, double pixel_sigma,
                                       double depth_sigma, std::mt19937_64& rng,
                                       double epoch = 0.0) {
    if (pixel_sigma < 0.0 || depth_sigma < 0.0) {
        throw std::invalid_argument("simulate_frame: noise sigmas must be non-negative");
    }
    std::normal_distribution<double> unit(0.0, 1.0);
    const double bias_true = x_true[sv::kBias];

    MeasurementFrame frame;
    frame.epoch = epoch;
    frame.visibility.resize(static_cast<size_t>(markers.size()), false);
    for (int id = 0; id < markers.size(); ++id) {
        if (!visibility(id, x_true, markers, cam)) {
            continue;
        }
        frame.visibility[static_cast<size_t>(id)] = true;
        const Vec3 pt_cam = marker_to_camera(x_true, markers.markers[static_cast<size_t>(id)].position, cam);
        auto [u, v] = camera_project(pt_cam, cam, id);
        double d = pt_cam.y() + bias_true;
        if (pixel_sigma > 0.0) {
            u += pixel_sigma * unit(rng);
        }
        if (depth_sigma > 0.0) {
            d += depth_sigma * unit(rng);
        }
        if (pixel_sigma > 0.0) {
            v += pixel_sigma * unit(rng);
        }
        MeasurementEntry entry;
        entry.marker_id = id;
        entry.u = std::clamp(u, 0.0, cam.width);
        entry.v = std::clamp(v, 0.0, cam.height);
        entry.d = std::max(d, 1e-6);
        frame.entries.push_back(entry);
    }
    return frame;
}

/// Measurement prediction h(x): stacks [u_i, d_i, v_i] for the given
/// marker ids in order, with d_i = Y_i + b where b is the bias state.
/// Throws BehindCameraError if any requested marker is behind the camera.
inline Eigen::VectorXd predict_measurements(const StateVec& x, const std::vector<int>& visible_ids,
                                            const MarkerSet& markers, const CameraModel& cam) {
    if (visible_ids.empty()) {
        throw std::invalid_argument("predict_measurements: no visible markers");
    }
    const double bias = x[sv::kBias];
    Eigen::VectorXd z(3 * static_cast<int>(visible_ids.size()));
    int row = 0;
    for (int id : visible_ids) {
        const Vec3 pt_cam =
            marker_to_camera(x, markers.markers.at(static_cast<size_t>(id)).position, cam);
        auto [u, v] = camera_project(pt_cam, cam, id);
        z[row++] = u;
        z[row++] = pt_cam.y() + bias;
        z[row++] = v;
    }
    return z;
}

inline std::vector<int> frame_marker_ids(const MeasurementFrame& frame) {
    std::vector<int> ids;
    ids.reserve(frame.entries.size());
    for (const auto& entry : frame.entries) {
        ids.push_back(entry.marker_id);
    }
    return ids;
}

inline Eigen::VectorXd frame_measurement_vector(const MeasurementFrame& frame) {
    Eigen::VectorXd z(3 * frame.visible_count());
    int row = 0;
    for (const auto& entry : frame.entries) {
        z[row++] = entry.u;
        z[row++] = entry.d;
        z[row++] = entry.v;
    }
    return z;
}

}  // namespace relnav
