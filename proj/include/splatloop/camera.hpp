#pragma once

#include <array>
#include <cmath>

#include "splatloop/tensor.hpp"

namespace splatloop {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;  // row-major

inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (n == 0.0) throw std::invalid_argument("cannot normalize zero vector");
    return {a[0] / n, a[1] / n, a[2] / n};
}

// Pinhole camera. Convention: camera looks down +z, x right, y down;
// pixel (u, v) = (fx * X/Z + cx, fy * Y/Z + cy), pixel centers at
// integer + 0.5 coordinates.
struct CameraPose {
    Mat3 rot;       // world-to-camera rotation block
    Vec3 trans;     // world-to-camera translation
    double focal = 0.0;
    double cx = 0.0, cy = 0.0;
    int height = 0, width = 0;

    Vec3 to_camera(const Vec3& p_world) const {
        Vec3 out;
        for (int r = 0; r < 3; ++r)
            out[static_cast<size_t>(r)] =
                rot[static_cast<size_t>(r)][0] * p_world[0] +
                rot[static_cast<size_t>(r)][1] * p_world[1] +
                rot[static_cast<size_t>(r)][2] * p_world[2] + trans[static_cast<size_t>(r)];
        return out;
    }

    // Camera center in world coordinates: -R^T t.
    Vec3 center() const {
        Vec3 c;
        for (int i = 0; i < 3; ++i)
            c[static_cast<size_t>(i)] = -(rot[0][static_cast<size_t>(i)] * trans[0] +
                                          rot[1][static_cast<size_t>(i)] * trans[1] +
                                          rot[2][static_cast<size_t>(i)] * trans[2]);
        return c;
    }

    // Unit world-space direction of the ray through pixel coordinate (u, v).
    Vec3 pixel_ray_dir(double u, double v) const;

    void validate() const;  // orthonormal rotation, det +1, positive focal
};

// Camera at `eye` looking at `target`, world up (0,0,1), y in image pointing
// down. Degenerate for eye on the up axis.
CameraPose look_at_camera(const Vec3& eye, const Vec3& target, double focal, int height,
                          int width);

// Orbit camera at given azimuth/elevation (radians) and radius, aimed at the
// origin. focal_scale multiplies the image height to give the focal length.
CameraPose orbit_camera(double azimuth, double elevation, double radius, int resolution,
                        double focal_scale = 0.8);

// 6-channel Pluecker ray map [6, H, W]: rows 0..2 unit direction, 3..5 moment
// (origin x direction), both in world coordinates. grid_h/grid_w default to
// the camera resolution; a coarser grid samples the matching pixel centers.
Tensor plucker_ray_map(const CameraPose& cam, int grid_h = 0, int grid_w = 0);

// Per-pixel ray origins/directions for a (possibly coarser) output grid,
// packed as [M, 3] with M = grid_h * grid_w, row-major over the grid.
void ray_grid(const CameraPose& cam, int grid_h, int grid_w, Tensor& origins, Tensor& dirs);

}  // namespace splatloop
