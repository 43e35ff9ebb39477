#include "splatloop/camera.hpp"

#include <cmath>

namespace splatloop {

Vec3 CameraPose::pixel_ray_dir(double u, double v) const {
    const Vec3 d_cam = {(u - cx) / focal, (v - cy) / focal, 1.0};
    // World direction: R^T d.
    Vec3 d;
    for (int i = 0; i < 3; ++i)
        d[static_cast<size_t>(i)] = rot[0][static_cast<size_t>(i)] * d_cam[0] +
                                    rot[1][static_cast<size_t>(i)] * d_cam[1] +
                                    rot[2][static_cast<size_t>(i)] * d_cam[2];
    return normalized(d);
}

void CameraPose::validate() const {
    if (!(focal > 0.0)) throw std::invalid_argument("camera: focal must be positive");
    if (height <= 0 || width <= 0) throw std::invalid_argument("camera: bad resolution");
    // Orthonormality and det +1 to 1e-6.
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double d = 0.0;
            for (int k = 0; k < 3; ++k)
                d += rot[static_cast<size_t>(i)][static_cast<size_t>(k)] *
                     rot[static_cast<size_t>(j)][static_cast<size_t>(k)];
            const double want = i == j ? 1.0 : 0.0;
            if (std::abs(d - want) > 1e-6)
                throw std::invalid_argument("camera: rotation block not orthonormal");
        }
    const Vec3 r0 = {rot[0][0], rot[0][1], rot[0][2]};
    const Vec3 r1 = {rot[1][0], rot[1][1], rot[1][2]};
    const Vec3 r2 = {rot[2][0], rot[2][1], rot[2][2]};
    if (std::abs(dot(cross(r0, r1), r2) - 1.0) > 1e-6)
        throw std::invalid_argument("camera: rotation determinant is not +1");
}

CameraPose look_at_camera(const Vec3& eye, const Vec3& target, double focal, int height,
                          int width) {
    const Vec3 fwd = normalized({target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]});
    const Vec3 up = {0.0, 0.0, 1.0};
    const Vec3 x_cam = normalized(cross(fwd, up));
    const Vec3 y_cam = cross(fwd, x_cam);  // points down in world space

    CameraPose cam;
    cam.rot = {{{x_cam[0], x_cam[1], x_cam[2]},
                {y_cam[0], y_cam[1], y_cam[2]},
                {fwd[0], fwd[1], fwd[2]}}};
    // t = -R * eye
    for (int r = 0; r < 3; ++r)
        cam.trans[static_cast<size_t>(r)] = -(cam.rot[static_cast<size_t>(r)][0] * eye[0] +
                                              cam.rot[static_cast<size_t>(r)][1] * eye[1] +
                                              cam.rot[static_cast<size_t>(r)][2] * eye[2]);
    cam.focal = focal;
    cam.height = height;
    cam.width = width;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    cam.validate();
    return cam;
}

CameraPose orbit_camera(double azimuth, double elevation, double radius, int resolution,
                        double focal_scale) {
    const Vec3 eye = {radius * std::cos(elevation) * std::cos(azimuth),
                      radius * std::cos(elevation) * std::sin(azimuth),
                      radius * std::sin(elevation)};
    return look_at_camera(eye, {0.0, 0.0, 0.0}, focal_scale * resolution, resolution, resolution);
}

void ray_grid(const CameraPose& cam, int grid_h, int grid_w, Tensor& origins, Tensor& dirs) {
    if (grid_h <= 0) grid_h = cam.height;
    if (grid_w <= 0) grid_w = cam.width;
    const int m = grid_h * grid_w;
    origins = Tensor({m, 3});
    dirs = Tensor({m, 3});
    const Vec3 c = cam.center();
    const double sy = static_cast<double>(cam.height) / grid_h;
    const double sx = static_cast<double>(cam.width) / grid_w;
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            const double u = (gx + 0.5) * sx;
            const double v = (gy + 0.5) * sy;
            const Vec3 d = cam.pixel_ray_dir(u, v);
            const int row = gy * grid_w + gx;
            for (int i = 0; i < 3; ++i) {
                origins.at2(row, i) = static_cast<float>(c[static_cast<size_t>(i)]);
                dirs.at2(row, i) = static_cast<float>(d[static_cast<size_t>(i)]);
            }
        }
}

Tensor plucker_ray_map(const CameraPose& cam, int grid_h, int grid_w) {
    if (grid_h <= 0) grid_h = cam.height;
    if (grid_w <= 0) grid_w = cam.width;
    Tensor origins, dirs;
    ray_grid(cam, grid_h, grid_w, origins, dirs);
    Tensor out({6, grid_h, grid_w});
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            const int row = gy * grid_w + gx;
            const Vec3 o = {origins.at2(row, 0), origins.at2(row, 1), origins.at2(row, 2)};
            const Vec3 d = {dirs.at2(row, 0), dirs.at2(row, 1), dirs.at2(row, 2)};
            const Vec3 m = cross(o, d);
            for (int i = 0; i < 3; ++i) {
                out.v[(static_cast<size_t>(i) * grid_h + gy) * grid_w + gx] =
                    static_cast<float>(d[static_cast<size_t>(i)]);
                out.v[(static_cast<size_t>(i + 3) * grid_h + gy) * grid_w + gx] =
                    static_cast<float>(m[static_cast<size_t>(i)]);
            }
        }
    return out;
}

}  // namespace splatloop
