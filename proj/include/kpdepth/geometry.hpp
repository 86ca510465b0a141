#pragma once

// Pinhole camera, SE(3) poses parameterized by twists, and the inverse-warp
// field that maps target pixels into a source view.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "kpdepth/errors.hpp"
#include "kpdepth/parallel.hpp"

namespace kpdepth {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
/// Twist ordered (omega_x, omega_y, omega_z, v_x, v_y, v_z).
using Twist = Eigen::Matrix<double, 6, 1>;

inline constexpr double kDefaultZMin = 1e-3;

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

    void validate() const {
        if (!(fx > 0.0 && fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy))
            throw ConfigError("intrinsics require fx, fy > 0 and a finite principal point");
    }
};

struct Projection {
    double u = 0.0;
    double v = 0.0;
    bool valid = false;
};

inline Vec3 backproject(const Intrinsics& K, double row, double col, double depth) {
    return {(col - K.cx) / K.fx * depth, (row - K.cy) / K.fy * depth, depth};
}

inline Projection project(const Intrinsics& K, const Vec3& p, double z_min = kDefaultZMin) {
    if (!(p.z() >= z_min))
        return {};
    return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy, true};
}

inline Mat3 hat(const Vec3& w) {
    Mat3 m;
    m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
    return m;
}

namespace detail {

// Coefficients of the Rodrigues/V-matrix closed forms as functions of theta,
// together with f'(theta)/theta, which is what d f / d omega = (f'/theta) omega
// needs. Series expansions take over below 0.1 rad where the closed forms
// cancel catastrophically.
struct So3Coefficients {
    double sinc;   // sin t / t
    double cosc;   // (1 - cos t) / t^2
    double sinc3;  // (t - sin t) / t^3
    double dsinc;  // (sin t / t)' / t
    double dcosc;  // ((1 - cos t) / t^2)' / t
    double dsinc3; // ((t - sin t) / t^3)' / t
};

inline So3Coefficients so3_coefficients(double theta) {
    So3Coefficients c;
    const double t2 = theta * theta;
    if (theta < 0.1) {
        const double t4 = t2 * t2, t6 = t4 * t2, t8 = t4 * t4;
        c.sinc = 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0 + t8 / 362880.0;
        c.cosc = 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0 + t8 / 3628800.0;
        c.sinc3 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0 + t8 / 39916800.0;
        c.dsinc = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0;
        c.dcosc = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0;
        c.dsinc3 = -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0 + t6 / 4989600.0;
        return c;
    }
    const double s = std::sin(theta), co = std::cos(theta);
    const double t3 = t2 * theta;
    c.sinc = s / theta;
    c.cosc = (1.0 - co) / t2;
    c.sinc3 = (theta - s) / t3;
    c.dsinc = (theta * co - s) / t3;
    c.dcosc = (theta * s - 2.0 * (1.0 - co)) / (t2 * t2);
    c.dsinc3 = (3.0 * s - theta * co - 2.0 * theta) / (t3 * t2);
    return c;
}

// d/d omega of  p + A (omega x p) + B (omega x (omega x p))  for fixed p,
// with A, B scalar functions of |omega| whose f'/theta are dA, dB.
inline Mat3 rodrigues_action_jacobian(const Vec3& w, const Vec3& p, double A, double B, double dA,
                                      double dB) {
    const Vec3 wxp = w.cross(p);
    const Vec3 wxwxp = w.cross(wxp);
    Mat3 d_wxwxp = w.dot(p) * Mat3::Identity() + w * p.transpose() - 2.0 * p * w.transpose();
    return dA * wxp * w.transpose() + A * (-hat(p)) + dB * wxwxp * w.transpose() + B * d_wxwxp;
}

} // namespace detail

/// Rigid transform x' = R x + t.
struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
};

inline CameraPose compose(const CameraPose& a, const CameraPose& b) {
    return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline CameraPose invert(const CameraPose& p) {
    const Mat3 rt = p.rotation.transpose();
    return {rt, -rt * p.translation};
}

inline CameraPose se3_exp(const Twist& twist) {
    const Vec3 w = twist.head<3>();
    const Vec3 v = twist.tail<3>();
    const auto c = detail::so3_coefficients(w.norm());
    const Mat3 W = hat(w);
    const Mat3 W2 = W * W;
    CameraPose pose;
    pose.rotation = Mat3::Identity() + c.sinc * W + c.cosc * W2;
    pose.translation = (Mat3::Identity() + c.cosc * W + c.sinc3 * W2) * v;
    return pose;
}

/// Inverse of se3_exp for rotation angles below pi - 1e-6.
inline Twist se3_log(const CameraPose& pose) {
    const Mat3& R = pose.rotation;
    const Vec3 axis2{R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1)}; // 2 sin(t) n
    const double s = 0.5 * axis2.norm();
    const double co = 0.5 * (R.trace() - 1.0);
    const double theta = std::atan2(s, co);
    if (theta > std::numbers::pi - 1e-6)
        throw ConfigError("se3_log is ill-conditioned for rotation angles near pi");
    const double scale = theta < 1e-8 ? 0.5 * (1.0 + theta * theta / 6.0) : 0.5 * theta / s;
    const Vec3 w = scale * axis2;
    // V^-1 = I - W/2 + k W^2,  k = (1 - t sin t / (2 (1 - cos t))) / t^2
    double k;
    if (theta < 1e-2) {
        const double t2 = theta * theta;
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
    } else {
        k = (1.0 - theta * std::sin(theta) / (2.0 * (1.0 - std::cos(theta)))) / (theta * theta);
    }
    const Mat3 W = hat(w);
    Twist out;
    out.head<3>() = w;
    out.tail<3>() = (Mat3::Identity() - 0.5 * W + k * W * W) * pose.translation;
    return out;
}

/// exp(twist) together with the exact partials of exp(twist) x with respect
/// to the twist coordinates, for arbitrary x.
class TwistTransform {
public:
    explicit TwistTransform(const Twist& twist) : pose_(se3_exp(twist)), w_(twist.head<3>()), v_(twist.tail<3>()) {
        c_ = detail::so3_coefficients(w_.norm());
        V_ = Mat3::Identity() + c_.cosc * hat(w_) + c_.sinc3 * hat(w_) * hat(w_);
        dt_dw_ = detail::rodrigues_action_jacobian(w_, v_, c_.cosc, c_.sinc3, c_.dcosc, c_.dsinc3);
    }

    const CameraPose& pose() const { return pose_; }

    /// d(R x + t)/d(omega, v) as a 3x6 block.
    Eigen::Matrix<double, 3, 6> jacobian(const Vec3& x) const {
        Eigen::Matrix<double, 3, 6> J;
        J.leftCols<3>() = detail::rodrigues_action_jacobian(w_, x, c_.sinc, c_.cosc, c_.dsinc, c_.dcosc) + dt_dw_;
        J.rightCols<3>() = V_;
        return J;
    }

private:
    CameraPose pose_;
    Vec3 w_, v_;
    detail::So3Coefficients c_{};
    Mat3 V_;
    Mat3 dt_dw_;
};

/// Per-pixel depth stored as log-depth; depth = exp(log_depth).
class DepthField {
public:
    DepthField() = default;
    DepthField(int width, int height, double depth = 1.0)
        : width_(width), height_(height) {
        if (width <= 0 || height <= 0)
            throw ConfigError("depth field dimensions must be positive");
        if (!(depth > 0.0) || !std::isfinite(depth))
            throw ConfigError("depth must be positive and finite");
        log_depth_.assign(static_cast<std::size_t>(width) * height, std::log(depth));
    }

    static DepthField from_depths(int width, int height, std::span<const double> depths) {
        DepthField f(width, height);
        if (depths.size() != f.log_depth_.size())
            throw ConfigError("depth data length does not match width*height");
        for (std::size_t p = 0; p < depths.size(); ++p) {
            if (!(depths[p] > 0.0) || !std::isfinite(depths[p]))
                throw ConfigError("depth must be positive and finite");
            f.log_depth_[p] = std::log(depths[p]);
        }
        return f;
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t pixel_count() const { return log_depth_.size(); }

    double depth(int row, int col) const { return std::exp(log_depth_[index(row, col)]); }
    double depth(std::size_t p) const { return std::exp(log_depth_[p]); }
    double& log_depth(int row, int col) { return log_depth_[index(row, col)]; }
    double log_depth(int row, int col) const { return log_depth_[index(row, col)]; }

    std::span<double> log_depths() { return log_depth_; }
    std::span<const double> log_depths() const { return log_depth_; }

    std::vector<double> depths() const {
        std::vector<double> d(log_depth_.size());
        for (std::size_t p = 0; p < d.size(); ++p)
            d[p] = std::exp(log_depth_[p]);
        return d;
    }

    friend bool operator==(const DepthField&, const DepthField&) = default;

private:
    std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * width_ + col; }

    int width_ = 0;
    int height_ = 0;
    std::vector<double> log_depth_;
};

/// Source-image coordinates of every target pixel plus the partials of
/// (u*, v*) with respect to that pixel's log-depth and the six twist
/// coordinates. Invalid pixels carry zero Jacobians.
struct WarpField {
    int width = 0;
    int height = 0;
    std::vector<double> u;
    std::vector<double> v;
    std::vector<unsigned char> valid;
    std::vector<double> j_depth; // 2 per pixel: du/dlogd, dv/dlogd
    std::vector<double> j_twist; // 12 per pixel: du/dtwist (6), dv/dtwist (6)

    std::size_t pixel_count() const { return u.size(); }
    bool is_valid(std::size_t p) const { return valid[p] != 0; }
};

struct WarpOptions {
    int source_width = 0;  // 0: same as the depth field
    int source_height = 0; // 0: same as the depth field
    double z_min = kDefaultZMin;
};

/// For every target pixel: X = backproject(K, i, j, depth), X' = R X + t,
/// (u*, v*) = project(K, X'). Valid when X'.z >= z_min and (u*, v*) lies in
/// [0, W-1] x [0, H-1] of the source image. Invalid pixels keep zero
/// Jacobians; u*, v* are still reported when X'.z >= z_min.
inline WarpField compute_warp(const DepthField& depth, const Intrinsics& K, const Twist& twist,
                              const WarpOptions& opts = {}) {
    const int w = depth.width(), h = depth.height();
    const int sw = opts.source_width > 0 ? opts.source_width : w;
    const int sh = opts.source_height > 0 ? opts.source_height : h;
    const TwistTransform T(twist);
    WarpField f;
    f.width = w;
    f.height = h;
    const std::size_t n = depth.pixel_count();
    f.u.assign(n, 0.0);
    f.v.assign(n, 0.0);
    f.valid.assign(n, 0);
    f.j_depth.assign(2 * n, 0.0);
    f.j_twist.assign(12 * n, 0.0);
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t p = i * w + j;
                const double d = depth.depth(p);
                const Vec3 ray((j - K.cx) / K.fx, (static_cast<double>(i) - K.cy) / K.fy, 1.0);
                // X' = d P with P = R ray + t / d; projecting P instead of X'
                // keeps the identity warp exact.
                const Vec3 P = T.pose().rotation * ray + T.pose().translation / d;
                if (!(d * P.z() >= opts.z_min))
                    continue;
                const double iz = 1.0 / P.z();
                const double u = j + K.fx * (P.x() * iz - ray.x());
                const double v = static_cast<double>(i) + K.fy * (P.y() * iz - ray.y());
                f.u[p] = u;
                f.v[p] = v;
                if (!(u >= 0.0 && u <= sw - 1 && v >= 0.0 && v <= sh - 1))
                    continue;
                f.valid[p] = 1;
                Eigen::Matrix<double, 2, 3> dproj;
                dproj << K.fx * iz, 0.0, -K.fx * P.x() * iz * iz, 0.0, K.fy * iz, -K.fy * P.y() * iz * iz;
                const Eigen::Vector2d jd = dproj * (-T.pose().translation / d);
                const Eigen::Matrix<double, 2, 6> jt = dproj * T.jacobian(d * ray) / d;
                f.j_depth[2 * p] = jd.x();
                f.j_depth[2 * p + 1] = jd.y();
                for (int k = 0; k < 6; ++k) {
                    f.j_twist[12 * p + k] = jt(0, k);
                    f.j_twist[12 * p + 6 + k] = jt(1, k);
                }
            }
    });
    return f;
}

inline WarpField compute_warp(const DepthField& depth, const Intrinsics& K, const CameraPose& pose,
                              const WarpOptions& opts = {}) {
    return compute_warp(depth, K, se3_log(pose), opts);
}

} // namespace kpdepth
