#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "handfit/errors.hpp"
#include "handfit/geom.hpp"
#include "handfit/model.hpp"
#include "handfit/tape.hpp"

namespace handfit {

inline constexpr double kPi = 3.14159265358979323846;

// ---- pose parameterization ---------------------------------------------------

// Which of the 3J Euler channels are optimized. Channels are laid out
// [joint0.x, joint0.y, joint0.z, joint1.x, ...].
struct DofMask {
    std::vector<bool> channels;

    int active_count() const {
        int n = 0;
        for (bool b : channels) n += b ? 1 : 0;
        return n;
    }

    std::vector<std::size_t> active_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < channels.size(); ++i)
            if (channels[i]) out.push_back(i);
        return out;
    }

    static DofMask all_active(int joints) {
        DofMask m;
        m.channels.assign(static_cast<std::size_t>(3 * joints), true);
        return m;
    }

    static DofMask from_model(const HandModel& m) { return DofMask{m.dof_mask}; }
};

// Active pose angles with their unconstrained preimage: theta = pi * tanh(u).
// The raw values u are what the optimizer owns, so every theta component stays
// inside (-pi, pi) by construction.
class PoseVector {
public:
    PoseVector(DofMask mask, std::vector<double> raw)
        : mask_(std::move(mask)), raw_(std::move(raw)) {
        if (static_cast<int>(raw_.size()) != mask_.active_count())
            throw ContractError("PoseVector: " + std::to_string(raw_.size()) + " raw values for " +
                                std::to_string(mask_.active_count()) + " active channels");
    }

    explicit PoseVector(DofMask mask)
        : PoseVector(std::move(mask),
                     std::vector<double>(static_cast<std::size_t>(mask.active_count()), 0.0)) {}

    const DofMask& mask() const { return mask_; }
    const std::vector<double>& raw() const { return raw_; }
    std::vector<double>& raw() { return raw_; }
    int active_count() const { return static_cast<int>(raw_.size()); }

    std::vector<double> theta() const {
        std::vector<double> out(raw_.size());
        for (std::size_t i = 0; i < raw_.size(); ++i) out[i] = kPi * std::tanh(raw_[i]);
        return out;
    }

    // Dense 3J vector with zeros on disabled channels.
    std::vector<double> full_theta() const {
        std::vector<double> out(mask_.channels.size(), 0.0);
        const auto idx = mask_.active_indices();
        for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = kPi * std::tanh(raw_[i]);
        return out;
    }

private:
    DofMask mask_;
    std::vector<double> raw_;
};

// ---- euler rotations ------------------------------------------------------------

// Intrinsic X-Y-Z composition: R = Rx(a) * Ry(b) * Rz(c).
inline Mat3 euler_to_rotation(const Vec3& angles) {
    return rot_x(angles.x) * rot_y(angles.y) * rot_z(angles.z);
}

namespace detail {

inline Mat3 drot_x(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r.m = {0, 0, 0, 0, -s, -c, 0, c, -s};
    return r;
}

inline Mat3 drot_y(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r.m = {-s, 0, c, 0, 0, 0, -c, 0, -s};
    return r;
}

inline Mat3 drot_z(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r.m = {-s, -c, 0, c, -s, 0, 0, 0, 0};
    return r;
}

}  // namespace detail

// Differentiable euler-to-rotation as one fused node: [3] -> [3,3].
inline diff::Value euler_rotation(diff::Tape& t, diff::Value angles) {
    const Tensor& a = t.value(angles);
    if (a.numel() != 3) throw ShapeError("euler_rotation: need 3 angles, got " + shape_str(a.shape()));
    const Mat3 R = euler_to_rotation({a[0], a[1], a[2]});
    Tensor out = Tensor::from({3, 3}, std::vector<double>(R.m.begin(), R.m.end()));
    const int ia = angles.id;
    const double ax = a[0], ay = a[1], az = a[2];
    return t.custom(std::move(out), {angles}, "euler_rotation",
                    [ia, ax, ay, az](diff::Tape& tp, const Tensor& g) {
                        const Mat3 rx = rot_x(ax), ry = rot_y(ay), rz = rot_z(az);
                        const Mat3 da = detail::drot_x(ax) * ry * rz;
                        const Mat3 db = rx * detail::drot_y(ay) * rz;
                        const Mat3 dc = rx * ry * detail::drot_z(az);
                        Tensor ga = Tensor::zeros({3});
                        for (int k = 0; k < 9; ++k) {
                            const double gv = g[static_cast<std::size_t>(k)];
                            ga[0] += gv * da.m[static_cast<std::size_t>(k)];
                            ga[1] += gv * db.m[static_cast<std::size_t>(k)];
                            ga[2] += gv * dc.m[static_cast<std::size_t>(k)];
                        }
                        tp.accumulate(ia, ga);
                    });
}

// ---- forward kinematics ------------------------------------------------------------

// Per-joint skinning transforms (zero pose -> posed) plus posed and rest joint
// positions. rot/trans are the G_j used by LBS; at theta = 0 they are the
// identity.
struct JointTransforms {
    std::vector<Mat3> rot;
    std::vector<Vec3> trans;
    std::vector<Vec3> joint_positions;
    std::vector<Vec3> rest_positions;

    std::array<double, 16> matrix(int j) const {
        const Mat3& R = rot[static_cast<std::size_t>(j)];
        const Vec3& t = trans[static_cast<std::size_t>(j)];
        return {R(0, 0), R(0, 1), R(0, 2), t.x,
                R(1, 0), R(1, 1), R(1, 2), t.y,
                R(2, 0), R(2, 1), R(2, 2), t.z,
                0,       0,       0,       1};
    }
};

// Value-level FK. full_theta has 3J entries; offsets is [J,3].
inline JointTransforms forward_kinematics(std::span<const double> full_theta, const Tensor& offsets,
                                          const JointHierarchy& h) {
    const int J = h.joint_count();
    if (static_cast<int>(full_theta.size()) != 3 * J)
        throw ShapeError("forward_kinematics: theta has " + std::to_string(full_theta.size()) +
                         " channels for J=" + std::to_string(J));
    JointTransforms out;
    out.rot.resize(static_cast<std::size_t>(J));
    out.trans.resize(static_cast<std::size_t>(J));
    out.joint_positions.resize(static_cast<std::size_t>(J));
    out.rest_positions.resize(static_cast<std::size_t>(J));
    std::vector<Mat3> world_rot(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) {
        const std::size_t js = static_cast<std::size_t>(j);
        const Vec3 off{offsets.at(js, 0), offsets.at(js, 1), offsets.at(js, 2)};
        const Mat3 local = euler_to_rotation(
            {full_theta[3 * js], full_theta[3 * js + 1], full_theta[3 * js + 2]});
        const int p = h.parents[js];
        if (p < 0) {
            world_rot[js] = local;
            out.joint_positions[js] = off;
            out.rest_positions[js] = off;
        } else {
            const std::size_t ps = static_cast<std::size_t>(p);
            world_rot[js] = world_rot[ps] * local;
            out.joint_positions[js] = world_rot[ps] * off + out.joint_positions[ps];
            out.rest_positions[js] = out.rest_positions[ps] + off;
        }
        out.rot[js] = world_rot[js];
        out.trans[js] = out.joint_positions[js] - world_rot[js] * out.rest_positions[js];
    }
    return out;
}

// Tape-level FK results; node handles stay valid while the tape lives.
struct FkNodes {
    std::vector<diff::Value> rot;      // per joint [3,3]
    std::vector<diff::Value> trans;    // per joint [3]
    diff::Value joint_positions;       // [J,3] posed
    diff::Value rest_positions;        // [J,3] zero pose (cumulative offsets)
};

inline FkNodes forward_kinematics(diff::Tape& t, diff::Value full_theta, diff::Value offsets,
                                  const JointHierarchy& h) {
    using diff::Value;
    const int J = h.joint_count();
    if (t.value(full_theta).numel() != static_cast<std::size_t>(3 * J))
        throw ShapeError("forward_kinematics: theta numel " +
                         std::to_string(t.value(full_theta).numel()) + " for J=" + std::to_string(J));
    FkNodes out;
    out.rot.resize(static_cast<std::size_t>(J));
    out.trans.resize(static_cast<std::size_t>(J));
    std::vector<Value> world_rot(static_cast<std::size_t>(J));
    std::vector<Value> pos(static_cast<std::size_t>(J));
    std::vector<Value> rest(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) {
        const std::size_t js = static_cast<std::size_t>(j);
        Value ang = t.gather(full_theta, {3 * js, 3 * js + 1, 3 * js + 2});
        Value local = euler_rotation(t, ang);
        Value off = t.gather(offsets, {3 * js, 3 * js + 1, 3 * js + 2});
        const int p = h.parents[js];
        if (p < 0) {
            world_rot[js] = local;
            pos[js] = off;
            rest[js] = off;
        } else {
            const std::size_t ps = static_cast<std::size_t>(p);
            world_rot[js] = t.matmul(world_rot[ps], local);
            pos[js] = t.add(t.matmul(world_rot[ps], off), pos[ps]);
            rest[js] = t.add(rest[ps], off);
        }
        out.rot[js] = world_rot[js];
        out.trans[js] = t.sub(pos[js], t.matmul(world_rot[js], rest[js]));
    }
    out.joint_positions = t.stack_rows(pos);
    out.rest_positions = t.stack_rows(rest);
    return out;
}

// ---- rigid alignment ------------------------------------------------------------

// Model space -> dataset space, rotation plus translation only.
struct RigidAlignment {
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    static RigidAlignment identity() { return {Mat3::identity(), Vec3{}}; }
};

namespace detail {

// Cyclic Jacobi eigensolver for a symmetric 4x4; returns the eigenvector of
// the largest eigenvalue.
inline std::array<double, 4> max_eigenvector_sym4(std::array<std::array<double, 4>, 4> a) {
    std::array<std::array<double, 4>, 4> v{};
    for (int i = 0; i < 4; ++i) v[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < 4; ++p)
            for (int q = p + 1; q < 4; ++q) off += a[static_cast<std::size_t>(p)][static_cast<std::size_t>(q)] * a[static_cast<std::size_t>(p)][static_cast<std::size_t>(q)];
        if (off < 1e-26) break;
        for (int p = 0; p < 4; ++p)
            for (int q = p + 1; q < 4; ++q) {
                const std::size_t ps = static_cast<std::size_t>(p), qs = static_cast<std::size_t>(q);
                if (std::fabs(a[ps][qs]) < 1e-30) continue;
                const double theta = (a[qs][qs] - a[ps][ps]) / (2 * a[ps][qs]);
                const double sign = theta >= 0 ? 1.0 : -1.0;
                const double tt = sign / (std::fabs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(tt * tt + 1), s = tt * c;
                for (int k = 0; k < 4; ++k) {
                    const std::size_t ks = static_cast<std::size_t>(k);
                    const double akp = a[ks][ps], akq = a[ks][qs];
                    a[ks][ps] = c * akp - s * akq;
                    a[ks][qs] = s * akp + c * akq;
                }
                for (int k = 0; k < 4; ++k) {
                    const std::size_t ks = static_cast<std::size_t>(k);
                    const double apk = a[ps][ks], aqk = a[qs][ks];
                    a[ps][ks] = c * apk - s * aqk;
                    a[qs][ks] = s * apk + c * aqk;
                }
                for (int k = 0; k < 4; ++k) {
                    const std::size_t ks = static_cast<std::size_t>(k);
                    const double vkp = v[ks][ps], vkq = v[ks][qs];
                    v[ks][ps] = c * vkp - s * vkq;
                    v[ks][qs] = s * vkp + c * vkq;
                }
            }
    }
    int best = 0;
    for (int i = 1; i < 4; ++i)
        if (a[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] > a[static_cast<std::size_t>(best)][static_cast<std::size_t>(best)]) best = i;
    return {v[0][static_cast<std::size_t>(best)], v[1][static_cast<std::size_t>(best)],
            v[2][static_cast<std::size_t>(best)], v[3][static_cast<std::size_t>(best)]};
}

}  // namespace detail

// Least-squares rigid transform (no scale) minimizing sum |R*src + t - dst|^2,
// solved with Horn's quaternion method.
inline RigidAlignment rigid_align(std::span<const Vec3> src, std::span<const Vec3> dst) {
    const std::size_t K = src.size();
    if (K != dst.size() || K < 3)
        throw ContractError("rigid_align: need >= 3 matched points, got " + std::to_string(K));

    Vec3 cs{}, cd{};
    for (std::size_t i = 0; i < K; ++i) {
        cs += src[i];
        cd += dst[i];
    }
    cs = cs / static_cast<double>(K);
    cd = cd / static_cast<double>(K);

    // collinearity check: the largest centered cross product must be
    // non-negligible relative to the point spread
    double spread = 0, max_cross = 0;
    for (std::size_t i = 0; i < K; ++i) spread = std::max(spread, norm(src[i] - cs));
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = i + 1; j < K; ++j)
            max_cross = std::max(max_cross, norm(cross(src[i] - cs, src[j] - cs)));
    if (spread <= 0 || max_cross < 1e-12 * spread * spread)
        throw DegeneracyError("rigid_align: source points are collinear or coincident");

    double S[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    for (std::size_t i = 0; i < K; ++i) {
        const Vec3 a = src[i] - cs, b = dst[i] - cd;
        const double av[3] = {a.x, a.y, a.z}, bv[3] = {b.x, b.y, b.z};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) S[r][c] += av[r] * bv[c];
    }

    std::array<std::array<double, 4>, 4> N{};
    N[0] = {S[0][0] + S[1][1] + S[2][2], S[1][2] - S[2][1], S[2][0] - S[0][2], S[0][1] - S[1][0]};
    N[1] = {S[1][2] - S[2][1], S[0][0] - S[1][1] - S[2][2], S[0][1] + S[1][0], S[2][0] + S[0][2]};
    N[2] = {S[2][0] - S[0][2], S[0][1] + S[1][0], -S[0][0] + S[1][1] - S[2][2], S[1][2] + S[2][1]};
    N[3] = {S[0][1] - S[1][0], S[2][0] + S[0][2], S[1][2] + S[2][1], -S[0][0] - S[1][1] + S[2][2]};

    const auto q = detail::max_eigenvector_sym4(N);
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    RigidAlignment out;
    out.rotation.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
                      2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                      2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
    out.translation = cd - out.rotation * cs;
    return out;
}

}  // namespace handfit
