#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "handfit/collision.hpp"
#include "handfit/correctives.hpp"
#include "handfit/kinematics.hpp"
#include "handfit/model.hpp"
#include "handfit/render.hpp"
#include "handfit/rng.hpp"
#include "handfit/skinning.hpp"

namespace handfit {

// Everything the generator needs; the seed fully determines every output byte.
struct SynthConfig {
    std::uint64_t seed = 7;
    int vertex_budget = 2000;
    int n_cameras = 8;
    int n_train_poses = 60;
    int n_test_poses = 15;
    double bone_length_perturbation = 0.0;  // fraction, per bone
    int image_size = 256;
    double camera_distance = 1000.0;  // mm
    int identity_dim = 32;
    // ground-truth corrective magnitudes (mm)
    double gt_skel_sigma = 2.0;
    double gt_idvert_amplitude = 1.2;
    double gt_posevert_amplitude = 0.8;
    double global_rotation_max = 0.45;  // rad, per-frame rigid jitter
    double global_translation_max = 25.0;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = nlohmann::json{{"seed", c.seed},
                       {"vertex_budget", c.vertex_budget},
                       {"n_cameras", c.n_cameras},
                       {"n_train_poses", c.n_train_poses},
                       {"n_test_poses", c.n_test_poses},
                       {"bone_length_perturbation", c.bone_length_perturbation},
                       {"image_size", c.image_size},
                       {"camera_distance", c.camera_distance},
                       {"identity_dim", c.identity_dim},
                       {"gt_skel_sigma", c.gt_skel_sigma},
                       {"gt_idvert_amplitude", c.gt_idvert_amplitude},
                       {"gt_posevert_amplitude", c.gt_posevert_amplitude},
                       {"global_rotation_max", c.global_rotation_max},
                       {"global_translation_max", c.global_translation_max}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
    c.seed = j.value("seed", c.seed);
    c.vertex_budget = j.value("vertex_budget", c.vertex_budget);
    c.n_cameras = j.value("n_cameras", c.n_cameras);
    c.n_train_poses = j.value("n_train_poses", c.n_train_poses);
    c.n_test_poses = j.value("n_test_poses", c.n_test_poses);
    c.bone_length_perturbation = j.value("bone_length_perturbation", c.bone_length_perturbation);
    c.image_size = j.value("image_size", c.image_size);
    c.camera_distance = j.value("camera_distance", c.camera_distance);
    c.identity_dim = j.value("identity_dim", c.identity_dim);
    c.gt_skel_sigma = j.value("gt_skel_sigma", c.gt_skel_sigma);
    c.gt_idvert_amplitude = j.value("gt_idvert_amplitude", c.gt_idvert_amplitude);
    c.gt_posevert_amplitude = j.value("gt_posevert_amplitude", c.gt_posevert_amplitude);
    c.global_rotation_max = j.value("global_rotation_max", c.global_rotation_max);
    c.global_translation_max = j.value("global_translation_max", c.global_translation_max);
}

namespace synth_detail {

// Hand layout, millimeters. Palm lies in the x-y plane; fingers extend along
// +y, the palm faces -z, the thumb sits on the -x side.
struct FingerSpec {
    const char* name;
    Vec3 mcp;              // from the wrist
    double splay;          // in-plane direction angle from +y, toward +x
    double out_of_plane;   // tilt toward -z
    double prox, mid, dist;
    double radius;
};

inline const std::array<FingerSpec, 5>& fingers() {
    static const std::array<FingerSpec, 5> f{{
        {"thumb", {-48, 26, -6}, -0.96, 0.10, 34, 28, 24, 8.5},
        {"index", {-25, 85, 0}, -0.17, 0.0, 42, 24, 21, 7.0},
        {"middle", {0, 88, 0}, 0.0, 0.0, 46, 27, 22, 7.5},
        {"ring", {23, 84, 0}, 0.16, 0.0, 42, 25, 21, 7.0},
        {"pinky", {44, 76, 0}, 0.35, 0.0, 33, 19, 18, 6.0},
    }};
    return f;
}

inline Vec3 finger_direction(const FingerSpec& f) {
    const Vec3 planar{std::sin(f.splay), std::cos(f.splay), 0};
    return normalized(Vec3{planar.x, planar.y, -std::sin(f.out_of_plane)});
}

// Palm outline x-extents by y, linearly interpolated between control rows.
inline std::pair<double, double> palm_extent(double y) {
    struct Row {
        double y, left, right;
    };
    static const Row rows[] = {{-18, -28, 26}, {20, -54, 40}, {55, -44, 50}, {92, -40, 56}};
    if (y <= rows[0].y) return {rows[0].left, rows[0].right};
    for (int i = 0; i < 3; ++i) {
        if (y <= rows[i + 1].y) {
            const double s = (y - rows[i].y) / (rows[i + 1].y - rows[i].y);
            return {rows[i].left + s * (rows[i + 1].left - rows[i].left),
                    rows[i].right + s * (rows[i + 1].right - rows[i].right)};
        }
    }
    return {rows[3].left, rows[3].right};
}

constexpr double kPalmHalfThickness = 11.0;

struct MeshBuilder {
    std::vector<double> verts;
    std::vector<std::array<int, 3>> faces;

    int add_vertex(const Vec3& p) {
        verts.push_back(p.x);
        verts.push_back(p.y);
        verts.push_back(p.z);
        return static_cast<int>(verts.size() / 3) - 1;
    }

    void add_quad(int a, int b, int c, int d) {
        faces.push_back({a, b, c});
        faces.push_back({a, c, d});
    }
};

// Tube with a closed tip along the finger axis; the open base end is embedded
// inside the palm slab.
inline void build_finger(MeshBuilder& mb, const FingerSpec& f, int n_around, int n_rings) {
    const Vec3 dir = finger_direction(f);
    const Vec3 up = std::fabs(dir.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
    const Vec3 e1 = normalized(cross(up, dir));
    const Vec3 e2 = cross(dir, e1);

    const double total = f.prox + f.mid + f.dist;
    const double embed = 9.0;  // start below the knuckle, inside the palm
    std::vector<int> prev_ring;
    for (int r = 0; r < n_rings; ++r) {
        const double s = static_cast<double>(r) / static_cast<double>(n_rings - 1);
        const double along = -embed + s * (total + embed);
        const double radius = f.radius * (1.0 - 0.28 * std::max(0.0, s));
        const Vec3 center = f.mcp + dir * along;
        std::vector<int> ring;
        for (int k = 0; k < n_around; ++k) {
            const double phi = 2.0 * kPi * k / n_around;
            ring.push_back(mb.add_vertex(center + (e1 * std::cos(phi) + e2 * std::sin(phi)) * radius));
        }
        if (r > 0)
            for (int k = 0; k < n_around; ++k)
                mb.add_quad(prev_ring[static_cast<std::size_t>(k)],
                            prev_ring[static_cast<std::size_t>((k + 1) % n_around)],
                            ring[static_cast<std::size_t>((k + 1) % n_around)],
                            ring[static_cast<std::size_t>(k)]);
        prev_ring = ring;
    }
    // rounded tip: one shrinking ring plus an apex fan
    const Vec3 tip_base = f.mcp + dir * total;
    const double tip_r = f.radius * 0.72;
    std::vector<int> cap;
    for (int k = 0; k < n_around; ++k) {
        const double phi = 2.0 * kPi * k / n_around;
        cap.push_back(mb.add_vertex(tip_base + dir * (tip_r * 0.55) +
                                    (e1 * std::cos(phi) + e2 * std::sin(phi)) * (tip_r * 0.62)));
    }
    for (int k = 0; k < n_around; ++k)
        mb.add_quad(prev_ring[static_cast<std::size_t>(k)],
                    prev_ring[static_cast<std::size_t>((k + 1) % n_around)],
                    cap[static_cast<std::size_t>((k + 1) % n_around)],
                    cap[static_cast<std::size_t>(k)]);
    const int apex = mb.add_vertex(tip_base + dir * tip_r);
    for (int k = 0; k < n_around; ++k)
        mb.faces.push_back({cap[static_cast<std::size_t>(k)], cap[static_cast<std::size_t>((k + 1) % n_around)], apex});
}

inline void build_palm(MeshBuilder& mb, int nx, int ny) {
    const double y0 = -18, y1 = 92;
    std::vector<std::vector<int>> top(static_cast<std::size_t>(ny)), bottom(static_cast<std::size_t>(ny));
    for (int r = 0; r < ny; ++r) {
        const double y = y0 + (y1 - y0) * r / (ny - 1);
        const auto [xl, xr] = palm_extent(y);
        for (int c = 0; c < nx; ++c) {
            const double x = xl + (xr - xl) * c / (nx - 1);
            top[static_cast<std::size_t>(r)].push_back(mb.add_vertex({x, y, kPalmHalfThickness}));
            bottom[static_cast<std::size_t>(r)].push_back(mb.add_vertex({x, y, -kPalmHalfThickness}));
        }
    }
    for (int r = 0; r + 1 < ny; ++r)
        for (int c = 0; c + 1 < nx; ++c) {
            const auto rs = static_cast<std::size_t>(r);
            const auto cs = static_cast<std::size_t>(c);
            mb.add_quad(top[rs][cs], top[rs][cs + 1], top[rs + 1][cs + 1], top[rs + 1][cs]);
            mb.add_quad(bottom[rs][cs], bottom[rs + 1][cs], bottom[rs + 1][cs + 1], bottom[rs][cs + 1]);
        }
    // side walls along the four boundary loops
    const auto wall = [&](int ta, int tb, int ba, int bb) { mb.add_quad(ta, tb, bb, ba); };
    for (int c = 0; c + 1 < nx; ++c) {
        const auto cs = static_cast<std::size_t>(c);
        wall(top[0][cs], top[0][cs + 1], bottom[0][cs], bottom[0][cs + 1]);
        const auto last = static_cast<std::size_t>(ny - 1);
        wall(top[last][cs + 1], top[last][cs], bottom[last][cs + 1], bottom[last][cs]);
    }
    for (int r = 0; r + 1 < ny; ++r) {
        const auto rs = static_cast<std::size_t>(r);
        wall(top[rs + 1][0], top[rs][0], bottom[rs + 1][0], bottom[rs][0]);
        const auto lastc = static_cast<std::size_t>(nx - 1);
        wall(top[rs][lastc], top[rs + 1][lastc], bottom[rs][lastc], bottom[rs + 1][lastc]);
    }
}

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = dot(ab, ab);
    if (len2 == 0) return norm(p - a);
    const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
    return norm(p - (a + ab * t));
}

}  // namespace synth_detail

// The 28 active rotation channels on the default 21-joint skeleton:
// wrist x,y,z; per finger MCP x,y,z, PIP x, DIP x; fingertips none.
inline std::vector<bool> default_hand_dof_mask(const JointHierarchy& h) {
    std::vector<bool> mask(static_cast<std::size_t>(3 * h.joint_count()), false);
    mask[0] = mask[1] = mask[2] = true;
    for (int j = 1; j < h.joint_count(); ++j) {
        const int depth_in_finger = (j - 1) % 4;  // 0 mcp, 1 pip, 2 dip, 3 tip
        const std::size_t base = static_cast<std::size_t>(3 * j);
        if (depth_in_finger == 0) {
            mask[base] = mask[base + 1] = mask[base + 2] = true;
        } else if (depth_in_finger == 1 || depth_in_finger == 2) {
            mask[base] = true;
        }
    }
    return mask;
}

struct GeneratedSubject {
    HandModel model;          // the template the fitter sees
    CorrectiveNets gt_nets;   // hidden truth defining the subject's geometry
    IdentityCode beta;
};

// Procedural hand: palm slab plus five capsule fingers, distance-falloff
// skinning weights, hidden ground-truth corrective nets.
inline GeneratedSubject generate_subject(const SynthConfig& cfg) {
    using namespace synth_detail;
    Rng rng(cfg.seed);

    // mesh resolution from the vertex budget (base resolution yields ~1450)
    const double scale = std::sqrt(std::max(0.25, static_cast<double>(cfg.vertex_budget) / 1450.0));
    const int n_around = std::max(8, static_cast<int>(12 * scale));
    const int n_rings = std::max(10, static_cast<int>(16 * scale));
    const int palm_nx = std::max(8, static_cast<int>(14 * scale));
    const int palm_ny = std::max(10, static_cast<int>(16 * scale));

    MeshBuilder mb;
    build_palm(mb, palm_nx, palm_ny);
    for (const FingerSpec& f : fingers()) build_finger(mb, f, n_around, n_rings);

    HandModel m;
    const std::size_t V = mb.verts.size() / 3;
    m.template_vertices = Tensor::from({V, 3}, std::move(mb.verts));
    m.faces = std::move(mb.faces);

    // skeleton: wrist + 4 joints per finger
    const int J = 21;
    m.hierarchy.parents.assign(J, -1);
    m.hierarchy.names.assign(J, "");
    m.hierarchy.names[0] = "wrist";
    std::vector<double> offsets(static_cast<std::size_t>(J) * 3, 0.0);
    std::vector<Vec3> rest(static_cast<std::size_t>(J));
    rest[0] = {0, 0, 0};
    int j = 1;
    for (const FingerSpec& f : fingers()) {
        const Vec3 dir = finger_direction(f);
        const double segs[3] = {f.prox, f.mid, f.dist};
        const char* suffix[4] = {"_mcp", "_pip", "_dip", "_tip"};
        Vec3 prev = {0, 0, 0};
        int parent = 0;
        for (int s = 0; s < 4; ++s) {
            const Vec3 pos = s == 0 ? f.mcp : rest[static_cast<std::size_t>(j - 1)] + dir * segs[s - 1];
            rest[static_cast<std::size_t>(j)] = pos;
            const Vec3 off = pos - prev;
            offsets[static_cast<std::size_t>(3 * j)] = off.x;
            offsets[static_cast<std::size_t>(3 * j + 1)] = off.y;
            offsets[static_cast<std::size_t>(3 * j + 2)] = off.z;
            m.hierarchy.parents[static_cast<std::size_t>(j)] = parent;
            m.hierarchy.names[static_cast<std::size_t>(j)] = std::string(f.name) + suffix[s];
            if (s == 3) m.hierarchy.fingertips.push_back(j);
            prev = pos;
            parent = j;
            ++j;
        }
    }
    m.skeleton_offsets = Tensor::from({static_cast<std::size_t>(J), 3}, std::move(offsets));
    m.hierarchy.palm_joint = 0;
    m.dof_mask = default_hand_dof_mask(m.hierarchy);

    // distance-falloff skinning weights: per joint, distance to the segments
    // it drives (joint -> each child), gaussian falloff, small weights cut to
    // exact zero, rows renormalized
    const double sigma = 6.0;
    m.skinning_weights = Tensor::zeros({V, static_cast<std::size_t>(J)});
    std::vector<std::vector<int>> children(static_cast<std::size_t>(J));
    for (int q = 1; q < J; ++q) children[static_cast<std::size_t>(m.hierarchy.parents[static_cast<std::size_t>(q)])].push_back(q);
    for (std::size_t v = 0; v < V; ++v) {
        const Vec3 p{m.template_vertices.at(v, 0), m.template_vertices.at(v, 1),
                     m.template_vertices.at(v, 2)};
        std::vector<double> w(static_cast<std::size_t>(J), 0.0);
        double wmax = 0;
        for (int q = 0; q < J; ++q) {
            double d;
            if (children[static_cast<std::size_t>(q)].empty()) {
                d = norm(p - rest[static_cast<std::size_t>(q)]);
            } else {
                d = 1e300;
                for (int c : children[static_cast<std::size_t>(q)])
                    d = std::min(d, point_segment_distance(p, rest[static_cast<std::size_t>(q)],
                                                           rest[static_cast<std::size_t>(c)]));
            }
            w[static_cast<std::size_t>(q)] = std::exp(-(d / sigma) * (d / sigma));
            wmax = std::max(wmax, w[static_cast<std::size_t>(q)]);
        }
        double sum = 0;
        for (double& x : w) {
            if (x < 1e-3 * wmax) x = 0;
            sum += x;
        }
        for (int q = 0; q < J; ++q) m.skinning_weights.at(v, static_cast<std::size_t>(q)) = w[static_cast<std::size_t>(q)] / sum;
    }

    // hidden ground-truth correctives
    GeneratedSubject subject;
    subject.beta = IdentityCode::sample(cfg.identity_dim, rng);
    const int n_pose = DofMask{m.dof_mask}.active_count();
    CorrectiveNets nets =
        CorrectiveNets::zeros(static_cast<int>(V), J, cfg.identity_dim, n_pose);

    // skeleton deltas: N(0, sigma) per coordinate, plus the optional bone
    // length perturbation folded into the same head
    Rng skel_rng = rng.fork(101);
    for (std::size_t i = 3; i < nets.skel.b2.value.numel(); ++i)
        nets.skel.b2.value[i] = skel_rng.normal(0, cfg.gt_skel_sigma);
    if (cfg.bone_length_perturbation > 0) {
        Rng pert = rng.fork(102);
        for (int q = 1; q < J; ++q) {
            const double k = pert.uniform(-cfg.bone_length_perturbation, cfg.bone_length_perturbation);
            for (int c = 0; c < 3; ++c)
                nets.skel.b2.value[static_cast<std::size_t>(3 * q + c)] +=
                    k * m.skeleton_offsets.at(static_cast<std::size_t>(q), static_cast<std::size_t>(c));
        }
    }

    // smooth identity vertex field: a few gaussian bumps along random directions
    Rng id_rng = rng.fork(103);
    for (int b = 0; b < 6; ++b) {
        const std::size_t center = id_rng.uniform_int(V);
        const Vec3 c{m.template_vertices.at(center, 0), m.template_vertices.at(center, 1),
                     m.template_vertices.at(center, 2)};
        const Vec3 dir = normalized({id_rng.normal(), id_rng.normal(), id_rng.normal()});
        const double amp = id_rng.normal(0, cfg.gt_idvert_amplitude);
        const double width = id_rng.uniform(18, 45);
        for (std::size_t v = 0; v < V; ++v) {
            const Vec3 p{m.template_vertices.at(v, 0), m.template_vertices.at(v, 1),
                         m.template_vertices.at(v, 2)};
            const double g = amp * std::exp(-dot(p - c, p - c) / (width * width));
            nets.idvert.b2.value[3 * v + 0] += g * dir.x;
            nets.idvert.b2.value[3 * v + 1] += g * dir.y;
            nets.idvert.b2.value[3 * v + 2] += g * dir.z;
        }
    }

    // pose-dependent field: smooth spatial modes times a random projection of
    // the hidden layer, then rescaled to the requested amplitude
    Rng pose_rng = rng.fork(104);
    for (auto& vv : nets.posevert.w1.value.data()) vv = pose_rng.normal(0, 0.35);
    for (auto& vv : nets.posevert.b1.value.data()) vv = pose_rng.normal(0, 0.25);
    {
        const int modes = 4;
        std::vector<double> field(3 * V);
        for (int mo = 0; mo < modes; ++mo) {
            const std::size_t center = pose_rng.uniform_int(V);
            const Vec3 c{m.template_vertices.at(center, 0), m.template_vertices.at(center, 1),
                         m.template_vertices.at(center, 2)};
            const Vec3 dir = normalized({pose_rng.normal(), pose_rng.normal(), pose_rng.normal()});
            const double width = pose_rng.uniform(20, 50);
            for (std::size_t v = 0; v < V; ++v) {
                const Vec3 p{m.template_vertices.at(v, 0), m.template_vertices.at(v, 1),
                             m.template_vertices.at(v, 2)};
                const double g = std::exp(-dot(p - c, p - c) / (width * width));
                field[3 * v + 0] = g * dir.x;
                field[3 * v + 1] = g * dir.y;
                field[3 * v + 2] = g * dir.z;
            }
            for (std::size_t h = 0; h < Head::kHidden; ++h) {
                const double proj = pose_rng.normal(0, 1.0);
                for (std::size_t i = 0; i < 3 * V; ++i)
                    nets.posevert.w2.value[i * Head::kHidden + h] += field[i] * proj;
            }
        }
        // normalize the output magnitude over a few probe poses
        double rms = 0;
        int count = 0;
        Rng probe = rng.fork(105);
        for (int trial = 0; trial < 4; ++trial) {
            diff::Tape t;
            Tensor theta = Tensor::zeros({static_cast<std::size_t>(n_pose)});
            for (auto& x : theta.data()) x = probe.uniform(-0.8, 0.8);
            const Tensor& out = t.value(nets.posevert.forward(t, t.constant(theta)));
            for (std::size_t i = 0; i < out.numel(); ++i) {
                rms += out[i] * out[i];
                ++count;
            }
        }
        rms = std::sqrt(rms / count);
        const double gain = rms > 1e-12 ? cfg.gt_posevert_amplitude / rms : 0.0;
        for (auto& x : nets.posevert.w2.value.data()) x *= gain;
    }

    subject.model = std::move(m);
    subject.gt_nets = std::move(nets);
    return subject;
}

// ---- dataset ------------------------------------------------------------------

struct CaptureFrame {
    int frame_id = 0;
    Tensor target_joints;           // [J,3], dataset space
    std::vector<DepthMap> views;    // one per camera id
    std::vector<int> camera_ids;
    Tensor gt_mesh_vertices;        // oracle for evaluation only
    std::vector<double> gt_pose_raw;
    RigidAlignment gt_global;       // model -> dataset rigid motion
};

struct Dataset {
    SynthConfig config;
    HandModel template_model;
    std::vector<Camera> cameras;
    std::vector<CaptureFrame> train;
    std::vector<CaptureFrame> test;
};

inline std::vector<Camera> hemisphere_cameras(const SynthConfig& cfg) {
    std::vector<Camera> cams;
    const Vec3 center{-15, 85, 0};
    for (int i = 0; i < cfg.n_cameras; ++i) {
        const double az = 2.0 * kPi * i / cfg.n_cameras + 0.35;
        const double el = (i % 2 == 0) ? 0.42 : 0.95;  // alternate low/high ring
        const Vec3 eye = center + Vec3{std::cos(az) * std::cos(el), std::sin(az) * std::cos(el),
                                       std::sin(el)} *
                                      cfg.camera_distance;
        const Vec3 fwd = normalized(center - eye);
        Vec3 up_hint{0, 0, 1};
        if (std::fabs(dot(up_hint, fwd)) > 0.98) up_hint = {0, 1, 0};
        const Vec3 right = normalized(cross(up_hint, fwd));
        const Vec3 up = cross(fwd, right);
        Camera c;
        c.width = c.height = cfg.image_size;
        c.fx = c.fy = 700.0 * cfg.image_size / 256.0;
        c.cx = c.cy = cfg.image_size / 2.0;
        c.rotation.m = {right.x, right.y, right.z, up.x, up.y, up.z, fwd.x, fwd.y, fwd.z};
        c.translation = Vec3{} - c.rotation * eye;
        cams.push_back(c);
    }
    return cams;
}

// Deformed ground-truth vertices and joints for a raw pose under the hidden
// nets and a global rigid motion.
inline std::pair<Tensor, Tensor> gt_deform(const GeneratedSubject& subject,
                                           const std::vector<double>& raw,
                                           const RigidAlignment& global) {
    const HandModel& m = subject.model;
    PoseVector pose(DofMask::from_model(m), raw);
    CorrectiveNets& nets = const_cast<CorrectiveNets&>(subject.gt_nets);
    const RefinedModel refined = apply_correctives(m, nets, subject.beta, pose);
    const JointTransforms jt = forward_kinematics(pose.full_theta(), refined.offsets, m.hierarchy);
    Tensor mesh = lbs_deform(refined.vertices, refined.weights, jt, global);
    Tensor joints = Tensor::zeros({static_cast<std::size_t>(m.joint_count()), 3});
    for (int q = 0; q < m.joint_count(); ++q) {
        const Vec3 p = global.apply(jt.joint_positions[static_cast<std::size_t>(q)]);
        joints.at(static_cast<std::size_t>(q), 0) = p.x;
        joints.at(static_cast<std::size_t>(q), 1) = p.y;
        joints.at(static_cast<std::size_t>(q), 2) = p.z;
    }
    return {std::move(mesh), std::move(joints)};
}

// Anatomically-flavored random pose: fingers curl toward the palm, mild
// spread and twist, moderate wrist motion.
inline std::vector<double> sample_pose_raw(const HandModel& m, Rng& rng, double flex_scale = 1.0) {
    const DofMask mask = DofMask::from_model(m);
    const auto idx = mask.active_indices();
    std::vector<double> theta(idx.size(), 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t channel = idx[i];
        const int joint = static_cast<int>(channel / 3);
        const int axis = static_cast<int>(channel % 3);
        double v = 0;
        if (joint == 0) {
            v = rng.uniform(-0.3, 0.3);
        } else {
            const int depth_in_finger = (joint - 1) % 4;
            if (axis == 0) {
                // flexion: negative x curls toward the palm
                v = depth_in_finger == 0 ? rng.uniform(-0.9, 0.12) : rng.uniform(-1.0, 0.08);
                v *= flex_scale;
            } else if (axis == 2) {
                v = rng.uniform(-0.14, 0.14);  // spread
            } else {
                v = rng.uniform(-0.08, 0.08);  // twist
            }
        }
        theta[i] = v;
    }
    // raw preimage of the sampled angles
    std::vector<double> raw(theta.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = std::atanh(theta[i] / kPi);
    return raw;
}

inline RigidAlignment sample_global(Rng& rng, const SynthConfig& cfg) {
    RigidAlignment g;
    const Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    const double angle = rng.uniform(0, cfg.global_rotation_max);
    g.rotation = norm(axis) > 1e-9 ? axis_angle(axis, angle) : Mat3::identity();
    g.translation = {rng.uniform(-cfg.global_translation_max, cfg.global_translation_max),
                     rng.uniform(-cfg.global_translation_max, cfg.global_translation_max),
                     rng.uniform(-cfg.global_translation_max, cfg.global_translation_max)};
    return g;
}

inline Dataset generate_dataset(const GeneratedSubject& subject, const SynthConfig& cfg) {
    Dataset ds;
    ds.config = cfg;
    ds.template_model = subject.model;
    ds.cameras = hemisphere_cameras(cfg);
    Rng rng(cfg.seed);

    const auto make_frame = [&](int frame_id, std::uint64_t stream, double flex_scale) {
        Rng frame_rng = rng.fork(stream);
        for (int attempt = 0; attempt < 20; ++attempt) {
            const std::vector<double> raw = sample_pose_raw(subject.model, frame_rng, flex_scale);
            const RigidAlignment global = sample_global(frame_rng, cfg);
            auto [mesh, joints] = gt_deform(subject, raw, global);

            CaptureFrame frame;
            frame.frame_id = frame_id;
            frame.target_joints = std::move(joints);
            frame.gt_mesh_vertices = std::move(mesh);
            frame.gt_pose_raw = raw;
            frame.gt_global = global;
            const std::size_t min_fg =
                static_cast<std::size_t>(0.05 * cfg.image_size * cfg.image_size);
            int good_views = 0;
            bool joints_visible = true;
            for (int c = 0; c < cfg.n_cameras; ++c) {
                RasterResult r =
                    rasterize_depth(frame.gt_mesh_vertices, subject.model.faces, ds.cameras[static_cast<std::size_t>(c)]);
                if (r.depth.foreground_count() >= min_fg) ++good_views;
                frame.views.push_back(std::move(r.depth));
                frame.camera_ids.push_back(c);
            }
            // every target joint must project inside at least one image
            for (std::size_t q = 0; q < frame.target_joints.rows() && joints_visible; ++q) {
                bool inside_any = false;
                for (const Camera& cam : ds.cameras) {
                    const Vec3 pc = cam.to_camera({frame.target_joints.at(q, 0),
                                                   frame.target_joints.at(q, 1),
                                                   frame.target_joints.at(q, 2)});
                    if (pc.z <= 0) continue;
                    const double u = cam.fx * pc.x / pc.z + cam.cx;
                    const double v = cam.fy * pc.y / pc.z + cam.cy;
                    if (u >= 0 && u < cam.width && v >= 0 && v < cam.height) {
                        inside_any = true;
                        break;
                    }
                }
                joints_visible = inside_any;
            }
            if (good_views >= cfg.n_cameras / 2 && joints_visible) return frame;
        }
        throw TrainingError("generate_dataset: no acceptable pose after bounded retries for frame " +
                            std::to_string(frame_id));
    };

    for (int i = 0; i < cfg.n_train_poses; ++i)
        ds.train.push_back(make_frame(i, 1000 + static_cast<std::uint64_t>(i), 1.0));
    for (int i = 0; i < cfg.n_test_poses; ++i)
        ds.test.push_back(make_frame(cfg.n_train_poses + i,
                                     500000 + static_cast<std::uint64_t>(i), 0.85));
    return ds;
}

// ---- disk layout ---------------------------------------------------------------
//
// out/
//   manifest.json, cameras.json, template/{hand.obj,hand.json}
//   frames/NNNN/{joints.json, view_C.pfm, gt_mesh.obj}

namespace synth_detail {

inline std::string frame_dir_name(int id) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", id);
    return buf;
}

}  // namespace synth_detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "template");
    save_model(ds.template_model, dir / "template");
    save_cameras(dir / "cameras.json", ds.cameras);

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["seed"] = ds.config.seed;
    manifest["config"] = ds.config;
    manifest["n_train"] = ds.train.size();
    manifest["n_test"] = ds.test.size();

    const auto save_frames = [&](const std::vector<CaptureFrame>& frames, const char* split) {
        nlohmann::json ids = nlohmann::json::array();
        for (const CaptureFrame& f : frames) {
            ids.push_back(f.frame_id);
            const auto fdir = dir / "frames" / synth_detail::frame_dir_name(f.frame_id);
            std::filesystem::create_directories(fdir);
            nlohmann::json j;
            j["frame_id"] = f.frame_id;
            j["split"] = split;
            j["joints"] = tensor_to_json(f.target_joints);
            j["cameras"] = f.camera_ids;
            j["gt_pose_raw"] = f.gt_pose_raw;
            nlohmann::json rows = nlohmann::json::array();
            for (int r = 0; r < 3; ++r)
                rows.push_back(std::array<double, 3>{f.gt_global.rotation(r, 0), f.gt_global.rotation(r, 1),
                                                     f.gt_global.rotation(r, 2)});
            j["gt_global_R"] = rows;
            j["gt_global_t"] = std::array<double, 3>{f.gt_global.translation.x, f.gt_global.translation.y,
                                                     f.gt_global.translation.z};
            std::ofstream out(fdir / "joints.json");
            out << j.dump(1) << "\n";
            for (std::size_t c = 0; c < f.views.size(); ++c)
                write_pfm(fdir / ("view_" + std::to_string(f.camera_ids[c]) + ".pfm"), f.views[c]);
            save_obj(fdir / "gt_mesh.obj", f.gt_mesh_vertices, ds.template_model.faces);
        }
        return ids;
    };
    manifest["train_frames"] = save_frames(ds.train, "train");
    manifest["test_frames"] = save_frames(ds.test, "test");

    std::ofstream out(dir / "manifest.json");
    if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(1) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError("cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        in >> manifest;
        ds.config = manifest.at("config").get<SynthConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest.json: ") + e.what());
    }
    ds.template_model = load_model(dir / "template");
    ds.cameras = load_cameras(dir / "cameras.json");

    const auto load_frames = [&](const nlohmann::json& ids) {
        std::vector<CaptureFrame> frames;
        for (const auto& id : ids) {
            const auto fdir = dir / "frames" / synth_detail::frame_dir_name(id.get<int>());
            std::ifstream fin(fdir / "joints.json");
            if (!fin) throw FormatError("cannot open " + (fdir / "joints.json").string());
            nlohmann::json j;
            try {
                fin >> j;
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("joints.json: " + std::string(e.what()));
            }
            CaptureFrame f;
            f.frame_id = j.at("frame_id").get<int>();
            f.target_joints = tensor_from_json(j.at("joints"), "joints");
            f.camera_ids = j.at("cameras").get<std::vector<int>>();
            if (j.contains("gt_pose_raw")) f.gt_pose_raw = j.at("gt_pose_raw").get<std::vector<double>>();
            if (j.contains("gt_global_R")) {
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c)
                        f.gt_global.rotation(r, c) = j["gt_global_R"][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
                f.gt_global.translation = {j["gt_global_t"][0].get<double>(),
                                           j["gt_global_t"][1].get<double>(),
                                           j["gt_global_t"][2].get<double>()};
            }
            for (int c : f.camera_ids) f.views.push_back(read_pfm(fdir / ("view_" + std::to_string(c) + ".pfm")));
            if (std::filesystem::exists(fdir / "gt_mesh.obj")) {
                std::vector<std::array<int, 3>> faces;
                load_obj(fdir / "gt_mesh.obj", f.gt_mesh_vertices, faces);
            }
            frames.push_back(std::move(f));
        }
        return frames;
    };
    ds.train = load_frames(manifest.at("train_frames"));
    ds.test = load_frames(manifest.at("test_frames"));
    return ds;
}

// Fist-like raw pose: deep flexion scaled so the deepest fingertip-sphere
// intrusion into the palm is close to target_intrusion_mm. Bisection over a
// single flexion multiplier; deterministic.
inline std::vector<double> fist_pose_raw(const GeneratedSubject& subject,
                                         double target_intrusion_mm = 3.0) {
    const HandModel& m = subject.model;
    const DofMask mask = DofMask::from_model(m);
    const auto idx = mask.active_indices();

    const auto pose_at = [&](double s) {
        std::vector<double> theta(idx.size(), 0.0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const std::size_t channel = idx[i];
            const int joint = static_cast<int>(channel / 3);
            const int axis = static_cast<int>(channel % 3);
            if (joint == 0 || axis != 0) continue;
            const int finger = (joint - 1) / 4;
            const int depth_in_finger = (joint - 1) % 4;
            double flex = depth_in_finger == 0 ? -1.15 : (depth_in_finger == 1 ? -1.5 : -0.8);
            if (finger == 0) flex *= 0.45;  // thumb folds less
            theta[i] = s * flex;
        }
        std::vector<double> raw(theta.size());
        for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = std::atanh(theta[i] / kPi);
        return raw;
    };

    // signed clearance: min over fingertip-chain spheres of
    // (nearest palm-vertex distance - radius); negative means intrusion
    const auto clearance_at = [&](double s) {
        const std::vector<double> raw = pose_at(s);
        PoseVector pose(mask, raw);
        CorrectiveNets& nets = const_cast<CorrectiveNets&>(subject.gt_nets);
        diff::Tape t;
        diff::Value theta = t.constant(Tensor::from({raw.size()}, pose.theta()));
        RefinedModelNodes refined = apply_correctives(t, m, nets, subject.beta, theta);
        diff::Value full = t.scatter_add(theta, mask.active_indices(),
                                         {static_cast<std::size_t>(3 * m.joint_count())});
        FkNodes fk = forward_kinematics(t, full, refined.offsets, m.hierarchy);
        diff::Value mesh = lbs_deform(t, refined.vertices, refined.weights, fk, RigidAlignment::identity());
        SphereChains chains = build_sphere_chains(t, refined, m.hierarchy);
        pose_sphere_chains(t, chains, fk);
        const Tensor& mv = t.value(mesh);
        const auto palm = palm_vertex_set(t.value(refined.weights), m.hierarchy.palm_joint);
        double best = 1e300;
        for (int tip : m.hierarchy.fingertips) {
            const int ci = chains.chain_for_child(tip);
            const Tensor& centers = t.value(chains.chains[static_cast<std::size_t>(ci)].centers_posed);
            const Tensor& radii = t.value(chains.chains[static_cast<std::size_t>(ci)].radii);
            for (std::size_t k = 0; k < radii.numel(); ++k) {
                double dmin = 1e300;
                for (std::size_t v : palm) {
                    const double dx = mv.at(v, 0) - centers.at(k, 0);
                    const double dy = mv.at(v, 1) - centers.at(k, 1);
                    const double dz = mv.at(v, 2) - centers.at(k, 2);
                    dmin = std::min(dmin, std::sqrt(dx * dx + dy * dy + dz * dz));
                }
                best = std::min(best, dmin - radii[k]);
            }
        }
        return best;
    };

    // clearance is not monotone over the whole sweep (the fingertip arc passes
    // through the palm), so scan for the first crossing and bisect inside it
    double lo = 0.5, hi = 1.7;
    bool found = false;
    for (double s = lo + 0.05; s <= hi + 1e-9; s += 0.05) {
        if (clearance_at(s) <= -target_intrusion_mm) {
            lo = s - 0.05;
            hi = s;
            found = true;
            break;
        }
    }
    if (!found) return pose_at(hi);
    for (int it = 0; it < 20; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (clearance_at(mid) > -target_intrusion_mm)
            lo = mid;
        else
            hi = mid;
    }
    return pose_at(hi);
}

}  // namespace handfit
