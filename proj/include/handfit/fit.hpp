#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "handfit/adam.hpp"
#include "handfit/collision.hpp"
#include "handfit/correctives.hpp"
#include "handfit/kinematics.hpp"
#include "handfit/losses.hpp"
#include "handfit/model.hpp"
#include "handfit/render.hpp"
#include "handfit/rng.hpp"
#include "handfit/skinning.hpp"
#include "handfit/synth.hpp"

namespace handfit {

struct FitConfig {
    double lr = 1e-4;
    int epochs = 35;
    std::vector<int> lr_drop_epochs{30, 32};
    double lr_drop_factor = 10.0;
    int batch_size = 32;
    int c_out = 6;
    LossWeights weights;
    bool use_pose = true;
    bool use_depth = true;
    bool use_penet = true;
    bool use_laplacian = true;
    bool enable_skel = true;
    bool enable_idvert = true;
    bool enable_posevert = true;
    bool enable_skinw = false;
    int identity_dim = 32;
    std::uint64_t seed = 1;
    double init_sigma = 0.01;
    // test-time pose refit (nets frozen)
    int eval_iterations = 300;
    double eval_lr = 0.0;  // 0 = use lr
    int threads = 1;

    // Reduced workload for a single subject on one CPU; the full-scale
    // schedule above stays the documented default.
    static FitConfig desk_scale() {
        FitConfig c;
        c.lr = 1e-2;
        c.epochs = 60;
        c.lr_drop_epochs = {48, 54};
        c.batch_size = 8;
        c.eval_iterations = 300;
        c.eval_lr = 2e-2;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const FitConfig& c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"epochs", c.epochs},
                       {"lr_drop_epochs", c.lr_drop_epochs},
                       {"lr_drop_factor", c.lr_drop_factor},
                       {"batch_size", c.batch_size},
                       {"c_out", c.c_out},
                       {"lambda_nr", c.weights.lambda_nr},
                       {"lambda_lap", c.weights.lambda_lap},
                       {"laplacian_squared", c.weights.laplacian_squared},
                       {"use_pose", c.use_pose},
                       {"use_depth", c.use_depth},
                       {"use_penet", c.use_penet},
                       {"use_laplacian", c.use_laplacian},
                       {"enable_skel", c.enable_skel},
                       {"enable_idvert", c.enable_idvert},
                       {"enable_posevert", c.enable_posevert},
                       {"enable_skinw", c.enable_skinw},
                       {"identity_dim", c.identity_dim},
                       {"seed", c.seed},
                       {"init_sigma", c.init_sigma},
                       {"eval_iterations", c.eval_iterations},
                       {"eval_lr", c.eval_lr},
                       {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, FitConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.lr_drop_epochs = j.value("lr_drop_epochs", c.lr_drop_epochs);
    c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.c_out = j.value("c_out", c.c_out);
    c.weights.lambda_nr = j.value("lambda_nr", c.weights.lambda_nr);
    c.weights.lambda_lap = j.value("lambda_lap", c.weights.lambda_lap);
    c.weights.laplacian_squared = j.value("laplacian_squared", c.weights.laplacian_squared);
    c.use_pose = j.value("use_pose", c.use_pose);
    c.use_depth = j.value("use_depth", c.use_depth);
    c.use_penet = j.value("use_penet", c.use_penet);
    c.use_laplacian = j.value("use_laplacian", c.use_laplacian);
    c.enable_skel = j.value("enable_skel", c.enable_skel);
    c.enable_idvert = j.value("enable_idvert", c.enable_idvert);
    c.enable_posevert = j.value("enable_posevert", c.enable_posevert);
    c.enable_skinw = j.value("enable_skinw", c.enable_skinw);
    c.identity_dim = j.value("identity_dim", c.identity_dim);
    c.seed = j.value("seed", c.seed);
    c.init_sigma = j.value("init_sigma", c.init_sigma);
    c.eval_iterations = j.value("eval_iterations", c.eval_iterations);
    c.eval_lr = j.value("eval_lr", c.eval_lr);
    c.threads = j.value("threads", c.threads);
}

// ---- per-frame forward pass -------------------------------------------------------

// Everything the training loop needs from one frame's forward pass.
struct FrameGraph {
    TotalLoss loss;
    diff::Value aligned_joints;  // [J,3] in dataset space
    diff::Value mesh;            // [V,3]; only valid when built
    bool has_mesh = false;
    RigidAlignment align;
    // individual terms (constant zero when disabled)
    diff::Value pose_term, depth_term, rigid_term, nonrigid_term, lap_term;
};

// Shared immutable context for frame evaluations.
struct FitContext {
    const HandModel* model = nullptr;
    std::shared_ptr<const std::vector<std::array<int, 3>>> faces;
    std::shared_ptr<const std::vector<std::vector<int>>> adjacency;
    const std::vector<Camera>* cameras = nullptr;
    DofMask mask;

    FitContext(const HandModel& m, const std::vector<Camera>& cams)
        : model(&m),
          faces(std::make_shared<const std::vector<std::array<int, 3>>>(m.faces)),
          adjacency(std::make_shared<const std::vector<std::vector<int>>>(
              vertex_adjacency(m.vertex_count(), m.faces))),
          cameras(&cams),
          mask(DofMask::from_model(m)) {}
};

// Paths that are intentionally constant for a gradient pass. The rigid
// alignment is re-estimated every forward pass but differentiated as a
// constant, and the pose-vertex head sees its input through stop-gradient.
// Finite-difference audits pin both at the base point so the FD probes the
// same function the backward pass differentiates.
struct FrozenPaths {
    RigidAlignment align;
    Tensor posevert_input;
};

// Build the full decoder graph for one frame: correctives -> FK -> rigid
// alignment -> LBS -> views, then the weighted loss. Terms disabled in the
// config are constant zero but the alignment is always computed from the
// joint targets.
inline FrameGraph frame_graph(diff::Tape& t, const FitContext& ctx, CorrectiveNets& nets,
                              const IdentityCode& beta, diff::Param& u, const CaptureFrame& frame,
                              const std::vector<int>& view_ids, const FitConfig& cfg,
                              const FrozenPaths* frozen = nullptr) {
    using diff::Value;
    const HandModel& model = *ctx.model;
    const int J = model.joint_count();

    Value theta = t.scale(t.tanh(t.param(u)), kPi);
    RefinedModelNodes refined =
        apply_correctives(t, model, nets, beta, theta, frozen ? &frozen->posevert_input : nullptr);
    Value full = t.scatter_add(theta, ctx.mask.active_indices(), {static_cast<std::size_t>(3 * J)});
    FkNodes fk = forward_kinematics(t, full, refined.offsets, model.hierarchy);

    // rigid alignment into dataset space from the wrist + finger roots,
    // treated as constant for the gradient pass
    FrameGraph out;
    if (frozen) {
        out.align = frozen->align;
    } else {
        const Tensor& pos = t.value(fk.joint_positions);
        std::vector<Vec3> src, dst;
        for (int q : model.hierarchy.alignment_joints()) {
            const std::size_t qs = static_cast<std::size_t>(q);
            src.push_back({pos.at(qs, 0), pos.at(qs, 1), pos.at(qs, 2)});
            dst.push_back({frame.target_joints.at(qs, 0), frame.target_joints.at(qs, 1),
                           frame.target_joints.at(qs, 2)});
        }
        out.align = rigid_align(src, dst);
    }
    const Mat3& R = out.align.rotation;
    Tensor rt = Tensor::from({3, 3}, {R(0, 0), R(1, 0), R(2, 0),
                                      R(0, 1), R(1, 1), R(2, 1),
                                      R(0, 2), R(1, 2), R(2, 2)});
    Tensor tv = Tensor::from({3}, {out.align.translation.x, out.align.translation.y,
                                   out.align.translation.z});
    out.aligned_joints = t.add_rowvec(t.matmul(fk.joint_positions, t.constant(rt)), t.constant(tv));

    Value zero = t.constant_scalar(0.0);
    Value pose_term = cfg.use_pose ? pose_loss(t, out.aligned_joints, frame.target_joints) : zero;

    const bool need_mesh = cfg.use_depth || cfg.use_penet || cfg.use_laplacian;
    Value depth_term = zero, rigid_term = zero, nonrigid_term = zero, lap_term = zero;
    std::vector<std::unique_ptr<DepthMap>> rendered_maps;
    if (need_mesh) {
        // skin once in model space, then carry into dataset space with the
        // constant alignment
        Value model_mesh =
            lbs_deform(t, refined.vertices, refined.weights, fk, RigidAlignment::identity());
        out.mesh = t.add_rowvec(t.matmul(model_mesh, t.constant(rt)), t.constant(tv));
        out.has_mesh = true;

        if (cfg.use_depth) {
            std::vector<DepthViewNodes> views;
            rendered_maps.reserve(view_ids.size());
            for (int vid : view_ids) {
                const std::size_t vs = static_cast<std::size_t>(vid);
                rendered_maps.push_back(std::make_unique<DepthMap>());
                Value img = render_depth(t, out.mesh, ctx.faces, (*ctx.cameras)[vs],
                                         rendered_maps.back().get());
                views.push_back({img, rendered_maps.back().get(), &frame.views[vs]});
            }
            depth_term = depth_loss(t, views);
        }
        if (cfg.use_penet) {
            SphereChains chains = build_sphere_chains(t, refined, model.hierarchy);
            pose_sphere_chains(t, chains, fk);
            rigid_term = rigid_penetration(t, chains);
            const auto palm = palm_vertex_set(t.value(refined.weights), model.hierarchy.palm_joint);
            // chains are posed in model space, so measure against the
            // model-space mesh
            nonrigid_term = nonrigid_penetration(t, chains, model.hierarchy, palm, model_mesh);
        }
        if (cfg.use_laplacian) lap_term = laplacian_loss(t, laplacian(t, out.mesh, ctx.adjacency),
                                                         cfg.weights.laplacian_squared);
    }

    out.pose_term = pose_term;
    out.depth_term = depth_term;
    out.rigid_term = rigid_term;
    out.nonrigid_term = nonrigid_term;
    out.lap_term = lap_term;
    out.loss = total_loss(t, pose_term, depth_term, rigid_term, nonrigid_term, lap_term, cfg.weights);
    return out;
}

// ---- metrics -------------------------------------------------------------------

// Mean euclidean joint error in millimeters.
inline double p_err(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target))
        throw ShapeError("p_err: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    double sum = 0;
    for (std::size_t j = 0; j < pred.rows(); ++j) {
        const double dx = pred.at(j, 0) - target.at(j, 0);
        const double dy = pred.at(j, 1) - target.at(j, 1);
        const double dz = pred.at(j, 2) - target.at(j, 2);
        sum += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return sum / static_cast<double>(pred.rows());
}

namespace fit_detail {

// Exact point-to-triangle distance, region-based (interior, three edges,
// three corners).
inline double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 e0 = b - a, e1 = c - a, d = a - p;
    const double a00 = dot(e0, e0), a01 = dot(e0, e1), a11 = dot(e1, e1);
    const double b0 = dot(e0, d), b1 = dot(e1, d);
    const double det = std::max(a00 * a11 - a01 * a01, 0.0);
    double s = a01 * b1 - a11 * b0;
    double t = a01 * b0 - a00 * b1;

    if (s + t <= det) {
        if (s < 0) {
            if (t < 0) {  // corner region at a
                if (b0 < 0) {
                    t = 0;
                    s = a00 > 0 ? std::clamp(-b0 / a00, 0.0, 1.0) : 0;
                } else {
                    s = 0;
                    t = a11 > 0 ? std::clamp(-b1 / a11, 0.0, 1.0) : 0;
                }
            } else {  // edge a-c
                s = 0;
                t = a11 > 0 ? std::clamp(-b1 / a11, 0.0, 1.0) : 0;
            }
        } else if (t < 0) {  // edge a-b
            t = 0;
            s = a00 > 0 ? std::clamp(-b0 / a00, 0.0, 1.0) : 0;
        } else {  // interior
            const double inv = det > 0 ? 1.0 / det : 0.0;
            s *= inv;
            t *= inv;
        }
    } else {
        if (s < 0) {  // corner at c
            const double tmp0 = a01 + b0, tmp1 = a11 + b1;
            if (tmp1 > tmp0) {
                const double numer = tmp1 - tmp0, denom = a00 - 2 * a01 + a11;
                s = denom > 0 ? std::clamp(numer / denom, 0.0, 1.0) : 0;
                t = 1 - s;
            } else {
                s = 0;
                t = a11 > 0 ? std::clamp(-b1 / a11, 0.0, 1.0) : 0;
            }
        } else if (t < 0) {  // corner at b
            const double tmp0 = a01 + b1, tmp1 = a00 + b0;
            if (tmp1 > tmp0) {
                const double numer = tmp1 - tmp0, denom = a00 - 2 * a01 + a11;
                t = denom > 0 ? std::clamp(numer / denom, 0.0, 1.0) : 0;
                s = 1 - t;
            } else {
                t = 0;
                s = a00 > 0 ? std::clamp(-b0 / a00, 0.0, 1.0) : 0;
            }
        } else {  // edge b-c
            const double numer = a11 + b1 - a01 - b0, denom = a00 - 2 * a01 + a11;
            s = denom > 0 ? std::clamp(numer / denom, 0.0, 1.0) : 0;
            t = 1 - s;
        }
    }
    const Vec3 closest = a + e0 * s + e1 * t;
    return norm(closest - p);
}

}  // namespace fit_detail

// Mean distance from predicted vertices to the reference surface, exact over
// all triangles.
inline double m_err(const Tensor& pred_vertices, const Tensor& ref_vertices,
                    const std::vector<std::array<int, 3>>& ref_faces) {
    if (ref_faces.empty()) throw ContractError("m_err: reference mesh has no triangles");
    double sum = 0;
    for (std::size_t v = 0; v < pred_vertices.rows(); ++v) {
        const Vec3 p{pred_vertices.at(v, 0), pred_vertices.at(v, 1), pred_vertices.at(v, 2)};
        double best = std::numeric_limits<double>::infinity();
        for (const auto& f : ref_faces) {
            const auto corner = [&](int k) {
                const std::size_t i = static_cast<std::size_t>(f[static_cast<std::size_t>(k)]);
                return Vec3{ref_vertices.at(i, 0), ref_vertices.at(i, 1), ref_vertices.at(i, 2)};
            };
            best = std::min(best, fit_detail::point_triangle_distance(p, corner(0), corner(1), corner(2)));
        }
        sum += best;
    }
    return sum / static_cast<double>(pred_vertices.rows());
}

// ---- training state and loop -------------------------------------------------------

struct FitState {
    FitConfig config;
    CorrectiveNets nets;
    IdentityCode beta;
    std::deque<diff::Param> frame_poses;  // deque: stable addresses for Adam slots
    diff::AdamState adam;
    int epoch = 0;
    std::int64_t iteration = 0;
};

inline double lr_at_epoch(const FitConfig& cfg, int epoch) {
    double lr = cfg.lr;
    for (int drop : cfg.lr_drop_epochs)
        if (epoch >= drop) lr /= cfg.lr_drop_factor;
    return lr;
}

inline FitState init_fit_state(const Dataset& ds, const HandModel& model, const FitConfig& cfg) {
    FitState st;
    st.config = cfg;
    Rng rng(cfg.seed);
    Rng init_rng = rng.fork(1);
    Rng beta_rng = rng.fork(2);
    st.beta = IdentityCode::sample(cfg.identity_dim, beta_rng);
    st.nets = CorrectiveNets::gaussian_init(model.vertex_count(), model.joint_count(),
                                            cfg.identity_dim, DofMask::from_model(model).active_count(),
                                            cfg.init_sigma, init_rng, cfg.enable_skinw);
    st.nets.enable_skel = cfg.enable_skel;
    st.nets.enable_idvert = cfg.enable_idvert;
    st.nets.enable_posevert = cfg.enable_posevert;
    const int n_pose = DofMask::from_model(model).active_count();
    for (std::size_t f = 0; f < ds.train.size(); ++f)
        st.frame_poses.emplace_back(Tensor::zeros({static_cast<std::size_t>(n_pose)}));
    st.adam = diff::AdamState({cfg.lr, 0.9, 0.999, 1e-8});
    return st;
}

// One pass over the training frames per epoch, mini-batches of frames, Adam on
// the batch's pose variables plus the shared nets. Deterministic for a fixed
// seed: per-epoch shuffles and per-frame view draws are keyed by (seed, epoch,
// iteration, frame).
inline void fit_epochs(FitState& st, const Dataset& ds, const HandModel& model, int until_epoch,
                       std::ostream* loss_csv = nullptr) {
    const FitConfig& cfg = st.config;
    FitContext ctx(model, ds.cameras);
    Rng rng(cfg.seed);

    for (; st.epoch < until_epoch; ++st.epoch) {
        st.adam.cfg.lr = lr_at_epoch(cfg, st.epoch);
        std::vector<int> order(ds.train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = rng.fork(mix_tags(3, static_cast<std::uint64_t>(st.epoch)));
        shuffle_rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            LossBreakdown mean{};
            std::vector<diff::Param*> params = st.nets.params();
            for (std::size_t bi = start; bi < end; ++bi) {
                const int f = order[bi];
                const CaptureFrame& frame = ds.train[static_cast<std::size_t>(f)];
                Rng view_rng = rng.fork(mix_tags(4, static_cast<std::uint64_t>(st.iteration),
                                                 static_cast<std::uint64_t>(f)));
                std::vector<int> view_ids =
                    view_rng.sample_without_replacement(static_cast<int>(ds.cameras.size()),
                                                        std::min(cfg.c_out, static_cast<int>(ds.cameras.size())));
                diff::Tape tape;
                FrameGraph g;
                try {
                    g = frame_graph(tape, ctx, st.nets, st.beta, st.frame_poses[static_cast<std::size_t>(f)],
                                    frame, view_ids, cfg);
                } catch (const TrainingError& e) {
                    throw TrainingError("fit: frame " + std::to_string(frame.frame_id) + " at epoch " +
                                        std::to_string(st.epoch) + ": " + e.what());
                }
                tape.backward(g.loss.total);
                params.push_back(&st.frame_poses[static_cast<std::size_t>(f)]);

                mean.pose += g.loss.breakdown.pose;
                mean.depth += g.loss.breakdown.depth;
                mean.penet_rigid += g.loss.breakdown.penet_rigid;
                mean.penet_nonrigid += g.loss.breakdown.penet_nonrigid;
                mean.laplacian += g.loss.breakdown.laplacian;
                mean.total += g.loss.breakdown.total;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            st.adam.step(std::span<diff::Param* const>(params.data(), params.size()));
            for (diff::Param* p : params) p->zero_grad();
            ++st.iteration;
            if (loss_csv)
                (*loss_csv) << st.iteration << "," << mean.pose * inv << "," << mean.depth * inv << ","
                            << mean.penet_rigid * inv << "," << mean.penet_nonrigid * inv << ","
                            << mean.laplacian * inv << "," << mean.total * inv << "\n";
        }
    }
}

// ---- checkpoints -------------------------------------------------------------------
//
// Single versioned file: magic, JSON manifest (config, counters, array table),
// then raw little-endian doubles.

namespace fit_detail {

constexpr char kCkptMagic[8] = {'H', 'F', 'C', 'K', 'P', 'T', '1', '\n'};

struct ArrayRef {
    std::string name;
    const Tensor* tensor;
};

inline std::vector<ArrayRef> checkpoint_arrays(FitState& st) {
    std::vector<ArrayRef> arrays;
    arrays.push_back({"beta", &st.beta.beta});
    for (auto& [name, p] : st.nets.named_params()) {
        arrays.push_back({name, &p->value});
        auto& slot = st.adam.slot(*p);
        arrays.push_back({"adam." + name + ".m", &slot.m});
        arrays.push_back({"adam." + name + ".v", &slot.v});
    }
    for (std::size_t f = 0; f < st.frame_poses.size(); ++f) {
        const std::string base = "u." + std::to_string(f);
        arrays.push_back({base, &st.frame_poses[f].value});
        auto& slot = st.adam.slot(st.frame_poses[f]);
        arrays.push_back({"adam." + base + ".m", &slot.m});
        arrays.push_back({"adam." + base + ".v", &slot.v});
    }
    return arrays;
}

}  // namespace fit_detail

inline void save_checkpoint(FitState& st, const std::filesystem::path& path) {
    const auto arrays = fit_detail::checkpoint_arrays(st);

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["fit_config"] = st.config;
    manifest["epoch"] = st.epoch;
    manifest["iteration"] = st.iteration;
    manifest["n_frames"] = st.frame_poses.size();
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& a : arrays) {
        table.push_back({{"name", a.name}, {"shape", a.tensor->shape()}, {"offset", offset}});
        offset += a.tensor->numel();
    }
    manifest["arrays"] = table;
    nlohmann::json steps;
    for (auto& [name, p] : st.nets.named_params()) steps[name] = st.adam.slot(*p).step;
    for (std::size_t f = 0; f < st.frame_poses.size(); ++f)
        steps["u." + std::to_string(f)] = st.adam.slot(st.frame_poses[f]).step;
    manifest["adam_steps"] = steps;

    const std::string mtext = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(fit_detail::kCkptMagic, 8);
    const std::uint64_t mlen = mtext.size();
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& a : arrays)
        out.write(reinterpret_cast<const char*>(a.tensor->data().data()),
                  static_cast<std::streamsize>(a.tensor->numel() * sizeof(double)));
}

inline FitState load_checkpoint(const std::filesystem::path& path, const HandModel& model) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, fit_detail::kCkptMagic, 8) != 0)
        throw FormatError(path.filename().string() + ": not a checkpoint file");
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw FormatError(path.filename().string() + ": truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.filename().string() + ": " + e.what());
    }

    FitState st;
    st.config = manifest.at("fit_config").get<FitConfig>();
    st.epoch = manifest.at("epoch").get<int>();
    st.iteration = manifest.at("iteration").get<std::int64_t>();
    const std::size_t n_frames = manifest.at("n_frames").get<std::size_t>();
    const int n_pose = DofMask::from_model(model).active_count();
    st.beta = IdentityCode{Tensor::zeros({static_cast<std::size_t>(st.config.identity_dim)})};
    st.nets = CorrectiveNets::zeros(model.vertex_count(), model.joint_count(), st.config.identity_dim,
                                    n_pose, st.config.enable_skinw);
    st.nets.enable_skel = st.config.enable_skel;
    st.nets.enable_idvert = st.config.enable_idvert;
    st.nets.enable_posevert = st.config.enable_posevert;
    for (std::size_t f = 0; f < n_frames; ++f)
        st.frame_poses.emplace_back(Tensor::zeros({static_cast<std::size_t>(n_pose)}));
    st.adam = diff::AdamState({st.config.lr, 0.9, 0.999, 1e-8});

    const auto arrays = fit_detail::checkpoint_arrays(st);
    const auto& table = manifest.at("arrays");
    if (table.size() != arrays.size())
        throw FormatError(path.filename().string() + ": array table mismatch (" +
                          std::to_string(table.size()) + " vs " + std::to_string(arrays.size()) + ")");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        if (table[i].at("name").get<std::string>() != arrays[i].name)
            throw FormatError(path.filename().string() + ": unexpected array '" +
                              table[i].at("name").get<std::string>() + "'");
        Tensor* dst = const_cast<Tensor*>(arrays[i].tensor);
        in.read(reinterpret_cast<char*>(dst->data().data()),
                static_cast<std::streamsize>(dst->numel() * sizeof(double)));
        if (!in) throw FormatError(path.filename().string() + ": truncated array data");
    }
    for (auto& [name, p] : st.nets.named_params())
        st.adam.slot(*p).step = manifest.at("adam_steps").at(name).get<std::int64_t>();
    for (std::size_t f = 0; f < n_frames; ++f)
        st.adam.slot(st.frame_poses[f]).step =
            manifest.at("adam_steps").at("u." + std::to_string(f)).get<std::int64_t>();
    return st;
}

// Full training run; writes loss.csv and checkpoint.bin when out_dir is given.
inline FitState fit(const Dataset& ds, const HandModel& model, const FitConfig& cfg,
                    const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    if (ds.train.empty()) throw ContractError("fit: empty training set");
    const auto violations = validate(model);
    if (!violations.empty()) throw ValidationError("fit: " + violations.front());

    FitState st = init_fit_state(ds, model, cfg);
    std::ofstream csv;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        csv.open(*out_dir / "loss.csv");
        csv << "iter,pose,depth,penet_r,penet_nr,lap,total\n";
    }
    try {
        fit_epochs(st, ds, model, cfg.epochs, out_dir ? &csv : nullptr);
    } catch (const TrainingError&) {
        if (out_dir) save_checkpoint(st, *out_dir / "checkpoint_failed.bin");
        throw;
    }
    if (out_dir) save_checkpoint(st, *out_dir / "checkpoint.bin");
    return st;
}

// ---- evaluation ---------------------------------------------------------------------

struct FrameMetrics {
    int frame_id = 0;
    double p_err = 0;
    double m_err = 0;
    LossBreakdown loss;
};

struct EvalReport {
    std::vector<FrameMetrics> frames;
    double mean_p_err = 0, p50_p_err = 0, p90_p_err = 0;
    double mean_m_err = 0, p50_m_err = 0, p90_m_err = 0;
};

namespace fit_detail {

inline double percentile(std::vector<double> xs, double q) {
    if (xs.empty()) return 0;
    std::sort(xs.begin(), xs.end());
    const double pos = q * (static_cast<double>(xs.size()) - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return xs[lo] * (1 - frac) + xs[hi] * frac;
}

}  // namespace fit_detail

// Metrics for one frame given a raw pose (no optimization).
inline FrameMetrics frame_metrics(const FitContext& ctx, CorrectiveNets& nets,
                                  const IdentityCode& beta, const Tensor& u_raw,
                                  const CaptureFrame& frame, const FitConfig& cfg) {
    diff::Tape tape;
    diff::Param u(u_raw);
    u.requires_grad = false;
    std::vector<int> all_views(ctx.cameras->size());
    std::iota(all_views.begin(), all_views.end(), 0);
    if (static_cast<int>(all_views.size()) > cfg.c_out) all_views.resize(static_cast<std::size_t>(cfg.c_out));
    FitConfig fcfg = cfg;
    fcfg.use_depth = cfg.use_depth && !frame.views.empty();
    FrameGraph g = frame_graph(tape, ctx, nets, beta, u, frame, all_views, fcfg);
    FrameMetrics out;
    out.frame_id = frame.frame_id;
    out.loss = g.loss.breakdown;
    out.p_err = p_err(tape.value(g.aligned_joints), frame.target_joints);
    if (frame.gt_mesh_vertices.numel() > 0 && g.has_mesh)
        out.m_err = m_err(tape.value(g.mesh), frame.gt_mesh_vertices, ctx.model->faces);
    return out;
}

// Refit only the per-frame pose with the nets frozen, then measure against the
// ground truth. This is the unseen-pose protocol: the decoder generalizes, the
// pose variable is per-frame.
inline FrameMetrics evaluate_frame(const FitContext& ctx, CorrectiveNets& nets,
                                   const IdentityCode& beta, const CaptureFrame& frame,
                                   const FitConfig& cfg) {
    const int n_pose = ctx.mask.active_count();
    diff::Param u(Tensor::zeros({static_cast<std::size_t>(n_pose)}));
    diff::AdamState adam({cfg.eval_lr > 0 ? cfg.eval_lr : cfg.lr, 0.9, 0.999, 1e-8});
    Rng rng(cfg.seed);

    const int drop1 = cfg.eval_iterations * 7 / 10;
    const int drop2 = cfg.eval_iterations * 17 / 20;
    for (int it = 0; it < cfg.eval_iterations; ++it) {
        adam.cfg.lr = (cfg.eval_lr > 0 ? cfg.eval_lr : cfg.lr) /
                      ((it >= drop1 ? 10.0 : 1.0) * (it >= drop2 ? 10.0 : 1.0));
        Rng view_rng = rng.fork(mix_tags(7, static_cast<std::uint64_t>(frame.frame_id),
                                         static_cast<std::uint64_t>(it)));
        std::vector<int> view_ids = view_rng.sample_without_replacement(
            static_cast<int>(ctx.cameras->size()),
            std::min(cfg.c_out, static_cast<int>(ctx.cameras->size())));
        diff::Tape tape;
        FrameGraph g = frame_graph(tape, ctx, nets, beta, u, frame, view_ids, cfg);
        tape.backward(g.loss.total);
        diff::Param* pu = &u;
        adam.step(std::span<diff::Param* const>(&pu, 1));
        u.zero_grad();
    }
    return frame_metrics(ctx, nets, beta, u.value, frame, cfg);
}

// Evaluate every test frame (parallel across frames; nets are read-only).
inline EvalReport evaluate(const Dataset& ds, const HandModel& model, CorrectiveNets& nets,
                           const IdentityCode& beta, const FitConfig& cfg,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    FitContext ctx(model, ds.cameras);
    nets.set_requires_grad(false);
    EvalReport report;
    report.frames.resize(ds.test.size());

    const int n_threads = std::max(1, std::min<int>(cfg.threads, static_cast<int>(ds.test.size())));
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= ds.test.size()) return;
            report.frames[i] = evaluate_frame(ctx, nets, beta, ds.test[i], cfg);
        }
    };
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    nets.set_requires_grad(true);

    std::vector<double> ps, ms;
    for (const FrameMetrics& f : report.frames) {
        ps.push_back(f.p_err);
        ms.push_back(f.m_err);
    }
    const auto mean = [](const std::vector<double>& xs) {
        double s = 0;
        for (double x : xs) s += x;
        return xs.empty() ? 0 : s / static_cast<double>(xs.size());
    };
    report.mean_p_err = mean(ps);
    report.mean_m_err = mean(ms);
    report.p50_p_err = fit_detail::percentile(ps, 0.5);
    report.p90_p_err = fit_detail::percentile(ps, 0.9);
    report.p50_m_err = fit_detail::percentile(ms, 0.5);
    report.p90_m_err = fit_detail::percentile(ms, 0.9);

    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        nlohmann::json j;
        j["mean_p_err"] = report.mean_p_err;
        j["p50_p_err"] = report.p50_p_err;
        j["p90_p_err"] = report.p90_p_err;
        j["mean_m_err"] = report.mean_m_err;
        j["p50_m_err"] = report.p50_m_err;
        j["p90_m_err"] = report.p90_m_err;
        nlohmann::json rows = nlohmann::json::array();
        for (const FrameMetrics& f : report.frames)
            rows.push_back({{"frame_id", f.frame_id}, {"p_err", f.p_err}, {"m_err", f.m_err}});
        j["frames"] = rows;
        std::ofstream out(*out_dir / "metrics.json");
        out << j.dump(1) << "\n";
        std::ofstream csv(*out_dir / "metrics.csv");
        csv << "frame_id,p_err,m_err\n";
        for (const FrameMetrics& f : report.frames)
            csv << f.frame_id << "," << f.p_err << "," << f.m_err << "\n";
    }
    return report;
}

// Posed mesh for a trained state and an arbitrary pose; model space.
inline DeformedMesh deform_mesh(const HandModel& model, CorrectiveNets& nets,
                                const IdentityCode& beta, const PoseVector& pose,
                                const RigidAlignment& align = RigidAlignment::identity()) {
    CorrectiveNets& n = nets;
    const RefinedModel refined = apply_correctives(model, n, beta, pose);
    const JointTransforms jt = forward_kinematics(pose.full_theta(), refined.offsets, model.hierarchy);
    DeformedMesh out;
    out.vertices = lbs_deform(refined.vertices, refined.weights, jt, align);
    out.faces = model.faces;
    return out;
}

// Penetration terms of the current fit on one frame, value-level.
inline std::pair<double, double> penetration_report(const FitContext& ctx, CorrectiveNets& nets,
                                                    const IdentityCode& beta, const Tensor& u_raw,
                                                    const CaptureFrame& frame) {
    diff::Tape tape;
    diff::Param u(u_raw);
    u.requires_grad = false;
    FitConfig cfg;
    cfg.use_pose = true;
    cfg.use_depth = false;
    cfg.use_penet = true;
    cfg.use_laplacian = false;
    FrameGraph g = frame_graph(tape, ctx, nets, beta, u, frame, {}, cfg);
    return {g.loss.breakdown.penet_rigid, g.loss.breakdown.penet_nonrigid};
}

}  // namespace handfit
