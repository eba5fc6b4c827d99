#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "handfit/kinematics.hpp"
#include "handfit/model.hpp"
#include "handfit/rng.hpp"
#include "handfit/tape.hpp"

namespace handfit {

// Fixed per-subject code: drawn once from a standard normal, never updated.
struct IdentityCode {
    Tensor beta;

    static IdentityCode sample(int n, Rng& rng) {
        Tensor b = Tensor::zeros({static_cast<std::size_t>(n)});
        for (auto& v : b.data()) v = rng.normal();
        return IdentityCode{std::move(b)};
    }
};

// One two-layer head: out = w2 * relu(w1 * x + b1) + b2, hidden width 256.
struct Head {
    diff::Param w1, b1, w2, b2;

    static constexpr std::size_t kHidden = 256;

    static Head zeros(std::size_t in, std::size_t out) {
        Head h;
        h.w1 = diff::Param(Tensor::zeros({kHidden, in}));
        h.b1 = diff::Param(Tensor::zeros({kHidden}));
        h.w2 = diff::Param(Tensor::zeros({out, kHidden}));
        h.b2 = diff::Param(Tensor::zeros({out}));
        return h;
    }

    static Head gaussian(std::size_t in, std::size_t out, double sigma, Rng& rng) {
        Head h = zeros(in, out);
        for (auto& v : h.w1.value.data()) v = rng.normal(0, sigma);
        for (auto& v : h.w2.value.data()) v = rng.normal(0, sigma);
        return h;
    }

    diff::Value forward(diff::Tape& t, diff::Value x) {
        diff::Value hidden = t.relu(t.add(t.matmul(t.param(w1), x), t.param(b1)));
        return t.add(t.matmul(t.param(w2), hidden), t.param(b2));
    }

    void set_requires_grad(bool on) {
        w1.requires_grad = on;
        b1.requires_grad = on;
        w2.requires_grad = on;
        b2.requires_grad = on;
    }
};

// The corrective decoder: skeleton offsets and identity vertex offsets from
// the identity code, pose vertex offsets from the pose vector, and an optional
// skinning-weight delta. Heads can be disabled individually for ablations; a
// disabled head contributes exactly zero.
struct CorrectiveNets {
    Head skel;      // beta -> [J*3]
    Head idvert;    // beta -> [V*3]
    Head posevert;  // theta -> [V*3]
    std::optional<Head> skinw;  // beta -> [V*J]

    bool enable_skel = true;
    bool enable_idvert = true;
    bool enable_posevert = true;

    int vertex_count = 0;
    int joint_count = 0;
    int identity_dim = 0;
    int pose_dim = 0;

    static CorrectiveNets zeros(int V, int J, int n_identity, int n_pose, bool with_skinw = false) {
        CorrectiveNets n;
        n.vertex_count = V;
        n.joint_count = J;
        n.identity_dim = n_identity;
        n.pose_dim = n_pose;
        const auto sv = static_cast<std::size_t>(V), sj = static_cast<std::size_t>(J);
        n.skel = Head::zeros(static_cast<std::size_t>(n_identity), sj * 3);
        n.idvert = Head::zeros(static_cast<std::size_t>(n_identity), sv * 3);
        n.posevert = Head::zeros(static_cast<std::size_t>(n_pose), sv * 3);
        if (with_skinw) n.skinw = Head::zeros(static_cast<std::size_t>(n_identity), sv * sj);
        return n;
    }

    // Training initialization: N(0, sigma) weights, zero biases.
    static CorrectiveNets gaussian_init(int V, int J, int n_identity, int n_pose, double sigma,
                                        Rng& rng, bool with_skinw = false) {
        CorrectiveNets n = zeros(V, J, n_identity, n_pose, with_skinw);
        const auto randomize = [&](Head& h) {
            for (auto& v : h.w1.value.data()) v = rng.normal(0, sigma);
            for (auto& v : h.w2.value.data()) v = rng.normal(0, sigma);
        };
        randomize(n.skel);
        randomize(n.idvert);
        randomize(n.posevert);
        if (n.skinw) randomize(*n.skinw);
        return n;
    }

    std::vector<std::pair<std::string, diff::Param*>> named_params() {
        std::vector<std::pair<std::string, diff::Param*>> out;
        const auto push = [&](const std::string& base, Head& h) {
            out.emplace_back(base + ".w1", &h.w1);
            out.emplace_back(base + ".b1", &h.b1);
            out.emplace_back(base + ".w2", &h.w2);
            out.emplace_back(base + ".b2", &h.b2);
        };
        push("skel", skel);
        push("idvert", idvert);
        push("posevert", posevert);
        if (skinw) push("skinw", *skinw);
        return out;
    }

    std::vector<diff::Param*> params() {
        std::vector<diff::Param*> out;
        for (auto& [name, p] : named_params()) out.push_back(p);
        return out;
    }

    void set_requires_grad(bool on) {
        skel.set_requires_grad(on);
        idvert.set_requires_grad(on);
        posevert.set_requires_grad(on);
        if (skinw) skinw->set_requires_grad(on);
    }
};

// Refined model nodes on a tape: template vertices, skeleton offsets and
// skinning weights after the correctives are applied.
struct RefinedModelNodes {
    diff::Value vertices;  // [V,3]
    diff::Value offsets;   // [J,3]
    diff::Value weights;   // [V,J]
};

// Value-level counterpart for tools and tests.
struct RefinedModel {
    Tensor vertices;
    Tensor offsets;
    Tensor weights;
};

// Refined skinning weights: clamp the corrected weights at zero and
// renormalize each row. The delta must already be masked to the support of
// the base weights.
inline diff::Value refine_skinning(diff::Tape& t, diff::Value weights, diff::Value delta) {
    const Tensor& w = t.value(weights);
    const Tensor& d = t.value(delta);
    if (!w.same_shape(d))
        throw ShapeError("refine_skinning: " + shape_str(w.shape()) + " vs " + shape_str(d.shape()));
    for (std::size_t i = 0; i < w.numel(); ++i)
        if (w[i] == 0.0 && d[i] != 0.0)
            throw ContractError("refine_skinning: delta nonzero at zero-weight entry " + std::to_string(i));
    diff::Value clamped = t.relu(t.add(weights, delta));
    diff::Value row_sums = t.sum_rows(clamped);
    const Tensor& s = t.value(row_sums);
    for (std::size_t i = 0; i < s.numel(); ++i)
        if (s[i] <= 0.0)
            throw DegeneracyError("refine_skinning: clamped weights of vertex " + std::to_string(i) +
                                  " sum to zero");
    diff::Value inv = t.div(t.constant_scalar(1.0), row_sums);
    return t.mul_colvec(clamped, inv);
}

// Assemble the refined model from the heads. The pose input to the
// pose-dependent vertex head is wrapped in stop-gradient, so no gradient
// reaches the pose through that path. posevert_input_override pins that input
// to explicit values instead; with the current theta values this is
// numerically identical and is how finite-difference audits evaluate the
// function the gradient actually differentiates.
inline RefinedModelNodes apply_correctives(diff::Tape& t, const HandModel& model,
                                           CorrectiveNets& nets, const IdentityCode& beta,
                                           diff::Value theta_active,
                                           const Tensor* posevert_input_override = nullptr) {
    using diff::Value;
    const int V = model.vertex_count();
    const int J = model.joint_count();
    if (nets.vertex_count != V || nets.joint_count != J)
        throw ContractError("apply_correctives: nets sized for V=" + std::to_string(nets.vertex_count) +
                            ", J=" + std::to_string(nets.joint_count) + " but model has V=" +
                            std::to_string(V) + ", J=" + std::to_string(J));
    if (static_cast<int>(beta.beta.numel()) != nets.identity_dim)
        throw ContractError("apply_correctives: identity code has " + std::to_string(beta.beta.numel()) +
                            " dims, nets expect " + std::to_string(nets.identity_dim));
    if (static_cast<int>(t.value(theta_active).numel()) != nets.pose_dim)
        throw ContractError("apply_correctives: theta has " + std::to_string(t.value(theta_active).numel()) +
                            " dims, nets expect " + std::to_string(nets.pose_dim));

    const auto sv = static_cast<std::size_t>(V), sj = static_cast<std::size_t>(J);
    Value beta_node = t.constant(beta.beta);

    Value verts = t.constant(model.template_vertices);
    if (nets.enable_idvert)
        verts = t.add(verts, t.reshape(nets.idvert.forward(t, beta_node), {sv, 3}));
    if (nets.enable_posevert) {
        Value theta_frozen = posevert_input_override ? t.constant(*posevert_input_override)
                                                     : t.stop_gradient(theta_active);
        verts = t.add(verts, t.reshape(nets.posevert.forward(t, theta_frozen), {sv, 3}));
    }

    Value offsets = t.constant(model.skeleton_offsets);
    if (nets.enable_skel)
        offsets = t.add(offsets, t.reshape(nets.skel.forward(t, beta_node), {sj, 3}));

    Value weights = t.constant(model.skinning_weights);
    if (nets.skinw) {
        // locality: the delta only acts where the base weight is nonzero
        Tensor support = Tensor::zeros({sv, sj});
        for (std::size_t i = 0; i < support.numel(); ++i)
            support[i] = model.skinning_weights[i] != 0.0 ? 1.0 : 0.0;
        Value delta = t.mul(t.reshape(nets.skinw->forward(t, beta_node), {sv, sj}), t.constant(support));
        weights = refine_skinning(t, weights, delta);
    }

    return RefinedModelNodes{verts, offsets, weights};
}

inline RefinedModel apply_correctives(const HandModel& model, CorrectiveNets& nets,
                                      const IdentityCode& beta, const PoseVector& pose) {
    diff::Tape t;
    diff::Value theta = t.constant(Tensor::from({pose.raw().size()}, pose.theta()));
    RefinedModelNodes nodes = apply_correctives(t, model, nets, beta, theta);
    return RefinedModel{t.value(nodes.vertices), t.value(nodes.offsets), t.value(nodes.weights)};
}

}  // namespace handfit
