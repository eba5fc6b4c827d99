#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "handfit/correctives.hpp"
#include "handfit/kinematics.hpp"
#include "handfit/model.hpp"
#include "handfit/skinning.hpp"
#include "handfit/tape.hpp"

#include <json.hpp>

namespace handfit {

// K spheres along one bone (parent joint -> child joint). Rest centers are
// interpolated between the zero-pose joint positions; each radius is the
// distance to the nearest vertex of the zero-pose deformed mesh. Chains are
// rigidly attached to the bone and carried by the child joint's transform.
struct SphereChain {
    int parent_joint = -1;
    int child_joint = -1;
    diff::Value centers_rest;   // [K,3]
    diff::Value radii;          // [K]
    diff::Value centers_posed;  // [K,3], set by pose_sphere_chains
};

struct SphereChains {
    std::vector<SphereChain> chains;
    int spheres_per_bone = 10;

    int chain_for_child(int joint) const {
        for (std::size_t i = 0; i < chains.size(); ++i)
            if (chains[i].child_joint == joint) return static_cast<int>(i);
        return -1;
    }
};

// Indices of mesh vertices whose dominant skinning weight is the palm joint.
inline std::vector<std::size_t> palm_vertex_set(const Tensor& weights, int palm_joint) {
    const std::size_t V = weights.rows(), J = weights.cols();
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < V; ++v) {
        std::size_t best = 0;
        double best_w = weights.at(v, 0);
        for (std::size_t j = 1; j < J; ++j)
            if (weights.at(v, j) > best_w) {
                best_w = weights.at(v, j);
                best = j;
            }
        if (best == static_cast<std::size_t>(palm_joint)) out.push_back(v);
    }
    return out;
}

// Build rest chains from the refined model. Zero-pose joints come from the
// cumulative refined offsets; the zero-pose deformed mesh is the refined
// template itself, so radii are nearest-vertex distances to it. The nearest
// vertex is frozen per call (lowest index on ties); the distance stays
// differentiable through both endpoints.
inline SphereChains build_sphere_chains(diff::Tape& t, const RefinedModelNodes& refined,
                                        const JointHierarchy& h, int spheres_per_bone = 10) {
    using diff::Value;
    const int J = h.joint_count();
    const int K = spheres_per_bone;
    const Tensor& verts = t.value(refined.vertices);
    const std::size_t V = verts.rows();

    // zero-pose joint positions: cumulative offsets down the tree
    std::vector<Value> rest(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) {
        const std::size_t js = static_cast<std::size_t>(j);
        Value off = t.gather(refined.offsets, {3 * js, 3 * js + 1, 3 * js + 2});
        const int p = h.parents[js];
        rest[js] = p < 0 ? off : t.add(rest[static_cast<std::size_t>(p)], off);
    }

    SphereChains out;
    out.spheres_per_bone = K;
    for (int j = 1; j < J; ++j) {
        const int p = h.parents[static_cast<std::size_t>(j)];
        SphereChain chain;
        chain.parent_joint = p;
        chain.child_joint = j;

        std::vector<Value> centers(static_cast<std::size_t>(K));
        std::vector<Value> radii(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k) {
            const double s = K > 1 ? static_cast<double>(k) / static_cast<double>(K - 1) : 0.0;
            Value c = t.add(t.scale(rest[static_cast<std::size_t>(p)], 1.0 - s),
                            t.scale(rest[static_cast<std::size_t>(j)], s));
            centers[static_cast<std::size_t>(k)] = c;

            // frozen nearest vertex of the zero-pose mesh
            const Tensor& cv = t.value(c);
            std::size_t best = 0;
            double best_d2 = std::numeric_limits<double>::infinity();
            for (std::size_t v = 0; v < V; ++v) {
                const double dx = verts.at(v, 0) - cv[0];
                const double dy = verts.at(v, 1) - cv[1];
                const double dz = verts.at(v, 2) - cv[2];
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = v;
                }
            }
            Value nearest = t.gather(refined.vertices, {best * 3, best * 3 + 1, best * 3 + 2});
            Value diff = t.sub(nearest, c);
            radii[static_cast<std::size_t>(k)] = t.sqrt(t.sum(t.mul(diff, diff)));
        }
        chain.centers_rest = t.stack_rows(centers);
        chain.radii = t.reshape(t.stack_rows(radii), {static_cast<std::size_t>(K)});
        chain.centers_posed = chain.centers_rest;
        out.chains.push_back(chain);
    }
    return out;
}

// Carry rest centers by the bone's posed transform (child joint). Radii are
// untouched.
inline void pose_sphere_chains(diff::Tape& t, SphereChains& chains, const FkNodes& fk) {
    for (SphereChain& c : chains.chains) {
        const std::size_t j = static_cast<std::size_t>(c.child_joint);
        c.centers_posed = t.add_rowvec(t.matmul(c.centers_rest, t.transpose(fk.rot[j])), fk.trans[j]);
    }
}

// Sum of pairwise sphere overlaps between bones that share no joint.
inline diff::Value rigid_penetration(diff::Tape& t, const SphereChains& chains) {
    using diff::Value;
    const int K = chains.spheres_per_bone;
    const std::size_t nb = chains.chains.size();
    if (nb < 2) throw ContractError("rigid_penetration: need at least two chains");

    // stack all posed centers [nb*K, 3] and radii [nb*K]
    std::vector<Value> center_blocks, radius_blocks;
    for (const SphereChain& c : chains.chains) {
        center_blocks.push_back(t.reshape(c.centers_posed, {static_cast<std::size_t>(3 * K)}));
        radius_blocks.push_back(c.radii);
    }
    Value centers = t.reshape(t.stack_rows(center_blocks),
                              {nb * static_cast<std::size_t>(K), 3});
    Value radii = t.reshape(t.stack_rows(radius_blocks), {nb * static_cast<std::size_t>(K)});

    // eligible sphere pair index lists
    std::vector<std::size_t> ia, ib;
    for (std::size_t a = 0; a < nb; ++a)
        for (std::size_t b = a + 1; b < nb; ++b) {
            const SphereChain& ca = chains.chains[a];
            const SphereChain& cb = chains.chains[b];
            const bool share = ca.child_joint == cb.child_joint || ca.child_joint == cb.parent_joint ||
                               cb.child_joint == ca.parent_joint || ca.parent_joint == cb.parent_joint;
            if (share) continue;
            for (int i = 0; i < K; ++i)
                for (int j = 0; j < K; ++j) {
                    ia.push_back(a * static_cast<std::size_t>(K) + static_cast<std::size_t>(i));
                    ib.push_back(b * static_cast<std::size_t>(K) + static_cast<std::size_t>(j));
                }
        }
    if (ia.empty()) return t.constant_scalar(0.0);

    Value c1 = t.gather_rows(centers, ia);
    Value c2 = t.gather_rows(centers, ib);
    Value r_sum = t.add(t.gather(radii, ia), t.gather(radii, ib));
    Value d = t.sub(c1, c2);
    Value dist = t.sqrt(t.sum_rows(t.mul(d, d)));
    return t.sum(t.relu(t.sub(r_sum, dist)));
}

// Fingertip-into-palm term. For each fingertip bone: nearest palm vertex per
// posed sphere (frozen per call), the first penetrating sphere starting from
// the parent end marks the onset, and every sphere from there to the tip
// contributes |d_k - r_k|.
inline diff::Value nonrigid_penetration(diff::Tape& t, const SphereChains& chains,
                                        const JointHierarchy& h,
                                        const std::vector<std::size_t>& palm_vertices,
                                        diff::Value mesh_vertices) {
    using diff::Value;
    if (palm_vertices.empty()) throw ConfigError("nonrigid_penetration: empty palm vertex set");
    const Tensor& mesh = t.value(mesh_vertices);
    const int K = chains.spheres_per_bone;

    Value total = t.constant_scalar(0.0);
    for (int tip : h.fingertips) {
        const int ci = chains.chain_for_child(tip);
        if (ci < 0) throw ConfigError("nonrigid_penetration: no chain ends at fingertip joint " +
                                      std::to_string(tip));
        const SphereChain& chain = chains.chains[static_cast<std::size_t>(ci)];
        const Tensor& centers = t.value(chain.centers_posed);
        const Tensor& radii = t.value(chain.radii);

        // frozen nearest palm vertex per sphere (lowest index wins ties)
        std::vector<std::size_t> nearest(static_cast<std::size_t>(K));
        std::vector<double> d_val(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k) {
            const std::size_t ks = static_cast<std::size_t>(k);
            double best_d2 = std::numeric_limits<double>::infinity();
            std::size_t best = palm_vertices[0];
            for (std::size_t v : palm_vertices) {
                const double dx = mesh.at(v, 0) - centers.at(ks, 0);
                const double dy = mesh.at(v, 1) - centers.at(ks, 1);
                const double dz = mesh.at(v, 2) - centers.at(ks, 2);
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = v;
                }
            }
            nearest[ks] = best;
            d_val[ks] = std::sqrt(best_d2);
        }

        // onset: first sphere (closest to the parent joint) with d < r
        int onset = -1;
        for (int k = 0; k < K; ++k)
            if (d_val[static_cast<std::size_t>(k)] < radii[static_cast<std::size_t>(k)]) {
                onset = k;
                break;
            }
        if (onset < 0) continue;

        std::vector<std::size_t> sphere_rows, vert_rows;
        for (int k = onset; k < K; ++k) {
            sphere_rows.push_back(static_cast<std::size_t>(k));
            vert_rows.push_back(nearest[static_cast<std::size_t>(k)]);
        }
        Value c_sel = t.gather_rows(chain.centers_posed, sphere_rows);
        Value v_sel = t.gather_rows(mesh_vertices, vert_rows);
        Value diff = t.sub(v_sel, c_sel);
        Value d = t.sqrt(t.sum_rows(t.mul(diff, diff)));
        Value r_sel = t.gather(chain.radii, sphere_rows);
        total = t.add(total, t.sum(t.abs(t.sub(d, r_sel))));
    }
    return total;
}

// L_penet = rigid + lambda_nr * nonrigid.
inline diff::Value penetration_loss(diff::Tape& t, diff::Value rigid, diff::Value nonrigid,
                                    double lambda_nr = 5.0) {
    return t.add(rigid, t.scale(nonrigid, lambda_nr));
}

// Debug export for external visualization: per bone, posed centers and radii.
inline nlohmann::json sphere_chains_json(const diff::Tape& t, const SphereChains& chains) {
    nlohmann::json out = nlohmann::json::array();
    for (const SphereChain& c : chains.chains) {
        nlohmann::json bone;
        bone["parent_joint"] = c.parent_joint;
        bone["child_joint"] = c.child_joint;
        nlohmann::json centers = nlohmann::json::array();
        const Tensor& cp = t.value(c.centers_posed);
        for (std::size_t k = 0; k < cp.rows(); ++k)
            centers.push_back(std::array<double, 3>{cp.at(k, 0), cp.at(k, 1), cp.at(k, 2)});
        bone["centers"] = centers;
        const Tensor& r = t.value(c.radii);
        bone["radii"] = r.data();
        out.push_back(std::move(bone));
    }
    return out;
}

}  // namespace handfit
