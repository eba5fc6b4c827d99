#pragma once

#include <algorithm>
#include <array>
#include <memory>
#include <vector>

#include "handfit/correctives.hpp"
#include "handfit/kinematics.hpp"
#include "handfit/model.hpp"
#include "handfit/tape.hpp"

namespace handfit {

// Posed mesh in dataset space (after rigid alignment). Faces are copied from
// the template; topology never changes during deformation.
struct DeformedMesh {
    Tensor vertices;  // [V,3]
    std::vector<std::array<int, 3>> faces;
};

// Linear blend skinning: each vertex is the weight-blended image of its rest
// position under the per-joint skinning transforms, then rigidly aligned into
// dataset space. Differentiable w.r.t. vertices, weights, and the transforms.
inline diff::Value lbs_deform(diff::Tape& t, diff::Value vertices, diff::Value weights,
                              const FkNodes& fk, const RigidAlignment& align) {
    using diff::Value;
    const Tensor& verts = t.value(vertices);
    const Tensor& w = t.value(weights);
    const std::size_t V = verts.rows();
    const std::size_t J = fk.rot.size();
    if (verts.cols() != 3 || w.rows() != V || w.cols() != J)
        throw ShapeError("lbs_deform: vertices " + shape_str(verts.shape()) + ", weights " +
                         shape_str(w.shape()) + ", J=" + std::to_string(J));

    Value out{};
    for (std::size_t j = 0; j < J; ++j) {
        Value posed = t.add_rowvec(t.matmul(vertices, t.transpose(fk.rot[j])), fk.trans[j]);
        std::vector<std::size_t> col(V);
        for (std::size_t v = 0; v < V; ++v) col[v] = v * J + j;
        Value term = t.mul_colvec(posed, t.gather(weights, std::move(col)));
        out = j == 0 ? term : t.add(out, term);
    }

    const Mat3& R = align.rotation;
    const bool is_identity =
        R(0, 0) == 1 && R(1, 1) == 1 && R(2, 2) == 1 && R(0, 1) == 0 && R(0, 2) == 0 &&
        R(1, 0) == 0 && R(1, 2) == 0 && R(2, 0) == 0 && R(2, 1) == 0 &&
        align.translation.x == 0 && align.translation.y == 0 && align.translation.z == 0;
    if (is_identity) return out;

    Tensor rt = Tensor::from({3, 3}, {R(0, 0), R(1, 0), R(2, 0),
                                      R(0, 1), R(1, 1), R(2, 1),
                                      R(0, 2), R(1, 2), R(2, 2)});
    Tensor tv = Tensor::from({3}, {align.translation.x, align.translation.y, align.translation.z});
    return t.add_rowvec(t.matmul(out, t.constant(rt)), t.constant(tv));
}

inline Tensor lbs_deform(const Tensor& vertices, const Tensor& weights, const JointTransforms& jt,
                         const RigidAlignment& align) {
    const std::size_t V = vertices.rows();
    const std::size_t J = jt.rot.size();
    Tensor out = Tensor::zeros({V, 3});
    for (std::size_t v = 0; v < V; ++v) {
        const Vec3 rest{vertices.at(v, 0), vertices.at(v, 1), vertices.at(v, 2)};
        Vec3 acc{};
        for (std::size_t j = 0; j < J; ++j) {
            const double wj = weights.at(v, j);
            if (wj == 0.0) continue;
            acc += (jt.rot[j] * rest + jt.trans[j]) * wj;
        }
        const Vec3 p = align.apply(acc);
        out.at(v, 0) = p.x;
        out.at(v, 1) = p.y;
        out.at(v, 2) = p.z;
    }
    return out;
}

// 1-ring neighbor lists from shared mesh edges, sorted and deduplicated.
inline std::vector<std::vector<int>> vertex_adjacency(int V, const std::vector<std::array<int, 3>>& faces) {
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(V));
    const auto link = [&](int a, int b) {
        adj[static_cast<std::size_t>(a)].push_back(b);
        adj[static_cast<std::size_t>(b)].push_back(a);
    };
    for (const auto& f : faces) {
        link(f[0], f[1]);
        link(f[1], f[2]);
        link(f[2], f[0]);
    }
    for (std::size_t v = 0; v < adj.size(); ++v) {
        auto& n = adj[v];
        std::sort(n.begin(), n.end());
        n.erase(std::unique(n.begin(), n.end()), n.end());
        if (n.empty())
            throw TopologyError("vertex " + std::to_string(v) + " has no neighbors");
    }
    return adj;
}

// Uniform Laplacian residuals: r_v = m_v - mean of 1-ring neighbors. Linear
// in the vertex positions, so the backward pass applies the transpose.
inline Tensor laplacian(const Tensor& verts, const std::vector<std::vector<int>>& adj) {
    const std::size_t V = verts.rows();
    Tensor out = Tensor::zeros({V, 3});
    for (std::size_t v = 0; v < V; ++v) {
        const auto& n = adj[v];
        const double inv = 1.0 / static_cast<double>(n.size());
        for (int c = 0; c < 3; ++c) {
            double mean = 0;
            for (int u : n) mean += verts.at(static_cast<std::size_t>(u), static_cast<std::size_t>(c));
            out.at(v, static_cast<std::size_t>(c)) = verts.at(v, static_cast<std::size_t>(c)) - mean * inv;
        }
    }
    return out;
}

inline diff::Value laplacian(diff::Tape& t, diff::Value vertices,
                             std::shared_ptr<const std::vector<std::vector<int>>> adj) {
    const Tensor& verts = t.value(vertices);
    if (verts.cols() != 3 || verts.rows() != adj->size())
        throw ShapeError("laplacian: vertices " + shape_str(verts.shape()) + " vs " +
                         std::to_string(adj->size()) + " adjacency rows");
    Tensor out = laplacian(verts, *adj);
    const int iv = vertices.id;
    return t.custom(std::move(out), {vertices}, "laplacian",
                    [iv, adj](diff::Tape& tp, const Tensor& g) {
                        const std::size_t V = adj->size();
                        Tensor gx = g;  // identity part
                        for (std::size_t v = 0; v < V; ++v) {
                            const auto& n = (*adj)[v];
                            const double inv = 1.0 / static_cast<double>(n.size());
                            for (int u : n)
                                for (std::size_t c = 0; c < 3; ++c)
                                    gx.at(static_cast<std::size_t>(u), c) -= g.at(v, c) * inv;
                        }
                        tp.accumulate(iv, gx);
                    });
}

}  // namespace handfit
