#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "handfit/errors.hpp"
#include "handfit/tensor.hpp"

namespace handfit {

// Joint tree. Joints must be stored in topological order: index 0 is the
// single root (parent -1) and every other joint appears after its parent.
struct JointHierarchy {
    std::vector<int> parents;
    std::vector<std::string> names;
    std::vector<int> fingertips;  // leaf joints used by the fingertip-palm term
    int palm_joint = 0;

    int joint_count() const { return static_cast<int>(parents.size()); }

    std::vector<int> children(int j) const {
        std::vector<int> out;
        for (int k = 0; k < joint_count(); ++k)
            if (parents[static_cast<std::size_t>(k)] == j) out.push_back(k);
        return out;
    }

    bool is_leaf(int j) const { return children(j).empty(); }

    // Root plus its direct children; the correspondence set for rigid alignment
    // (wrist + finger roots on the default skeleton).
    std::vector<int> alignment_joints() const {
        std::vector<int> out{0};
        for (int c : children(0)) out.push_back(c);
        return out;
    }

    std::vector<std::string> validate() const {
        std::vector<std::string> v;
        const int J = joint_count();
        if (J == 0) {
            v.push_back("hierarchy: no joints");
            return v;
        }
        int roots = 0;
        for (int j = 0; j < J; ++j) {
            const int p = parents[static_cast<std::size_t>(j)];
            if (p < 0) {
                ++roots;
                if (j != 0) v.push_back("hierarchy: root must be joint 0, found root at " + std::to_string(j));
            } else if (p >= j) {
                v.push_back("hierarchy: joint " + std::to_string(j) + " has parent " + std::to_string(p) +
                            " >= itself (not topologically ordered)");
            }
        }
        if (roots != 1) v.push_back("hierarchy: expected exactly one root, found " + std::to_string(roots));
        for (int f : fingertips) {
            if (f < 0 || f >= J)
                v.push_back("hierarchy: fingertip index " + std::to_string(f) + " out of range");
            else if (!is_leaf(f))
                v.push_back("hierarchy: fingertip joint " + std::to_string(f) + " is not a leaf");
        }
        if (palm_joint < 0 || palm_joint >= J)
            v.push_back("hierarchy: palm joint " + std::to_string(palm_joint) + " out of range");
        else if (palm_joint != 0 && parents[static_cast<std::size_t>(palm_joint)] != 0)
            v.push_back("hierarchy: palm joint " + std::to_string(palm_joint) +
                        " must be the root or a child of the root");
        if (!names.empty() && static_cast<int>(names.size()) != J)
            v.push_back("hierarchy: " + std::to_string(names.size()) + " names for " + std::to_string(J) +
                        " joints");
        return v;
    }
};

// Template hand: zero-pose mesh, per-joint offsets from parent, dense skinning
// weights, hierarchy, and the enabled rotation channels. Lengths in
// millimeters. Immutable after load; share freely across threads.
struct HandModel {
    Tensor template_vertices;  // [V,3]
    std::vector<std::array<int, 3>> faces;
    Tensor skeleton_offsets;   // [J,3]
    Tensor skinning_weights;   // [V,J]
    JointHierarchy hierarchy;
    std::vector<bool> dof_mask;  // 3J channels, true = optimized

    int vertex_count() const { return static_cast<int>(template_vertices.rows()); }
    int joint_count() const { return hierarchy.joint_count(); }
    int face_count() const { return static_cast<int>(faces.size()); }
};

inline std::vector<std::string> validate(const HandModel& m) {
    std::vector<std::string> v = m.hierarchy.validate();
    const int V = m.vertex_count();
    const int J = m.joint_count();

    if (V < 4) v.push_back("model: V = " + std::to_string(V) + " < 4");
    if (J < 2) v.push_back("model: J = " + std::to_string(J) + " < 2");
    if (m.template_vertices.rank() != 2 || m.template_vertices.cols() != 3)
        v.push_back("model: template_vertices shape " + shape_str(m.template_vertices.shape()) +
                    ", expected [V,3]");
    if (m.skeleton_offsets.rank() != 2 || m.skeleton_offsets.cols() != 3 ||
        static_cast<int>(m.skeleton_offsets.rows()) != J)
        v.push_back("model: skeleton_offsets shape " + shape_str(m.skeleton_offsets.shape()) +
                    ", expected [" + std::to_string(J) + ",3]");
    if (static_cast<int>(m.skinning_weights.rows()) != V ||
        static_cast<int>(m.skinning_weights.cols()) != J)
        v.push_back("model: skinning_weights shape " + shape_str(m.skinning_weights.shape()) +
                    ", expected [" + std::to_string(V) + "," + std::to_string(J) + "]");

    if (static_cast<int>(m.skinning_weights.rows()) == V &&
        static_cast<int>(m.skinning_weights.cols()) == J) {
        for (int i = 0; i < V; ++i) {
            double s = 0;
            for (int j = 0; j < J; ++j) {
                const double w = m.skinning_weights.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
                if (w < 0)
                    v.push_back("weights (" + std::to_string(i) + "," + std::to_string(j) + ") is negative: " +
                                std::to_string(w));
                s += w;
            }
            if (std::fabs(s - 1.0) > 1e-6)
                v.push_back("weights row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
    }

    std::vector<bool> referenced(static_cast<std::size_t>(V), false);
    for (std::size_t f = 0; f < m.faces.size(); ++f) {
        const auto& face = m.faces[f];
        bool ok = true;
        for (int k = 0; k < 3; ++k) {
            if (face[static_cast<std::size_t>(k)] < 0 || face[static_cast<std::size_t>(k)] >= V) {
                v.push_back("face " + std::to_string(f) + " references vertex " +
                            std::to_string(face[static_cast<std::size_t>(k)]) + " >= V=" + std::to_string(V));
                ok = false;
            }
        }
        if (ok && (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]))
            v.push_back("face " + std::to_string(f) + " is degenerate (" + std::to_string(face[0]) + "," +
                        std::to_string(face[1]) + "," + std::to_string(face[2]) + ")");
        if (ok)
            for (int k = 0; k < 3; ++k) referenced[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])] = true;
    }
    if (!m.faces.empty())
        for (int i = 0; i < V; ++i)
            if (!referenced[static_cast<std::size_t>(i)])
                v.push_back("vertex " + std::to_string(i) + " is isolated (no face references it)");

    if (static_cast<int>(m.dof_mask.size()) != 3 * J)
        v.push_back("model: dof_mask has " + std::to_string(m.dof_mask.size()) + " entries, expected " +
                    std::to_string(3 * J));
    return v;
}

// ---- bundle I/O ----------------------------------------------------------------
//
// A model bundle is an OBJ mesh plus a JSON sidecar holding the skeleton:
//   hand.obj   v/f records only, 1-based face indices
//   hand.json  parents, offsets, weights, fingertips, palm_joint, dof_mask,
//              joint_names

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline void save_obj(const std::filesystem::path& path, const Tensor& vertices,
                     const std::vector<std::array<int, 3>>& faces) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    for (std::size_t i = 0; i < vertices.rows(); ++i)
        out << "v " << detail::fmt_double(vertices.at(i, 0)) << " " << detail::fmt_double(vertices.at(i, 1))
            << " " << detail::fmt_double(vertices.at(i, 2)) << "\n";
    for (const auto& f : faces) out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
}

inline void load_obj(const std::filesystem::path& path, Tensor& vertices,
                     std::vector<std::array<int, 3>>& faces) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<double> verts;
    faces.clear();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto where = [&] { return path.filename().string() + ":" + std::to_string(lineno); };
        if (line[0] == 'v' && (line.size() == 1 || line[1] == ' ')) {
            double x, y, z;
            if (std::sscanf(line.c_str(), "v %lf %lf %lf", &x, &y, &z) != 3)
                throw FormatError(where() + ": malformed vertex line '" + line + "'");
            verts.push_back(x);
            verts.push_back(y);
            verts.push_back(z);
        } else if (line[0] == 'f' && (line.size() == 1 || line[1] == ' ')) {
            int a, b, c;
            if (std::sscanf(line.c_str(), "f %d %d %d", &a, &b, &c) != 3)
                throw FormatError(where() + ": malformed face line '" + line + "'");
            faces.push_back({a - 1, b - 1, c - 1});
        }
        // other record types ignored
    }
    const std::size_t nverts = verts.size() / 3;
    vertices = Tensor::from({nverts, 3}, std::move(verts));
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < t.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Tensor tensor_from_json(const nlohmann::json& j, const std::string& name) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw FormatError("sidecar field '" + name + "' must be a 2D array");
    const std::size_t rows = j.size(), cols = j[0].size();
    std::vector<double> data;
    data.reserve(rows * cols);
    for (const auto& row : j) {
        if (row.size() != cols) throw FormatError("sidecar field '" + name + "' is ragged");
        for (const auto& v : row) data.push_back(v.get<double>());
    }
    return Tensor::from({rows, cols}, std::move(data));
}

// Resolves a bundle path: a directory containing hand.obj/hand.json, or the
// OBJ itself with the sidecar next to it.
inline std::pair<std::filesystem::path, std::filesystem::path> bundle_paths(
    const std::filesystem::path& path) {
    if (std::filesystem::is_directory(path)) return {path / "hand.obj", path / "hand.json"};
    std::filesystem::path side = path;
    side.replace_extension(".json");
    return {path, side};
}

inline void save_model(const HandModel& m, const std::filesystem::path& path) {
    auto [obj, side] = bundle_paths(path);
    if (!obj.parent_path().empty()) std::filesystem::create_directories(obj.parent_path());
    save_obj(obj, m.template_vertices, m.faces);

    nlohmann::json j;
    j["parents"] = m.hierarchy.parents;
    j["offsets"] = tensor_to_json(m.skeleton_offsets);
    j["weights"] = tensor_to_json(m.skinning_weights);
    j["fingertips"] = m.hierarchy.fingertips;
    j["palm_joint"] = m.hierarchy.palm_joint;
    std::vector<int> mask(m.dof_mask.size());
    for (std::size_t i = 0; i < m.dof_mask.size(); ++i) mask[i] = m.dof_mask[i] ? 1 : 0;
    j["dof_mask"] = mask;
    j["joint_names"] = m.hierarchy.names;

    std::ofstream out(side);
    if (!out) throw FormatError("cannot open " + side.string() + " for writing");
    out << j.dump(1) << "\n";
}

inline HandModel load_model(const std::filesystem::path& path) {
    auto [obj, side] = bundle_paths(path);
    HandModel m;
    load_obj(obj, m.template_vertices, m.faces);

    std::ifstream in(side);
    if (!in) throw FormatError("cannot open " + side.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(side.filename().string() + ": " + e.what());
    }

    try {
        m.hierarchy.parents = j.at("parents").get<std::vector<int>>();
        m.skeleton_offsets = tensor_from_json(j.at("offsets"), "offsets");
        m.skinning_weights = tensor_from_json(j.at("weights"), "weights");
        m.hierarchy.fingertips = j.at("fingertips").get<std::vector<int>>();
        m.hierarchy.palm_joint = j.at("palm_joint").get<int>();
        const auto mask = j.at("dof_mask").get<std::vector<int>>();
        m.dof_mask.assign(mask.size(), false);
        for (std::size_t i = 0; i < mask.size(); ++i) m.dof_mask[i] = mask[i] != 0;
        if (j.contains("joint_names")) m.hierarchy.names = j.at("joint_names").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(side.filename().string() + ": " + e.what());
    }

    const auto violations = validate(m);
    if (!violations.empty()) throw ValidationError(violations.front());
    return m;
}

}  // namespace handfit
