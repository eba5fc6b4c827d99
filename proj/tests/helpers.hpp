// Shared fixtures for the unit suites.
#pragma once

#include <handfit/model.hpp>

namespace fixtures {

// Smallest valid bundle: a tetrahedron skinned to a 2-joint chain.
inline handfit::HandModel tiny_model() {
    handfit::HandModel m;
    m.template_vertices = handfit::Tensor::from({4, 3},
                                                {0.0, 0.0, 0.0,
                                                 10.0, 0.0, 0.0,
                                                 0.0, 10.0, 0.0,
                                                 0.0, 0.0, 10.0});
    m.faces = {{0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {1, 2, 3}};
    m.skeleton_offsets = handfit::Tensor::from({2, 3}, {0.0, 0.0, 0.0, 0.0, 10.0, 0.0});
    m.skinning_weights = handfit::Tensor::from({4, 2},
                                               {1.0, 0.0,
                                                0.5, 0.5,
                                                0.25, 0.75,
                                                0.0, 1.0});
    m.hierarchy.parents = {-1, 0};
    m.hierarchy.names = {"root", "tip"};
    m.hierarchy.fingertips = {1};
    m.hierarchy.palm_joint = 0;
    m.dof_mask.assign(6, true);
    return m;
}

// Straight 3-joint chain with unit bones along +y; no mesh.
inline handfit::JointHierarchy chain3() {
    handfit::JointHierarchy h;
    h.parents = {-1, 0, 1};
    h.fingertips = {2};
    h.palm_joint = 0;
    return h;
}

}  // namespace fixtures
