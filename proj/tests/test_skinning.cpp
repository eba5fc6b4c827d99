#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <handfit/rng.hpp>
#include <handfit/skinning.hpp>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace handfit;
using diff::Param;
using diff::Tape;
using diff::Value;

namespace {

JointTransforms chain_transforms(const std::vector<double>& theta, const Tensor& offsets) {
    return forward_kinematics(theta, offsets, fixtures::chain3());
}

}  // namespace

TEST_CASE("lbs at zero pose with identity alignment returns the template") {
    const Tensor offsets = Tensor::from({3, 3}, {0, 0, 0, 0, 10, 0, 0, 10, 0});
    const JointTransforms jt = chain_transforms(std::vector<double>(9, 0.0), offsets);
    Rng rng(1);
    Tensor verts = Tensor::zeros({5, 3});
    for (auto& v : verts.data()) v = rng.uniform(-20, 20);
    Tensor w = Tensor::from({5, 3}, {1, 0, 0, 0.5, 0.5, 0, 0.2, 0.3, 0.5, 0, 0, 1, 0.1, 0.8, 0.1});

    const Tensor out = lbs_deform(verts, w, jt, RigidAlignment::identity());
    // the weight blend rounds at the ulp level; 1e-12 relative is the contract
    for (std::size_t i = 0; i < out.numel(); ++i)
        CHECK(std::fabs(out[i] - verts[i]) <= 1e-12 * std::max(1.0, std::fabs(verts[i])));
}

TEST_CASE("single-weight vertex rigidly follows its joint") {
    const Tensor offsets = Tensor::from({3, 3}, {0, 0, 0, 0, 10, 0, 0, 10, 0});
    std::vector<double> theta(9, 0.0);
    theta[5] = kPi / 2;  // joint 1 z
    const JointTransforms jt = chain_transforms(theta, offsets);

    Tensor verts = Tensor::from({1, 3}, {3.0, 14.0, -2.0});
    Tensor w = Tensor::from({1, 3}, {0.0, 1.0, 0.0});
    const Tensor out = lbs_deform(verts, w, jt, RigidAlignment::identity());

    const Vec3 expect = jt.rot[1] * Vec3{3.0, 14.0, -2.0} + jt.trans[1];
    CHECK(out[0] == doctest::Approx(expect.x).epsilon(1e-14));
    CHECK(out[1] == doctest::Approx(expect.y).epsilon(1e-14));
    CHECK(out[2] == doctest::Approx(expect.z).epsilon(1e-14));
    // rotation about joint 1 at (0,10,0): the vertex keeps its distance to it
    const Vec3 rel{out[0] - 0, out[1] - 10, out[2] - 0};
    CHECK(norm(rel) == doctest::Approx(norm(Vec3{3, 4, -2})).epsilon(1e-12));
}

TEST_CASE("half-half vertex is the midpoint of the two rigid images") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor offsets = Tensor::from({3, 3}, {0, 0, 0, 0, 10, 0, 0, 10, 0});
        std::vector<double> theta(9);
        for (auto& v : theta) v = rng.uniform(-1.2, 1.2);
        const JointTransforms jt = chain_transforms(theta, offsets);

        const Vec3 p{rng.uniform(-5, 5), rng.uniform(0, 20), rng.uniform(-5, 5)};
        Tensor verts = Tensor::from({1, 3}, {p.x, p.y, p.z});
        Tensor w = Tensor::from({1, 3}, {0.5, 0.0, 0.5});
        const Tensor out = lbs_deform(verts, w, jt, RigidAlignment::identity());

        const Vec3 a = jt.rot[0] * p + jt.trans[0];
        const Vec3 b = jt.rot[2] * p + jt.trans[2];
        const Vec3 mid = (a + b) * 0.5;
        CHECK(std::fabs(out[0] - mid.x) < 1e-12);
        CHECK(std::fabs(out[1] - mid.y) < 1e-12);
        CHECK(std::fabs(out[2] - mid.z) < 1e-12);

        // tape version agrees bit-for-bit with the value-level path
        Tape t;
        FkNodes fk = forward_kinematics(t, t.constant(Tensor::from({9}, theta)),
                                        t.constant(offsets), fixtures::chain3());
        Value mesh = lbs_deform(t, t.constant(verts), t.constant(w), fk, RigidAlignment::identity());
        for (int k = 0; k < 3; ++k)
            CHECK(t.value(mesh)[static_cast<std::size_t>(k)] ==
                  doctest::Approx(out[static_cast<std::size_t>(k)]).epsilon(1e-14));
    }
}

TEST_CASE("lbs commutes with a global rigid motion applied at the root") {
    Rng rng(3);
    const Tensor offsets = Tensor::from({3, 3}, {0, 0, 0, 0, 10, 0, 0, 10, 0});
    std::vector<double> theta(9);
    for (auto& v : theta) v = rng.uniform(-1, 1);
    theta[0] = theta[1] = theta[2] = 0;

    Tensor verts = Tensor::zeros({6, 3});
    for (auto& v : verts.data()) v = rng.uniform(-10, 25);
    Tensor w = Tensor::zeros({6, 3});
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            w.at(i, j) = rng.uniform(0.01, 1.0);
            s += w.at(i, j);
        }
        for (std::size_t j = 0; j < 3; ++j) w.at(i, j) /= s;
    }

    const Tensor base = lbs_deform(verts, w, chain_transforms(theta, offsets), RigidAlignment::identity());

    // the same pose with a root rotation equals rotating the base result
    const Mat3 R = axis_angle({0.2, 1.0, -0.4}, 0.9);
    const double ry = std::asin(std::max(-1.0, std::min(1.0, R(0, 2))));
    const double rx = std::atan2(-R(1, 2), R(2, 2));
    const double rz = std::atan2(-R(0, 1), R(0, 0));
    std::vector<double> theta_rot = theta;
    theta_rot[0] = rx;
    theta_rot[1] = ry;
    theta_rot[2] = rz;
    const Tensor rotated = lbs_deform(verts, w, chain_transforms(theta_rot, offsets), RigidAlignment::identity());
    for (std::size_t i = 0; i < 6; ++i) {
        const Vec3 expect = R * Vec3{base.at(i, 0), base.at(i, 1), base.at(i, 2)};
        CHECK(std::fabs(rotated.at(i, 0) - expect.x) < 1e-9);
        CHECK(std::fabs(rotated.at(i, 1) - expect.y) < 1e-9);
        CHECK(std::fabs(rotated.at(i, 2) - expect.z) < 1e-9);
    }
}

TEST_CASE("lbs gradients match finite differences") {
    Rng rng(4);
    const Tensor offsets = Tensor::from({3, 3}, {0, 0, 0, 0, 10, 0, 0, 10, 0});
    std::vector<double> theta(9);
    for (auto& v : theta) v = rng.uniform(-1, 1);
    std::vector<double> verts(9);
    for (auto& v : verts) v = rng.uniform(-5, 15);
    Tensor w = Tensor::from({3, 3}, {0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.2, 0.7});
    Tensor vw = Tensor::zeros({3, 3});
    for (auto& v : vw.data()) v = rng.normal();

    auto loss_of = [&](const std::vector<double>& th, const std::vector<double>& vs) {
        const JointTransforms jt = chain_transforms(th, offsets);
        const Tensor out = lbs_deform(Tensor::from({3, 3}, vs), w, jt, RigidAlignment::identity());
        double s = 0;
        for (std::size_t i = 0; i < 9; ++i) s += out[i] * vw[i];
        return s;
    };

    Param pt(Tensor::from({9}, theta));
    Param pv(Tensor::from({3, 3}, verts));
    Tape t;
    FkNodes fk = forward_kinematics(t, t.param(pt), t.constant(offsets), fixtures::chain3());
    Value mesh = lbs_deform(t, t.param(pv), t.constant(w), fk, RigidAlignment::identity());
    t.backward(t.sum(t.mul(mesh, t.constant(vw))));

    for (std::size_t i = 0; i < 9; ++i) {
        const double fd_t = oracles::central_diff([&](const std::vector<double>& x) { return loss_of(x, verts); }, theta, i);
        const double fd_v = oracles::central_diff([&](const std::vector<double>& x) { return loss_of(theta, x); }, verts, i);
        CHECK(oracles::rel_err(pt.grad[i], fd_t, 1e-6) < 1e-4);
        CHECK(oracles::rel_err(pv.grad[i], fd_v, 1e-6) < 1e-4);
    }
}

TEST_CASE("laplacian") {
    SUBCASE("interior vertex of a regular grid has zero residual") {
        // 3x3 grid in the plane, center vertex 4 with 4-neighborhood via faces
        Tensor verts = Tensor::zeros({9, 3});
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                verts.at(static_cast<std::size_t>(r * 3 + c), 0) = c;
                verts.at(static_cast<std::size_t>(r * 3 + c), 1) = r;
            }
        // triangulate so the center is connected to all 8 others minus corners
        std::vector<std::array<int, 3>> faces{{0, 1, 4}, {1, 2, 4}, {2, 5, 4}, {5, 8, 4},
                                              {8, 7, 4}, {7, 6, 4}, {6, 3, 4}, {3, 0, 4}};
        const auto adj = vertex_adjacency(9, faces);
        const Tensor r = laplacian(verts, adj);
        // center neighbors are all 8 ring vertices; their mean is the center
        CHECK(std::fabs(r.at(4, 0)) < 1e-15);
        CHECK(std::fabs(r.at(4, 1)) < 1e-15);
        CHECK(std::fabs(r.at(4, 2)) < 1e-15);
    }

    SUBCASE("origin-centered regular tetrahedron: residual is (4/3) v") {
        Tensor verts = Tensor::from({4, 3}, {1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1});
        std::vector<std::array<int, 3>> faces{{0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {1, 2, 3}};
        const auto adj = vertex_adjacency(4, faces);
        const Tensor r = laplacian(verts, adj);
        for (std::size_t v = 0; v < 4; ++v)
            for (std::size_t c = 0; c < 3; ++c)
                CHECK(r.at(v, c) == doctest::Approx(4.0 / 3.0 * verts.at(v, c)).epsilon(1e-14));
    }

    SUBCASE("random mesh matches brute-force neighbor means") {
        Rng rng(5);
        const HandModel m = fixtures::tiny_model();
        Tensor verts = Tensor::zeros({4, 3});
        for (auto& v : verts.data()) v = rng.uniform(-10, 10);
        const auto adj = vertex_adjacency(4, m.faces);
        const Tensor r = laplacian(verts, adj);
        for (std::size_t v = 0; v < 4; ++v) {
            for (std::size_t c = 0; c < 3; ++c) {
                double mean = 0;
                for (int u : adj[v]) mean += verts.at(static_cast<std::size_t>(u), c);
                mean /= static_cast<double>(adj[v].size());
                CHECK(std::fabs(r.at(v, c) - (verts.at(v, c) - mean)) < 1e-12);
            }
        }
    }

    SUBCASE("translation invariance is exact") {
        Rng rng(6);
        const HandModel m = fixtures::tiny_model();
        Tensor verts = Tensor::zeros({4, 3});
        for (auto& v : verts.data()) v = rng.uniform(-10, 10);
        Tensor shifted = verts;
        for (std::size_t v = 0; v < 4; ++v) {
            shifted.at(v, 0) += 7.5;
            shifted.at(v, 1) -= 3.25;
            shifted.at(v, 2) += 0.5;
        }
        const auto adj = vertex_adjacency(4, m.faces);
        const Tensor a = laplacian(verts, adj);
        const Tensor b = laplacian(shifted, adj);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
    }

    SUBCASE("isolated vertex is rejected when building adjacency") {
        std::vector<std::array<int, 3>> faces{{0, 1, 2}};
        CHECK_THROWS_AS(vertex_adjacency(4, faces), TopologyError);
    }

    SUBCASE("tape laplacian gradient matches finite differences") {
        Rng rng(7);
        const HandModel m = fixtures::tiny_model();
        auto adj = std::make_shared<const std::vector<std::vector<int>>>(vertex_adjacency(4, m.faces));
        std::vector<double> verts(12);
        for (auto& v : verts) v = rng.uniform(-10, 10);
        Tensor vw = Tensor::zeros({4, 3});
        for (auto& v : vw.data()) v = rng.normal();

        auto f = [&](const std::vector<double>& vs) {
            const Tensor r = laplacian(Tensor::from({4, 3}, vs), *adj);
            double s = 0;
            for (std::size_t i = 0; i < 12; ++i) s += r[i] * r[i] * vw[i];
            return s;
        };

        Param p(Tensor::from({4, 3}, verts));
        Tape t;
        Value r = laplacian(t, t.param(p), adj);
        t.backward(t.sum(t.mul(t.mul(r, r), t.constant(vw))));
        for (std::size_t i = 0; i < 12; ++i)
            CHECK(oracles::rel_err(p.grad[i], oracles::central_diff(f, verts, i), 1e-7) < 1e-4);
    }
}
