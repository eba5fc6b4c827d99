#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <handfit/collision.hpp>
#include <handfit/rng.hpp>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace handfit;
using diff::Param;
using diff::Tape;
using diff::Value;

namespace {

// Chains assembled from explicit centers/radii constants.
SphereChains make_chains(Tape& t, const std::vector<std::array<int, 2>>& bones,
                         const std::vector<std::vector<std::array<double, 3>>>& centers,
                         const std::vector<std::vector<double>>& radii) {
    SphereChains out;
    out.spheres_per_bone = static_cast<int>(centers[0].size());
    for (std::size_t b = 0; b < bones.size(); ++b) {
        SphereChain c;
        c.parent_joint = bones[b][0];
        c.child_joint = bones[b][1];
        std::vector<double> flat;
        for (const auto& p : centers[b]) {
            flat.push_back(p[0]);
            flat.push_back(p[1]);
            flat.push_back(p[2]);
        }
        c.centers_rest = t.constant(Tensor::from({centers[b].size(), 3}, flat));
        c.radii = t.constant(Tensor::from({radii[b].size()}, radii[b]));
        c.centers_posed = c.centers_rest;
        out.chains.push_back(c);
    }
    return out;
}

}  // namespace

TEST_CASE("chain construction: interpolated centers and nearest-vertex radii") {
    Tape t;
    // 2-joint rig: parent at origin, child at (0,9,0); mesh = two probe points
    JointHierarchy h;
    h.parents = {-1, 0};
    h.fingertips = {1};

    RefinedModelNodes refined;
    refined.offsets = t.constant(Tensor::from({2, 3}, {0, 0, 0, 0, 9, 0}));
    refined.vertices = t.constant(Tensor::from({2, 3}, {0.4, 0.0, 0.0, 0.0, 9.0, 0.7}));
    refined.weights = t.constant(Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0}));

    SphereChains chains = build_sphere_chains(t, refined, h, 10);
    REQUIRE(chains.chains.size() == 1);
    const Tensor& c = t.value(chains.chains[0].centers_rest);
    for (int k = 0; k < 10; ++k) {
        CHECK(c.at(static_cast<std::size_t>(k), 0) == 0.0);
        CHECK(c.at(static_cast<std::size_t>(k), 1) == doctest::Approx(k).epsilon(1e-15));
        CHECK(c.at(static_cast<std::size_t>(k), 2) == 0.0);
    }
    // sphere at the parent end: nearest vertex is (0.4,0,0) at distance 0.4
    const Tensor& r = t.value(chains.chains[0].radii);
    CHECK(r[0] == doctest::Approx(0.4).epsilon(1e-12));
    // sphere at the child end: nearest vertex is (0,9,0.7)
    CHECK(r[9] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("chain radii match an exhaustive nearest-vertex scan") {
    Rng rng(3);
    Tape t;
    JointHierarchy h;
    h.parents = {-1, 0, 1, 0};
    h.fingertips = {2, 3};

    std::vector<double> offs{0, 0, 0};
    for (int j = 1; j < 4; ++j) {
        offs.push_back(rng.uniform(-30, 30));
        offs.push_back(rng.uniform(-30, 30));
        offs.push_back(rng.uniform(-30, 30));
    }
    std::vector<double> verts;
    for (int v = 0; v < 40; ++v)
        for (int c = 0; c < 3; ++c) verts.push_back(rng.uniform(-40, 40));

    RefinedModelNodes refined;
    refined.offsets = t.constant(Tensor::from({4, 3}, offs));
    refined.vertices = t.constant(Tensor::from({40, 3}, verts));
    SphereChains chains = build_sphere_chains(t, refined, h, 10);

    // independent scan over every sphere/vertex pair
    std::vector<double> rest(12, 0.0);
    for (int j = 1; j < 4; ++j)
        for (int c = 0; c < 3; ++c)
            rest[static_cast<std::size_t>(3 * j + c)] =
                rest[static_cast<std::size_t>(3 * h.parents[static_cast<std::size_t>(j)] + c)] +
                offs[static_cast<std::size_t>(3 * j + c)];
    for (const SphereChain& chain : chains.chains) {
        for (int k = 0; k < 10; ++k) {
            const double s = k / 9.0;
            double ck[3];
            for (int c = 0; c < 3; ++c)
                ck[c] = (1 - s) * rest[static_cast<std::size_t>(3 * chain.parent_joint + c)] +
                        s * rest[static_cast<std::size_t>(3 * chain.child_joint + c)];
            double best = 1e300;
            for (int v = 0; v < 40; ++v) {
                double d2 = 0;
                for (int c = 0; c < 3; ++c) {
                    const double d = verts[static_cast<std::size_t>(3 * v + c)] - ck[c];
                    d2 += d * d;
                }
                best = std::min(best, std::sqrt(d2));
            }
            CHECK(t.value(chain.radii)[static_cast<std::size_t>(k)] == doctest::Approx(best).epsilon(1e-12));
        }
    }
}

TEST_CASE("posing chains") {
    Tape t;
    JointHierarchy h;
    h.parents = {-1, 0};
    h.fingertips = {1};
    RefinedModelNodes refined;
    refined.offsets = t.constant(Tensor::from({2, 3}, {0, 0, 0, 0, 9, 0}));
    refined.vertices = t.constant(Tensor::from({2, 3}, {0.5, 0, 0, 0, 9, 0.5}));
    SphereChains chains = build_sphere_chains(t, refined, h, 10);

    SUBCASE("zero pose leaves centers at rest") {
        FkNodes fk = forward_kinematics(t, t.constant(Tensor::zeros({6})),
                                        refined.offsets, h);
        pose_sphere_chains(t, chains, fk);
        const Tensor& rest = t.value(chains.chains[0].centers_rest);
        const Tensor& posed = t.value(chains.chains[0].centers_posed);
        for (std::size_t i = 0; i < rest.numel(); ++i) CHECK(posed[i] == doctest::Approx(rest[i]).epsilon(1e-14));
    }

    SUBCASE("posed centers match a manual transform evaluation") {
        Rng rng(5);
        std::vector<double> theta(6);
        for (auto& v : theta) v = rng.uniform(-1.5, 1.5);
        FkNodes fk = forward_kinematics(t, t.constant(Tensor::from({6}, theta)), refined.offsets, h);
        pose_sphere_chains(t, chains, fk);

        const JointTransforms jt = forward_kinematics(theta, t.value(refined.offsets), h);
        const Tensor& rest = t.value(chains.chains[0].centers_rest);
        const Tensor& posed = t.value(chains.chains[0].centers_posed);
        for (std::size_t k = 0; k < 10; ++k) {
            const Vec3 c{rest.at(k, 0), rest.at(k, 1), rest.at(k, 2)};
            const Vec3 expect = jt.rot[1] * c + jt.trans[1];
            CHECK(std::fabs(posed.at(k, 0) - expect.x) < 1e-12);
            CHECK(std::fabs(posed.at(k, 1) - expect.y) < 1e-12);
            CHECK(std::fabs(posed.at(k, 2) - expect.z) < 1e-12);
        }
        // radii are untouched by posing
        CHECK(t.value(chains.chains[0].radii)[0] == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("rigid penetration arithmetic and exclusions") {
    Tape t;

    SUBCASE("two overlapping spheres on disjoint bones contribute r+r'-d") {
        SphereChains chains = make_chains(t, {{0, 1}, {2, 3}},
                                          {{{0, 0, 0}}, {{1.5, 0, 0}}},
                                          {{1.0}, {1.0}});
        chains.spheres_per_bone = 1;
        CHECK(t.scalar(rigid_penetration(t, chains)) == doctest::Approx(0.5).epsilon(1e-12));
    }

    SUBCASE("separated spheres contribute zero") {
        SphereChains chains = make_chains(t, {{0, 1}, {2, 3}},
                                          {{{0, 0, 0}}, {{5, 0, 0}}},
                                          {{1.0}, {1.0}});
        chains.spheres_per_bone = 1;
        CHECK(t.scalar(rigid_penetration(t, chains)) == 0.0);
    }

    SUBCASE("bones sharing a joint are excluded even when overlapping") {
        // parent-child bones (0,1) and (1,2): heavily overlapping near joint 1
        SphereChains a = make_chains(t, {{0, 1}, {1, 2}},
                                     {{{0, 0, 0}}, {{0.1, 0, 0}}},
                                     {{1.0}, {1.0}});
        a.spheres_per_bone = 1;
        CHECK(t.scalar(rigid_penetration(t, a)) == 0.0);

        // sibling bones (0,1) and (0,2) share the parent joint
        SphereChains b = make_chains(t, {{0, 1}, {0, 2}},
                                     {{{0, 0, 0}}, {{0.1, 0, 0}}},
                                     {{1.0}, {1.0}});
        b.spheres_per_bone = 1;
        CHECK(t.scalar(rigid_penetration(t, b)) == 0.0);
    }
}

TEST_CASE("rigid penetration matches brute force on random configurations") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tape t;
        const int nb = 5, K = 4;
        std::vector<std::array<int, 2>> bones{{0, 1}, {1, 2}, {0, 3}, {3, 4}, {4, 5}};
        std::vector<std::vector<std::array<double, 3>>> centers(nb);
        std::vector<std::vector<double>> radii(nb);
        oracles::SphereSet ref;
        for (int b = 0; b < nb; ++b) {
            ref.parent_joint.push_back(bones[static_cast<std::size_t>(b)][0]);
            ref.child_joint.push_back(bones[static_cast<std::size_t>(b)][1]);
            std::vector<std::array<double, 3>> cs;
            std::vector<double> rs;
            for (int k = 0; k < K; ++k) {
                cs.push_back({rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-4, 4)});
                rs.push_back(rng.uniform(0.2, 2.0));
            }
            centers[static_cast<std::size_t>(b)] = cs;
            radii[static_cast<std::size_t>(b)] = rs;
            ref.centers.push_back(cs);
            ref.radii.push_back(rs);
        }
        SphereChains chains = make_chains(t, bones, centers, radii);
        const double got = t.scalar(rigid_penetration(t, chains));
        const double want = oracles::rigid_penetration_brute(ref);
        CHECK(std::fabs(got - want) < 1e-10);
        CHECK(got >= 0.0);
    }
}

TEST_CASE("nonrigid penetration follows the onset rule") {
    JointHierarchy h;
    h.parents = {-1, 0};
    h.fingertips = {1};
    h.palm_joint = 0;

    SUBCASE("no sphere inside its radius gives zero") {
        Tape t;
        std::vector<std::array<double, 3>> cs;
        for (int k = 0; k < 10; ++k) cs.push_back({10.0 * k, 0, 0});
        SphereChains chains = make_chains(t, {{0, 1}}, {cs}, {std::vector<double>(10, 0.4)});
        Value mesh = t.constant(Tensor::from({1, 3}, {0.0, 5.0, 0.0}));
        CHECK(t.scalar(nonrigid_penetration(t, chains, h, {0}, mesh)) == 0.0);
    }

    SUBCASE("constructed case sums |d-r| from the onset to the tip") {
        Tape t;
        // spheres every 10mm along x; palm vertices placed straight below
        // spheres 6..9 at controlled distances
        std::vector<std::array<double, 3>> cs;
        for (int k = 0; k < 10; ++k) cs.push_back({10.0 * k, 0, 0});
        std::vector<double> rs{0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.5, 0.5, 0.4, 0.4};
        const double d_tail[4] = {0.2, 0.1, 0.1, 0.3};
        std::vector<double> palm;
        for (int i = 0; i < 4; ++i) {
            palm.push_back(10.0 * (6 + i));
            palm.push_back(-d_tail[i]);
            palm.push_back(0.0);
        }
        SphereChains chains = make_chains(t, {{0, 1}}, {cs}, {rs});
        Value mesh = t.constant(Tensor::from({4, 3}, palm));
        const double got = t.scalar(nonrigid_penetration(t, chains, h, {0, 1, 2, 3}, mesh));
        CHECK(got == doctest::Approx(1.1).epsilon(1e-12));
    }

    SUBCASE("with two penetration onsets the parent-closest one wins") {
        Tape t;
        std::vector<std::array<double, 3>> cs;
        for (int k = 0; k < 7; ++k) cs.push_back({10.0 * k, 0, 0});
        // spheres 2 and 5 penetrate; onset must be 2, so spheres 2..6 contribute
        std::vector<double> rs{0.4, 0.4, 0.5, 0.4, 0.4, 0.5, 0.4};
        std::vector<double> palm;
        std::vector<double> d_below{9.0, 9.0, 0.3, 2.0, 3.0, 0.2, 4.0};
        for (int k = 0; k < 7; ++k) {
            palm.push_back(10.0 * k);
            palm.push_back(-d_below[static_cast<std::size_t>(k)]);
            palm.push_back(0.0);
        }
        SphereChains chains = make_chains(t, {{0, 1}}, {cs}, {rs});
        Value mesh = t.constant(Tensor::from({7, 3}, palm));
        const double got = t.scalar(nonrigid_penetration(t, chains, h, {0, 1, 2, 3, 4, 5, 6}, mesh));
        double want = 0;
        for (int k = 2; k < 7; ++k)
            want += std::fabs(d_below[static_cast<std::size_t>(k)] - rs[static_cast<std::size_t>(k)]);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));

        // brute-force reimplementation agrees
        std::vector<std::vector<std::array<double, 3>>> tip_centers{cs};
        std::vector<std::vector<double>> tip_radii{rs};
        std::vector<std::array<double, 3>> palm_pts;
        for (int k = 0; k < 7; ++k)
            palm_pts.push_back({palm[static_cast<std::size_t>(3 * k)], palm[static_cast<std::size_t>(3 * k + 1)],
                                palm[static_cast<std::size_t>(3 * k + 2)]});
        CHECK(std::fabs(got - oracles::nonrigid_penetration_brute(tip_centers, tip_radii, palm_pts)) < 1e-12);
    }

    SUBCASE("empty palm set raises a configuration error") {
        Tape t;
        std::vector<std::array<double, 3>> cs{{0, 0, 0}};
        SphereChains chains = make_chains(t, {{0, 1}}, {cs}, {{0.4}});
        Value mesh = t.constant(Tensor::from({1, 3}, {0.0, 5.0, 0.0}));
        CHECK_THROWS_AS(nonrigid_penetration(t, chains, h, {}, mesh), ConfigError);
    }
}

TEST_CASE("penetration_loss weighting") {
    Tape t;
    CHECK(t.scalar(penetration_loss(t, t.constant_scalar(0.0), t.constant_scalar(0.0))) == 0.0);
    CHECK(t.scalar(penetration_loss(t, t.constant_scalar(1.0), t.constant_scalar(0.2))) ==
          doctest::Approx(2.0).epsilon(1e-15));
    CHECK(t.scalar(penetration_loss(t, t.constant_scalar(0.5), t.constant_scalar(0.0))) ==
          doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("penetration gradients match finite differences away from ties") {
    Rng rng(21);

    SUBCASE("rigid") {
        // two single-sphere bones, one parameterized center, clear overlap
        std::vector<double> c0{0.0, 0.2, -0.1};
        auto loss = [&](const std::vector<double>& c) {
            Tape t;
            Param p(Tensor::from({1, 3}, c));
            SphereChains chains;
            chains.spheres_per_bone = 1;
            SphereChain a;
            a.parent_joint = 0;
            a.child_joint = 1;
            a.centers_posed = t.param(p);
            a.centers_rest = a.centers_posed;
            a.radii = t.constant(Tensor::from({1}, {1.0}));
            SphereChain b = a;
            b.parent_joint = 2;
            b.child_joint = 3;
            b.centers_posed = t.constant(Tensor::from({1, 3}, {1.4, 0, 0}));
            b.radii = t.constant(Tensor::from({1}, {0.8}));
            chains.chains = {a, b};
            Value L = rigid_penetration(t, chains);
            t.backward(L);
            return std::pair<double, Tensor>{t.scalar(L), p.grad};
        };
        const auto [val, grad] = loss(c0);
        CHECK(val > 0.1);
        auto f = [&](const std::vector<double>& c) { return loss(c).first; };
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(oracles::rel_err(grad[i], oracles::central_diff(f, c0, i), 1e-7) < 1e-3);
    }

    SUBCASE("nonrigid") {
        JointHierarchy h;
        h.parents = {-1, 0};
        h.fingertips = {1};
        std::vector<double> palm0{0.0, -0.3, 0.0, 10.0, -2.0, 0.0};
        auto loss = [&](const std::vector<double>& palm) {
            Tape t;
            Param p(Tensor::from({2, 3}, palm));
            std::vector<std::array<double, 3>> cs{{0, 0, 0}, {10, 0, 0}};
            SphereChains chains = make_chains(t, {{0, 1}}, {cs}, {{0.5, 0.5}});
            chains.spheres_per_bone = 2;
            Value L = nonrigid_penetration(t, chains, h, {0, 1}, t.param(p));
            t.backward(L);
            return std::pair<double, Tensor>{t.scalar(L), p.grad};
        };
        const auto [val, grad] = loss(palm0);
        CHECK(val > 0.05);
        auto f = [&](const std::vector<double>& c) { return loss(c).first; };
        for (std::size_t i = 0; i < 6; ++i) {
            const double fd = oracles::central_diff(f, palm0, i);
            CHECK(std::fabs(grad[i] - fd) < 1e-3 * std::max(1.0, std::fabs(fd)));
        }
    }
    (void)rng;
}

TEST_CASE("chain debug export carries posed centers and radii") {
    Tape t;
    SphereChains chains = make_chains(t, {{0, 1}}, {{{1, 2, 3}, {4, 5, 6}}}, {{0.5, 0.75}});
    const auto j = sphere_chains_json(t, chains);
    REQUIRE(j.size() == 1);
    CHECK(j[0]["child_joint"] == 1);
    CHECK(j[0]["centers"][1][2] == 6.0);
    CHECK(j[0]["radii"][0] == 0.5);
}

TEST_CASE("randomized chains match the brute-force fingertip-palm term") {
    Rng rng(31);
    JointHierarchy h;
    h.parents = {-1, 0, 1, 0};
    h.fingertips = {2, 3};
    for (int trial = 0; trial < 15; ++trial) {
        Tape t;
        const int K = 6;
        std::vector<std::vector<std::array<double, 3>>> centers(3);
        std::vector<std::vector<double>> radii(3);
        for (int b = 0; b < 3; ++b)
            for (int k = 0; k < K; ++k) {
                centers[static_cast<std::size_t>(b)].push_back(
                    {rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)});
                radii[static_cast<std::size_t>(b)].push_back(rng.uniform(0.5, 3.0));
            }
        SphereChains chains = make_chains(t, {{0, 1}, {1, 2}, {0, 3}}, centers, radii);
        std::vector<double> palm;
        const std::size_t n_palm = 12;
        for (std::size_t i = 0; i < n_palm * 3; ++i) palm.push_back(rng.uniform(-9, 9));
        Value mesh = t.constant(Tensor::from({n_palm, 3}, palm));
        std::vector<std::size_t> palm_idx(n_palm);
        for (std::size_t i = 0; i < n_palm; ++i) palm_idx[i] = i;

        const double got = t.scalar(nonrigid_penetration(t, chains, h, palm_idx, mesh));

        std::vector<std::vector<std::array<double, 3>>> tip_centers{centers[1], centers[2]};
        std::vector<std::vector<double>> tip_radii{radii[1], radii[2]};
        std::vector<std::array<double, 3>> palm_pts;
        for (std::size_t i = 0; i < n_palm; ++i)
            palm_pts.push_back({palm[3 * i], palm[3 * i + 1], palm[3 * i + 2]});
        const double want = oracles::nonrigid_penetration_brute(tip_centers, tip_radii, palm_pts);
        CHECK(std::fabs(got - want) < 1e-10);
    }
}
