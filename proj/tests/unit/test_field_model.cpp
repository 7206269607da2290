#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles/richards1d.hpp"
#include "pivotsoil/errors.hpp"
#include "pivotsoil/field_model.hpp"

using namespace pivotsoil;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

ModelOptions sealed_options() {
    ModelOptions o;
    o.bottom = BottomBoundary::Sealed;
    o.top = TopBoundary::Sealed;
    return o;
}

FieldState random_state(const CylGrid& g, std::mt19937_64& rng, double lo = -2.0, double hi = -0.5) {
    std::uniform_real_distribution<double> u(lo, hi);
    FieldState s;
    s.head.resize(Eigen::Index(g.n_nodes()));
    for (Eigen::Index i = 0; i < s.head.size(); ++i) s.head[i] = u(rng);
    return s;
}

ParameterField random_field(const CylGrid& g, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<SoilHydraulics> cols(g.n_columns());
    for (auto& p : cols) {
        p = sandy_clay_loam();
        p.k_s *= std::exp(0.3 * u(rng));
        p.alpha *= 1.0 + 0.2 * u(rng);
        p.n *= 1.0 + 0.05 * u(rng);
        p.theta_s += 0.03 * u(rng);
    }
    return ParameterField(cols);
}

// Water volume by a separate midpoint-rule quadrature over each cell.
double quadrature_volume(const CylGrid& g, const FieldState& s, const ParameterField& pf) {
    double total = 0.0;
    const double dr = g.radius_m / g.n_r;
    const double dth = g.theta_span_rad / g.n_theta;
    for (int ith = 0; ith < g.n_theta; ++ith) {
        for (int ir = 0; ir < g.n_r; ++ir) {
            const double r_in = ir * dr, r_out = (ir + 1) * dr;
            const double annulus = 0.5 * (r_out * r_out - r_in * r_in) * dth;
            for (int iz = 0; iz < g.n_z; ++iz) {
                const double z_lo = iz == 0 ? 0.0 : 0.5 * (g.z_coords[iz - 1] + g.z_coords[iz]);
                const double z_hi = iz + 1 == g.n_z ? g.depth_m : 0.5 * (g.z_coords[iz] + g.z_coords[iz + 1]);
                const double h = s.head[Eigen::Index(g.node(ir, ith, iz))];
                total += oracle::Column1D::theta(h, pf.column(g.column(ir, ith))) * annulus * (z_hi - z_lo);
            }
        }
    }
    return total;
}

}  // namespace

TEST_CASE("grid indexing and invariants") {
    const auto g = CylGrid::make(4, 6, 3, 290.0, 0.3, kTwoPi);
    CHECK(g.n_nodes() == 72);
    CHECK(g.n_params() == 120);
    CHECK(g.topology == AzimuthalTopology::Periodic);
    CHECK(g.r_coords.front() == doctest::Approx(290.0 / 8.0));
    std::vector<int> seen(g.n_nodes(), 0);
    for (int ith = 0; ith < 6; ++ith)
        for (int ir = 0; ir < 4; ++ir)
            for (int iz = 0; iz < 3; ++iz) {
                const auto n = g.node(ir, ith, iz);
                ++seen[n];
                CHECK(g.column_of_node(n) == g.column(ir, ith));
                CHECK(g.iz_of_node(n) == iz);
            }
    for (int s : seen) CHECK(s == 1);
    const auto q = CylGrid::make(3, 4, 2, 100.0, 0.6, std::numbers::pi / 2);
    CHECK(q.topology == AzimuthalTopology::Bounded);
    CHECK_THROWS_AS(CylGrid::make(3, 4, 2, 100.0, 0.6, 7.0), InvalidState);
    CHECK_THROWS_AS(CylGrid::make(3, 4, 2, 100.0, 0.6, 1.0, {0.3, 0.2}), InvalidState);
    CHECK(g.nodes_within_depth(0.05) == 1);
    CHECK(g.nodes_within_depth(0.16) == 2);
}

TEST_CASE("rhs vanishes for uniform head with sealed boundaries") {
    // A single layer removes gravity; with several layers a uniform head
    // still drains downward (see the hydrostatic case below).
    const auto g = CylGrid::make(4, 5, 1, 50.0, 0.4, kTwoPi);
    FieldModel model(g, sealed_options());
    FieldState s{Eigen::VectorXd::Constant(Eigen::Index(g.n_nodes()), -1.2)};
    const auto r = model.rhs(s, ParameterField(g.n_columns(), sandy_clay_loam()), SurfaceForcing::zero(g));
    CHECK(r.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hydrostatic profile is at rest with sealed boundaries") {
    const auto g = CylGrid::make(3, 4, 6, 30.0, 0.6, kTwoPi, {0.02, 0.1, 0.25, 0.4, 0.5, 0.57});
    FieldModel model(g, sealed_options());
    std::mt19937_64 rng(3);
    const auto pf = random_field(g, rng);
    FieldState s;
    s.head.resize(Eigen::Index(g.n_nodes()));
    // total potential h + z constant
    for (std::size_t i = 0; i < g.n_nodes(); ++i) {
        s.head[Eigen::Index(i)] = -1.5 - g.z_coords[std::size_t(g.iz_of_node(i))];
    }
    const auto r = model.rhs(s, pf, SurfaceForcing::zero(g));
    CHECK(r.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("single column rhs agrees with the 1-D reference") {
    const std::vector<double> z{0.015, 0.05, 0.1, 0.15, 0.2, 0.24, 0.27, 0.29};
    const auto g = CylGrid::make(1, 1, 8, 5.0, 0.3, kTwoPi, z);
    FieldModel model(g);
    oracle::Column1D ref;
    ref.z = z;
    ref.depth = 0.3;
    ref.p = sandy_clay_loam();
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const auto s = random_state(g, rng, -3.0, -0.2);
        auto forcing = SurfaceForcing::zero(g);
        forcing.irrigation[0] = 1e-7 * trial;
        ref.infiltration = forcing.irrigation[0];
        const auto r = model.rhs(s, ParameterField(1, ref.p), forcing);
        const auto rr = ref.rhs(std::vector<double>(s.head.data(), s.head.data() + s.head.size()));
        for (std::size_t k = 0; k < z.size(); ++k) {
            CHECK(r[Eigen::Index(k)] == doctest::Approx(rr[k]).epsilon(1e-8));
        }
    }
}

TEST_CASE("single column matches the 1-D reference over 24 h") {
    const std::vector<double> z{0.015, 0.05, 0.1, 0.15, 0.2, 0.24, 0.27, 0.29};
    const auto g = CylGrid::make(1, 1, 8, 5.0, 0.3, kTwoPi, z);
    FieldModel model(g);
    oracle::Column1D ref;
    ref.z = z;
    ref.depth = 0.3;
    ref.p = sandy_clay_loam();
    FieldState s{Eigen::VectorXd::LinSpaced(8, -1.6, -1.3)};
    std::vector<double> h(s.head.data(), s.head.data() + 8);
    const ParameterField pf(1, ref.p);
    const double dt = 360.0;
    for (int k = 0; k < 240; ++k) {
        auto forcing = SurfaceForcing::zero(g);
        // 8 h of irrigation at the start of the day
        forcing.irrigation[0] = k < 80 ? 3.6e-3 / (8 * 3600.0) : 0.0;
        ref.infiltration = forcing.irrigation[0];
        s = model.advance(s, pf, forcing, dt, false).state;
        h = ref.step(h, dt);
    }
    for (int k = 0; k < 8; ++k) CHECK(s.head[k] == doctest::Approx(h[std::size_t(k)]).epsilon(1e-6));
}

TEST_CASE("tiny time step leaves the state unchanged") {
    const auto g = CylGrid::make(3, 4, 4, 40.0, 0.3, kTwoPi);
    FieldModel model(g);
    std::mt19937_64 rng(17);
    const auto s = random_state(g, rng);
    const auto pf = random_field(g, rng);
    const auto next = model.step_implicit(s, pf, SurfaceForcing::zero(g), 1e-9).state;
    CHECK((next.head - s.head).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("sealed domain conserves water") {
    const auto g = CylGrid::make(10, 8, 5, 290.0, 0.3, kTwoPi);
    FieldModel model(g, sealed_options());
    std::mt19937_64 rng(23);
    auto s = random_state(g, rng, -3.0, -0.3);
    const auto pf = random_field(g, rng);
    const double v0 = quadrature_volume(g, s, pf);
    CHECK(model.total_water(s, pf) == doctest::Approx(v0).epsilon(1e-12));
    for (int k = 0; k < 100; ++k) s = model.advance(s, pf, SurfaceForcing::zero(g), 360.0, false).state;
    CHECK(std::abs(quadrature_volume(g, s, pf) - v0) / v0 <= 1e-6);
}

TEST_CASE("free drainage lowers the bottom head monotonically") {
    const auto g = CylGrid::make(1, 1, 10, 1.0, 0.3, kTwoPi);
    FieldModel model(g);
    FieldState s{Eigen::VectorXd::Constant(10, -1.4)};
    const ParameterField pf(1, sandy_clay_loam());
    // uniform head is locally at unit gradient, so the bottom only starts
    // to fall once the drying front from above arrives
    const double start = s.head[0];
    double prev = start;
    for (int k = 0; k < 100; ++k) {
        s = model.advance(s, pf, SurfaceForcing::zero(g), 600.0, false).state;
        CHECK(s.head[0] <= prev + 1e-12);
        prev = s.head[0];
    }
    CHECK(s.head[0] < start - 1e-6);
}

TEST_CASE("flux antisymmetry on random states") {
    const auto g = CylGrid::make(3, 5, 4, 40.0, 0.3, kTwoPi);
    std::mt19937_64 rng(31);
    for (auto mean : {InterfaceMean::Arithmetic, InterfaceMean::Harmonic}) {
        ModelOptions o;
        o.interface_mean = mean;
        FieldModel model(g, o);
        for (int t = 0; t < 5; ++t) {
            const auto s = random_state(g, rng);
            const auto pf = random_field(g, rng);
            const std::size_t a = g.node(1, 2, 1);
            for (std::size_t b : {g.node(2, 2, 1), g.node(1, 3, 1), g.node(1, 2, 2), g.node(0, 2, 1)}) {
                CHECK(model.face_flux(a, b, s, pf) == -model.face_flux(b, a, s, pf));
            }
            CHECK(model.face_flux(g.node(0, 0, 0), g.node(0, 4, 0), s, pf) ==
                  -model.face_flux(g.node(0, 4, 0), g.node(0, 0, 0), s, pf));
            CHECK_THROWS_AS(model.face_flux(a, g.node(2, 2, 2), s, pf), InvalidState);
        }
    }
}

TEST_CASE("periodic grid is equivariant under azimuthal rotation") {
    const auto g = CylGrid::make(3, 6, 4, 40.0, 0.3, kTwoPi);
    FieldModel model(g);
    std::mt19937_64 rng(41);
    const auto s = random_state(g, rng);
    const auto pf = random_field(g, rng);
    auto forcing = SurfaceForcing::zero(g);
    std::uniform_real_distribution<double> u(0.0, 1e-7);
    for (std::size_t c = 0; c < g.n_columns(); ++c) {
        forcing.irrigation[c] = u(rng);
        forcing.evaporation[c] = 0.2 * u(rng);
        forcing.transpiration[c] = 0.5 * u(rng);
    }
    forcing.root_depth_m = 0.2;

    auto rot_col = [&](std::size_t c) {
        return g.column(g.ir_of_column(c), (g.ith_of_column(c) + 1) % g.n_theta);
    };
    FieldState rs{Eigen::VectorXd(s.head.size())};
    std::vector<SoilHydraulics> rcols(g.n_columns());
    auto rf = forcing;
    for (std::size_t c = 0; c < g.n_columns(); ++c) {
        const std::size_t rc = rot_col(c);
        rcols[rc] = pf.column(c);
        rf.irrigation[rc] = forcing.irrigation[c];
        rf.evaporation[rc] = forcing.evaporation[c];
        rf.transpiration[rc] = forcing.transpiration[c];
        for (int iz = 0; iz < g.n_z; ++iz) {
            rs.head[Eigen::Index(rc * g.n_z + iz)] = s.head[Eigen::Index(c * g.n_z + iz)];
        }
    }
    const auto r = model.rhs(s, pf, forcing);
    const auto rr = model.rhs(rs, ParameterField(rcols), rf);
    for (std::size_t c = 0; c < g.n_columns(); ++c) {
        for (int iz = 0; iz < g.n_z; ++iz) {
            const double a = r[Eigen::Index(c * g.n_z + iz)];
            const double b = rr[Eigen::Index(rot_col(c) * g.n_z + iz)];
            CHECK(std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)));
        }
    }
}

TEST_CASE("observation operator") {
    const auto g = CylGrid::make(2, 3, 5, 20.0, 0.3, kTwoPi);
    FieldModel model(g);
    const auto p = sandy_clay_loam();
    const ParameterField pf(g.n_columns(), p);
    std::mt19937_64 rng(7);
    auto s = random_state(g, rng);

    SUBCASE("saturated column, one node") {
        s.head[Eigen::Index(g.surface_node(2))] = 0.1;
        CHECK(model.observe(s, pf, {2}, 1)[0] == p.theta_s);
    }
    SUBCASE("uniform column, all nodes") {
        for (int iz = 0; iz < 5; ++iz) s.head[Eigen::Index(g.node(1, 1, iz))] = -0.8;
        CHECK(model.observe(s, pf, {g.column(1, 1)}, 5)[0] == doctest::Approx(water_content(-0.8, p)).epsilon(1e-15));
    }
    SUBCASE("three-node average") {
        const std::size_t col = g.column(0, 2);
        s.head[Eigen::Index(g.node(0, 2, 4))] = -0.5;
        s.head[Eigen::Index(g.node(0, 2, 3))] = -1.0;
        s.head[Eigen::Index(g.node(0, 2, 2))] = -1.5;
        CHECK(model.observe(s, pf, {col}, 3)[0] == doctest::Approx(0.33462843386919533073).epsilon(1e-12));
    }
    SUBCASE("N_c larger than the column is rejected") {
        CHECK_THROWS_AS(model.observe(s, pf, {0}, 6), InvalidState);
        CHECK_THROWS_AS(model.observe(s, pf, {99}, 1), InvalidState);
    }
    SUBCASE("unmeasured nodes do not affect the output") {
        const std::vector<std::size_t> cols{1, 4};
        const auto y = model.observe(s, pf, cols, 2);
        auto s2 = s;
        for (std::size_t i = 0; i < g.n_nodes(); ++i) {
            const auto c = g.column_of_node(i);
            const bool measured = (c == 1 || c == 4) && g.iz_of_node(i) >= 3;
            if (!measured) s2.head[Eigen::Index(i)] -= 0.7;
        }
        const auto y2 = model.observe(s2, pf, cols, 2);
        CHECK(y[0] == y2[0]);
        CHECK(y[1] == y2[1]);
    }
}

TEST_CASE("observation Jacobian matches finite differences") {
    const auto g = CylGrid::make(2, 3, 4, 20.0, 0.3, kTwoPi);
    FieldModel model(g);
    std::mt19937_64 rng(8);
    const auto s = random_state(g, rng);
    const auto pf = random_field(g, rng);
    const std::vector<std::size_t> cols{0, 3, 5};
    const auto jac = model.observe_jacobian(s, pf, cols, 2);
    const Eigen::MatrixXd dh(jac.d_head), dp(jac.d_param);
    for (std::size_t i = 0; i < g.n_nodes(); ++i) {
        const double e = 1e-6;
        auto sp = s, sm = s;
        sp.head[Eigen::Index(i)] += e;
        sm.head[Eigen::Index(i)] -= e;
        const Eigen::VectorXd fd = (model.observe(sp, pf, cols, 2) - model.observe(sm, pf, cols, 2)) / (2 * e);
        for (Eigen::Index r = 0; r < fd.size(); ++r) CHECK(dh(r, Eigen::Index(i)) == doctest::Approx(fd[r]).epsilon(1e-6).scale(1e-3));
    }
    for (std::size_t j = 0; j < g.n_params(); ++j) {
        const double v = pf.get(j), e = 1e-6 * v;
        auto pp = pf, pm = pf;
        pp.set(j, v + e);
        pm.set(j, v - e);
        const Eigen::VectorXd fd = (model.observe(s, pp, cols, 2) - model.observe(s, pm, cols, 2)) / (2 * e);
        for (Eigen::Index r = 0; r < fd.size(); ++r) CHECK(dp(r, Eigen::Index(j)) == doctest::Approx(fd[r]).epsilon(1e-5).scale(1e-3));
    }
}

TEST_CASE("root uptake distribution") {
    const auto g = CylGrid::make(1, 1, 6, 1.0, 0.3, kTwoPi);
    FieldState s{Eigen::VectorXd::Constant(6, -1.0)};
    CHECK(sink_field(s, g, 0.0, 0.2).cwiseAbs().maxCoeff() == 0.0);
    const double et = 4e-8;
    const auto sink = sink_field(s, g, et, 0.1);  // top two 5 cm layers
    CHECK(sink[5] == doctest::Approx(et / (2 * 0.05)));
    CHECK(sink[4] == doctest::Approx(et / (2 * 0.05)));
    CHECK(sink.head(4).cwiseAbs().maxCoeff() == 0.0);
    FieldState wilt{Eigen::VectorXd::Constant(6, -150.0)};
    CHECK(sink_field(wilt, g, et, 0.1).cwiseAbs().maxCoeff() == 0.0);
    // column integral never exceeds the demand
    std::mt19937_64 rng(2);
    const auto rs = random_state(g, rng, -10.0, -0.05);
    double integral = 0.0;
    for (int k = 0; k < 6; ++k) integral += sink_field(rs, g, et, 0.17)[k] * 0.05;
    CHECK(integral <= et * (1 + 1e-12));
}

TEST_CASE("root uptake inside the model removes the demanded volume") {
    const auto g = CylGrid::make(1, 1, 6, 1.0, 0.3, kTwoPi);
    ModelOptions o = sealed_options();
    FieldModel model(g, o);
    FieldState s{Eigen::VectorXd::Constant(6, -1.0)};
    for (int k = 0; k < 6; ++k) s.head[k] -= 0.3 - g.z_coords[std::size_t(k)];
    const ParameterField pf(1, sandy_clay_loam());
    auto forcing = SurfaceForcing::zero(g);
    forcing.transpiration[0] = 2e-8;
    forcing.root_depth_m = 0.15;
    const double v0 = model.total_water(s, pf);
    const auto next = model.step_implicit(s, pf, forcing, 600.0).state;
    const double area = g.column_area(0);
    CHECK((v0 - model.total_water(next, pf)) / area == doctest::Approx(2e-8 * 600.0).epsilon(1e-6));
}

TEST_CASE("Newton failure is reported") {
    const auto g = CylGrid::make(2, 2, 4, 10.0, 0.3, kTwoPi);
    ModelOptions o;
    o.newton.max_iterations = 1;
    o.newton.max_halvings = 0;
    FieldModel model(g, o);
    std::mt19937_64 rng(1);
    const auto s = random_state(g, rng, -5.0, -0.1);
    auto forcing = SurfaceForcing::zero(g);
    for (auto& v : forcing.irrigation) v = 1e-5;
    CHECK_THROWS_AS(model.step_implicit(s, ParameterField(g.n_columns(), sandy_clay_loam()), forcing, 3600.0),
                    NonConvergence);
    FieldState bad = s;
    bad.head[0] = std::nan("");
    CHECK_THROWS_AS(model.rhs(bad, ParameterField(g.n_columns(), sandy_clay_loam()), forcing), InvalidState);
    CHECK_THROWS_AS(model.step_implicit(s, ParameterField(g.n_columns(), sandy_clay_loam()), forcing, 0.0),
                    InvalidState);
}

TEST_CASE("step halving splits a hard step into sub-steps") {
    const auto g = CylGrid::make(1, 1, 6, 1.0, 0.3, kTwoPi);
    ModelOptions o;
    o.newton.max_iterations = 3;
    FieldModel model(g, o);
    FieldState s{Eigen::VectorXd::Constant(6, -20.0)};
    auto forcing = SurfaceForcing::zero(g);
    forcing.irrigation[0] = 2e-5;
    const auto r = model.advance(s, ParameterField(1, sandy_clay_loam()), forcing, 7200.0, true);
    CHECK(r.substeps > 1);
    CHECK(r.linearizations.size() == std::size_t(r.substeps));
}

TEST_CASE("step linearization matches finite differences") {
    const auto g = CylGrid::make(2, 3, 3, 15.0, 0.3, kTwoPi);
    FieldModel model(g);
    std::mt19937_64 rng(4);
    const auto s = random_state(g, rng);
    const auto pf = random_field(g, rng);
    auto forcing = SurfaceForcing::zero(g);
    forcing.irrigation[1] = 3e-7;
    forcing.transpiration[2] = 5e-8;
    forcing.root_depth_m = 0.2;
    ModelOptions tight;
    tight.newton.tolerance = 1e-13;
    FieldModel fine(g, tight);
    const double dt = 600.0;
    const auto adv = fine.advance(s, pf, forcing, dt, true);
    REQUIRE(adv.linearizations.size() == 1);
    const auto& lin = adv.linearizations[0];
    const Eigen::MatrixXd a = lin.apply_state(Eigen::MatrixXd::Identity(Eigen::Index(g.n_nodes()), Eigen::Index(g.n_nodes())));
    for (std::size_t i = 0; i < g.n_nodes(); i += 3) {
        const double e = 1e-6;
        auto sp = s, sm = s;
        sp.head[Eigen::Index(i)] += e;
        sm.head[Eigen::Index(i)] -= e;
        const Eigen::VectorXd fd = (fine.step_implicit(sp, pf, forcing, dt).state.head -
                                    fine.step_implicit(sm, pf, forcing, dt).state.head) / (2 * e);
        const double scale = fd.cwiseAbs().maxCoeff();
        for (Eigen::Index r = 0; r < fd.size(); ++r) CHECK(std::abs(a(r, Eigen::Index(i)) - fd[r]) <= 1e-5 * scale);
    }
    const Eigen::MatrixXd b = lin.apply(Eigen::MatrixXd::Zero(Eigen::Index(g.n_nodes()), Eigen::Index(g.n_params())),
                                        Eigen::MatrixXd::Identity(Eigen::Index(g.n_params()), Eigen::Index(g.n_params())));
    for (std::size_t j = 0; j < g.n_params(); ++j) {
        const double v = pf.get(j), e = 1e-6 * v;
        auto pp = pf, pm = pf;
        pp.set(j, v + e);
        pm.set(j, v - e);
        const Eigen::VectorXd fd = (fine.step_implicit(s, pp, forcing, dt).state.head -
                                    fine.step_implicit(s, pm, forcing, dt).state.head) / (2 * e);
        const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
        for (Eigen::Index r = 0; r < fd.size(); ++r) {
            CHECK(std::abs(b(r, Eigen::Index(j)) - fd[r]) <= 1e-4 * scale);
        }
    }
}
