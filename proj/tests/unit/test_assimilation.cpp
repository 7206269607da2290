#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "pivotsoil/assimilation.hpp"
#include "pivotsoil/errors.hpp"

using namespace pivotsoil;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Textbook Kalman recursion, written out independently of the library.
struct PlainKF {
    Eigen::MatrixXd a, c, q, r;
    Eigen::VectorXd x;
    Eigen::MatrixXd p;

    void step(const Eigen::VectorXd& y) {
        x = a * x;
        p = a * p * a.transpose() + q;
        const Eigen::MatrixXd s = c * p * c.transpose() + r;
        const Eigen::MatrixXd k = p * c.transpose() * s.inverse();
        x = x + k * (y - c * x);
        p = (Eigen::MatrixXd::Identity(p.rows(), p.cols()) - k * c) * p;
        p = 0.5 * (p + p.transpose()).eval();
    }
};

ExtendedKalmanFilter linear_filter(const Eigen::MatrixXd& a, const Eigen::MatrixXd& c, const Eigen::MatrixXd& q,
                                   const Eigen::MatrixXd& r) {
    return ExtendedKalmanFilter([a](const Eigen::VectorXd& x) { return Eigen::VectorXd(a * x); },
                                [a](const Eigen::VectorXd&) { return a; },
                                [c](const Eigen::VectorXd& x) { return Eigen::VectorXd(c * x); },
                                [c](const Eigen::VectorXd&) { return c; }, q, r);
}

ParameterField varied_field(const CylGrid& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<SoilHydraulics> cols(g.n_columns(), sandy_clay_loam());
    for (auto& p : cols) {
        p.k_s *= std::exp(0.2 * u(rng));
        p.alpha *= 1.0 + 0.1 * u(rng);
        p.n *= 1.0 + 0.03 * u(rng);
    }
    return ParameterField(cols);
}

EstimableSet sector_params(const CylGrid& g, const std::vector<int>& sectors) {
    std::map<int, std::vector<std::size_t>> sel;
    for (int s : sectors) {
        for (std::size_t c : g.sector_columns(s)) {
            for (std::size_t k = 0; k < kParamKinds; ++k) sel[s].push_back(ParameterField::param_index(c, ParamKind(k)));
        }
    }
    return assemble_estimable(sel, g.n_params());
}

FieldState random_state(const CylGrid& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.5, -1.35);
    FieldState s{Eigen::VectorXd(Eigen::Index(g.n_nodes()))};
    for (auto& v : s.head) v = u(rng);
    return s;
}

SurfaceForcing test_forcing(const CylGrid& g) {
    auto f = SurfaceForcing::zero(g);
    for (std::size_t c : g.sector_columns(1)) f.irrigation[c] = 1.25e-7;
    for (auto& v : f.evaporation) v = 5e-9;
    for (auto& v : f.transpiration) v = 1e-8;
    f.root_depth_m = 0.2;
    return f;
}

}  // namespace

TEST_CASE("scalar filter matches the hand recursion") {
    const double a = 0.95, q = 0.01, r = 0.04;
    const auto ekf = linear_filter(Eigen::MatrixXd::Constant(1, 1, a), Eigen::MatrixXd::Identity(1, 1),
                                   Eigen::MatrixXd::Constant(1, 1, q), Eigen::MatrixXd::Constant(1, 1, r));
    Belief b{Eigen::VectorXd::Constant(1, 2.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    double x = 2.0, p = 1.0;
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 50; ++k) {
        const double y = nd(rng);
        x = a * x;
        p = a * a * p + q;
        const double gain = p / (p + r);
        x += gain * (y - x);
        p *= 1.0 - gain;
        b = ekf.update(ekf.predict(b), Eigen::VectorXd::Constant(1, y));
        CHECK(std::abs(b.x[0] - x) < 1e-12);
        CHECK(std::abs(b.p(0, 0) - p) < 1e-12);
    }
}

TEST_CASE("three-state linear-Gaussian system matches the Kalman recursion over 200 steps") {
    Eigen::MatrixXd a(3, 3), c(2, 3);
    a << 0.9, 0.1, 0.0, -0.05, 0.95, 0.02, 0.0, 0.03, 0.97;
    c << 1.0, 0.0, 0.5, 0.0, 1.0, -0.3;
    const Eigen::MatrixXd q = Eigen::Vector3d(0.01, 0.02, 0.005).asDiagonal();
    const Eigen::MatrixXd r = Eigen::Vector2d(0.1, 0.05).asDiagonal();
    const auto ekf = linear_filter(a, c, q, r);
    PlainKF ref{a, c, q, r, Eigen::Vector3d(1.0, -1.0, 0.5), Eigen::Matrix3d::Identity() * 2.0};
    Belief b{ref.x, ref.p};
    std::mt19937_64 rng(77);
    std::normal_distribution<double> nd;
    Eigen::Vector3d truth(0.3, 0.2, -0.4);
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
        truth = a * truth + Eigen::Vector3d(nd(rng) * 0.1, nd(rng) * 0.14, nd(rng) * 0.07);
        const Eigen::VectorXd y = c * truth + Eigen::Vector2d(nd(rng) * 0.3, nd(rng) * 0.2);
        ref.step(y);
        b = ekf.update(ekf.predict(b), y);
        worst = std::max({worst, (b.x - ref.x).cwiseAbs().maxCoeff(), (b.p - ref.p).cwiseAbs().maxCoeff()});
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("zero process noise propagates P as A P A^T") {
    Eigen::MatrixXd a(2, 2);
    a << 1.0, 0.1, 0.0, 1.0;
    Eigen::MatrixXd p0(2, 2);
    p0 << 2.0, 0.3, 0.3, 1.0;
    const Belief b = kf_predict({Eigen::Vector2d(0, 0), p0}, Eigen::Vector2d(0, 0), a, Eigen::MatrixXd::Zero(2, 2));
    CHECK((b.p - a * p0 * a.transpose()).norm() < 1e-15);
}

TEST_CASE("update limits") {
    const Eigen::MatrixXd p0 = Eigen::Vector3d(1.0, 2.0, 0.5).asDiagonal();
    const Belief prior{Eigen::Vector3d(0.1, 0.2, 0.3), p0};
    const Eigen::MatrixXd c = Eigen::MatrixXd::Identity(3, 3);
    const Eigen::Vector3d y(1.0, -1.0, 2.0);

    SUBCASE("huge R keeps the prediction") {
        const auto post = kf_update(prior, y - prior.x, c, Eigen::MatrixXd::Identity(3, 3) * 1e12);
        for (int i = 0; i < 3; ++i) {
            CHECK(post.x[i] == doctest::Approx(prior.x[i]).epsilon(1e-6));
            CHECK(post.p(i, i) == doctest::Approx(prior.p(i, i)).epsilon(1e-6));
        }
    }
    SUBCASE("perfect measurement recovers the state") {
        const Belief wide{prior.x, p0 * 1e4};
        const auto post = kf_update(wide, y - wide.x, c, Eigen::MatrixXd::Identity(3, 3) * 1e-12);
        CHECK((post.x - y).cwiseAbs().maxCoeff() < 1e-9);
    }
    SUBCASE("Joseph form agrees on a well-conditioned update") {
        UpdateStats st;
        kf_update(prior, (y - prior.x).head(2), c.topRows(2), Eigen::MatrixXd::Identity(2, 2) * 0.3, {}, &st);
        CHECK(st.joseph_rel_diff < 1e-8);
        CHECK(st.measurements == 2);
    }
    SUBCASE("gate drops outliers") {
        UpdateStats st;
        Eigen::Vector3d nu(0.1, 50.0, -0.2);
        const auto post = kf_update(prior, nu, c, Eigen::MatrixXd::Identity(3, 3) * 0.1, {9.0}, &st);
        CHECK(st.gated == 1);
        CHECK(st.measurements == 2);
        CHECK(post.p(1, 1) == prior.p(1, 1));
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(kf_update(prior, Eigen::Vector2d(0, 0), c, Eigen::MatrixXd::Identity(3, 3)), InvalidState);
    }
}

TEST_CASE("transition and measurement Jacobians match central differences") {
    const auto g = CylGrid::make(3, 4, 4, 30.0, 0.3, kTwoPi);  // 48 nodes
    ModelOptions o;
    o.newton.tolerance = 1e-14;
    FieldModel model(g, o);
    const auto truth = varied_field(g, 3);
    const auto est = sector_params(g, {1, 2});
    FilterOptions fo;
    fo.kriging_refresh = false;
    AugmentedFilter filter(model, est, truth, random_state(g, 5), fo);
    filter.activate_sector(1);
    const auto forcing = test_forcing(g);
    const double dt = 360.0;

    const Eigen::MatrixXd a = filter.transition_jacobian(forcing, dt);
    const Eigen::VectorXd x0 = filter.belief().x;
    const auto nx = Eigen::Index(g.n_nodes());
    const Eigen::Index n = x0.size();
    auto f = [&](const Eigen::VectorXd& x) {
        const auto pf = filter.parameters_at(x);
        return model.advance(FieldState{x.head(nx)}, pf, forcing, dt, false).state.head;
    };
    const auto& mask = filter.belief().active_mask;
    for (Eigen::Index j = 0; j < n; ++j) {
        const bool param = j >= nx;
        if (param && !mask[std::size_t(j - nx)]) {
            // inactive parameter: identity row, zero column
            CHECK(a.col(j).head(nx).cwiseAbs().maxCoeff() == 0.0);
            CHECK(a(j, j) == 1.0);
            continue;
        }
        const double e = param ? 1e-6 * std::max(1.0, std::abs(x0[j])) : 1e-6;
        Eigen::VectorXd xp = x0, xm = x0;
        xp[j] += e;
        xm[j] -= e;
        const Eigen::VectorXd fd = (f(xp) - f(xm)) / (2 * e);
        const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
        CAPTURE(j);
        CHECK((a.col(j).head(nx) - fd).cwiseAbs().maxCoeff() <= 1e-5 * scale);
    }
    CHECK((a.bottomRightCorner(n - nx, n - nx) - Eigen::MatrixXd::Identity(n - nx, n - nx)).norm() == 0.0);

    MeasurementBatch batch;
    batch.node_columns = g.sector_columns(1);
    batch.n_c = 2;
    batch.sector = 1;
    batch.values = Eigen::VectorXd::Zero(Eigen::Index(batch.node_columns.size()));
    const Eigen::MatrixXd c = filter.measurement_jacobian(batch);
    auto h = [&](const Eigen::VectorXd& x) {
        return model.observe(FieldState{x.head(nx)}, filter.parameters_at(x), batch.node_columns, batch.n_c);
    };
    for (Eigen::Index j = 0; j < n; ++j) {
        if (j >= nx && !mask[std::size_t(j - nx)]) {
            CHECK(c.col(j).cwiseAbs().maxCoeff() == 0.0);
            continue;
        }
        const double e = 1e-6 * std::max(1.0, std::abs(x0[j]));
        Eigen::VectorXd xp = x0, xm = x0;
        xp[j] += e;
        xm[j] -= e;
        const Eigen::VectorXd fd = (h(xp) - h(xm)) / (2 * e);
        const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
        CHECK((c.col(j) - fd).cwiseAbs().maxCoeff() <= 1e-5 * scale);
    }
}

TEST_CASE("structured covariance prediction equals dense A P A^T + Q") {
    const auto g = CylGrid::make(2, 4, 3, 20.0, 0.3, kTwoPi);
    FieldModel model(g);
    const auto est = sector_params(g, {0, 1, 3});
    FilterOptions fo;
    fo.kriging_refresh = false;
    fo.noise.q_head = 1e-6;
    fo.noise.q_param = {1e-4, 1e-6, 1e-6, 1e-4, 1e-5};
    AugmentedFilter filter(model, est, varied_field(g, 8), random_state(g, 2), fo);
    const auto forcing = test_forcing(g);

    // build a dense, correlated prior by running a couple of steps first
    for (int s : {0, 1}) {
        filter.activate_sector(s);
        filter.predict(forcing, 600.0);
        MeasurementBatch b;
        b.node_columns = g.sector_columns(s);
        b.n_c = 1;
        b.sector = s;
        b.values = filter.measurement(b).array() + 0.01;
        filter.update(b);
    }
    filter.activate_sector(3);
    const Eigen::MatrixXd a = filter.transition_jacobian(forcing, 600.0);
    const Eigen::MatrixXd p0 = filter.belief().p;
    filter.predict(forcing, 600.0);
    Eigen::MatrixXd expect = a * p0 * a.transpose();
    const auto nx = Eigen::Index(g.n_nodes());
    expect.diagonal().head(nx).array() += 1e-6;
    for (std::size_t j = 0; j < filter.n_estimable(); ++j) {
        if (filter.belief().active_mask[j]) {
            const auto kind = ParameterField::kind_of_param(est.estimable[j]);
            expect(nx + Eigen::Index(j), nx + Eigen::Index(j)) += fo.noise.q_param[std::size_t(kind)];
        }
    }
    CHECK((filter.belief().p - expect).cwiseAbs().maxCoeff() <= 1e-12 * expect.cwiseAbs().maxCoeff());
}

TEST_CASE("run loop: masking, symmetry and open-loop behaviour") {
    const auto g = CylGrid::make(3, 6, 4, 40.0, 0.3, kTwoPi);
    FieldModel model(g);
    const auto truth = varied_field(g, 21);
    ParameterField guess(g.n_columns(), sandy_clay_loam());
    const auto est = sector_params(g, {0, 1, 2, 3, 4, 5});
    FilterOptions fo;
    const auto forcing = test_forcing(g);

    SUBCASE("zero batches leave the parameters untouched") {
        AugmentedFilter filter(model, est, guess, random_state(g, 4), fo);
        const Eigen::VectorXd v0 = filter.estimable_values();
        std::vector<StepInput> steps(5);
        for (std::size_t k = 0; k < steps.size(); ++k) steps[k] = {600.0 * double(k + 1), 600.0, forcing, std::nullopt};
        const auto run = run_assimilation(filter, steps);
        CHECK(run.failures == 0);
        CHECK(filter.estimable_values() == v0);
    }
    SUBCASE("sectors never measured keep value and variance bit for bit") {
        AugmentedFilter filter(model, est, guess, random_state(g, 4), fo);
        const Eigen::VectorXd v0 = filter.belief().x;
        const Eigen::MatrixXd p0 = filter.belief().p;
        FieldState t = random_state(g, 9);
        std::vector<StepInput> steps;
        for (int k = 0; k < 8; ++k) {
            t = model.advance(t, truth, forcing, 600.0, false).state;
            const int sector = k % 2 == 0 ? 0 : 2;
            auto b = synthesize_measurements(model, t, truth, g.sector_columns(sector), 1, 0.005, 100 + k);
            b.sector = sector;
            steps.push_back({600.0 * (k + 1), 600.0, forcing, b});
        }
        RunOptions ro;
        int checked = 0;
        ro.observer = [&](const AugmentedFilter& f, const StepRecord&) {
            const auto& p = f.belief().p;
            CHECK((p - p.transpose()).cwiseAbs().maxCoeff() == 0.0);
            CHECK(p.diagonal().minCoeff() >= 0.0);
            ++checked;
        };
        const auto run = run_assimilation(filter, steps, ro);
        CHECK(checked == 8);
        CHECK(run.failures == 0);
        const auto nx = Eigen::Index(g.n_nodes());
        const auto& x = filter.belief().x;
        const auto& p = filter.belief().p;
        bool moved = false;
        for (std::size_t j = 0; j < filter.n_estimable(); ++j) {
            const auto col = ParameterField::column_of_param(est.estimable[j]);
            const int sec = g.ith_of_column(col);
            const auto i = nx + Eigen::Index(j);
            if (sec == 0 || sec == 2) {
                moved = moved || x[i] != v0[i];
            } else {
                CHECK(x[i] == v0[i]);
                CHECK(p(i, i) == p0(i, i));
                CHECK(p.row(i).head(nx).cwiseAbs().maxCoeff() == 0.0);
            }
        }
        CHECK(moved);
    }
    SUBCASE("unvisited sectors take kriged values and keep their variance") {
        fo.krige_unvisited = true;
        fo.kriging.min_samples = 5;
        AugmentedFilter filter(model, est, guess, random_state(g, 4), fo);
        const Eigen::VectorXd v0 = filter.belief().x;
        const Eigen::MatrixXd p0 = filter.belief().p;
        FieldState t = random_state(g, 9);
        std::vector<StepInput> steps;
        for (int k = 0; k < 8; ++k) {
            t = model.advance(t, truth, forcing, 600.0, false).state;
            const int sector = k % 2 == 0 ? 0 : 2;
            auto b = synthesize_measurements(model, t, truth, g.sector_columns(sector), 1, 0.005, 100 + k);
            b.sector = sector;
            steps.push_back({600.0 * (k + 1), 600.0, forcing, b});
        }
        run_assimilation(filter, steps);
        const auto nx = Eigen::Index(g.n_nodes());
        const auto& x = filter.belief().x;
        const auto& p = filter.belief().p;
        std::array<double, kParamKinds> lo, hi;
        lo.fill(1e300);
        hi.fill(-1e300);
        for (std::size_t j = 0; j < filter.n_estimable(); ++j) {
            const auto g_idx = est.estimable[j];
            const int sec = g.ith_of_column(ParameterField::column_of_param(g_idx));
            if (sec != 0 && sec != 2) continue;
            const auto k = std::size_t(ParameterField::kind_of_param(g_idx));
            lo[k] = std::min(lo[k], x[nx + Eigen::Index(j)]);
            hi[k] = std::max(hi[k], x[nx + Eigen::Index(j)]);
        }
        int moved = 0;
        for (std::size_t j = 0; j < filter.n_estimable(); ++j) {
            const auto g_idx = est.estimable[j];
            const int sec = g.ith_of_column(ParameterField::column_of_param(g_idx));
            if (sec == 0 || sec == 2) continue;
            const auto i = nx + Eigen::Index(j);
            const auto k = std::size_t(ParameterField::kind_of_param(g_idx));
            const double spread = hi[k] - lo[k];
            if (x[i] != v0[i]) ++moved;
            CHECK(x[i] >= lo[k] - spread);
            CHECK(x[i] <= hi[k] + spread);
            CHECK(p(i, i) == p0(i, i));
            CHECK(p.row(i).head(nx).cwiseAbs().maxCoeff() == 0.0);
        }
        CHECK(moved > 0);
    }
}

TEST_CASE("estimated K_s moves toward truth") {
    const auto g = CylGrid::make(3, 4, 5, 30.0, 0.3, kTwoPi);
    FieldModel model(g);
    const ParameterField truth(g.n_columns(), sandy_clay_loam());
    SoilHydraulics off = sandy_clay_loam();
    off.k_s *= 1.25;
    const ParameterField guess(g.n_columns(), off);
    const auto est = sector_params(g, {0, 1, 2, 3});
    FilterOptions fo;
    fo.mask_by_sector = false;
    fo.noise.p0_head = 1e-3;
    fo.noise.q_head = 1e-10;
    fo.noise.r = 1e-6;
    FieldState t = random_state(g, 30);
    AugmentedFilter filter(model, est, guess, t, fo);
    auto forcing = SurfaceForcing::zero(g);
    for (auto& v : forcing.irrigation) v = 1e-7;
    std::vector<StepInput> steps;
    std::vector<std::size_t> all_cols(g.n_columns());
    for (std::size_t c = 0; c < all_cols.size(); ++c) all_cols[c] = c;
    for (int k = 0; k < 60; ++k) {
        t = model.advance(t, truth, forcing, 600.0, false).state;
        auto b = synthesize_measurements(model, t, truth, all_cols, 1, 0.0, 1);
        steps.push_back({600.0 * (k + 1), 600.0, forcing, b});
    }
    run_assimilation(filter, steps);
    const auto pf = filter.parameters();
    double err = 0.0;
    for (std::size_t c = 0; c < g.n_columns(); ++c) err += std::abs(pf.column(c).k_s / truth.column(c).k_s - 1.0);
    err /= double(g.n_columns());
    CHECK(err < 0.25);
    MESSAGE("mean relative K_s error " << err);
}
