#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "pivotsoil/errors.hpp"
#include "pivotsoil/kriging.hpp"

using namespace pivotsoil;

namespace {

std::vector<Point2> random_points(std::mt19937_64& rng, int n, double size) {
    std::uniform_real_distribution<double> u(0.0, size);
    std::vector<Point2> p(static_cast<std::size_t>(n));
    for (auto& q : p) q = {u(rng), u(rng)};
    return p;
}

// Gauss-Jordan elimination with partial pivoting in long double.
std::vector<long double> dense_solve(std::vector<std::vector<long double>> a, std::vector<long double> b) {
    const std::size_t n = b.size();
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r) {
            if (std::fabs(a[r][c]) > std::fabs(a[piv][c])) piv = r;
        }
        std::swap(a[c], a[piv]);
        std::swap(b[c], b[piv]);
        for (std::size_t r = 0; r < n; ++r) {
            if (r == c) continue;
            const long double f = a[r][c] / a[c][c];
            for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
            b[r] -= f * b[c];
        }
    }
    for (std::size_t c = 0; c < n; ++c) b[c] /= a[c][c];
    return b;
}

}  // namespace

TEST_CASE("variogram shapes") {
    VariogramModel m{VariogramKind::Spherical, 0.1, 1.1, 10.0};
    CHECK(m.gamma(0.0) == 0.0);
    CHECK(m.gamma(1e-9) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(m.gamma(10.0) == doctest::Approx(1.1));
    CHECK(m.gamma(50.0) == doctest::Approx(1.1));
    CHECK(m.gamma(5.0) == doctest::Approx(0.1 + 1.0 * (0.75 - 0.0625)));
    m.kind = VariogramKind::Exponential;
    CHECK(m.gamma(10.0) == doctest::Approx(0.1 + (1.0 - std::exp(-1.0))));
    m.kind = VariogramKind::Gaussian;
    CHECK(m.gamma(20.0) == doctest::Approx(0.1 + (1.0 - std::exp(-4.0))));
    CHECK_THROWS_AS((VariogramModel{VariogramKind::Exponential, 2.0, 1.0, 1.0}.validate()), InvalidState);
    CHECK(variogram_kind_from_name("gaussian") == VariogramKind::Gaussian);
    CHECK_THROWS_AS(variogram_kind_from_name("cubic"), ConfigError);
}

TEST_CASE("kriging reproduces samples with zero nugget") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    for (auto kind : {VariogramKind::Exponential, VariogramKind::Spherical, VariogramKind::Gaussian}) {
        const auto pts = random_points(rng, 12, 50.0);
        Eigen::VectorXd v(12);
        for (auto& x : v) x = nd(rng);
        const VariogramModel m{kind, 0.0, 1.0, kind == VariogramKind::Gaussian ? 6.0 : 20.0};
        const auto r = krige(pts, v, m, pts);
        for (int i = 0; i < 12; ++i) {
            CHECK(std::abs(r.values[i] - v[i]) < 1e-8);
            CHECK(r.variance[i] < 1e-8);
        }
    }
}

TEST_CASE("weights sum to one and variance is non-negative") {
    std::mt19937_64 rng(11);
    const auto pts = random_points(rng, 15, 100.0);
    const KrigingSystem sys(pts, {VariogramKind::Exponential, 0.05, 1.0, 25.0});
    for (const auto& q : random_points(rng, 40, 120.0)) {
        const auto w = sys.weights(q);
        CHECK(std::abs(w.w.sum() - 1.0) < 1e-10);
        CHECK(w.variance >= 0.0);
    }
}

TEST_CASE("constant samples give a constant prediction") {
    std::mt19937_64 rng(12);
    const auto pts = random_points(rng, 8, 30.0);
    const Eigen::VectorXd v = Eigen::VectorXd::Constant(8, 0.37);
    const auto fit = fit_variogram(pts, v, 4, VariogramKind::Exponential, 10.0);
    CHECK(fit.fallback);
    const auto r = krige(pts, v, fit.model, random_points(rng, 10, 30.0));
    for (int i = 0; i < 10; ++i) CHECK(r.values[i] == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("weights match a dense direct solve") {
    const std::vector<Point2> pts = {{0.0, 0.0}, {10.0, 1.0}, {3.0, 8.0}, {12.0, 9.0}};
    const Point2 q{6.0, 4.0};
    for (auto kind : {VariogramKind::Exponential, VariogramKind::Spherical, VariogramKind::Gaussian}) {
        const VariogramModel m{kind, 0.2, 1.5, 9.0};
        std::vector<std::vector<long double>> a(5, std::vector<long double>(5, 0.0L));
        std::vector<long double> b(5, 1.0L);
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) {
                a[i][j] = i == j ? 0.0L : m.gamma(std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y));
            }
            a[i][4] = a[4][i] = 1.0L;
            b[i] = m.gamma(std::hypot(q.x - pts[i].x, q.y - pts[i].y));
        }
        const auto sol = dense_solve(a, b);
        const auto w = KrigingSystem(pts, m).weights(q);
        for (int i = 0; i < 4; ++i) CHECK(std::abs(w.w[i] - double(sol[i])) < 1e-10);
        CHECK(std::abs(w.lagrange - double(sol[4])) < 1e-10);
    }
}

TEST_CASE("duplicate locations are singular and IDW takes over") {
    const std::vector<Point2> pts = {{0, 0}, {1, 0}, {1, 0}, {0, 1}};
    const Eigen::VectorXd v = Eigen::Vector4d(1.0, 2.0, 2.0, 3.0);
    CHECK_THROWS_AS(krige(pts, v, VariogramModel{}, {{0.5, 0.5}}), SingularSystem);
    const auto r = idw(pts, v, {{0, 0}, {0, 1}, {0.5, 0.5}});
    CHECK(r[0] == 1.0);
    CHECK(r[1] == 3.0);
    CHECK(r[2] == doctest::Approx(2.0));
}

TEST_CASE("variogram fitting fallbacks") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    const auto pts = random_points(rng, 20, 40.0);
    Eigen::VectorXd v(20);
    for (auto& x : v) x = nd(rng);
    const auto one_bin = fit_variogram(pts, v, 1, VariogramKind::Spherical, 7.0);
    CHECK(one_bin.fallback);
    CHECK(one_bin.model.kind == VariogramKind::Exponential);
    CHECK(one_bin.model.nugget == 0.0);
    CHECK(one_bin.model.range_m == 7.0);
    const double var = (v.array() - v.mean()).square().sum() / 19.0;
    CHECK(one_bin.model.sill == doctest::Approx(var));
    CHECK_THROWS_AS(fit_variogram({{0, 0}, {1, 1}, {2, 2}, {3, 3}}, Eigen::Vector4d(1, 2, 3, 4), 3,
                                  VariogramKind::Exponential, 1.0),
                    TooFewSamples);
}

TEST_CASE("recovers the range of a simulated exponential field") {
    // 50 replicates of a zero-nugget exponential Gaussian field; the fitted
    // range averaged over replicates lands within 30% of the truth
    const double true_range = 12.0;
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> nd;
    const int n = 150;
    double sum = 0.0;
    int fallbacks = 0;
    for (int rep = 0; rep < 50; ++rep) {
        const auto pts = random_points(rng, n, 100.0);
        Eigen::MatrixXd c(n, n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) c(i, j) = std::exp(-distance(pts[std::size_t(i)], pts[std::size_t(j)]) / true_range);
        }
        const Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(c).matrixL();
        Eigen::VectorXd z(n);
        for (auto& x : z) x = nd(rng);
        const Eigen::VectorXd field = l * z;
        const auto fit = fit_variogram(pts, field, 12, VariogramKind::Exponential, 30.0);
        fallbacks += fit.fallback;
        sum += fit.model.range_m;
    }
    const double mean = sum / 50.0;
    CHECK(fallbacks == 0);
    CHECK(std::abs(mean - true_range) < 0.3 * true_range);
}

TEST_CASE("update_nonestimable") {
    const auto g = CylGrid::make(4, 6, 3, 100.0, 0.3, 2.0 * std::numbers::pi);
    KrigingOptions opt;

    SUBCASE("uniform samples give a uniform field") {
        ParameterField pf(g.n_columns(), sandy_clay_loam());
        std::vector<std::size_t> samples, targets;
        for (std::size_t c = 0; c < g.n_columns(); ++c) {
            for (std::size_t k = 0; k < kParamKinds; ++k) {
                (c % 2 ? targets : samples).push_back(ParameterField::param_index(c, ParamKind(k)));
            }
            if (c % 2) pf.column(c) = SoilHydraulics{0.45, 0.05, 2e-6, 3.0, 1.6, 1e-4};
        }
        const auto out = update_nonestimable(pf, g, samples, targets, opt);
        for (std::size_t c = 0; c < g.n_columns(); ++c) {
            for (std::size_t k = 0; k < kParamKinds; ++k) {
                CHECK(out.column(c).get(ParamKind(k)) ==
                      doctest::Approx(sandy_clay_loam().get(ParamKind(k))).epsilon(1e-10));
            }
        }
    }
    SUBCASE("no targets is a no-op") {
        ParameterField pf(g.n_columns(), sandy_clay_loam());
        pf.column(3).k_s = 3e-6;
        std::vector<std::size_t> all(g.n_params());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const auto out = update_nonestimable(pf, g, all, {}, opt);
        CHECK(out.to_vector() == pf.to_vector());
    }
    SUBCASE("fewer than five sampled columns keeps current values") {
        ParameterField pf(g.n_columns(), sandy_clay_loam());
        pf.column(10).alpha = 4.0;
        std::vector<std::size_t> samples, targets;
        for (std::size_t c = 0; c < 4; ++c) samples.push_back(ParameterField::param_index(c, ParamKind::Alpha));
        targets.push_back(ParameterField::param_index(10, ParamKind::Alpha));
        KrigingUpdateReport rep;
        const auto out = update_nonestimable(pf, g, samples, targets, opt, &rep);
        CHECK(rep.skipped);
        CHECK(out.column(10).alpha == 4.0);
    }
    SUBCASE("checkerboard truth stays within the envelope") {
        std::vector<SoilHydraulics> cols(g.n_columns());
        for (std::size_t c = 0; c < g.n_columns(); ++c) {
            const bool dark = (g.ir_of_column(c) + g.ith_of_column(c)) % 2 == 0;
            cols[c] = sandy_clay_loam();
            cols[c].k_s = dark ? 4e-7 : 1.2e-6;
            cols[c].theta_s = dark ? 0.38 : 0.44;
            cols[c].theta_r = dark ? 0.06 : 0.10;
            cols[c].alpha = dark ? 1.2 : 3.0;
            cols[c].n = dark ? 1.25 : 1.5;
        }
        const ParameterField truth(cols);
        ParameterField start(g.n_columns(), SoilHydraulics{0.5, 0.14, 5e-5, 10.0, 2.5, 1e-4});
        std::vector<std::size_t> samples, targets;
        for (std::size_t c = 0; c < g.n_columns(); ++c) {
            const bool sampled = g.ir_of_column(c) % 2 == 0;
            for (std::size_t k = 0; k < kParamKinds; ++k) {
                const auto p = ParameterField::param_index(c, ParamKind(k));
                (sampled ? samples : targets).push_back(p);
                if (sampled) start.set(p, truth.get(p));
            }
        }
        const auto out = update_nonestimable(start, g, samples, targets, opt);
        for (std::size_t p : targets) {
            const auto kind = ParameterField::kind_of_param(p);
            const double lo = std::min(cols[0].get(kind), cols[1].get(kind));
            const double hi = std::max(cols[0].get(kind), cols[1].get(kind));
            CHECK(out.get(p) >= lo * (1 - 1e-12));
            CHECK(out.get(p) <= hi * (1 + 1e-12));
        }
        for (std::size_t p : samples) CHECK(out.get(p) == truth.get(p));
    }
    SUBCASE("K_s is interpolated in log space") {
        ParameterField pf(g.n_columns(), sandy_clay_loam());
        std::vector<std::size_t> samples;
        std::vector<Point2> loc;
        std::vector<double> logk;
        for (std::size_t c = 0; c < 8; ++c) {
            pf.column(c).k_s = 1e-7 * std::pow(3.0, double(c % 5));
            samples.push_back(ParameterField::param_index(c, ParamKind::Ks));
            loc.push_back(column_location(g, c));
            logk.push_back(std::log(pf.column(c).k_s));
        }
        const std::size_t target = 15;
        const auto out = update_nonestimable(pf, g, samples, {ParameterField::param_index(target, ParamKind::Ks)}, opt);
        const Eigen::VectorXd lv = Eigen::Map<Eigen::VectorXd>(logk.data(), Eigen::Index(logk.size()));
        const auto fit = fit_variogram(loc, lv, opt.n_bins, opt.kind, g.radius_m / 3.0);
        const auto r = krige(loc, lv, fit.model, {column_location(g, target)});
        CHECK(out.column(target).k_s == doctest::Approx(std::exp(r.values[0])).epsilon(1e-12));
    }
}
