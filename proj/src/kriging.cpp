#include "pivotsoil/kriging.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "pivotsoil/errors.hpp"

namespace pivotsoil {

namespace {

double shape(VariogramKind kind, double t) {
    switch (kind) {
        case VariogramKind::Exponential: return -std::expm1(-t);
        case VariogramKind::Spherical: return t >= 1.0 ? 1.0 : t * (1.5 - 0.5 * t * t);
        case VariogramKind::Gaussian: return -std::expm1(-t * t);
    }
    return 0.0;
}

}  // namespace

std::string_view variogram_kind_name(VariogramKind kind) {
    switch (kind) {
        case VariogramKind::Exponential: return "exponential";
        case VariogramKind::Spherical: return "spherical";
        case VariogramKind::Gaussian: return "gaussian";
    }
    return "?";
}

VariogramKind variogram_kind_from_name(std::string_view name) {
    if (name == "exponential") return VariogramKind::Exponential;
    if (name == "spherical") return VariogramKind::Spherical;
    if (name == "gaussian") return VariogramKind::Gaussian;
    throw ConfigError("unknown variogram kind: " + std::string(name));
}

double VariogramModel::gamma(double d) const noexcept {
    if (d <= 0.0) return 0.0;
    return nugget + (sill - nugget) * shape(kind, d / range_m);
}

void VariogramModel::validate() const {
    if (!(nugget >= 0.0) || !(sill > 0.0) || !(sill >= nugget) || !(range_m > 0.0) ||
        !std::isfinite(sill) || !std::isfinite(range_m)) {
        throw InvalidState("variogram needs 0 <= nugget <= sill, sill > 0, range > 0");
    }
}

double distance(const Point2& a, const Point2& b) noexcept { return std::hypot(a.x - b.x, a.y - b.y); }

VariogramFit fit_variogram(const std::vector<Point2>& loc, const Eigen::VectorXd& v, int n_bins,
                           VariogramKind kind, double default_range_m) {
    const std::size_t n = loc.size();
    if (n != std::size_t(v.size())) throw InvalidState("sample locations and values differ in length");
    if (n < 5) throw TooFewSamples("variogram fitting needs at least 5 samples");
    const double mean = v.mean();
    const double var = (v.array() - mean).square().sum() / double(n - 1);

    double dmax = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) dmax = std::max(dmax, distance(loc[i], loc[j]));
    }
    VariogramFit fb;
    fb.fallback = true;
    fb.model.kind = VariogramKind::Exponential;
    fb.model.nugget = 0.0;
    fb.model.sill = std::max(var, 1e-12);
    fb.model.range_m = default_range_m > 0.0 ? default_range_m : std::max(dmax / 3.0, 1e-6);

    if (n_bins < 2 || !(dmax > 0.0) || var <= 1e-24 * std::max(1.0, mean * mean)) return fb;

    const double cutoff = 0.5 * dmax;
    const double width = cutoff / n_bins;
    std::vector<double> cnt(std::size_t(n_bins), 0.0), gsum(cnt), dsum(cnt);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = distance(loc[i], loc[j]);
            if (d > cutoff) continue;
            const auto b = std::min<std::size_t>(std::size_t(d / width), std::size_t(n_bins - 1));
            cnt[b] += 1.0;
            gsum[b] += 0.5 * (v[Eigen::Index(i)] - v[Eigen::Index(j)]) * (v[Eigen::Index(i)] - v[Eigen::Index(j)]);
            dsum[b] += d;
        }
    }
    std::vector<double> w, d, g;
    for (std::size_t b = 0; b < cnt.size(); ++b) {
        if (cnt[b] > 0.0 && gsum[b] > 0.0) {
            const double gb = gsum[b] / cnt[b];
            w.push_back(cnt[b] / (gb * gb));
            d.push_back(dsum[b] / cnt[b]);
            g.push_back(gb);
        }
    }
    if (w.size() < 3) return fb;

    double best_sse = std::numeric_limits<double>::infinity();
    VariogramModel best;
    best.kind = kind;
    constexpr int kGrid = 80;
    const double a_lo = 0.25 * width, a_hi = cutoff;
    for (int s = 0; s < kGrid; ++s) {
        const double a = a_lo * std::pow(a_hi / a_lo, double(s) / (kGrid - 1));
        // weighted least squares for g = c0 + c1 f
        double sw = 0, sf = 0, sff = 0, sg = 0, sfg = 0;
        std::vector<double> f(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
            f[i] = shape(kind, d[i] / a);
            sw += w[i];
            sf += w[i] * f[i];
            sff += w[i] * f[i] * f[i];
            sg += w[i] * g[i];
            sfg += w[i] * f[i] * g[i];
        }
        const double det = sw * sff - sf * sf;
        double c0 = 0.0, c1 = 0.0;
        if (det > 1e-14 * sw * sff) {
            c0 = (sff * sg - sf * sfg) / det;
            c1 = (sw * sfg - sf * sg) / det;
        }
        if (c0 < 0.0 || det <= 1e-14 * sw * sff) {
            c0 = 0.0;
            c1 = sff > 0.0 ? sfg / sff : 0.0;
        }
        if (c1 < 0.0) continue;
        double sse = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double r = g[i] - c0 - c1 * f[i];
            sse += w[i] * r * r;
        }
        if (sse < best_sse) {
            best_sse = sse;
            best.nugget = c0;
            best.sill = c0 + c1;
            best.range_m = a;
        }
    }
    if (!std::isfinite(best_sse) || !(best.sill - best.nugget > 1e-9 * var)) return fb;
    return {best, false};
}

KrigingSystem::KrigingSystem(std::vector<Point2> samples, const VariogramModel& model)
    : samples_(std::move(samples)), model_(model) {
    model_.validate();
    const auto n = Eigen::Index(samples_.size());
    if (n == 0) throw SingularSystem("kriging needs at least one sample");
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 1, n + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double dij = distance(samples_[std::size_t(i)], samples_[std::size_t(j)]);
            if (dij < 1e-9) throw SingularSystem("duplicate kriging sample locations");
            a(i, j) = a(j, i) = model_.gamma(dij) / model_.sill;
        }
        a(i, n) = a(n, i) = 1.0;
    }
    lu_.compute(a);
    const double rc = lu_.rcond();
    if (!(rc > 1e-13)) throw SingularSystem("kriging system is numerically singular");
}

KrigingSystem::Weights KrigingSystem::weights(const Point2& q) const {
    const auto n = Eigen::Index(samples_.size());
    Eigen::VectorXd b(n + 1);
    for (Eigen::Index i = 0; i < n; ++i) b[i] = model_.gamma(distance(q, samples_[std::size_t(i)])) / model_.sill;
    b[n] = 1.0;
    // the system is assembled in units of the sill, which leaves the weights unchanged
    const Eigen::VectorXd sol = lu_.solve(b);
    Weights out;
    out.w = sol.head(n);
    out.lagrange = sol[n] * model_.sill;
    out.variance = std::max(0.0, model_.sill * (out.w.dot(b.head(n)) + sol[n]));
    return out;
}

KrigingResult krige(const std::vector<Point2>& samples, const Eigen::VectorXd& values,
                    const VariogramModel& model, const std::vector<Point2>& queries) {
    if (std::size_t(values.size()) != samples.size()) throw InvalidState("sample values do not match locations");
    const KrigingSystem sys(samples, model);
    KrigingResult r;
    r.values.resize(Eigen::Index(queries.size()));
    r.variance.resize(Eigen::Index(queries.size()));
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const auto w = sys.weights(queries[q]);
        r.values[Eigen::Index(q)] = w.w.dot(values);
        r.variance[Eigen::Index(q)] = w.variance;
    }
    return r;
}

Eigen::VectorXd idw(const std::vector<Point2>& samples, const Eigen::VectorXd& values,
                    const std::vector<Point2>& queries, double power) {
    if (samples.empty() || std::size_t(values.size()) != samples.size()) {
        throw InvalidState("inverse-distance weighting needs matching nonempty samples");
    }
    Eigen::VectorXd out(Eigen::Index(queries.size()));
    for (std::size_t q = 0; q < queries.size(); ++q) {
        double sw = 0.0, sv = 0.0;
        bool exact = false;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double d = distance(queries[q], samples[i]);
            if (d < 1e-12) {
                out[Eigen::Index(q)] = values[Eigen::Index(i)];
                exact = true;
                break;
            }
            const double wi = std::pow(d, -power);
            sw += wi;
            sv += wi * values[Eigen::Index(i)];
        }
        if (!exact) out[Eigen::Index(q)] = sv / sw;
    }
    return out;
}

Point2 column_location(const CylGrid& grid, std::size_t column) {
    const double r = grid.r_coords[std::size_t(grid.ir_of_column(column))];
    const double th = grid.theta_coord(grid.ith_of_column(column));
    return {r * std::cos(th), r * std::sin(th)};
}

ParameterField update_nonestimable(const ParameterField& field, const CylGrid& grid,
                                   const std::vector<std::size_t>& samples,
                                   const std::vector<std::size_t>& targets,
                                   const KrigingOptions& options, KrigingUpdateReport* report) {
    ParameterField out = field;
    KrigingUpdateReport rep;
    const double default_range = options.default_range_m > 0.0 ? options.default_range_m : grid.radius_m / 3.0;

    for (std::size_t k = 0; k < kParamKinds; ++k) {
        const auto kind = static_cast<ParamKind>(k);
        std::set<std::size_t> scols;
        for (std::size_t p : samples) {
            if (ParameterField::kind_of_param(p) == kind) scols.insert(ParameterField::column_of_param(p));
        }
        std::vector<std::size_t> tcols;
        for (std::size_t p : targets) {
            if (ParameterField::kind_of_param(p) != kind) continue;
            const std::size_t c = ParameterField::column_of_param(p);
            if (!scols.count(c)) tcols.push_back(c);
        }
        if (tcols.empty()) continue;
        if (int(scols.size()) < std::max(options.min_samples, 5)) {
            rep.skipped = true;
            continue;
        }
        std::vector<Point2> sloc, qloc;
        Eigen::VectorXd vals(Eigen::Index(scols.size()));
        Eigen::Index i = 0;
        for (std::size_t c : scols) {
            sloc.push_back(column_location(grid, c));
            const double x = field.column(c).get(kind);
            vals[i++] = kind == ParamKind::Ks ? std::log(x) : x;
        }
        for (std::size_t c : tcols) qloc.push_back(column_location(grid, c));

        const auto fit = fit_variogram(sloc, vals, options.n_bins, options.kind, default_range);
        if (fit.fallback) ++rep.variogram_fallbacks;
        Eigen::VectorXd pred;
        try {
            pred = krige(sloc, vals, fit.model, qloc).values;
        } catch (const SingularSystem&) {
            ++rep.idw_fallbacks;
            pred = idw(sloc, vals, qloc);
        }
        for (std::size_t q = 0; q < tcols.size(); ++q) {
            double x = pred[Eigen::Index(q)];
            if (kind == ParamKind::Ks) x = std::exp(x);
            out.column(tcols[q]).set(kind, options.bounds.clamp(kind, x));
        }
    }
    if (report) *report = rep;
    return out;
}

}  // namespace pivotsoil
