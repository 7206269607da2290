#include "pivotsoil/hydraulics.hpp"

#include <algorithm>
#include <cmath>

#include "pivotsoil/errors.hpp"

namespace pivotsoil {

namespace {

constexpr std::size_t idx(ParamKind k) { return static_cast<std::size_t>(k); }

// Shared intermediates of the unsaturated branch (h < 0).
struct VgTerms {
    double m;         // 1 - 1/n
    double log_ah;    // ln(-alpha h)
    double u;         // (-alpha h)^n
    double log1pu;    // ln(1 + u)
    double se;        // (1 + u)^-m
    double vm;        // (u / (1 + u))^m
    double b;         // 1 - vm
    double log_v;     // ln(u / (1 + u))
};

VgTerms vg_terms(double h, const SoilHydraulics& p) noexcept {
    VgTerms t{};
    t.m = 1.0 - 1.0 / p.n;
    t.log_ah = std::log(-p.alpha * h);
    t.u = std::exp(p.n * t.log_ah);
    t.log1pu = std::log1p(t.u);
    t.se = std::exp(-t.m * t.log1pu);
    // ln(u/(1+u)) = -ln(1 + 1/u) = ln(u) - ln(1+u); the first form loses
    // nothing in the dry tail where u is large.
    t.log_v = t.u > 1.0 ? -std::log1p(1.0 / t.u) : p.n * t.log_ah - t.log1pu;
    t.vm = std::exp(t.m * t.log_v);
    t.b = -std::expm1(t.m * t.log_v);
    return t;
}

}  // namespace

std::string_view param_kind_name(ParamKind kind) {
    switch (kind) {
        case ParamKind::Ks: return "Ks";
        case ParamKind::ThetaS: return "theta_s";
        case ParamKind::ThetaR: return "theta_r";
        case ParamKind::Alpha: return "alpha";
        case ParamKind::N: return "n";
    }
    return "?";
}

ParamKind param_kind_from_index(std::size_t k) {
    if (k >= kParamKinds) throw InvalidState("parameter kind index out of range");
    return static_cast<ParamKind>(k);
}

double ParameterBounds::lower(ParamKind kind) const noexcept {
    switch (kind) {
        case ParamKind::Ks: return k_s_min;
        case ParamKind::ThetaS: return theta_s_min;
        case ParamKind::ThetaR: return theta_r_min;
        case ParamKind::Alpha: return alpha_min;
        case ParamKind::N: return n_min;
    }
    return 0.0;
}

double ParameterBounds::upper(ParamKind kind) const noexcept {
    switch (kind) {
        case ParamKind::Ks: return k_s_max;
        case ParamKind::ThetaS: return theta_s_max;
        case ParamKind::ThetaR: return theta_r_max;
        case ParamKind::Alpha: return alpha_max;
        case ParamKind::N: return n_max;
    }
    return 0.0;
}

double ParameterBounds::clamp(ParamKind kind, double value) const noexcept {
    if (std::isnan(value)) return lower(kind);
    return std::clamp(value, lower(kind), upper(kind));
}

void ParameterBounds::clamp(SoilHydraulics& p) const noexcept {
    for (std::size_t k = 0; k < kParamKinds; ++k) {
        const auto kind = static_cast<ParamKind>(k);
        p.set(kind, clamp(kind, p.get(kind)));
    }
}

void ParameterBounds::validate() const {
    for (std::size_t k = 0; k < kParamKinds; ++k) {
        const auto kind = static_cast<ParamKind>(k);
        if (!(lower(kind) < upper(kind))) throw InvalidState("parameter bounds must satisfy lower < upper");
    }
    if (!(k_s_min > 0.0)) throw InvalidState("K_s lower bound must be positive");
    if (!(theta_r_max < theta_s_min)) throw InvalidState("theta_r bounds must lie below theta_s bounds");
    if (!(n_min > 1.0) || !(alpha_min > 0.0) || theta_r_min < 0.0 || theta_s_max > 1.0) {
        throw InvalidState("parameter bounds leave the physical range");
    }
}

bool SoilHydraulics::is_valid() const noexcept {
    return std::isfinite(theta_s) && std::isfinite(theta_r) && std::isfinite(k_s) &&
           std::isfinite(alpha) && std::isfinite(n) && std::isfinite(s_r) && theta_r >= 0.0 &&
           theta_r < theta_s && theta_s <= 1.0 && k_s > 0.0 && alpha > 0.0 && n > 1.0 &&
           s_r > 0.0;
}

void SoilHydraulics::validate() const {
    if (!is_valid()) {
        throw InvalidState("invalid soil hydraulic parameters (need 0 <= theta_r < theta_s <= 1, "
                           "k_s > 0, alpha > 0, n > 1, s_r > 0)");
    }
}

double SoilHydraulics::get(ParamKind kind) const noexcept {
    switch (kind) {
        case ParamKind::Ks: return k_s;
        case ParamKind::ThetaS: return theta_s;
        case ParamKind::ThetaR: return theta_r;
        case ParamKind::Alpha: return alpha;
        case ParamKind::N: return n;
    }
    return 0.0;
}

void SoilHydraulics::set(ParamKind kind, double value) noexcept {
    switch (kind) {
        case ParamKind::Ks: k_s = value; break;
        case ParamKind::ThetaS: theta_s = value; break;
        case ParamKind::ThetaR: theta_r = value; break;
        case ParamKind::Alpha: alpha = value; break;
        case ParamKind::N: n = value; break;
    }
}

SoilHydraulics sandy_clay_loam() {
    return SoilHydraulics{0.410, 0.090, 7.222e-7, 1.90, 1.31, 1e-4};
}

double effective_saturation(double h, const SoilHydraulics& p) noexcept {
    if (h >= 0.0) return 1.0;
    return vg_terms(h, p).se;
}

double water_content(double h, const SoilHydraulics& p) noexcept {
    if (h >= 0.0) return p.theta_s;
    return p.theta_r + (p.theta_s - p.theta_r) * vg_terms(h, p).se;
}

double conductivity(double h, const SoilHydraulics& p) noexcept {
    if (h >= 0.0) return p.k_s;
    const VgTerms t = vg_terms(h, p);
    return p.k_s * std::sqrt(t.se) * t.b * t.b;
}

double capacity(double h, const SoilHydraulics& p) noexcept {
    if (h >= 0.0) return p.s_r;
    const VgTerms t = vg_terms(h, p);
    return (p.theta_s - p.theta_r) * t.m * p.n * t.u * t.se / ((1.0 + t.u) * (-h));
}

HydraulicDerivatives hydraulic_derivatives(double h, const SoilHydraulics& p) noexcept {
    HydraulicDerivatives d;
    if (h >= 0.0) {
        d.theta = p.theta_s;
        d.k = p.k_s;
        d.c = p.s_r;
        d.dtheta_dp[idx(ParamKind::ThetaS)] = 1.0;
        d.dk_dp[idx(ParamKind::Ks)] = 1.0;
        return d;
    }

    const VgTerms t = vg_terms(h, p);
    const double n = p.n;
    const double m = t.m;
    const double u = t.u;
    const double dm_dn = 1.0 / (n * n);
    const double dtheta = p.theta_s - p.theta_r;

    // Se
    const double dse_du = -m * t.se / (1.0 + u);
    const double se_h = dse_du * n * u / h;
    const double se_a = dse_du * n * u / p.alpha;
    const double se_n = dse_du * u * t.log_ah - t.se * t.log1pu * dm_dn;

    d.theta = p.theta_r + dtheta * t.se;
    d.dtheta_dh = dtheta * se_h;
    d.dtheta_dp[idx(ParamKind::ThetaS)] = t.se;
    d.dtheta_dp[idx(ParamKind::ThetaR)] = 1.0 - t.se;
    d.dtheta_dp[idx(ParamKind::Alpha)] = dtheta * se_a;
    d.dtheta_dp[idx(ParamKind::N)] = dtheta * se_n;

    // K = Ks sqrt(Se) B^2
    const double sqrt_se = std::sqrt(t.se);
    const double db_du = -m * t.vm / (u * (1.0 + u));
    const double db_dm = -t.vm * t.log_v;
    const double b_h = db_du * n * u / h;
    const double b_a = db_du * n * u / p.alpha;
    const double b_n = db_du * u * t.log_ah + db_dm * dm_dn;
    const double b2 = t.b * t.b;
    auto dk = [&](double se_x, double b_x) {
        return p.k_s * (0.5 * se_x / sqrt_se * b2 + sqrt_se * 2.0 * t.b * b_x);
    };
    d.k = p.k_s * sqrt_se * b2;
    d.dk_dh = dk(se_h, b_h);
    d.dk_dp[idx(ParamKind::Ks)] = sqrt_se * b2;
    d.dk_dp[idx(ParamKind::Alpha)] = dk(se_a, b_a);
    d.dk_dp[idx(ParamKind::N)] = dk(se_n, b_n);

    // C = (theta_s - theta_r) g,  g = m n u Se / ((1+u)(-h))
    const double g = m * n * u * t.se / ((1.0 + u) * (-h));
    const double u_dlng_du = 1.0 - (1.0 + m) * u / (1.0 + u);  // u * d ln g / du
    d.c = dtheta * g;
    d.dc_dh = dtheta * g * (n * u_dlng_du / h - 1.0 / h);
    d.dc_dp[idx(ParamKind::ThetaS)] = g;
    d.dc_dp[idx(ParamKind::ThetaR)] = -g;
    d.dc_dp[idx(ParamKind::Alpha)] = dtheta * g * n * u_dlng_du / p.alpha;
    d.dc_dp[idx(ParamKind::N)] =
        dtheta * g * (dm_dn / m + 1.0 / n + u_dlng_du * t.log_ah - t.log1pu * dm_dn);
    return d;
}

}  // namespace pivotsoil
