/**
 * @file hydraulics.hpp
 * @brief Mualem-van Genuchten soil hydraulic functions.
 *
 *   theta(h) = theta_r + (theta_s - theta_r) Se(h),  Se = [1 + (-alpha h)^n]^-(1 - 1/n)
 *   K(h)     = K_s Se^1/2 [1 - (1 - Se^(1/m))^m]^2,   m = 1 - 1/n
 *   C(h)     = d theta / dh for h < 0, S_r for h >= 0
 *
 * For h >= 0 the soil is saturated: theta = theta_s, K = K_s, C = S_r.
 * Evaluation uses log1p/expm1 forms so that the dry tail keeps full
 * relative precision.
 */

#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace pivotsoil {

/// The five estimable hydraulic parameter kinds, in the order used by the
/// global parameter vector (K_s, theta_s, theta_r, alpha, n per surface node).
enum class ParamKind : int { Ks = 0, ThetaS = 1, ThetaR = 2, Alpha = 3, N = 4 };

inline constexpr std::size_t kParamKinds = 5;

std::string_view param_kind_name(ParamKind kind);
ParamKind param_kind_from_index(std::size_t k);

struct SoilHydraulics {
    double theta_s = 0.410;   ///< m3/m3
    double theta_r = 0.090;   ///< m3/m3
    double k_s = 7.222e-7;    ///< m/s
    double alpha = 1.90;      ///< 1/m
    double n = 1.31;          ///< -
    double s_r = 1e-4;        ///< 1/m, specific storage

    /// Throws InvalidState when an invariant is violated.
    void validate() const;
    bool is_valid() const noexcept;

    double get(ParamKind kind) const noexcept;
    void set(ParamKind kind, double value) noexcept;
};

/// Physical box applied to parameter estimates. K_s is bounded as well so
/// that its log-space estimate cannot run away.
struct ParameterBounds {
    double k_s_min = 1e-9, k_s_max = 1e-4;          ///< m/s
    double theta_s_min = 0.30, theta_s_max = 0.55;
    double theta_r_min = 0.01, theta_r_max = 0.15;
    double alpha_min = 0.5, alpha_max = 15.0;       ///< 1/m
    double n_min = 1.05, n_max = 3.0;

    double lower(ParamKind kind) const noexcept;
    double upper(ParamKind kind) const noexcept;
    double clamp(ParamKind kind, double value) const noexcept;
    void clamp(SoilHydraulics& p) const noexcept;
    void validate() const;
};

/// Sandy clay loam (Carsel and Parrish), the dominant soil of the test field.
SoilHydraulics sandy_clay_loam();

double water_content(double h, const SoilHydraulics& p) noexcept;
double conductivity(double h, const SoilHydraulics& p) noexcept;
double capacity(double h, const SoilHydraulics& p) noexcept;

/// Effective saturation Se(h) in [0, 1].
double effective_saturation(double h, const SoilHydraulics& p) noexcept;

/// Partial derivatives of theta, K and C at one (h, p) point. Parameter
/// gradients are indexed by ParamKind.
struct HydraulicDerivatives {
    double theta = 0.0;
    double k = 0.0;
    double c = 0.0;
    double dtheta_dh = 0.0;  ///< zero on the saturated branch (C carries S_r there)
    double dk_dh = 0.0;
    double dc_dh = 0.0;
    std::array<double, kParamKinds> dtheta_dp{};
    std::array<double, kParamKinds> dk_dp{};
    std::array<double, kParamKinds> dc_dp{};
};

HydraulicDerivatives hydraulic_derivatives(double h, const SoilHydraulics& p) noexcept;

}  // namespace pivotsoil
