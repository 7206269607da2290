/**
 * @file kriging.hpp
 * @brief Ordinary kriging of surface parameter fields.
 *
 * Variograms are isotropic in the horizontal plane:
 *   exponential  g(d) = c0 + c1 (1 - exp(-d/a))
 *   spherical    g(d) = c0 + c1 (1.5 d/a - 0.5 (d/a)^3) for d < a, c0 + c1 beyond
 *   gaussian     g(d) = c0 + c1 (1 - exp(-(d/a)^2))
 * with c0 the nugget, c0 + c1 the sill and g(0) = 0.
 */

#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "pivotsoil/field_model.hpp"
#include "pivotsoil/hydraulics.hpp"

namespace pivotsoil {

enum class VariogramKind { Exponential, Spherical, Gaussian };

std::string_view variogram_kind_name(VariogramKind kind);
VariogramKind variogram_kind_from_name(std::string_view name);

struct VariogramModel {
    VariogramKind kind = VariogramKind::Exponential;
    double nugget = 0.0;
    double sill = 1.0;
    double range_m = 1.0;

    double gamma(double d) const noexcept;
    void validate() const;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

double distance(const Point2& a, const Point2& b) noexcept;

struct VariogramFit {
    VariogramModel model;
    bool fallback = false;
};

/// Bins pair semivariances over [0, half the largest pair distance] and fits
/// the chosen family by weighted least squares (weights N_h / g_h^2), with
/// a log-spaced grid search over the range. Degenerate data fall back to an
/// exponential model with nugget 0, sill = sample variance and range =
/// default_range_m. Throws TooFewSamples below 5 samples.
VariogramFit fit_variogram(const std::vector<Point2>& locations, const Eigen::VectorXd& values,
                           int n_bins, VariogramKind kind, double default_range_m);

/// Factorised ordinary-kriging system for a fixed sample set; the weights
/// are shared by every quantity sampled at the same locations.
class KrigingSystem {
public:
    /// Throws SingularSystem on duplicate locations or a singular matrix.
    KrigingSystem(std::vector<Point2> samples, const VariogramModel& model);

    std::size_t size() const { return samples_.size(); }

    struct Weights {
        Eigen::VectorXd w;
        double lagrange = 0.0;
        double variance = 0.0;
    };
    Weights weights(const Point2& query) const;

private:
    std::vector<Point2> samples_;
    VariogramModel model_;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

struct KrigingResult {
    Eigen::VectorXd values;
    Eigen::VectorXd variance;
};

KrigingResult krige(const std::vector<Point2>& samples, const Eigen::VectorXd& values,
                    const VariogramModel& model, const std::vector<Point2>& queries);

/// Inverse-distance weighting, exact at sample points.
Eigen::VectorXd idw(const std::vector<Point2>& samples, const Eigen::VectorXd& values,
                    const std::vector<Point2>& queries, double power = 2.0);

struct KrigingOptions {
    VariogramKind kind = VariogramKind::Exponential;
    int n_bins = 6;
    int min_samples = 5;
    /// Fallback range; non-positive selects a third of the field radius.
    double default_range_m = 0.0;
    ParameterBounds bounds;
};

struct KrigingUpdateReport {
    bool skipped = false;
    int idw_fallbacks = 0;
    int variogram_fallbacks = 0;
};

/// Surface location of a column in the horizontal plane.
Point2 column_location(const CylGrid& grid, std::size_t column);

/// Replaces the parameters listed in `targets` by values kriged from the
/// parameters listed in `samples` (global parameter indices), one kind at a
/// time with K_s in log space. Nothing changes while fewer than
/// options.min_samples distinct columns are sampled. Results are clamped.
ParameterField update_nonestimable(const ParameterField& field, const CylGrid& grid,
                                   const std::vector<std::size_t>& samples,
                                   const std::vector<std::size_t>& targets,
                                   const KrigingOptions& options,
                                   KrigingUpdateReport* report = nullptr);

}  // namespace pivotsoil
