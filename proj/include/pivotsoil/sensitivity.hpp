/**
 * @file sensitivity.hpp
 * @brief Forward parameter sensitivities, scaled output sensitivity matrices
 *        grouped by sector, and SVD rank diagnosis.
 *
 * The sensitivity x_phi = dx/dphi is carried through the same backward-Euler
 * linearization as the state: x_phi+ = J^{-1}(D x_phi + B), reusing the
 * factorized Newton Jacobian of each (sub-)step.
 */

#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "pivotsoil/field_model.hpp"
#include "pivotsoil/pivot_sensor.hpp"

namespace pivotsoil {

struct SensitivityState {
    Eigen::MatrixXd x_phi;  ///< N_x x N_s, columns follow param_indices
    /// Global parameter indices carried; empty means all N_p in order.
    std::vector<std::size_t> param_indices;
    std::size_t time_index = 0;

    static SensitivityState zero(const CylGrid& grid, std::vector<std::size_t> param_indices = {});
    std::size_t n_carried(const CylGrid& grid) const {
        return param_indices.empty() ? grid.n_params() : param_indices.size();
    }
};

/// Columns `indices` of a sparse matrix (all columns when empty).
SparseMatrix select_columns(const SparseMatrix& m, const std::vector<std::size_t>& indices);

/// Applies the recorded step linearizations in order.
SensitivityState propagate_sensitivity(const SensitivityState& sens,
                                       const std::vector<StepLinearization>& steps);

struct PropagationResult {
    FieldState state;
    SensitivityState sens;
};

/// Advances the state by dt and carries the sensitivities along.
PropagationResult propagate_sensitivity(const FieldModel& model, const FieldState& state,
                                        const SensitivityState& sens, const ParameterField& params,
                                        const SurfaceForcing& forcing, double dt);

/// dy/dphi = dH/dx x_phi + dH/dphi for the measured columns (N_y x N_s).
Eigen::MatrixXd output_sensitivity(const FieldModel& model, const SensitivityState& sens,
                                   const FieldState& state, const ParameterField& params,
                                   const std::vector<std::size_t>& node_columns, int n_c);

/// Element (i, j) multiplied by phi_j / y_i. Throws DegenerateScaling when
/// some |y_i| < 1e-9.
Eigen::MatrixXd scale_sensitivity(const Eigen::MatrixXd& s_y, const Eigen::VectorXd& phi,
                                  const Eigen::VectorXd& y);

struct SectorSensitivity {
    int sector_id = -1;
    std::vector<std::size_t> node_columns;  ///< fixed by the first batch
    Eigen::MatrixXd rows;
    std::vector<std::size_t> provenance;    ///< time index of every row

    std::size_t n_rows() const { return std::size_t(rows.rows()); }
};

/// Appends the rows of one scaled batch. Throws SectorMismatch when the
/// batch measured a different node set.
void accumulate(SectorSensitivity& store, const MeasurementBatch& batch, const Eigen::MatrixXd& s_tilde);

struct RankResult {
    Eigen::VectorXd singular_values;  ///< descending
    int rank = 0;
    double gap_decades = 0.0;  ///< log10 gap at the chosen rank; 0 when the fallback decided
    bool from_gap = false;
};

/// Numerical rank from the largest log10 gap of at least gap_decades between
/// consecutive singular values. Values below max(rows, cols) eps sigma_1 are
/// treated as that floor. Without a qualifying gap the rank counts
/// sigma_i > fallback_rel * sigma_1.
RankResult rank_analysis(const Eigen::MatrixXd& s_tilde, double gap_decades = 3.0,
                         double fallback_rel = 1e-10);

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);
void write_spectrum_csv(const std::filesystem::path& path, const Eigen::VectorXd& sigma);

}  // namespace pivotsoil
