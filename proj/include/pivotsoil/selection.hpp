/**
 * @file selection.hpp
 * @brief Greedy orthogonal-projection ranking of estimable parameters and
 *        assembly of the estimable / non-estimable split.
 */

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <vector>

#include <Eigen/Dense>

namespace pivotsoil {

struct SelectionResult {
    std::vector<std::size_t> selected;      ///< column indices in pick order
    bool stopped_by_cutoff = false;         ///< residual fell below cutoff before rank_target
    std::vector<double> max_residual_norm;  ///< before each pick (entry 0 is the largest raw norm)
    std::vector<double> gram_condition;     ///< cond(X^T X) after each pick
};

/// Picks the largest-norm column, then repeatedly the column whose residual
/// after projecting S onto the picked columns is largest. Stops at
/// rank_target picks or when the largest residual norm drops below cutoff
/// (non-positive cutoff selects 1e-8 times the largest raw column norm).
/// Ties go to the lowest column index.
SelectionResult orthogonal_projection_select(const Eigen::MatrixXd& s_tilde, int rank_target,
                                             double cutoff = 0.0);

struct EstimableSet {
    std::size_t n_params = 0;
    std::map<int, std::vector<std::size_t>> per_sector;  ///< sector -> global parameter indices
    std::vector<std::size_t> estimable;                  ///< sorted union
    std::vector<std::size_t> nonestimable;               ///< sorted complement

    bool is_estimable(std::size_t param) const;
    /// Position of a global parameter index inside the estimable vector, or -1.
    long position(std::size_t param) const;
    /// Positions (into `estimable`) of the parameters selected for a sector.
    std::vector<std::size_t> sector_positions(int sector) const;
};

EstimableSet assemble_estimable(const std::map<int, std::vector<std::size_t>>& per_sector,
                                std::size_t n_params);

/// Text format: a `# n_params N` line, then `sector,param_index,column,kind` rows.
void write_estimable(const std::filesystem::path& path, const EstimableSet& set);
EstimableSet read_estimable(const std::filesystem::path& path);

}  // namespace pivotsoil
