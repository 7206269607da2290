/**
 * @file assimilation.hpp
 * @brief Extended Kalman filter on the augmented state [h; Phi_e].
 *
 * The parameter block holds ln K_s instead of K_s, the other four kinds in
 * their natural units. Parameters follow a random walk. At each step only
 * the entries of Phi_e picked for the sector being measured are active;
 * inactive entries have identity rows and zero columns in A and zero
 * columns in C, so their value and variance do not change while inactive.
 */

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pivotsoil/field_model.hpp"
#include "pivotsoil/hydraulics.hpp"
#include "pivotsoil/kriging.hpp"
#include "pivotsoil/pivot_sensor.hpp"
#include "pivotsoil/selection.hpp"

namespace pivotsoil {

// ---------------------------------------------------------------- generic KF

struct Belief {
    Eigen::VectorXd x;
    Eigen::MatrixXd p;
};

struct UpdateStats {
    int measurements = 0;
    int gated = 0;                 ///< measurements dropped by the innovation gate
    double nis = 0.0;              ///< normalised innovation squared of the accepted set
    double innovation_rms = 0.0;
    double joseph_rel_diff = 0.0;  ///< |P_std - P_joseph| / |P_std|, Frobenius
    int negative_variances = 0;    ///< diagonal entries floored at zero
};

struct UpdateOptions {
    /// Drop a measurement when nu_i^2 / S_ii exceeds this; non-positive disables.
    double gate_chi2 = 0.0;
};

/// P <- (P + P^T)/2 and negative diagonal entries set to zero. Returns the
/// number of floored entries.
int symmetrize(Eigen::MatrixXd& p);

/// x <- x_pred, P <- A P A^T + Q.
Belief kf_predict(const Belief& b, const Eigen::VectorXd& x_pred, const Eigen::MatrixXd& a,
                  const Eigen::MatrixXd& q);

/// Kalman update with innovation nu = y - h(x):
///   G = P C^T (C P C^T + R)^-1,  x <- x + G nu,  P <- (I - G C) P.
Belief kf_update(const Belief& b, const Eigen::VectorXd& innovation, const Eigen::MatrixXd& c,
                 const Eigen::MatrixXd& r, const UpdateOptions& options = {},
                 UpdateStats* stats = nullptr);

/// Discrete-time EKF over user-supplied models.
class ExtendedKalmanFilter {
public:
    using StateMap = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
    using JacobianMap = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;

    ExtendedKalmanFilter(StateMap f, JacobianMap f_jac, StateMap h, JacobianMap h_jac,
                         Eigen::MatrixXd q, Eigen::MatrixXd r);

    Belief predict(const Belief& b) const;
    Belief update(const Belief& b, const Eigen::VectorXd& y, const UpdateOptions& options = {},
                  UpdateStats* stats = nullptr) const;

private:
    StateMap f_, h_;
    JacobianMap f_jac_, h_jac_;
    Eigen::MatrixXd q_, r_;
};

// ----------------------------------------------------------- soil filter

/// Variances in filter units: head in m^2, ln K_s dimensionless, theta in
/// (m3/m3)^2, alpha in 1/m^2, n dimensionless.
struct NoiseSpec {
    double q_head = 1e-12;   ///< per step
    std::array<double, kParamKinds> q_param{};  ///< per step, active entries only
    double r = 1e-4;         ///< measurement variance
    double p0_head = 0.04;
    std::array<double, kParamKinds> p0_param{0.09, 0.0025, 0.0004, 0.09, 0.01};

    void validate() const;
};

struct AugmentedBelief {
    Eigen::VectorXd x;               ///< [h; phi_e]
    Eigen::MatrixXd p;
    std::vector<bool> active_mask;   ///< per Phi_e entry, for the current step
};

struct FilterOptions {
    NoiseSpec noise;
    ParameterBounds bounds;
    UpdateOptions update;
    /// false: every Phi_e entry is active at every step.
    bool mask_by_sector = true;
    /// Krige Phi_ne from the estimated Phi_e after every update.
    bool kriging_refresh = true;
    /// Also krige Phi_e entries that have never been active, so sectors not
    /// yet visited start from the interpolated estimates.
    bool krige_unvisited = false;
    KrigingOptions kriging;
};

struct PredictStats {
    int substeps = 0;
    int newton_iterations = 0;
    int top_cap_hits = 0;
    int negative_variances = 0;
};

class AugmentedFilter {
public:
    AugmentedFilter(const FieldModel& model, EstimableSet estimable, const ParameterField& initial_params,
                    const FieldState& initial_state, FilterOptions options);

    const AugmentedBelief& belief() const { return belief_; }
    const EstimableSet& estimable() const { return estimable_; }
    std::size_t n_state() const { return n_x_; }
    std::size_t n_estimable() const { return estimable_.estimable.size(); }

    /// Marks the Phi_e entries picked for `sector` active (all entries when
    /// masking is off). sector < 0 deactivates everything.
    void activate_sector(int sector);
    void set_active(const std::vector<std::size_t>& positions);

    PredictStats predict(const SurfaceForcing& forcing, double dt);
    UpdateStats update(const MeasurementBatch& batch);

    /// Refreshes Phi_ne by kriging from the Phi_e entries that have been active.
    KrigingUpdateReport refresh_nonestimable();

    FieldState state() const;
    /// Phi_e merged into the current Phi_ne.
    ParameterField parameters() const;
    /// Phi_e in natural units (K_s, not ln K_s).
    Eigen::VectorXd estimable_values() const;

    /// Dense dF_a/dx_a at the current belief with the current mask. For
    /// checks on small grids.
    Eigen::MatrixXd transition_jacobian(const SurfaceForcing& forcing, double dt) const;
    /// Augmented measurement map and its Jacobian at the current belief.
    Eigen::VectorXd measurement(const MeasurementBatch& batch) const;
    Eigen::MatrixXd measurement_jacobian(const MeasurementBatch& batch) const;

    /// Builds the filter's parameter field for an arbitrary augmented vector.
    ParameterField parameters_at(const Eigen::VectorXd& x) const;

private:
    std::vector<std::size_t> active_positions() const;
    void clamp_parameters();

    const FieldModel* model_;
    EstimableSet estimable_;
    ParameterField nonestimable_;  ///< full field; Phi_e entries are overwritten on use
    FilterOptions options_;
    std::size_t n_x_ = 0;
    AugmentedBelief belief_;
    std::vector<bool> ever_active_;
};

// ------------------------------------------------------------- run loop

struct StepInput {
    double time_s = 0.0;  ///< end of the step
    double dt = 0.0;
    SurfaceForcing forcing;
    std::optional<MeasurementBatch> batch;
};

struct StepRecord {
    std::size_t step = 0;
    double time_s = 0.0;
    int sector = -1;
    int active = 0;
    bool failed = false;
    std::string failure;
    PredictStats predict;
    UpdateStats update;
    Eigen::VectorXd head;        ///< possibly subsampled
    Eigen::VectorXd estimable;   ///< Phi_e in natural units
};

struct RunOptions {
    int max_consecutive_failures = 5;
    /// Keep every k-th head in the records; 0 keeps none.
    int head_stride = 1;
    /// Called after every step with the filter, e.g. to score against truth.
    std::function<void(const AugmentedFilter&, const StepRecord&)> observer;
};

struct AssimilationRun {
    std::vector<StepRecord> records;
    int failures = 0;
    bool aborted = false;
};

/// For each step: activate the batch's sector, predict, update, refresh
/// Phi_ne, record. A failed step keeps the previous belief.
AssimilationRun run_assimilation(AugmentedFilter& filter, const std::vector<StepInput>& steps,
                                 const RunOptions& options = {});

void write_trajectory_csv(const std::filesystem::path& path, const AssimilationRun& run);
void write_trajectory_json(const std::filesystem::path& path, const AssimilationRun& run);

}  // namespace pivotsoil
