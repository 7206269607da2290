/**
 * @file field_model.hpp
 * @brief Cylindrical Richards-equation field model for a center-pivot field.
 *
 * The field is discretized on an (r, theta, z) grid with nodes at cell
 * centres. z points upward: z = 0 is the bottom of the soil column and
 * z = H_z is the surface. The pressure-head state is stored column-major:
 *
 *   node(i_r, i_theta, i_z) = (i_theta * n_r + i_r) * n_z + i_z
 *
 * so the nodes of one surface column are contiguous and the surface column
 * index is i_theta * n_r + i_r. Hydraulic parameters are per surface column
 * (soil is homogeneous down each column).
 *
 * Time stepping is backward Euler in the mixed form
 *
 *   V [W(h^{k+1}) - W(h^k)] / dt = sum of face fluxes - V S(h^{k+1})
 *
 * with W(h) = theta(h) + S_r max(h, 0), so dW/dh = C(h) and the capacity
 * only ever multiplies. Newton's method solves the residual with an analytic
 * sparse Jacobian.
 */

#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <cstddef>
#include <memory>
#include <vector>

#include "pivotsoil/hydraulics.hpp"

namespace pivotsoil {

using SparseMatrix = Eigen::SparseMatrix<double>;

enum class AzimuthalTopology { Periodic, Bounded };

struct CylGrid {
    int n_r = 0;
    int n_theta = 0;
    int n_z = 0;
    double radius_m = 0.0;
    double depth_m = 0.0;
    double theta_span_rad = 0.0;
    std::vector<double> r_coords;
    std::vector<double> z_coords;
    AzimuthalTopology topology = AzimuthalTopology::Periodic;

    /// Uniform radial/azimuthal spacing. When z_nodes is empty the axial
    /// nodes are equally spaced cell centres. A span of 2 pi (within 1e-9)
    /// makes the azimuthal direction periodic.
    static CylGrid make(int n_r, int n_theta, int n_z, double radius_m, double depth_m,
                        double theta_span_rad, std::vector<double> z_nodes = {});

    void validate() const;

    std::size_t n_nodes() const { return std::size_t(n_r) * n_theta * n_z; }
    std::size_t n_columns() const { return std::size_t(n_r) * n_theta; }
    std::size_t n_params() const { return kParamKinds * n_columns(); }

    std::size_t node(int ir, int ith, int iz) const {
        return (std::size_t(ith) * n_r + ir) * n_z + iz;
    }
    std::size_t column(int ir, int ith) const { return std::size_t(ith) * n_r + ir; }
    std::size_t column_of_node(std::size_t node) const { return node / n_z; }
    int iz_of_node(std::size_t node) const { return int(node % n_z); }
    int ir_of_column(std::size_t col) const { return int(col % n_r); }
    int ith_of_column(std::size_t col) const { return int(col / n_r); }
    std::size_t surface_node(std::size_t col) const { return col * n_z + (n_z - 1); }

    double dr() const { return radius_m / n_r; }
    double dtheta() const { return theta_span_rad / n_theta; }
    double theta_coord(int ith) const { return (ith + 0.5) * dtheta(); }

    /// Axial control-volume faces (n_z + 1 values, bottom to top).
    std::vector<double> z_faces() const;
    double cell_volume(int ir, int iz) const;
    double column_area(int ir) const;

    /// Surface columns of azimuthal sector ith, ordered by radius.
    std::vector<std::size_t> sector_columns(int ith) const;

    /// Number of axial nodes whose centre lies within `depth` of the surface.
    int nodes_within_depth(double depth) const;
};

struct FieldState {
    Eigen::VectorXd head;  ///< pressure head per node, m
};

/// Per-surface-column hydraulic parameters. The global scalar parameter
/// index is column * 5 + kind (K_s, theta_s, theta_r, alpha, n).
class ParameterField {
public:
    ParameterField() = default;
    ParameterField(std::size_t n_columns, const SoilHydraulics& uniform);
    explicit ParameterField(std::vector<SoilHydraulics> columns);

    std::size_t n_columns() const { return columns_.size(); }
    std::size_t n_params() const { return kParamKinds * columns_.size(); }

    const SoilHydraulics& column(std::size_t c) const { return columns_[c]; }
    SoilHydraulics& column(std::size_t c) { return columns_[c]; }
    const std::vector<SoilHydraulics>& columns() const { return columns_; }

    static std::size_t param_index(std::size_t column, ParamKind kind) {
        return column * kParamKinds + static_cast<std::size_t>(kind);
    }
    static std::size_t column_of_param(std::size_t index) { return index / kParamKinds; }
    static ParamKind kind_of_param(std::size_t index) {
        return static_cast<ParamKind>(index % kParamKinds);
    }

    double get(std::size_t index) const;
    void set(std::size_t index, double value);

    Eigen::VectorXd to_vector() const;

    /// Soil properties do not vary down a column; always true for this type.
    bool axially_homogeneous() const { return true; }

    void validate() const;

private:
    std::vector<SoilHydraulics> columns_;
};

/// Surface fluxes and root-uptake demand for one time step.
struct SurfaceForcing {
    std::vector<double> irrigation;     ///< m/s per column, irrigation plus rain
    std::vector<double> evaporation;    ///< m/s per column, soil evaporation
    std::vector<double> transpiration;  ///< m/s per column, potential root uptake
    double root_depth_m = 0.0;

    static SurfaceForcing zero(const CylGrid& grid);
    void validate(const CylGrid& grid) const;
};

/// Feddes piecewise-linear water-stress reduction for root uptake.
struct FeddesParams {
    double h_anaerobic = -0.1;
    double h_optimal_wet = -0.25;
    double h_optimal_dry = -4.0;
    double h_wilting = -150.0;

    double stress(double h) const;
    double dstress_dh(double h) const;
};

enum class BottomBoundary { FreeDrainage, Sealed };
enum class TopBoundary { Flux, Sealed };
enum class InterfaceMean { Arithmetic, Harmonic };

struct NewtonOptions {
    double tolerance = 1e-8;     ///< infinity norm of the head increment, m
    int max_iterations = 50;
    int max_halvings = 6;        ///< dt halvings tried by advance()
    double max_increment = 5.0;  ///< per-iteration clamp on |dh|, m
};

struct ModelOptions {
    BottomBoundary bottom = BottomBoundary::FreeDrainage;
    TopBoundary top = TopBoundary::Flux;
    InterfaceMean interface_mean = InterfaceMean::Arithmetic;
    FeddesParams feddes;
    NewtonOptions newton;
    /// Cap on |u_irr - EV| / K(h_top), the imposed top head gradient.
    double top_gradient_cap = 1e3;
};

/// Linearization of one backward-Euler step around its converged solution:
///   dh_new = J^{-1} (D dh_old + B dphi),
/// with J the residual Jacobian, D = diag(V C(h_old) / dt) and
/// B = -dR/dphi (N_x x N_p, raw parameter units).
struct StepLinearization {
    std::shared_ptr<Eigen::SparseLU<SparseMatrix>> lu;
    Eigen::VectorXd storage;  ///< diagonal D
    SparseMatrix dparam;      ///< B
    double dt = 0.0;

    /// J^{-1} (D X + B_map Y). B_map must have N_x rows.
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x, const SparseMatrix& b_map,
                          const Eigen::MatrixXd& y) const;
    /// J^{-1} (D X + B Y) with Y in raw parameter space (N_p rows).
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) const;
    /// J^{-1} D X.
    Eigen::MatrixXd apply_state(const Eigen::MatrixXd& x) const;
};

struct StepResult {
    FieldState state;
    int iterations = 0;
    double last_increment = 0.0;
    int top_cap_hits = 0;
};

/// Result of advancing by one outer time step, possibly split into
/// 2^k equal backward-Euler sub-steps after Newton failures.
struct AdvanceResult {
    FieldState state;
    int substeps = 1;
    int newton_iterations = 0;
    int top_cap_hits = 0;
    std::vector<StepLinearization> linearizations;  ///< one per sub-step, in order
};

/// Sparse derivatives of an observation vector.
struct ObservationJacobian {
    SparseMatrix d_head;   ///< N_y x N_x
    SparseMatrix d_param;  ///< N_y x N_p
};

class FieldModel {
public:
    explicit FieldModel(CylGrid grid, ModelOptions options = {});

    const CylGrid& grid() const { return grid_; }
    const ModelOptions& options() const { return options_; }
    ModelOptions& options() { return options_; }

    /// dh/dt of the semi-discrete system: (face fluxes / V - S) / C(h).
    Eigen::VectorXd rhs(const FieldState& state, const ParameterField& params,
                        const SurfaceForcing& forcing) const;

    /// One backward-Euler step; throws NonConvergence.
    StepResult step_implicit(const FieldState& state, const ParameterField& params,
                             const SurfaceForcing& forcing, double dt) const;

    /// Step with dt halving on NonConvergence; optionally records the step
    /// linearizations needed for sensitivities and EKF covariance propagation.
    AdvanceResult advance(const FieldState& state, const ParameterField& params,
                          const SurfaceForcing& forcing, double dt, bool linearize) const;

    /// Mean water content of the top n_c nodes of each listed column.
    Eigen::VectorXd observe(const FieldState& state, const ParameterField& params,
                            const std::vector<std::size_t>& columns, int n_c) const;
    ObservationJacobian observe_jacobian(const FieldState& state, const ParameterField& params,
                                         const std::vector<std::size_t>& columns,
                                         int n_c) const;

    /// Total water volume sum theta(h) V, m^3.
    double total_water(const FieldState& state, const ParameterField& params) const;

    /// Flow through the shared face from node a into node b (m^3/s).
    /// Throws InvalidState if a and b are not neighbours.
    double face_flux(std::size_t a, std::size_t b, const FieldState& state,
                     const ParameterField& params) const;

    double node_volume(std::size_t node) const { return volume_[node]; }

private:
    struct Face {
        std::size_t a;
        std::size_t b;
        double geom;  ///< area / distance, m
        double dz;    ///< z_b - z_a, nonzero only for vertical faces
    };

    struct Balance;
    void flux_balance(const Eigen::VectorXd& h, const ParameterField& params,
                      const SurfaceForcing& forcing, bool with_jacobian, bool with_dparam,
                      Balance& out) const;
    std::vector<double> root_weights(double root_depth) const;
    void check_inputs(const FieldState& state, const ParameterField& params,
                      const SurfaceForcing& forcing) const;
    StepLinearization linearize(const Eigen::VectorXd& h_new, const Eigen::VectorXd& h_old,
                                const ParameterField& params, const SurfaceForcing& forcing,
                                double dt) const;
    void advance_recursive(const FieldState& state, const ParameterField& params,
                           const SurfaceForcing& forcing, double dt, int depth,
                           bool linearize, AdvanceResult& out) const;

    CylGrid grid_;
    ModelOptions options_;
    std::vector<Face> faces_;
    std::vector<double> volume_;
    std::vector<double> column_area_;  ///< per column, top and bottom face area
};

/// Root-water extraction (1/s) per node for a uniform potential
/// transpiration rate crop_et (m/s) spread over the top root_depth.
Eigen::VectorXd sink_field(const FieldState& state, const CylGrid& grid, double crop_et,
                           double root_depth, const FeddesParams& feddes = {});

}  // namespace pivotsoil
