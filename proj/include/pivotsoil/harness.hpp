/**
 * @file harness.hpp
 * @brief Configuration, crop and weather forcing, twin experiments,
 *        cross-validation and metrics.
 */

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "pivotsoil/assimilation.hpp"
#include "pivotsoil/field_model.hpp"
#include "pivotsoil/pivot_sensor.hpp"
#include "pivotsoil/selection.hpp"
#include "pivotsoil/sensitivity.hpp"

namespace pivotsoil {

// ------------------------------------------------------------------ units

/// Multiplier taking a value in `unit` to SI (m, s, rad). Accepts length
/// (m, cm, mm), time (s, min, h, day), rates (m/s, m/day, mm/day, mm/h,
/// cm/hr, cm/day), inverse length (1/m, 1/cm), angle (rad, deg) and "-".
double unit_factor(std::string_view unit);

/// Parses "3.6 mm/day" (or a bare number, taken as SI) to SI.
double parse_quantity(std::string_view text);

// ------------------------------------------------------------ crop / ET

/// Barley crop coefficient from cumulative growing-degree days, clipped to
/// [0.04217, 1.2]: the lower end is the quartic's value at g = 0.
double crop_coefficient(double gdd_cum);

/// Daily growing-degree days, max(t_avg - t_base, 0).
double gdd(double t_avg_c, double t_base_c = 5.0);

struct WeatherRecord {
    std::string date;
    double t_avg_c = 0.0;
    double et0 = 0.0;     ///< m/s
    double precip = 0.0;  ///< m/s
};

/// `date,t_avg_c,et0_mm_day,precip_mm_day` with a header row.
std::vector<WeatherRecord> parse_weather_csv(const std::string& text);
std::vector<WeatherRecord> read_weather_csv(const std::filesystem::path& path);

struct CropSpec {
    /// Daily K_c values cycled over the run; empty derives K_c from GDD.
    std::vector<double> kc;
    double gdd_initial = 0.0;
    double t_base_c = 5.0;
    double root_depth_m = 0.2;
    double evaporation_fraction = 0.3;  ///< share of K_c ET0 taken as soil evaporation
};

struct ForcingSpec {
    std::vector<WeatherRecord> weather;
    bool cycle_weather = false;  ///< repeat the records when the run is longer
    CropSpec crop;
    /// Irrigate every column under the arm (false switches irrigation off).
    bool irrigate = true;
};

/// Forcing for step k covering [t0 + k dt, t0 + (k+1) dt]. The arm position
/// is taken at the step midpoint. Throws MissingWeather when a day is not
/// covered.
std::vector<SurfaceForcing> build_forcing(const CylGrid& grid, const PivotSchedule& schedule,
                                          const ForcingSpec& spec, double dt, std::size_t n_steps,
                                          double t0 = 0.0);

/// K_c for each simulated day.
std::vector<double> daily_crop_coefficients(const ForcingSpec& spec, std::size_t n_days);

// ----------------------------------------------------------------- config

struct TruthSpec {
    /// Smooth random heterogeneity around the nominal soil: ln K_s, theta_s
    /// and theta_r get additive perturbations, alpha and n relative ones.
    double k_s_log_amplitude = 0.3;
    double theta_s_amplitude = 0.03;
    double theta_r_amplitude = 0.015;
    double alpha_rel_amplitude = 0.15;
    double n_rel_amplitude = 0.05;
    int modes = 3;
    double initial_head_min = -1.5;
    double initial_head_max = -1.35;
    double process_noise_m = 1e-6;
    /// Site mean relative to the nominal soil, per kind (K_s θs θr α n).
    std::array<double, kParamKinds> site_factors{1.0, 1.0, 1.0, 1.0, 1.0};
};

struct SensorSpec {
    int offset = 1;
    int n_c = 0;  ///< 0 selects the nodes within the top 5 cm
    double noise_std = 0.01;
    bool measure_when_idle = false;
};

struct SensitivitySpec {
    double days = 0.0;  ///< 0: same horizon as the experiment
    double gap_decades = 3.0;
    double fallback_rel = 1e-10;
};

struct ExperimentSpec {
    std::vector<int> cases{1, 2, 3};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    double init_low = 1.10;
    double init_high = 1.15;
    double validation_fraction = 0.2;
    int heldout_day = 0;       ///< 1-based; 0 selects the last day
    int survey_points = 4;     ///< sampling locations of the texture-survey field
};

struct ExperimentConfig {
    std::string name;
    double start_epoch_s = 0.0;
    CylGrid grid;
    ModelOptions model;
    SoilHydraulics nominal;
    TruthSpec truth;
    PivotSchedule pivot;
    SensorSpec sensor;
    double dt = 360.0;
    double days = 3.0;
    ForcingSpec forcing;
    std::filesystem::path weather_file;  ///< loaded by resolve_weather when set
    FilterOptions filter;
    int max_consecutive_failures = 5;
    SensitivitySpec sensitivity;
    ExperimentSpec experiment;

    std::size_t n_steps() const;
    int n_c() const;
    void validate() const;
};

/// Parses a TOML config; relative paths resolve against base_dir. Throws ConfigError.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Reads cfg.weather_file into cfg.forcing.weather when set. Throws DataError.
void resolve_weather(ExperimentConfig& cfg);

// ------------------------------------------------------------ twin runs

/// Independent generator for (seed, stream).
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream);

/// Smooth heterogeneous truth field around the nominal soil.
ParameterField heterogeneous_field(const CylGrid& grid, const SoilHydraulics& nominal, const TruthSpec& spec,
                                   std::uint64_t seed, const ParameterBounds& bounds);

struct TwinData {
    ParameterField truth_params;
    std::vector<FieldState> truth;       ///< n_steps + 1 states
    std::vector<SurfaceForcing> forcing; ///< n_steps
    std::vector<double> times;           ///< end time of each step, s from start
    std::vector<std::optional<MeasurementBatch>> batches;  ///< per step
};

/// Column set of the sector measured at time t (empty when not measuring).
std::vector<std::size_t> sensor_columns(const ExperimentConfig& cfg, double t, int* sector = nullptr);

/// Truth trajectory with process noise and noisy measurements. The truth
/// parameters default to heterogeneous_field(seed).
TwinData simulate_truth(const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::optional<ParameterField>& truth_params = std::nullopt);

struct SelectionRun {
    std::map<int, SectorSensitivity> sectors;
    std::map<int, RankResult> ranks;
    std::map<int, SelectionResult> selections;
    EstimableSet estimable;
    double rotations = 0.0;  ///< completed arm rotations over the horizon
};

/// Forward sensitivities of every parameter along the nominal trajectory,
/// accumulated per measured sector, then rank analysis and greedy selection
/// per sector.
SelectionRun run_sensitivity_selection(const ExperimentConfig& cfg, const ParameterField& params,
                                       const FieldState& initial, const std::vector<SurfaceForcing>& forcing);

/// Per-element multiplicative perturbation U[lo, hi] of heads and parameters.
ParameterField perturb_parameters(const ParameterField& p, double lo, double hi, std::mt19937_64& rng,
                                  const ParameterBounds& bounds);
FieldState perturb_state(const FieldState& s, double lo, double hi, std::mt19937_64& rng);

/// Root-mean-square error of est against truth.
double rmse(const Eigen::VectorXd& est, const Eigen::VectorXd& truth);
/// RMSE of the relative error (est - truth)/truth, in percent.
double relative_rmse_pct(const Eigen::VectorXd& est, const Eigen::VectorXd& truth);
/// RMSE normalised by the range of the observed values. Throws DegenerateRange.
double nrmse(const Eigen::VectorXd& observed, const Eigen::VectorXd& predicted);

struct CaseResult {
    int case_id = 0;
    std::vector<double> rmse_x;      ///< per step k = 0..N-1, relative %, heads
    std::vector<double> rmse_theta;  ///< per step, relative %, all parameters
    std::vector<double> rmse_xa;     ///< per step, relative %, augmented vector
    std::vector<double> rmse_x_abs;  ///< per step, m
    double mean_x = 0.0, mean_theta = 0.0, mean_xa = 0.0, mean_x_abs = 0.0;
    AssimilationRun run;
    ParameterField final_params;
    FieldState final_state;
    std::size_t n_estimable = 0;
};

/// Filter set-up for one of the three cases: 1 states only, 2 states and
/// every parameter, 3 states and the selected parameters with sector masking.
AugmentedFilter make_case_filter(const ExperimentConfig& cfg, const FieldModel& model, int case_id,
                                 const EstimableSet* selected, const ParameterField& initial_params,
                                 const FieldState& initial_state);

std::vector<StepInput> step_inputs(const TwinData& twin, double dt);

CaseResult run_case(const ExperimentConfig& cfg, const TwinData& twin, int case_id, const EstimableSet* selected,
                    const ParameterField& initial_params, const FieldState& initial_state);

struct TwinResult {
    std::uint64_t seed = 0;
    SelectionRun selection;
    std::vector<CaseResult> cases;
};

TwinResult run_twin_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const std::vector<int>& cases);

// ------------------------------------------------------ cross-validation

enum class CvMode { PerStepSplit, HeldOutDay };

CvMode cv_mode_from_name(std::string_view name);

struct CvEstimator {
    std::string name;
    ParameterField params;  ///< starting (or fixed) parameters
    bool estimate_parameters = false;  ///< true runs case 3, false case 1
};

struct CvResult {
    std::string name;
    double nrmse = 0.0;
    std::size_t n = 0;
};

/// Per-step split: a seeded random fraction of every batch is held out and
/// compared with the filter's posterior estimate at those columns.
/// Held-out day: the filter runs on every batch before the held-out day;
/// the model then runs open loop through that day from the final estimates.
CvResult cross_validate(const ExperimentConfig& cfg, const TwinData& twin, const CvEstimator& estimator,
                        const EstimableSet* selected, const FieldState& initial_state, CvMode mode,
                        std::uint64_t seed);

/// Parameters kriged from the truth at `points` random surface columns, as
/// a texture survey would provide.
ParameterField survey_field(const CylGrid& grid, const ParameterField& truth, int points, std::uint64_t seed,
                            const KrigingOptions& options);

// ---------------------------------------------------------------- output

void write_measurements_csv(const std::filesystem::path& path, const ExperimentConfig& cfg,
                            const std::vector<std::optional<MeasurementBatch>>& batches);
void write_parameters_csv(const std::filesystem::path& path, const CylGrid& grid, const ParameterField& p);
void write_states_csv(const std::filesystem::path& path, const std::vector<FieldState>& states,
                      const std::vector<double>& times);
void write_rmse_csv(const std::filesystem::path& path, const std::vector<CaseResult>& cases);

/// Measurement batches aligned with the experiment's steps (empty where no
/// observation falls). Observations must be polar, in the field frame.
std::vector<std::optional<MeasurementBatch>> load_measurements(const std::filesystem::path& path,
                                                               const ExperimentConfig& cfg);

}  // namespace pivotsoil
