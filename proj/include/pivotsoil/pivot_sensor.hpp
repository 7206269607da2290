/**
 * @file pivot_sensor.hpp
 * @brief Center-pivot kinematics, synthetic measurements and ingestion of
 *        raw soil-moisture observations.
 *
 * The arm turns only during the daily active window, so its angle is a
 * function of cumulative active time. A sector is one azimuthal grid cell.
 * The radiometers look `offset` sectors ahead of the arm (the side not yet
 * irrigated in this pass) and see every surface column of that sector.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pivotsoil/field_model.hpp"

namespace pivotsoil {

struct PivotSchedule {
    double angular_speed = 0.0;     ///< rad/s while the arm moves
    double irrigation_rate = 0.0;   ///< m/s applied under the arm while active
    double window_start_s = 0.0;    ///< daily active window start, s after midnight
    double window_hours = 8.0;      ///< daily active duration
    double start_angle = 0.0;       ///< rad
    /// Angle range swept by the arm. Equals the grid span for full fields;
    /// a quadrant model inside a full circle uses 2 pi here.
    double rotation_span = 2.0 * std::numbers::pi;

    /// Tip speed (m/s) over the arm radius gives the angular speed.
    static PivotSchedule from_tip_speed(double tip_speed, double radius_m, double depth_mm_day,
                                        double window_hours, double start_angle = 0.0);

    void validate() const;

    /// Time for one full sweep of rotation_span in active seconds.
    double active_period() const { return rotation_span / angular_speed; }
};

struct PivotPosition {
    double angle = 0.0;        ///< rad in [0, rotation_span)
    bool active = false;
    double active_time = 0.0;  ///< cumulative seconds the arm has moved
};

PivotPosition pivot_position(double t, const PivotSchedule& schedule);

/// Grid sector under the arm at time t, or -1 when the arm lies outside the
/// modelled azimuthal range.
int pivot_sector(double t, const PivotSchedule& schedule, const CylGrid& grid);

/// Sector `offset` sectors ahead of the arm, or -1 outside the modelled range.
int measured_sector(double t, const PivotSchedule& schedule, const CylGrid& grid, int offset);

/// Surface columns measured at time t (empty when the sector is outside the grid).
std::vector<std::size_t> measured_nodes(double t, const PivotSchedule& schedule, const CylGrid& grid,
                                        int offset);

struct MeasurementBatch {
    std::size_t time_index = 0;
    double time_s = 0.0;
    std::vector<std::size_t> node_columns;
    int n_c = 1;               ///< axial nodes averaged by the sensor
    Eigen::VectorXd values;    ///< m3/m3, one per column
    int sector = -1;           ///< azimuthal sector, when all columns share one

    std::size_t size() const { return node_columns.size(); }
    void validate(const CylGrid& grid) const;
};

/// observe(truth) plus iid Gaussian noise drawn from a generator seeded with `seed`.
MeasurementBatch synthesize_measurements(const FieldModel& model, const FieldState& truth,
                                         const ParameterField& params,
                                         const std::vector<std::size_t>& node_columns, int n_c,
                                         double noise_std, std::uint64_t seed);

/// One raw sensor reading. Coordinates are either geographic (degrees) or
/// polar in the field frame (r in m, theta in rad).
struct RawObservation {
    double time_s = 0.0;  ///< seconds since the Unix epoch (UTC)
    bool geographic = false;
    double lat_or_r = 0.0;
    double lon_or_theta = 0.0;
    double vwc = 0.0;
};

/// Parses `timestamp,lat,lon,vwc` or `timestamp,r,theta,vwc` with a header
/// row. Throws DataError on malformed input.
std::vector<RawObservation> read_observations_csv(const std::filesystem::path& path);
std::vector<RawObservation> parse_observations_csv(const std::string& text);

/// Seconds since the epoch for an ISO-8601 date-time such as
/// 2021-07-02T10:20:00, 2021-07-02 10:20:00Z or 2021-07-02T10:20:00-06:00.
double parse_iso8601(const std::string& text);
std::string format_iso8601(double epoch_s);

struct PreprocessOptions {
    double t_s = 600.0;                 ///< grouping interval, s
    double theta_r_bound = 0.090;       ///< dominant soil theta_r
    double theta_s_bound = 0.410;       ///< dominant soil theta_s
    int n_c = 1;
    /// Field centre and the compass bearing (deg, clockwise from north) of
    /// the model's theta = 0 ray. Used only for geographic input.
    double center_lat = 0.0;
    double center_lon = 0.0;
    double theta0_bearing_deg = 0.0;
    /// Points farther than this from their nearest node count as unmapped.
    /// Non-positive selects one grid cell diagonal at the rim.
    double max_map_distance_m = 0.0;
};

struct PreprocessResult {
    std::vector<MeasurementBatch> batches;
    std::size_t input_count = 0;
    std::size_t outside_region = 0;
    std::size_t dropped_outliers = 0;
    std::size_t unmapped = 0;
};

PreprocessResult preprocess(std::vector<RawObservation> raw, const CylGrid& grid,
                            const PreprocessOptions& options);

double haversine_m(double lat1_deg, double lon1_deg, double lat2_deg, double lon2_deg);

}  // namespace pivotsoil
