#include "pivotsoil/pivot_sensor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "pivotsoil/errors.hpp"

namespace pivotsoil {

namespace {

constexpr double kDay = 86400.0;
constexpr double kEarthRadius = 6371008.8;
constexpr double kDeg = std::numbers::pi / 180.0;

double wrap(double angle, double span) {
    double a = std::fmod(angle, span);
    if (a < 0.0) a += span;
    if (a >= span) a = 0.0;
    return a;
}

// Length of [a, b) ∩ [c, d).
double overlap(double a, double b, double c, double d) {
    return std::max(0.0, std::min(b, d) - std::max(a, c));
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double to_number(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        std::ostringstream os;
        os << "line " << line_no << ": cannot parse number '" << s << "'";
        throw DataError(os.str());
    }
}

// Destination point from (lat, lon) along a bearing (rad) for a distance (m).
void destination(double lat_deg, double lon_deg, double bearing, double dist, double& lat_out,
                 double& lon_out) {
    const double d = dist / kEarthRadius;
    const double lat1 = lat_deg * kDeg;
    const double lon1 = lon_deg * kDeg;
    const double lat2 = std::asin(std::sin(lat1) * std::cos(d) + std::cos(lat1) * std::sin(d) * std::cos(bearing));
    const double lon2 = lon1 + std::atan2(std::sin(bearing) * std::sin(d) * std::cos(lat1),
                                          std::cos(d) - std::sin(lat1) * std::sin(lat2));
    lat_out = lat2 / kDeg;
    lon_out = lon2 / kDeg;
}

double initial_bearing(double lat1_deg, double lon1_deg, double lat2_deg, double lon2_deg) {
    const double p1 = lat1_deg * kDeg, p2 = lat2_deg * kDeg;
    const double dl = (lon2_deg - lon1_deg) * kDeg;
    return std::atan2(std::sin(dl) * std::cos(p2),
                      std::cos(p1) * std::sin(p2) - std::sin(p1) * std::cos(p2) * std::cos(dl));
}

}  // namespace

PivotSchedule PivotSchedule::from_tip_speed(double tip_speed, double radius_m, double depth_mm_day,
                                            double window_hours, double start_angle) {
    PivotSchedule s;
    if (!(radius_m > 0.0)) throw InvalidState("pivot radius must be positive");
    s.angular_speed = tip_speed / radius_m;
    s.window_hours = window_hours;
    s.irrigation_rate = window_hours > 0.0 ? depth_mm_day * 1e-3 / (window_hours * 3600.0) : 0.0;
    s.start_angle = start_angle;
    s.validate();
    return s;
}

void PivotSchedule::validate() const {
    if (!(angular_speed > 0.0)) throw InvalidState("pivot angular speed must be positive");
    if (!(irrigation_rate >= 0.0)) throw InvalidState("irrigation rate must be non-negative");
    if (!(window_hours >= 0.0) || window_hours > 24.0) throw InvalidState("active window must lie in [0, 24] h");
    if (!(window_start_s >= 0.0) || window_start_s >= kDay) throw InvalidState("window start must lie in [0, 86400) s");
    if (!(rotation_span > 0.0)) throw InvalidState("rotation span must be positive");
}

PivotPosition pivot_position(double t, const PivotSchedule& s) {
    if (!(t >= 0.0)) throw InvalidState("time must be non-negative");
    const double w = s.window_hours * 3600.0;
    const double days = std::floor(t / kDay);
    const double tod = t - days * kDay;
    // the window may wrap past midnight; treat it as two pieces within a day
    const double a0 = s.window_start_s, a1 = s.window_start_s + w;
    double today = overlap(0.0, tod, a0, a1) + overlap(0.0, tod, a0 - kDay, a1 - kDay);
    PivotPosition p;
    p.active_time = days * w + today;
    p.active = w >= kDay || (tod >= a0 && tod < a1) || (tod >= a0 - kDay && tod < a1 - kDay);
    p.angle = wrap(s.start_angle + s.angular_speed * p.active_time, s.rotation_span);
    return p;
}

int pivot_sector(double t, const PivotSchedule& schedule, const CylGrid& grid) {
    const double angle = pivot_position(t, schedule).angle;
    const int idx = int(std::floor(angle / grid.dtheta()));
    if (grid.topology == AzimuthalTopology::Periodic) return std::clamp(idx, 0, grid.n_theta - 1);
    return idx < grid.n_theta ? idx : -1;
}

int measured_sector(double t, const PivotSchedule& schedule, const CylGrid& grid, int offset) {
    if (offset < 1) throw InvalidState("sensor offset must be at least one sector");
    const double angle = pivot_position(t, schedule).angle;
    int idx = int(std::floor(angle / grid.dtheta()));
    int virtual_sectors = grid.n_theta;
    if (grid.topology == AzimuthalTopology::Periodic) {
        idx = std::clamp(idx, 0, grid.n_theta - 1);
    } else {
        virtual_sectors = std::max(grid.n_theta, int(std::lround(schedule.rotation_span / grid.dtheta())));
    }
    const int m = (idx + offset) % virtual_sectors;
    return m < grid.n_theta ? m : -1;
}

std::vector<std::size_t> measured_nodes(double t, const PivotSchedule& schedule, const CylGrid& grid,
                                        int offset) {
    const int sector = measured_sector(t, schedule, grid, offset);
    if (sector < 0) return {};
    return grid.sector_columns(sector);
}

void MeasurementBatch::validate(const CylGrid& grid) const {
    if (std::size_t(values.size()) != node_columns.size()) {
        throw InvalidState("measurement batch has mismatched columns and values");
    }
    if (n_c < 1 || n_c > grid.n_z) throw InvalidState("N_c must lie in [1, n_z]");
    std::vector<std::size_t> sorted = node_columns;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw InvalidState("measurement batch lists a column twice");
    }
    for (std::size_t c : node_columns) {
        if (c >= grid.n_columns()) throw InvalidState("measured column outside the grid");
    }
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (!(values[i] >= 0.0 && values[i] <= 1.0)) throw InvalidState("moisture value outside [0, 1]");
    }
}

MeasurementBatch synthesize_measurements(const FieldModel& model, const FieldState& truth,
                                         const ParameterField& params,
                                         const std::vector<std::size_t>& node_columns, int n_c,
                                         double noise_std, std::uint64_t seed) {
    if (!(noise_std >= 0.0)) throw InvalidState("noise standard deviation must be non-negative");
    MeasurementBatch b;
    b.node_columns = node_columns;
    b.n_c = n_c;
    b.values = model.observe(truth, params, node_columns, n_c);
    if (!node_columns.empty()) {
        const auto& g = model.grid();
        const int s = g.ith_of_column(node_columns.front());
        const bool same = std::all_of(node_columns.begin(), node_columns.end(),
                                      [&](std::size_t c) { return g.ith_of_column(c) == s; });
        b.sector = same ? s : -1;
    }
    if (noise_std > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, noise_std);
        for (Eigen::Index i = 0; i < b.values.size(); ++i) {
            b.values[i] = std::clamp(b.values[i] + noise(rng), 0.0, 1.0);
        }
    }
    return b;
}

double parse_iso8601(const std::string& text) {
    const std::string s = trim(text);
    int y = 0, mo = 0, d = 0, hh = 0, mm = 0;
    double ss = 0.0;
    char sep = 0;
    int used = 0;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%lf%n", &y, &mo, &d, &sep, &hh, &mm, &ss, &used) < 7 ||
        (sep != 'T' && sep != ' ')) {
        used = 0;
        if (std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &hh, &mm, &used) < 6 ||
            (sep != 'T' && sep != ' ')) {
            throw DataError("malformed ISO-8601 timestamp '" + s + "'");
        }
        ss = 0.0;
    }
    using namespace std::chrono;
    const year_month_day ymd{year{y}, month{unsigned(mo)}, day{unsigned(d)}};
    if (!ymd.ok() || hh > 23 || mm > 59 || ss >= 61.0) {
        throw DataError("invalid calendar date or time '" + s + "'");
    }
    double offset = 0.0;
    const std::string rest = s.substr(std::size_t(used));
    if (!rest.empty() && rest != "Z") {
        int oh = 0, om = 0;
        char sign = 0;
        if (std::sscanf(rest.c_str(), "%c%2d:%2d", &sign, &oh, &om) != 3 || (sign != '+' && sign != '-')) {
            throw DataError("malformed time zone in '" + s + "'");
        }
        offset = (sign == '+' ? 1.0 : -1.0) * (oh * 3600.0 + om * 60.0);
    }
    const double days = double(sys_days{ymd}.time_since_epoch().count());
    return days * kDay + hh * 3600.0 + mm * 60.0 + ss - offset;
}

std::string format_iso8601(double epoch_s) {
    using namespace std::chrono;
    const auto total = static_cast<long long>(std::floor(epoch_s));
    const sys_days day_point{days{static_cast<int>(std::floor(double(total) / kDay))}};
    const year_month_day ymd{day_point};
    long long rem = total - static_cast<long long>(day_point.time_since_epoch().count()) * 86400LL;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02lld:%02lld:%02lldZ", int(ymd.year()),
                  unsigned(ymd.month()), unsigned(ymd.day()), rem / 3600, (rem / 60) % 60, rem % 60);
    return buf;
}

std::vector<RawObservation> parse_observations_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool geographic = false;
    bool have_header = false;
    std::vector<RawObservation> out;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto cols = split(line, ',');
        if (!have_header) {
            for (auto& c : cols) std::transform(c.begin(), c.end(), c.begin(), ::tolower);
            if (cols.size() != 4 || cols[0] != "timestamp" || cols[3] != "vwc") {
                throw DataError("measurement header must be timestamp,lat,lon,vwc or timestamp,r,theta,vwc");
            }
            if (cols[1] == "lat" && cols[2] == "lon") {
                geographic = true;
            } else if (cols[1] == "r" && cols[2] == "theta") {
                geographic = false;
            } else {
                throw DataError("measurement header must be timestamp,lat,lon,vwc or timestamp,r,theta,vwc");
            }
            have_header = true;
            continue;
        }
        if (cols.size() != 4) {
            std::ostringstream os;
            os << "line " << line_no << ": expected 4 fields, got " << cols.size();
            throw DataError(os.str());
        }
        RawObservation o;
        try {
            o.time_s = parse_iso8601(cols[0]);
        } catch (const DataError& e) {
            std::ostringstream os;
            os << "line " << line_no << ": " << e.what();
            throw DataError(os.str());
        }
        o.geographic = geographic;
        o.lat_or_r = to_number(cols[1], line_no);
        o.lon_or_theta = to_number(cols[2], line_no);
        o.vwc = to_number(cols[3], line_no);
        out.push_back(o);
    }
    if (!have_header) throw DataError("measurement file is empty");
    return out;
}

std::vector<RawObservation> read_observations_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open measurement file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_observations_csv(ss.str());
}

double haversine_m(double lat1_deg, double lon1_deg, double lat2_deg, double lon2_deg) {
    const double p1 = lat1_deg * kDeg, p2 = lat2_deg * kDeg;
    const double dp = p2 - p1;
    const double dl = (lon2_deg - lon1_deg) * kDeg;
    const double a = std::sin(dp / 2) * std::sin(dp / 2) + std::cos(p1) * std::cos(p2) * std::sin(dl / 2) * std::sin(dl / 2);
    return 2.0 * kEarthRadius * std::asin(std::min(1.0, std::sqrt(a)));
}

PreprocessResult preprocess(std::vector<RawObservation> raw, const CylGrid& grid,
                            const PreprocessOptions& opt) {
    if (raw.empty()) throw DataError("no observations to preprocess");
    if (!(opt.t_s > 0.0)) throw InvalidState("grouping interval T_s must be positive");
    if (opt.n_c < 1 || opt.n_c > grid.n_z) throw InvalidState("N_c must lie in [1, n_z]");
    PreprocessResult res;
    res.input_count = raw.size();

    // 1. chronological order
    std::stable_sort(raw.begin(), raw.end(),
                     [](const RawObservation& a, const RawObservation& b) { return a.time_s < b.time_s; });

    // 2. keep the modelled region, expressed in field-frame polar coordinates
    struct Located {
        RawObservation obs;
        double r, theta;
    };
    const double theta0 = opt.theta0_bearing_deg * kDeg;
    std::vector<Located> kept;
    for (const auto& o : raw) {
        double r = o.lat_or_r, th = o.lon_or_theta;
        if (o.geographic) {
            r = haversine_m(opt.center_lat, opt.center_lon, o.lat_or_r, o.lon_or_theta);
            th = initial_bearing(opt.center_lat, opt.center_lon, o.lat_or_r, o.lon_or_theta) - theta0;
        }
        th = wrap(th, 2.0 * std::numbers::pi);
        const bool inside = std::isfinite(r) && r >= 0.0 && r <= grid.radius_m &&
                            (grid.topology == AzimuthalTopology::Periodic || th < grid.theta_span_rad);
        if (inside) kept.push_back({o, r, th});
        else ++res.outside_region;
    }
    if (kept.empty()) return res;

    // 3. buckets of length T_s from the first retained time
    const double t0 = kept.front().obs.time_s;

    // node positions for nearest-node mapping
    const std::size_t nc = grid.n_columns();
    std::vector<double> node_r(nc), node_th(nc), node_lat(nc), node_lon(nc);
    for (std::size_t c = 0; c < nc; ++c) {
        node_r[c] = grid.r_coords[std::size_t(grid.ir_of_column(c))];
        node_th[c] = grid.theta_coord(grid.ith_of_column(c));
        destination(opt.center_lat, opt.center_lon, theta0 + node_th[c], node_r[c], node_lat[c], node_lon[c]);
    }
    const double max_dist = opt.max_map_distance_m > 0.0
                                ? opt.max_map_distance_m
                                : std::hypot(grid.dr(), grid.radius_m * grid.dtheta());

    std::map<long long, std::map<std::size_t, std::pair<double, int>>> buckets;
    for (const auto& k : kept) {
        const auto bucket = static_cast<long long>(std::floor((k.obs.time_s - t0) / opt.t_s));
        // 4. physical bounds of the dominant soil
        if (!(k.obs.vwc >= opt.theta_r_bound && k.obs.vwc <= opt.theta_s_bound)) {
            ++res.dropped_outliers;
            continue;
        }
        // 5. nearest node
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < nc; ++c) {
            double d;
            if (k.obs.geographic) {
                d = haversine_m(k.obs.lat_or_r, k.obs.lon_or_theta, node_lat[c], node_lon[c]);
            } else {
                const double d2 = k.r * k.r + node_r[c] * node_r[c] - 2.0 * k.r * node_r[c] * std::cos(k.theta - node_th[c]);
                d = std::sqrt(std::max(0.0, d2));
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best_d > max_dist) {
            ++res.unmapped;
            continue;
        }
        auto& acc = buckets[bucket][best];
        acc.first += k.obs.vwc;
        acc.second += 1;
    }

    for (const auto& [bucket, nodes] : buckets) {
        MeasurementBatch b;
        b.time_index = std::size_t(bucket);
        b.time_s = t0 + double(bucket) * opt.t_s;
        b.n_c = opt.n_c;
        b.values.resize(Eigen::Index(nodes.size()));
        Eigen::Index i = 0;
        for (const auto& [col, acc] : nodes) {
            b.node_columns.push_back(col);
            b.values[i++] = acc.first / acc.second;
        }
        const int s = grid.ith_of_column(b.node_columns.front());
        const bool same = std::all_of(b.node_columns.begin(), b.node_columns.end(),
                                      [&](std::size_t c) { return grid.ith_of_column(c) == s; });
        b.sector = same ? s : -1;
        res.batches.push_back(std::move(b));
    }
    return res;
}

}  // namespace pivotsoil
