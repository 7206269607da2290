#include "pivotsoil/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"

#include "pivotsoil/errors.hpp"
#include "pivotsoil/kriging.hpp"

namespace pivotsoil {

namespace {

constexpr double kDay = 86400.0;

std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(a, b - a + 1));
}

}  // namespace

// ------------------------------------------------------------------ units

double unit_factor(std::string_view unit) {
    static const std::map<std::string, double, std::less<>> table = {
        {"", 1.0},
        {"-", 1.0},
        {"m", 1.0},
        {"cm", 1e-2},
        {"mm", 1e-3},
        {"s", 1.0},
        {"min", 60.0},
        {"h", 3600.0},
        {"hr", 3600.0},
        {"day", kDay},
        {"d", kDay},
        {"m/s", 1.0},
        {"m/day", 1.0 / kDay},
        {"m/d", 1.0 / kDay},
        {"cm/day", 1e-2 / kDay},
        {"cm/hr", 1e-2 / 3600.0},
        {"cm/h", 1e-2 / 3600.0},
        {"mm/day", 1e-3 / kDay},
        {"mm/d", 1e-3 / kDay},
        {"mm/h", 1e-3 / 3600.0},
        {"mm/hr", 1e-3 / 3600.0},
        {"1/m", 1.0},
        {"1/cm", 100.0},
        {"rad", 1.0},
        {"deg", std::numbers::pi / 180.0},
        {"m3/m3", 1.0},
        {"m2", 1.0},
    };
    const auto it = table.find(trim(unit));
    if (it == table.end()) throw ConfigError("unknown unit: " + std::string(unit));
    return it->second;
}

double parse_quantity(std::string_view text) {
    const std::string s = trim(text);
    if (s.empty()) throw ConfigError("empty quantity");
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ConfigError("cannot parse quantity: " + s);
    }
    return v * unit_factor(s.substr(used));
}

// ------------------------------------------------------------ crop / ET

double crop_coefficient(double g) {
    // The quartic turns negative after the season (~1050 degree-days); bare
    // soil keeps the constant term.
    const double kc = 0.04217 + 0.001508 * g + 4.89e-6 * g * g - 8.69e-9 * g * g * g + 2.49e-12 * g * g * g * g;
    return std::clamp(kc, 0.04217, 1.2);
}

double gdd(double t_avg_c, double t_base_c) { return std::max(t_avg_c - t_base_c, 0.0); }

std::vector<WeatherRecord> parse_weather_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || trim(line) != "date,t_avg_c,et0_mm_day,precip_mm_day") {
        throw DataError("weather CSV needs the header date,t_avg_c,et0_mm_day,precip_mm_day");
    }
    std::vector<WeatherRecord> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(trim(cell));
        if (f.size() != 4) throw DataError("weather CSV line " + std::to_string(lineno) + ": expected 4 fields");
        WeatherRecord r;
        r.date = f[0];
        try {
            r.t_avg_c = std::stod(f[1]);
            r.et0 = std::stod(f[2]) * 1e-3 / kDay;
            r.precip = std::stod(f[3]) * 1e-3 / kDay;
        } catch (const std::exception&) {
            throw DataError("weather CSV line " + std::to_string(lineno) + ": malformed number");
        }
        if (!(r.et0 >= 0.0) || !(r.precip >= 0.0) || !std::isfinite(r.t_avg_c)) {
            throw DataError("weather CSV line " + std::to_string(lineno) + ": negative or non-finite value");
        }
        out.push_back(r);
    }
    return out;
}

std::vector<WeatherRecord> read_weather_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open weather file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_weather_csv(ss.str());
}

namespace {

const WeatherRecord& weather_for_day(const ForcingSpec& spec, std::size_t day) {
    if (spec.weather.empty()) throw MissingWeather("no weather records");
    if (day >= spec.weather.size()) {
        if (!spec.cycle_weather) throw MissingWeather("weather does not cover day " + std::to_string(day + 1));
        day %= spec.weather.size();
    }
    return spec.weather[day];
}

}  // namespace

std::vector<double> daily_crop_coefficients(const ForcingSpec& spec, std::size_t n_days) {
    std::vector<double> kc(n_days);
    double g = spec.crop.gdd_initial;
    for (std::size_t d = 0; d < n_days; ++d) {
        if (!spec.crop.kc.empty()) {
            kc[d] = spec.crop.kc[d % spec.crop.kc.size()];
        } else {
            g += gdd(weather_for_day(spec, d).t_avg_c, spec.crop.t_base_c);
            kc[d] = crop_coefficient(g);
        }
    }
    return kc;
}

std::vector<SurfaceForcing> build_forcing(const CylGrid& grid, const PivotSchedule& schedule,
                                          const ForcingSpec& spec, double dt, std::size_t n_steps, double t0) {
    if (!(dt > 0.0)) throw InvalidState("time step must be positive");
    if (!(spec.crop.evaporation_fraction >= 0.0) || spec.crop.evaporation_fraction > 1.0) {
        throw InvalidState("evaporation fraction must lie in [0, 1]");
    }
    std::vector<SurfaceForcing> out;
    out.reserve(n_steps);
    if (n_steps == 0) return out;
    const auto n_days = std::size_t(std::floor((t0 + double(n_steps) * dt - 1e-9) / kDay)) + 1;
    const auto kc = daily_crop_coefficients(spec, n_days);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const double t_mid = t0 + (double(k) + 0.5) * dt;
        const auto day = std::size_t(std::floor(t_mid / kDay));
        const auto& w = weather_for_day(spec, day);
        auto f = SurfaceForcing::zero(grid);
        f.root_depth_m = spec.crop.root_depth_m;
        for (auto& v : f.irrigation) v = w.precip;
        if (spec.irrigate && pivot_position(t_mid, schedule).active) {
            const int s = pivot_sector(t_mid, schedule, grid);
            if (s >= 0) {
                for (std::size_t c : grid.sector_columns(s)) f.irrigation[c] += schedule.irrigation_rate;
            }
        }
        const double et = kc[day] * w.et0;
        for (auto& v : f.evaporation) v = spec.crop.evaporation_fraction * et;
        for (auto& v : f.transpiration) v = (1.0 - spec.crop.evaporation_fraction) * et;
        out.push_back(std::move(f));
    }
    return out;
}

// ----------------------------------------------------------------- config

std::size_t ExperimentConfig::n_steps() const { return std::size_t(std::llround(days * kDay / dt)); }

int ExperimentConfig::n_c() const {
    return sensor.n_c > 0 ? sensor.n_c : std::max(1, grid.nodes_within_depth(0.05));
}

void ExperimentConfig::validate() const {
    grid.validate();
    nominal.validate();
    pivot.validate();
    filter.noise.validate();
    filter.bounds.validate();
    if (!(dt > 0.0) || !(days > 0.0)) throw ConfigError("dt and days must be positive");
    if (n_steps() == 0) throw ConfigError("run shorter than one step");
    if (sensor.offset < 1) throw ConfigError("sensor offset must be at least 1");
    if (sensor.n_c < 0 || sensor.n_c > grid.n_z) throw ConfigError("sensor n_c must lie in [0, n_z]");
    if (!(sensor.noise_std >= 0.0)) throw ConfigError("sensor noise must be non-negative");
    for (int c : experiment.cases) {
        if (c < 1 || c > 3) throw ConfigError("case must be 1, 2 or 3");
    }
    if (!(experiment.validation_fraction >= 0.0) || experiment.validation_fraction >= 1.0) {
        throw ConfigError("validation fraction must lie in [0, 1)");
    }
    if (!(experiment.init_low > 0.0) || experiment.init_high < experiment.init_low) {
        throw ConfigError("initial perturbation range must satisfy 0 < low <= high");
    }
    if (truth.initial_head_max < truth.initial_head_min) throw ConfigError("initial head range is inverted");
    if (max_consecutive_failures < 1) throw ConfigError("max_consecutive_failures must be at least 1");
}

namespace {

// Reads keys from one TOML table and rejects keys it never asked about.
class Section {
public:
    Section(const toml::table* t, std::string name) : t_(t), name_(std::move(name)) {}

    void mark(const std::string& key) { used_.insert(key); }

    double quantity(const char* key, double def) {
        const toml::node* n = node(key);
        if (!n) return def;
        if (auto v = n->value<double>()) return *v;
        if (auto s = n->value<std::string>()) return wrap([&] { return parse_quantity(*s); }, key);
        throw ConfigError(where(key) + " must be a number or a quantity string");
    }
    double number(const char* key, double def) {
        const toml::node* n = node(key);
        if (!n) return def;
        if (auto v = n->value<double>()) return *v;
        throw ConfigError(where(key) + " must be a number");
    }
    long long integer(const char* key, long long def) {
        const toml::node* n = node(key);
        if (!n) return def;
        if (auto v = n->value<int64_t>()) return *v;
        throw ConfigError(where(key) + " must be an integer");
    }
    bool boolean(const char* key, bool def) {
        const toml::node* n = node(key);
        if (!n) return def;
        if (auto v = n->value<bool>()) return *v;
        throw ConfigError(where(key) + " must be true or false");
    }
    std::string string(const char* key, const std::string& def) {
        const toml::node* n = node(key);
        if (!n) return def;
        if (auto v = n->value<std::string>()) return *v;
        throw ConfigError(where(key) + " must be a string");
    }
    std::vector<double> quantities(const char* key, std::vector<double> def) {
        const toml::node* n = node(key);
        if (!n) return def;
        const auto* arr = n->as_array();
        if (!arr) throw ConfigError(where(key) + " must be an array");
        std::vector<double> out;
        for (const auto& e : *arr) {
            if (auto v = e.value<double>()) {
                out.push_back(*v);
            } else if (auto s = e.value<std::string>()) {
                out.push_back(wrap([&] { return parse_quantity(*s); }, key));
            } else {
                throw ConfigError(where(key) + " entries must be numbers or quantity strings");
            }
        }
        return out;
    }
    std::vector<long long> integers(const char* key, std::vector<long long> def) {
        const toml::node* n = node(key);
        if (!n) return def;
        const auto* arr = n->as_array();
        if (!arr) throw ConfigError(where(key) + " must be an array");
        std::vector<long long> out;
        for (const auto& e : *arr) {
            auto v = e.value<int64_t>();
            if (!v) throw ConfigError(where(key) + " entries must be integers");
            out.push_back(*v);
        }
        return out;
    }

    void finish() const {
        if (!t_) return;
        for (const auto& [k, v] : *t_) {
            if (!used_.count(std::string(k.str()))) throw ConfigError("unknown key " + where(std::string(k.str()).c_str()));
        }
    }

private:
    const toml::node* node(const char* key) {
        used_.insert(key);
        if (!t_) return nullptr;
        return t_->get(key);
    }
    std::string where(const char* key) const { return name_.empty() ? key : name_ + "." + key; }
    template <class F>
    double wrap(F f, const char* key) {
        try {
            return f();
        } catch (const ConfigError& e) {
            throw ConfigError(where(key) + ": " + e.what());
        }
    }

    const toml::table* t_;
    std::string name_;
    std::set<std::string> used_;
};

std::array<double, kParamKinds> five(const std::vector<double>& v, const char* what) {
    if (v.size() != kParamKinds) throw ConfigError(std::string(what) + " needs 5 entries (K_s, theta_s, theta_r, alpha, n)");
    std::array<double, kParamKinds> a{};
    std::copy(v.begin(), v.end(), a.begin());
    return a;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
    toml::table root;
    try {
        root = toml::parse(text);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << "config parse error: " << e.description() << " at line " << e.source().begin.line;
        throw ConfigError(os.str());
    }
    static const std::set<std::string> sections = {"grid",   "model",  "soil",   "truth",   "pivot",
                                                   "sensor", "time",   "weather", "crop",   "filter",
                                                   "bounds", "kriging", "sensitivity", "experiment"};
    ExperimentConfig cfg;
    Section top(&root, "");
    cfg.name = top.string("name", "experiment");
    cfg.start_epoch_s = parse_iso8601(top.string("start", "2021-07-01T00:00:00Z"));
    auto tab = [&](const char* name) { return Section(root[name].as_table(), name); };
    for (const auto& [k, v] : root) {
        const std::string key(k.str());
        if (sections.count(key)) {
            if (!v.is_table()) throw ConfigError("[" + key + "] must be a table");
            top.mark(key);
        }
    }

    {
        auto s = tab("grid");
        const int n_r = int(s.integer("n_r", 10));
        const int n_theta = int(s.integer("n_theta", 8));
        const int n_z = int(s.integer("n_z", 5));
        const double radius = s.quantity("radius", 290.0);
        const double depth = s.quantity("depth", 0.3);
        const double span = s.quantity("span", 2.0 * std::numbers::pi);
        s.finish();
        try {
            cfg.grid = CylGrid::make(n_r, n_theta, n_z, radius, depth, span);
        } catch (const Error& e) {
            throw ConfigError(std::string("grid: ") + e.what());
        }
    }
    {
        auto s = tab("model");
        const auto bottom = s.string("bottom", "free_drainage");
        const auto top_bc = s.string("top", "flux");
        const auto mean = s.string("interface_mean", "arithmetic");
        if (bottom == "free_drainage") cfg.model.bottom = BottomBoundary::FreeDrainage;
        else if (bottom == "sealed") cfg.model.bottom = BottomBoundary::Sealed;
        else throw ConfigError("model.bottom must be free_drainage or sealed");
        if (top_bc == "flux") cfg.model.top = TopBoundary::Flux;
        else if (top_bc == "sealed") cfg.model.top = TopBoundary::Sealed;
        else throw ConfigError("model.top must be flux or sealed");
        if (mean == "arithmetic") cfg.model.interface_mean = InterfaceMean::Arithmetic;
        else if (mean == "harmonic") cfg.model.interface_mean = InterfaceMean::Harmonic;
        else throw ConfigError("model.interface_mean must be arithmetic or harmonic");
        cfg.model.top_gradient_cap = s.number("top_gradient_cap", 1e3);
        cfg.model.newton.tolerance = s.quantity("newton_tolerance", 1e-8);
        cfg.model.newton.max_iterations = int(s.integer("newton_max_iterations", 50));
        cfg.model.newton.max_halvings = int(s.integer("max_halvings", 6));
        cfg.model.newton.max_increment = s.quantity("max_increment", 5.0);
        s.finish();
    }
    {
        auto s = tab("soil");
        cfg.nominal.theta_s = s.number("theta_s", cfg.nominal.theta_s);
        cfg.nominal.theta_r = s.number("theta_r", cfg.nominal.theta_r);
        cfg.nominal.k_s = s.quantity("k_s", cfg.nominal.k_s);
        cfg.nominal.alpha = s.quantity("alpha", cfg.nominal.alpha);
        cfg.nominal.n = s.number("n", cfg.nominal.n);
        cfg.nominal.s_r = s.quantity("specific_storage", cfg.nominal.s_r);
        s.finish();
    }
    {
        auto s = tab("truth");
        auto& t = cfg.truth;
        t.k_s_log_amplitude = s.number("k_s_log_amplitude", t.k_s_log_amplitude);
        t.theta_s_amplitude = s.number("theta_s_amplitude", t.theta_s_amplitude);
        t.theta_r_amplitude = s.number("theta_r_amplitude", t.theta_r_amplitude);
        t.alpha_rel_amplitude = s.number("alpha_rel_amplitude", t.alpha_rel_amplitude);
        t.n_rel_amplitude = s.number("n_rel_amplitude", t.n_rel_amplitude);
        t.modes = int(s.integer("modes", t.modes));
        t.initial_head_min = s.quantity("initial_head_min", t.initial_head_min);
        t.initial_head_max = s.quantity("initial_head_max", t.initial_head_max);
        t.process_noise_m = s.quantity("process_noise", t.process_noise_m);
        if (const auto f = s.quantities("site_factors", {}); !f.empty()) {
            if (f.size() != kParamKinds) throw ConfigError("truth.site_factors needs 5 values");
            for (std::size_t k = 0; k < kParamKinds; ++k) {
                if (!(f[k] > 0.0)) throw ConfigError("truth.site_factors must be positive");
                t.site_factors[k] = f[k];
            }
        }
        s.finish();
    }
    {
        auto s = tab("pivot");
        const double tip = s.quantity("tip_speed", 0.011);
        const double depth = s.quantity("depth", 3.6e-3 / kDay);
        const double window_h = s.quantity("window", 8.0 * 3600.0) / 3600.0;
        const double start_angle = s.quantity("start_angle", 0.0);
        try {
            cfg.pivot = PivotSchedule::from_tip_speed(tip, cfg.grid.radius_m, depth * kDay * 1e3, window_h, start_angle);
            cfg.pivot.window_start_s = s.quantity("window_start", 0.0);
            cfg.pivot.rotation_span = s.quantity("rotation_span", 2.0 * std::numbers::pi);
            cfg.pivot.validate();
        } catch (const InvalidState& e) {
            throw ConfigError(std::string("pivot: ") + e.what());
        }
        s.finish();
    }
    {
        auto s = tab("sensor");
        cfg.sensor.offset = int(s.integer("offset", 1));
        cfg.sensor.n_c = int(s.integer("n_c", 0));
        cfg.sensor.noise_std = s.number("noise_std", 0.01);
        cfg.sensor.measure_when_idle = s.boolean("measure_when_idle", false);
        s.finish();
    }
    {
        auto s = tab("time");
        cfg.dt = s.quantity("dt", 360.0);
        cfg.days = s.number("days", 3.0);
        s.finish();
    }
    {
        auto s = tab("weather");
        const auto file = s.string("file", "");
        if (!file.empty()) cfg.weather_file = base_dir / file;
        const auto et0 = s.quantities("et0", {});
        const auto t_avg = s.quantities("t_avg_c", {});
        const auto precip = s.quantities("precip", {});
        cfg.forcing.cycle_weather = s.boolean("cycle", false);
        s.finish();
        const std::size_t n = std::max({et0.size(), t_avg.size(), precip.size()});
        for (std::size_t d = 0; d < n; ++d) {
            WeatherRecord r;
            r.date = "day " + std::to_string(d + 1);
            r.et0 = et0.empty() ? 0.0 : et0[d % et0.size()];
            r.t_avg_c = t_avg.empty() ? 15.0 : t_avg[d % t_avg.size()];
            r.precip = precip.empty() ? 0.0 : precip[d % precip.size()];
            if (r.et0 < 0.0 || r.precip < 0.0) throw ConfigError("weather values must be non-negative");
            cfg.forcing.weather.push_back(r);
        }
    }
    {
        auto s = tab("crop");
        auto& c = cfg.forcing.crop;
        c.kc = s.quantities("kc", {});
        c.gdd_initial = s.number("gdd_initial", 0.0);
        c.t_base_c = s.number("t_base_c", 5.0);
        c.root_depth_m = s.quantity("root_depth", 0.2);
        c.evaporation_fraction = s.number("evaporation_fraction", 0.3);
        cfg.forcing.irrigate = s.boolean("irrigate", true);
        s.finish();
    }
    {
        auto s = tab("filter");
        auto& n = cfg.filter.noise;
        n.r = s.number("r", n.r);
        n.q_head = s.number("q_head", n.q_head);
        n.q_param = five(s.quantities("q_params", {n.q_param.begin(), n.q_param.end()}), "filter.q_params");
        n.p0_head = s.number("p0_head", n.p0_head);
        n.p0_param = five(s.quantities("p0_params", {n.p0_param.begin(), n.p0_param.end()}), "filter.p0_params");
        cfg.filter.update.gate_chi2 = s.number("gate_chi2", 0.0);
        cfg.max_consecutive_failures = int(s.integer("max_consecutive_failures", 5));
        s.finish();
    }
    {
        auto s = tab("bounds");
        auto& b = cfg.filter.bounds;
        b.k_s_min = s.quantity("k_s_min", b.k_s_min);
        b.k_s_max = s.quantity("k_s_max", b.k_s_max);
        b.theta_s_min = s.number("theta_s_min", b.theta_s_min);
        b.theta_s_max = s.number("theta_s_max", b.theta_s_max);
        b.theta_r_min = s.number("theta_r_min", b.theta_r_min);
        b.theta_r_max = s.number("theta_r_max", b.theta_r_max);
        b.alpha_min = s.quantity("alpha_min", b.alpha_min);
        b.alpha_max = s.quantity("alpha_max", b.alpha_max);
        b.n_min = s.number("n_min", b.n_min);
        b.n_max = s.number("n_max", b.n_max);
        s.finish();
    }
    {
        auto s = tab("kriging");
        auto& k = cfg.filter.kriging;
        k.kind = variogram_kind_from_name(s.string("variogram", "exponential"));
        k.n_bins = int(s.integer("n_bins", k.n_bins));
        k.min_samples = int(s.integer("min_samples", k.min_samples));
        k.default_range_m = s.quantity("default_range", 0.0);
        cfg.filter.kriging_refresh = s.boolean("refresh", true);
        cfg.filter.krige_unvisited = s.boolean("unvisited", false);
        s.finish();
    }
    {
        auto s = tab("sensitivity");
        cfg.sensitivity.days = s.number("days", 0.0);
        cfg.sensitivity.gap_decades = s.number("gap_decades", 3.0);
        cfg.sensitivity.fallback_rel = s.number("fallback_rel", 1e-10);
        s.finish();
    }
    {
        auto s = tab("experiment");
        auto& e = cfg.experiment;
        std::vector<long long> cases = s.integers("cases", {1, 2, 3});
        e.cases.assign(cases.begin(), cases.end());
        std::vector<long long> seeds = s.integers("seeds", {1, 2, 3, 4, 5});
        e.seeds.clear();
        for (long long v : seeds) {
            if (v < 0) throw ConfigError("seeds must be non-negative");
            e.seeds.push_back(std::uint64_t(v));
        }
        const auto range = s.quantities("init_perturbation", {1.10, 1.15});
        if (range.size() != 2) throw ConfigError("experiment.init_perturbation needs [low, high]");
        e.init_low = range[0];
        e.init_high = range[1];
        e.validation_fraction = s.number("validation_fraction", 0.2);
        e.heldout_day = int(s.integer("heldout_day", 0));
        e.survey_points = int(s.integer("survey_points", 4));
        s.finish();
    }
    top.finish();
    try {
        cfg.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path.parent_path());
}

void resolve_weather(ExperimentConfig& cfg) {
    if (cfg.weather_file.empty()) return;
    cfg.forcing.weather = read_weather_csv(cfg.weather_file);
}

// ------------------------------------------------------------ twin runs

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream), std::uint32_t(stream >> 32)};
    return std::mt19937_64(seq);
}

ParameterField heterogeneous_field(const CylGrid& grid, const SoilHydraulics& nominal, const TruthSpec& spec,
                                   std::uint64_t seed, const ParameterBounds& bounds) {
    SoilHydraulics site = nominal;
    for (std::size_t k = 0; k < kParamKinds; ++k) site.set(ParamKind(k), nominal.get(ParamKind(k)) * spec.site_factors[k]);
    std::vector<SoilHydraulics> cols(grid.n_columns(), site);
    for (std::size_t k = 0; k < kParamKinds; ++k) {
        auto rng = stream_rng(seed, 1000 + k);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        // sum of plane waves with wavelengths between R/2 and 2R
        std::vector<double> f(grid.n_columns(), 0.0);
        for (int m = 0; m < std::max(spec.modes, 1); ++m) {
            const double wavelength = grid.radius_m * (0.5 + 1.5 * u(rng));
            const double dir = 2.0 * std::numbers::pi * u(rng);
            const double phase = 2.0 * std::numbers::pi * u(rng);
            const double kw = 2.0 * std::numbers::pi / wavelength;
            for (std::size_t c = 0; c < grid.n_columns(); ++c) {
                const auto p = column_location(grid, c);
                f[c] += std::sin(kw * (p.x * std::cos(dir) + p.y * std::sin(dir)) + phase);
            }
        }
        double mx = 0.0;
        for (double v : f) mx = std::max(mx, std::abs(v));
        if (mx > 0.0) {
            for (double& v : f) v /= mx;
        }
        for (std::size_t c = 0; c < grid.n_columns(); ++c) {
            auto& p = cols[c];
            switch (ParamKind(k)) {
                case ParamKind::Ks: p.k_s = site.k_s * std::exp(spec.k_s_log_amplitude * f[c]); break;
                case ParamKind::ThetaS: p.theta_s = site.theta_s + spec.theta_s_amplitude * f[c]; break;
                case ParamKind::ThetaR: p.theta_r = site.theta_r + spec.theta_r_amplitude * f[c]; break;
                case ParamKind::Alpha: p.alpha = site.alpha * (1.0 + spec.alpha_rel_amplitude * f[c]); break;
                case ParamKind::N: p.n = site.n * (1.0 + spec.n_rel_amplitude * f[c]); break;
            }
        }
    }
    for (auto& p : cols) bounds.clamp(p);
    return ParameterField(std::move(cols));
}

std::vector<std::size_t> sensor_columns(const ExperimentConfig& cfg, double t, int* sector) {
    if (sector) *sector = -1;
    if (!cfg.sensor.measure_when_idle && !pivot_position(t, cfg.pivot).active) return {};
    const int s = measured_sector(t, cfg.pivot, cfg.grid, cfg.sensor.offset);
    if (s < 0) return {};
    if (sector) *sector = s;
    return cfg.grid.sector_columns(s);
}

TwinData simulate_truth(const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::optional<ParameterField>& truth_params) {
    TwinData twin;
    const auto& g = cfg.grid;
    twin.truth_params = truth_params ? *truth_params
                                     : heterogeneous_field(g, cfg.nominal, cfg.truth, seed, cfg.filter.bounds);
    const std::size_t n = cfg.n_steps();
    twin.forcing = build_forcing(g, cfg.pivot, cfg.forcing, cfg.dt, n);

    auto head_rng = stream_rng(seed, 2);
    std::uniform_real_distribution<double> u0(cfg.truth.initial_head_min, cfg.truth.initial_head_max);
    FieldState s{Eigen::VectorXd(static_cast<Eigen::Index>(g.n_nodes()))};
    for (auto& v : s.head) v = u0(head_rng);
    twin.truth.push_back(s);

    auto proc_rng = stream_rng(seed, 3);
    auto meas_rng = stream_rng(seed, 4);
    std::normal_distribution<double> proc(0.0, 1.0);
    const FieldModel model(g, cfg.model);
    twin.batches.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        s = model.advance(s, twin.truth_params, twin.forcing[k], cfg.dt, false).state;
        if (cfg.truth.process_noise_m > 0.0) {
            for (auto& v : s.head) v += cfg.truth.process_noise_m * proc(proc_rng);
        }
        twin.truth.push_back(s);
        const double t = double(k + 1) * cfg.dt;
        twin.times.push_back(t);
        int sector = -1;
        const auto cols = sensor_columns(cfg, t, &sector);
        const std::uint64_t batch_seed = meas_rng();
        if (cols.empty()) continue;
        auto b = synthesize_measurements(model, s, twin.truth_params, cols, cfg.n_c(), cfg.sensor.noise_std, batch_seed);
        b.time_index = k + 1;
        b.time_s = t;
        b.sector = sector;
        twin.batches[k] = std::move(b);
    }
    return twin;
}

SelectionRun run_sensitivity_selection(const ExperimentConfig& cfg, const ParameterField& params,
                                       const FieldState& initial, const std::vector<SurfaceForcing>& forcing) {
    const auto& g = cfg.grid;
    const std::size_t horizon =
        cfg.sensitivity.days > 0.0 ? std::size_t(std::llround(cfg.sensitivity.days * kDay / cfg.dt)) : cfg.n_steps();
    std::vector<SurfaceForcing> own;
    const std::vector<SurfaceForcing>* f = &forcing;
    if (forcing.size() < horizon) {
        own = build_forcing(g, cfg.pivot, cfg.forcing, cfg.dt, horizon);
        f = &own;
    }
    const FieldModel model(g, cfg.model);
    const Eigen::VectorXd phi = params.to_vector();
    SelectionRun out;
    auto sens = SensitivityState::zero(g);
    FieldState s = initial;
    for (std::size_t k = 0; k < horizon; ++k) {
        auto r = propagate_sensitivity(model, s, sens, params, (*f)[k], cfg.dt);
        s = std::move(r.state);
        sens = std::move(r.sens);
        const double t = double(k + 1) * cfg.dt;
        int sector = -1;
        const auto cols = sensor_columns(cfg, t, &sector);
        if (cols.empty()) continue;
        MeasurementBatch b;
        b.time_index = k + 1;
        b.time_s = t;
        b.node_columns = cols;
        b.n_c = cfg.n_c();
        b.sector = sector;
        b.values = model.observe(s, params, cols, b.n_c);
        const Eigen::MatrixXd sy = output_sensitivity(model, sens, s, params, cols, b.n_c);
        auto& store = out.sectors[sector];
        store.sector_id = sector;
        accumulate(store, b, scale_sensitivity(sy, phi, b.values));
    }
    std::map<int, std::vector<std::size_t>> per_sector;
    for (const auto& [sector, store] : out.sectors) {
        const auto rank = rank_analysis(store.rows, cfg.sensitivity.gap_decades, cfg.sensitivity.fallback_rel);
        auto sel = orthogonal_projection_select(store.rows, rank.rank);
        out.ranks[sector] = rank;
        per_sector[sector] = sel.selected;
        out.selections[sector] = std::move(sel);
    }
    out.estimable = assemble_estimable(per_sector, g.n_params());
    out.rotations = pivot_position(double(horizon) * cfg.dt, cfg.pivot).active_time / cfg.pivot.active_period();
    return out;
}

ParameterField perturb_parameters(const ParameterField& p, double lo, double hi, std::mt19937_64& rng,
                                  const ParameterBounds& bounds) {
    std::uniform_real_distribution<double> u(lo, hi);
    ParameterField out = p;
    for (std::size_t i = 0; i < p.n_params(); ++i) {
        const auto kind = ParameterField::kind_of_param(i);
        out.set(i, bounds.clamp(kind, p.get(i) * u(rng)));
    }
    return out;
}

FieldState perturb_state(const FieldState& s, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    FieldState out = s;
    for (auto& v : out.head) v *= u(rng);
    return out;
}

double rmse(const Eigen::VectorXd& est, const Eigen::VectorXd& truth) {
    if (est.size() != truth.size() || est.size() == 0) throw InvalidState("RMSE needs equal nonempty vectors");
    return std::sqrt((est - truth).squaredNorm() / double(est.size()));
}

double relative_rmse_pct(const Eigen::VectorXd& est, const Eigen::VectorXd& truth) {
    if (est.size() != truth.size() || est.size() == 0) throw InvalidState("RMSE needs equal nonempty vectors");
    return 100.0 * std::sqrt(((est - truth).array() / truth.array()).square().sum() / double(est.size()));
}

double nrmse(const Eigen::VectorXd& observed, const Eigen::VectorXd& predicted) {
    if (observed.size() == 0) throw InvalidState("NRMSE needs a nonempty validation set");
    const double range = observed.maxCoeff() - observed.minCoeff();
    if (!(range > 0.0)) throw DegenerateRange("validation values have zero range");
    return rmse(predicted, observed) / range;
}

AugmentedFilter make_case_filter(const ExperimentConfig& cfg, const FieldModel& model, int case_id,
                                 const EstimableSet* selected, const ParameterField& initial_params,
                                 const FieldState& initial_state) {
    const auto& g = cfg.grid;
    FilterOptions fo = cfg.filter;
    EstimableSet est;
    switch (case_id) {
        case 1:
            est = assemble_estimable({}, g.n_params());
            fo.kriging_refresh = false;
            break;
        case 2: {
            std::vector<std::size_t> all(g.n_params());
            std::iota(all.begin(), all.end(), std::size_t(0));
            est = assemble_estimable({{-1, all}}, g.n_params());
            fo.mask_by_sector = false;
            fo.kriging_refresh = false;
            break;
        }
        case 3:
            if (!selected) throw InvalidState("case 3 needs a selected estimable set");
            est = *selected;
            fo.mask_by_sector = true;
            break;
        default:
            throw ConfigError("case must be 1, 2 or 3");
    }
    return AugmentedFilter(model, std::move(est), initial_params, initial_state, fo);
}

std::vector<StepInput> step_inputs(const TwinData& twin, double dt) {
    std::vector<StepInput> steps(twin.forcing.size());
    for (std::size_t k = 0; k < steps.size(); ++k) {
        steps[k].time_s = twin.times[k];
        steps[k].dt = dt;
        steps[k].forcing = twin.forcing[k];
        steps[k].batch = twin.batches[k];
    }
    return steps;
}

namespace {

Eigen::VectorXd concat(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    Eigen::VectorXd out(a.size() + b.size());
    out << a, b;
    return out;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

CaseResult run_case(const ExperimentConfig& cfg, const TwinData& twin, int case_id, const EstimableSet* selected,
                    const ParameterField& initial_params, const FieldState& initial_state) {
    const FieldModel model(cfg.grid, cfg.model);
    auto filter = make_case_filter(cfg, model, case_id, selected, initial_params, initial_state);
    CaseResult res;
    res.case_id = case_id;
    res.n_estimable = filter.n_estimable();
    const Eigen::VectorXd p_true = twin.truth_params.to_vector();
    auto score = [&](const AugmentedFilter& f, std::size_t k) {
        const Eigen::VectorXd h = f.state().head;
        const Eigen::VectorXd p = f.parameters().to_vector();
        res.rmse_x.push_back(relative_rmse_pct(h, twin.truth[k].head));
        res.rmse_theta.push_back(relative_rmse_pct(p, p_true));
        res.rmse_xa.push_back(relative_rmse_pct(concat(h, p), concat(twin.truth[k].head, p_true)));
        res.rmse_x_abs.push_back(rmse(h, twin.truth[k].head));
    };
    score(filter, 0);
    RunOptions ro;
    ro.max_consecutive_failures = cfg.max_consecutive_failures;
    ro.head_stride = 0;
    ro.observer = [&](const AugmentedFilter& f, const StepRecord& r) { score(f, r.step); };
    res.run = run_assimilation(filter, step_inputs(twin, cfg.dt), ro);
    res.mean_x = mean_of(res.rmse_x);
    res.mean_theta = mean_of(res.rmse_theta);
    res.mean_xa = mean_of(res.rmse_xa);
    res.mean_x_abs = mean_of(res.rmse_x_abs);
    res.final_params = filter.parameters();
    res.final_state = filter.state();
    return res;
}

TwinResult run_twin_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const std::vector<int>& cases) {
    TwinResult out;
    out.seed = seed;
    const TwinData twin = simulate_truth(cfg, seed);
    auto rng = stream_rng(seed, 5);
    const auto& e = cfg.experiment;
    const ParameterField guess = perturb_parameters(twin.truth_params, e.init_low, e.init_high, rng, cfg.filter.bounds);
    const FieldState init = perturb_state(twin.truth.front(), e.init_low, e.init_high, rng);
    if (std::find(cases.begin(), cases.end(), 3) != cases.end()) {
        out.selection = run_sensitivity_selection(cfg, guess, init, twin.forcing);
    }
    for (int c : cases) out.cases.push_back(run_case(cfg, twin, c, &out.selection.estimable, guess, init));
    return out;
}

// ------------------------------------------------------ cross-validation

CvMode cv_mode_from_name(std::string_view name) {
    if (name == "per-step-split") return CvMode::PerStepSplit;
    if (name == "held-out-day") return CvMode::HeldOutDay;
    throw ConfigError("validation mode must be per-step-split or held-out-day");
}

namespace {

MeasurementBatch subset(const MeasurementBatch& b, const std::vector<std::size_t>& idx) {
    MeasurementBatch out;
    out.time_index = b.time_index;
    out.time_s = b.time_s;
    out.n_c = b.n_c;
    out.sector = b.sector;
    out.values.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.node_columns.push_back(b.node_columns[idx[i]]);
        out.values[Eigen::Index(i)] = b.values[Eigen::Index(idx[i])];
    }
    return out;
}

}  // namespace

CvResult cross_validate(const ExperimentConfig& cfg, const TwinData& twin, const CvEstimator& estimator,
                        const EstimableSet* selected, const FieldState& initial_state, CvMode mode,
                        std::uint64_t seed) {
    const FieldModel model(cfg.grid, cfg.model);
    auto filter = make_case_filter(cfg, model, estimator.estimate_parameters ? 3 : 1, selected, estimator.params,
                                   initial_state);
    auto steps = step_inputs(twin, cfg.dt);
    std::vector<double> obs, pred;
    RunOptions ro;
    ro.max_consecutive_failures = cfg.max_consecutive_failures;
    ro.head_stride = 0;

    if (mode == CvMode::PerStepSplit) {
        auto rng = stream_rng(seed, 6);
        std::vector<std::optional<MeasurementBatch>> held(steps.size());
        for (std::size_t k = 0; k < steps.size(); ++k) {
            if (!steps[k].batch) continue;
            const auto& b = *steps[k].batch;
            std::vector<std::size_t> idx(b.size());
            std::iota(idx.begin(), idx.end(), std::size_t(0));
            std::shuffle(idx.begin(), idx.end(), rng);
            const auto n_hold = std::size_t(std::llround(cfg.experiment.validation_fraction * double(b.size())));
            if (n_hold == 0 || n_hold >= b.size()) continue;
            std::vector<std::size_t> hold(idx.begin(), idx.begin() + std::ptrdiff_t(n_hold));
            std::vector<std::size_t> train(idx.begin() + std::ptrdiff_t(n_hold), idx.end());
            std::sort(hold.begin(), hold.end());
            std::sort(train.begin(), train.end());
            held[k] = subset(b, hold);
            steps[k].batch = subset(b, train);
        }
        ro.observer = [&](const AugmentedFilter& f, const StepRecord& r) {
            const auto& h = held[r.step - 1];
            if (!h) return;
            const Eigen::VectorXd y = f.measurement(*h);
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                obs.push_back(h->values[i]);
                pred.push_back(y[i]);
            }
        };
        run_assimilation(filter, steps, ro);
    } else {
        const std::size_t n_days = std::size_t(std::ceil(cfg.days - 1e-9));
        const int day = cfg.experiment.heldout_day > 0 ? cfg.experiment.heldout_day : int(n_days);
        if (day < 2 || std::size_t(day) > n_days) throw ConfigError("held-out day must lie in [2, number of days]");
        const double t_start = double(day - 1) * kDay, t_end = double(day) * kDay;
        std::vector<StepInput> train;
        std::size_t k = 0;
        for (; k < steps.size() && steps[k].time_s <= t_start + 1e-6; ++k) train.push_back(steps[k]);
        run_assimilation(filter, train, ro);
        FieldState s = filter.state();
        const ParameterField p = filter.parameters();
        for (; k < steps.size() && steps[k].time_s <= t_end + 1e-6; ++k) {
            s = model.advance(s, p, steps[k].forcing, steps[k].dt, false).state;
            if (!steps[k].batch) continue;
            const auto& b = *steps[k].batch;
            const Eigen::VectorXd y = model.observe(s, p, b.node_columns, b.n_c);
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                obs.push_back(b.values[i]);
                pred.push_back(y[i]);
            }
        }
    }
    if (obs.empty()) throw DataError("no held-out measurements for cross-validation");
    CvResult r;
    r.name = estimator.name;
    r.n = obs.size();
    r.nrmse = nrmse(Eigen::Map<Eigen::VectorXd>(obs.data(), Eigen::Index(obs.size())),
                    Eigen::Map<Eigen::VectorXd>(pred.data(), Eigen::Index(pred.size())));
    return r;
}

ParameterField survey_field(const CylGrid& grid, const ParameterField& truth, int points, std::uint64_t seed,
                            const KrigingOptions& options) {
    if (points < 1 || std::size_t(points) > grid.n_columns()) throw ConfigError("survey points out of range");
    auto rng = stream_rng(seed, 7);
    std::vector<std::size_t> cols(grid.n_columns());
    std::iota(cols.begin(), cols.end(), std::size_t(0));
    std::shuffle(cols.begin(), cols.end(), rng);
    cols.resize(std::size_t(points));
    std::sort(cols.begin(), cols.end());

    std::vector<Point2> loc;
    for (std::size_t c : cols) loc.push_back(column_location(grid, c));
    std::vector<Point2> all;
    for (std::size_t c = 0; c < grid.n_columns(); ++c) all.push_back(column_location(grid, c));

    ParameterField out = truth;
    const double range = options.default_range_m > 0.0 ? options.default_range_m : grid.radius_m / 3.0;
    for (std::size_t k = 0; k < kParamKinds; ++k) {
        const auto kind = ParamKind(k);
        Eigen::VectorXd v(points);
        for (int i = 0; i < points; ++i) {
            const double x = truth.column(cols[std::size_t(i)]).get(kind);
            v[i] = kind == ParamKind::Ks ? std::log(x) : x;
        }
        // too few points to fit a variogram: exponential model, sill = sample variance
        const double var = points > 1 ? (v.array() - v.mean()).square().sum() / double(points - 1) : 0.0;
        const VariogramModel vm{VariogramKind::Exponential, 0.0, std::max(var, 1e-12), range};
        Eigen::VectorXd pred;
        try {
            pred = krige(loc, v, vm, all).values;
        } catch (const SingularSystem&) {
            pred = idw(loc, v, all);
        }
        for (std::size_t c = 0; c < grid.n_columns(); ++c) {
            double x = pred[Eigen::Index(c)];
            if (kind == ParamKind::Ks) x = std::exp(x);
            out.column(c).set(kind, options.bounds.clamp(kind, x));
        }
    }
    return out;
}

// ---------------------------------------------------------------- output

void write_measurements_csv(const std::filesystem::path& path, const ExperimentConfig& cfg,
                            const std::vector<std::optional<MeasurementBatch>>& batches) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << "timestamp,r,theta,vwc\n";
    char buf[128];
    for (const auto& b : batches) {
        if (!b) continue;
        const std::string ts = format_iso8601(cfg.start_epoch_s + b->time_s);
        for (std::size_t i = 0; i < b->size(); ++i) {
            const std::size_t c = b->node_columns[i];
            std::snprintf(buf, sizeof buf, "%.6f,%.9f,%.8f", cfg.grid.r_coords[std::size_t(cfg.grid.ir_of_column(c))],
                          cfg.grid.theta_coord(cfg.grid.ith_of_column(c)), b->values[Eigen::Index(i)]);
            f << ts << ',' << buf << '\n';
        }
    }
}

void write_parameters_csv(const std::filesystem::path& path, const CylGrid& grid, const ParameterField& p) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(10);
    f << "column,ir,itheta,r_m,theta_rad,k_s_m_s,theta_s,theta_r,alpha_per_m,n\n";
    for (std::size_t c = 0; c < grid.n_columns(); ++c) {
        const auto& s = p.column(c);
        f << c << ',' << grid.ir_of_column(c) << ',' << grid.ith_of_column(c) << ','
          << grid.r_coords[std::size_t(grid.ir_of_column(c))] << ',' << grid.theta_coord(grid.ith_of_column(c)) << ','
          << s.k_s << ',' << s.theta_s << ',' << s.theta_r << ',' << s.alpha << ',' << s.n << '\n';
    }
}

void write_states_csv(const std::filesystem::path& path, const std::vector<FieldState>& states,
                      const std::vector<double>& times) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(10);
    if (states.empty()) return;
    f << "step,time_s";
    for (Eigen::Index i = 0; i < states.front().head.size(); ++i) f << ",h" << i;
    f << '\n';
    for (std::size_t k = 0; k < states.size(); ++k) {
        f << k << ',' << (k == 0 ? 0.0 : times[k - 1]);
        for (Eigen::Index i = 0; i < states[k].head.size(); ++i) f << ',' << states[k].head[i];
        f << '\n';
    }
}

void write_rmse_csv(const std::filesystem::path& path, const std::vector<CaseResult>& cases) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(10);
    f << "step";
    for (const auto& c : cases) {
        f << ",case" << c.case_id << "_rmse_x_pct,case" << c.case_id << "_rmse_theta_pct,case" << c.case_id
          << "_rmse_xa_pct";
    }
    f << '\n';
    const std::size_t n = cases.empty() ? 0 : cases.front().rmse_x.size();
    for (std::size_t k = 0; k < n; ++k) {
        f << k;
        for (const auto& c : cases) {
            f << ',' << (k < c.rmse_x.size() ? c.rmse_x[k] : 0.0) << ',' << (k < c.rmse_theta.size() ? c.rmse_theta[k] : 0.0)
              << ',' << (k < c.rmse_xa.size() ? c.rmse_xa[k] : 0.0);
        }
        f << '\n';
    }
}

std::vector<std::optional<MeasurementBatch>> load_measurements(const std::filesystem::path& path,
                                                               const ExperimentConfig& cfg) {
    auto raw = read_observations_csv(path);
    PreprocessOptions opt;
    opt.t_s = cfg.dt;
    opt.theta_r_bound = 0.01;
    opt.theta_s_bound = 0.55;
    opt.n_c = cfg.n_c();
    const auto pre = preprocess(std::move(raw), cfg.grid, opt);
    std::vector<std::optional<MeasurementBatch>> out(cfg.n_steps());
    for (const auto& b : pre.batches) {
        const long long k = std::llround((b.time_s - cfg.start_epoch_s) / cfg.dt);
        if (k < 1 || k > (long long)out.size()) continue;
        auto nb = b;
        nb.time_index = std::size_t(k);
        nb.time_s = double(k) * cfg.dt;
        out[std::size_t(k - 1)] = std::move(nb);
    }
    return out;
}

}  // namespace pivotsoil
