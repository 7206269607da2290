// Command-line front end: simulate, sensitivity, select, assimilate, validate, report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "pivotsoil/errors.hpp"
#include "pivotsoil/harness.hpp"
#include "pivotsoil/kriging.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace pivotsoil;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 1;
    int case_id = 3;
    std::string out = "out";
};

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

ExperimentConfig setup(const Common& c) {
    auto cfg = load_config(c.config);
    resolve_weather(cfg);
    fs::create_directories(c.out);
    return cfg;
}

json case_json(const CaseResult& r) {
    return {{"case", r.case_id},
            {"rmse_x_pct", r.mean_x},
            {"rmse_theta_pct", r.mean_theta},
            {"rmse_xa_pct", r.mean_xa},
            {"rmse_x_m", r.mean_x_abs},
            {"estimable_parameters", r.n_estimable},
            {"failed_steps", r.run.failures},
            {"aborted", r.run.aborted}};
}

// Twin guess shared by every subcommand, so that runs with one seed line up.
struct Guess {
    TwinData twin;
    ParameterField params;
    FieldState state;
};

Guess twin_guess(const ExperimentConfig& cfg, std::uint64_t seed) {
    Guess g{simulate_truth(cfg, seed), {}, {}};
    auto rng = stream_rng(seed, 5);
    const auto& e = cfg.experiment;
    g.params = perturb_parameters(g.twin.truth_params, e.init_low, e.init_high, rng, cfg.filter.bounds);
    g.state = perturb_state(g.twin.truth.front(), e.init_low, e.init_high, rng);
    return g;
}

int cmd_simulate(const Common& c) {
    const auto cfg = setup(c);
    const auto twin = simulate_truth(cfg, c.seed);
    const fs::path out(c.out);
    write_measurements_csv(out / "measurements.csv", cfg, twin.batches);
    write_parameters_csv(out / "truth_parameters.csv", cfg.grid, twin.truth_params);
    write_states_csv(out / "truth_states.csv", twin.truth, twin.times);
    std::size_t n = 0, batches = 0;
    for (const auto& b : twin.batches) {
        if (b) n += b->size(), ++batches;
    }
    write_json(out / "metrics.json", {{"command", "simulate"},
                                      {"config", cfg.name},
                                      {"seed", c.seed},
                                      {"steps", cfg.n_steps()},
                                      {"batches", batches},
                                      {"measurements", n}});
    return 0;
}

SelectionRun selection_for(const ExperimentConfig& cfg, const Guess& g) {
    return run_sensitivity_selection(cfg, g.params, g.state, g.twin.forcing);
}

int cmd_sensitivity(const Common& c) {
    const auto cfg = setup(c);
    const auto sel = selection_for(cfg, twin_guess(cfg, c.seed));
    const fs::path out(c.out);
    json sectors = json::array();
    for (const auto& [s, store] : sel.sectors) {
        const auto& r = sel.ranks.at(s);
        write_matrix_csv(out / ("sensitivity_sector_" + std::to_string(s) + ".csv"), store.rows);
        write_spectrum_csv(out / ("spectrum_sector_" + std::to_string(s) + ".csv"), r.singular_values);
        sectors.push_back({{"sector", s},
                           {"rows", store.rows.rows()},
                           {"measured_nodes", store.node_columns.size()},
                           {"rank", r.rank},
                           {"rank_from_gap", r.from_gap},
                           {"gap_decades", r.gap_decades}});
    }
    write_json(out / "metrics.json", {{"command", "sensitivity"},
                                      {"config", cfg.name},
                                      {"seed", c.seed},
                                      {"rotations", sel.rotations},
                                      {"sectors", sectors}});
    return 0;
}

int cmd_select(const Common& c) {
    const auto cfg = setup(c);
    const auto sel = selection_for(cfg, twin_guess(cfg, c.seed));
    const fs::path out(c.out);
    write_estimable(out / "estimable.csv", sel.estimable);
    json sectors = json::array();
    for (const auto& [s, r] : sel.selections) {
        sectors.push_back({{"sector", s},
                           {"selected", r.selected.size()},
                           {"rank", sel.ranks.at(s).rank},
                           {"stopped_by_cutoff", r.stopped_by_cutoff}});
    }
    write_json(out / "metrics.json", {{"command", "select"},
                                      {"config", cfg.name},
                                      {"seed", c.seed},
                                      {"estimable", sel.estimable.estimable.size()},
                                      {"nonestimable", sel.estimable.nonestimable.size()},
                                      {"sectors", sectors}});
    return 0;
}

int cmd_assimilate(const Common& c, const std::string& measurements, const std::string& estimable_file) {
    auto cfg = setup(c);
    const fs::path out(c.out);
    json metrics = {{"command", "assimilate"}, {"config", cfg.name}, {"seed", c.seed}, {"case", c.case_id}};

    if (measurements.empty()) {
        // twin mode: truth known, RMSE reported
        const auto g = twin_guess(cfg, c.seed);
        SelectionRun sel;
        if (c.case_id == 3) {
            sel = estimable_file.empty() ? selection_for(cfg, g) : SelectionRun{};
            if (!estimable_file.empty()) sel.estimable = read_estimable(estimable_file);
        }
        const auto r = run_case(cfg, g.twin, c.case_id, &sel.estimable, g.params, g.state);
        write_rmse_csv(out / "rmse.csv", {r});
        write_trajectory_csv(out / "trajectory.csv", r.run);
        write_parameters_csv(out / "parameters.csv", cfg.grid, r.final_params);
        metrics["result"] = case_json(r);
    } else {
        const auto batches = load_measurements(measurements, cfg);
        const ParameterField params(cfg.grid.n_columns(), cfg.nominal);
        FieldState init{Eigen::VectorXd::Constant(static_cast<Eigen::Index>(cfg.grid.n_nodes()),
                                                  0.5 * (cfg.truth.initial_head_min + cfg.truth.initial_head_max))};
        EstimableSet est;
        if (c.case_id == 3) {
            est = estimable_file.empty()
                      ? run_sensitivity_selection(cfg, params, init,
                                                  build_forcing(cfg.grid, cfg.pivot, cfg.forcing, cfg.dt, cfg.n_steps()))
                            .estimable
                      : read_estimable(estimable_file);
        }
        const FieldModel model(cfg.grid, cfg.model);
        auto filter = make_case_filter(cfg, model, c.case_id, &est, params, init);
        const auto forcing = build_forcing(cfg.grid, cfg.pivot, cfg.forcing, cfg.dt, cfg.n_steps());
        std::vector<StepInput> steps(forcing.size());
        for (std::size_t k = 0; k < steps.size(); ++k) {
            steps[k] = {double(k + 1) * cfg.dt, cfg.dt, forcing[k], batches[k]};
        }
        RunOptions ro;
        ro.max_consecutive_failures = cfg.max_consecutive_failures;
        ro.head_stride = 0;
        const auto run = run_assimilation(filter, steps, ro);
        write_trajectory_csv(out / "trajectory.csv", run);
        write_parameters_csv(out / "parameters.csv", cfg.grid, filter.parameters());
        metrics["failed_steps"] = run.failures;
        metrics["aborted"] = run.aborted;
    }
    write_json(out / "metrics.json", metrics);
    return 0;
}

int cmd_validate(const Common& c, const std::string& mode_name) {
    const auto cfg = setup(c);
    const auto mode = cv_mode_from_name(mode_name);
    const auto g = twin_guess(cfg, c.seed);
    const ParameterField dominant(cfg.grid.n_columns(), cfg.nominal);
    const auto survey =
        survey_field(cfg.grid, g.twin.truth_params, cfg.experiment.survey_points, c.seed, cfg.filter.kriging);
    const auto sel = run_sensitivity_selection(cfg, dominant, g.state, g.twin.forcing);
    json rows = json::array();
    for (const auto& est : {CvEstimator{"dominant_soil", dominant, false}, CvEstimator{"texture_survey", survey, false},
                            CvEstimator{"joint_estimation", dominant, true}}) {
        const auto r = cross_validate(cfg, g.twin, est, &sel.estimable, g.state, mode, c.seed);
        rows.push_back({{"estimator", r.name}, {"nrmse", r.nrmse}, {"n", r.n}});
    }
    write_parameters_csv(fs::path(c.out) / "survey_parameters.csv", cfg.grid, survey);
    write_json(fs::path(c.out) / "metrics.json", {{"command", "validate"},
                                                   {"config", cfg.name},
                                                   {"seed", c.seed},
                                                   {"mode", mode_name},
                                                   {"nrmse", rows}});
    return 0;
}

int cmd_report(const Common& c, std::vector<int> cases) {
    const auto cfg = setup(c);
    if (cases.empty()) cases = cfg.experiment.cases;
    const auto r = run_twin_experiment(cfg, c.seed, cases);
    const fs::path out(c.out);
    write_rmse_csv(out / "rmse.csv", r.cases);
    json table = json::array();
    for (const auto& cr : r.cases) {
        table.push_back(case_json(cr));
        write_parameters_csv(out / ("parameters_case" + std::to_string(cr.case_id) + ".csv"), cfg.grid,
                             cr.final_params);
    }
    write_json(out / "metrics.json", {{"command", "report"},
                                      {"config", cfg.name},
                                      {"seed", c.seed},
                                      {"cases", table}});
    return 0;
}

int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const MissingWeather*>(&e) ||
        dynamic_cast<const DegenerateRange*>(&e) || dynamic_cast<const SectorMismatch*>(&e)) {
        return 4;
    }
    if (dynamic_cast<const Error*>(&e)) return 3;
    return 1;
}

const char* error_kind(int code) {
    switch (code) {
        case 2: return "config";
        case 3: return "numerical";
        case 4: return "data";
        default: return "internal";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pivotsoil: soil moisture and hydraulic parameter estimation under a center pivot"};
    app.require_subcommand(1);
    Common c;
    auto add_common = [&](CLI::App* sub, bool with_case) {
        sub->add_option("--config", c.config, "experiment config (TOML)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", c.seed, "random seed");
        sub->add_option("--out", c.out, "output directory");
        if (with_case) sub->add_option("--case", c.case_id, "1 states only, 2 all parameters, 3 selected")->check(CLI::Range(1, 3));
    };
    auto* sim = app.add_subcommand("simulate", "truth trajectory and synthetic measurements");
    add_common(sim, false);
    auto* sens = app.add_subcommand("sensitivity", "sector sensitivity matrices and singular values");
    add_common(sens, false);
    auto* sel = app.add_subcommand("select", "estimable parameter set");
    add_common(sel, false);
    auto* assim = app.add_subcommand("assimilate", "run the filter");
    add_common(assim, true);
    std::string measurements, estimable;
    assim->add_option("--measurements", measurements, "measurement CSV; omitted runs on twin data")
        ->check(CLI::ExistingFile);
    assim->add_option("--estimable", estimable, "estimable set from `select`")->check(CLI::ExistingFile);
    auto* val = app.add_subcommand("validate", "cross-validation of three parameter sources");
    add_common(val, false);
    std::string mode = "held-out-day";
    val->add_option("--mode", mode, "per-step-split or held-out-day")
        ->check(CLI::IsMember({"per-step-split", "held-out-day"}));
    auto* rep = app.add_subcommand("report", "three-case comparison tables");
    add_common(rep, false);
    std::vector<int> cases;
    rep->add_option("--case", cases, "cases to run (default: config)")->check(CLI::Range(1, 3));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*sim) return cmd_simulate(c);
        if (*sens) return cmd_sensitivity(c);
        if (*sel) return cmd_select(c);
        if (*assim) return cmd_assimilate(c, measurements, estimable);
        if (*val) return cmd_validate(c, mode);
        if (*rep) return cmd_report(c, cases);
    } catch (const std::exception& e) {
        const int code = exit_code(e);
        std::cerr << "error (" << error_kind(code) << "): " << e.what() << '\n';
        return code;
    }
    return 1;
}
