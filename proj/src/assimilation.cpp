#include "pivotsoil/assimilation.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "pivotsoil/errors.hpp"
#include "pivotsoil/sensitivity.hpp"

namespace pivotsoil {

int symmetrize(Eigen::MatrixXd& p) {
    p = 0.5 * (p + p.transpose()).eval();
    int floored = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        if (p(i, i) < 0.0) {
            p(i, i) = 0.0;
            ++floored;
        }
    }
    return floored;
}

Belief kf_predict(const Belief& b, const Eigen::VectorXd& x_pred, const Eigen::MatrixXd& a,
                  const Eigen::MatrixXd& q) {
    Belief out;
    out.x = x_pred;
    out.p = a * b.p * a.transpose() + q;
    symmetrize(out.p);
    return out;
}

Belief kf_update(const Belief& b, const Eigen::VectorXd& innovation, const Eigen::MatrixXd& c,
                 const Eigen::MatrixXd& r, const UpdateOptions& options, UpdateStats* stats) {
    const Eigen::Index n = b.x.size();
    if (c.cols() != n || c.rows() != innovation.size() || r.rows() != c.rows() || r.cols() != c.rows()) {
        throw InvalidState("measurement dimensions do not match the belief");
    }
    UpdateStats st;
    Eigen::MatrixXd cc = c, rr = r;
    Eigen::VectorXd nu = innovation;
    Eigen::MatrixXd pct = b.p * cc.transpose();
    Eigen::MatrixXd s = cc * pct + rr;

    if (options.gate_chi2 > 0.0) {
        std::vector<Eigen::Index> keep;
        for (Eigen::Index i = 0; i < nu.size(); ++i) {
            if (nu[i] * nu[i] / s(i, i) <= options.gate_chi2) keep.push_back(i);
        }
        st.gated = int(nu.size() - Eigen::Index(keep.size()));
        if (st.gated > 0) {
            cc = Eigen::MatrixXd(cc(keep, Eigen::all));
            rr = Eigen::MatrixXd(rr(keep, keep));
            nu = Eigen::VectorXd(nu(keep));
            pct = Eigen::MatrixXd(pct(Eigen::all, keep));
            s = Eigen::MatrixXd(s(keep, keep));
        }
    }
    st.measurements = int(nu.size());
    Belief out = b;
    if (nu.size() == 0) {
        if (stats) *stats = st;
        return out;
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
        throw SingularSystem("innovation covariance is not positive definite");
    }
    // G = P C^T S^-1
    const Eigen::MatrixXd g = ldlt.solve(pct.transpose()).transpose();
    out.x = b.x + g * nu;
    const Eigen::MatrixXd gcp = g * pct.transpose();
    out.p = b.p - gcp;

    // Joseph form differs from the standard form by G S G^T - (G C P)^T
    const double pn = out.p.norm();
    const Eigen::MatrixXd diff = g * s * g.transpose() - gcp.transpose();
    st.joseph_rel_diff = pn > 0.0 ? diff.norm() / pn : diff.norm();

    st.negative_variances = symmetrize(out.p);
    st.nis = nu.dot(ldlt.solve(nu));
    st.innovation_rms = std::sqrt(nu.squaredNorm() / double(nu.size()));
    if (stats) *stats = st;
    return out;
}

ExtendedKalmanFilter::ExtendedKalmanFilter(StateMap f, JacobianMap f_jac, StateMap h, JacobianMap h_jac,
                                           Eigen::MatrixXd q, Eigen::MatrixXd r)
    : f_(std::move(f)), h_(std::move(h)), f_jac_(std::move(f_jac)), h_jac_(std::move(h_jac)),
      q_(std::move(q)), r_(std::move(r)) {}

Belief ExtendedKalmanFilter::predict(const Belief& b) const {
    return kf_predict(b, f_(b.x), f_jac_(b.x), q_);
}

Belief ExtendedKalmanFilter::update(const Belief& b, const Eigen::VectorXd& y, const UpdateOptions& options,
                                    UpdateStats* stats) const {
    return kf_update(b, y - h_(b.x), h_jac_(b.x), r_, options, stats);
}

// ---------------------------------------------------------------------------

void NoiseSpec::validate() const {
    if (!(r > 0.0)) throw ConfigError("measurement variance must be positive");
    if (!(q_head >= 0.0) || !(p0_head >= 0.0)) throw ConfigError("state variances must be non-negative");
    for (std::size_t k = 0; k < kParamKinds; ++k) {
        if (!(q_param[k] >= 0.0) || !(p0_param[k] >= 0.0)) {
            throw ConfigError("parameter variances must be non-negative");
        }
    }
}

namespace {

double to_filter(ParamKind kind, double v) { return kind == ParamKind::Ks ? std::log(v) : v; }
double from_filter(ParamKind kind, double v) { return kind == ParamKind::Ks ? std::exp(v) : v; }

}  // namespace

AugmentedFilter::AugmentedFilter(const FieldModel& model, EstimableSet estimable,
                                 const ParameterField& initial_params, const FieldState& initial_state,
                                 FilterOptions options)
    : model_(&model), estimable_(std::move(estimable)), nonestimable_(initial_params),
      options_(std::move(options)), n_x_(model.grid().n_nodes()) {
    options_.noise.validate();
    options_.bounds.validate();
    if (initial_params.n_columns() != model.grid().n_columns()) {
        throw InvalidState("initial parameters do not match the grid");
    }
    if (std::size_t(initial_state.head.size()) != n_x_) throw InvalidState("initial state does not match the grid");
    if (estimable_.n_params != model.grid().n_params()) {
        throw InvalidState("estimable set was built for a different grid");
    }
    const std::size_t ne = estimable_.estimable.size();
    const auto n = Eigen::Index(n_x_ + ne);
    belief_.x.resize(n);
    belief_.x.head(Eigen::Index(n_x_)) = initial_state.head;
    belief_.p = Eigen::MatrixXd::Zero(n, n);
    belief_.p.diagonal().head(Eigen::Index(n_x_)).setConstant(options_.noise.p0_head);
    for (std::size_t j = 0; j < ne; ++j) {
        const std::size_t g = estimable_.estimable[j];
        const auto kind = ParameterField::kind_of_param(g);
        const auto i = Eigen::Index(n_x_ + j);
        belief_.x[i] = to_filter(kind, initial_params.get(g));
        belief_.p(i, i) = options_.noise.p0_param[std::size_t(kind)];
    }
    belief_.active_mask.assign(ne, false);
    ever_active_.assign(ne, false);
    clamp_parameters();
}

void AugmentedFilter::activate_sector(int sector) {
    if (!options_.mask_by_sector) {
        belief_.active_mask.assign(n_estimable(), true);
        return;
    }
    belief_.active_mask.assign(n_estimable(), false);
    if (sector < 0) return;
    for (std::size_t pos : estimable_.sector_positions(sector)) belief_.active_mask[pos] = true;
}

void AugmentedFilter::set_active(const std::vector<std::size_t>& positions) {
    belief_.active_mask.assign(n_estimable(), false);
    for (std::size_t pos : positions) {
        if (pos >= n_estimable()) throw InvalidState("active position out of range");
        belief_.active_mask[pos] = true;
    }
}

std::vector<std::size_t> AugmentedFilter::active_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < belief_.active_mask.size(); ++j) {
        if (belief_.active_mask[j]) out.push_back(j);
    }
    return out;
}

ParameterField AugmentedFilter::parameters_at(const Eigen::VectorXd& x) const {
    ParameterField pf = nonestimable_;
    for (std::size_t j = 0; j < estimable_.estimable.size(); ++j) {
        const std::size_t g = estimable_.estimable[j];
        pf.set(g, from_filter(ParameterField::kind_of_param(g), x[Eigen::Index(n_x_ + j)]));
    }
    return pf;
}

ParameterField AugmentedFilter::parameters() const { return parameters_at(belief_.x); }

FieldState AugmentedFilter::state() const { return {belief_.x.head(Eigen::Index(n_x_))}; }

Eigen::VectorXd AugmentedFilter::estimable_values() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(n_estimable()));
    for (std::size_t j = 0; j < n_estimable(); ++j) {
        v[Eigen::Index(j)] = from_filter(ParameterField::kind_of_param(estimable_.estimable[j]),
                                         belief_.x[Eigen::Index(n_x_ + j)]);
    }
    return v;
}

void AugmentedFilter::clamp_parameters() {
    const auto& b = options_.bounds;
    for (std::size_t j = 0; j < n_estimable(); ++j) {
        const auto kind = ParameterField::kind_of_param(estimable_.estimable[j]);
        double& v = belief_.x[Eigen::Index(n_x_ + j)];
        if (kind == ParamKind::Ks) {
            v = std::isnan(v) ? std::log(b.k_s_min) : std::clamp(v, std::log(b.k_s_min), std::log(b.k_s_max));
        } else {
            v = b.clamp(kind, v);
        }
    }
}

namespace {

// dR/dphi columns for the active entries, in filter units (d/d ln K_s = K_s d/dK_s).
SparseMatrix active_columns(const SparseMatrix& raw, const EstimableSet& e, const std::vector<std::size_t>& act,
                            const ParameterField& params) {
    std::vector<std::size_t> glob;
    for (std::size_t j : act) glob.push_back(e.estimable[j]);
    SparseMatrix out = glob.empty() ? SparseMatrix(raw.rows(), 0) : select_columns(raw, glob);
    for (std::size_t k = 0; k < glob.size(); ++k) {
        if (ParameterField::kind_of_param(glob[k]) == ParamKind::Ks) out.col(Eigen::Index(k)) *= params.get(glob[k]);
    }
    return out;
}

// Linear map of one outer step, dh+ = T_h dh + T_p dphi_active, chained
// over the sub-steps of the advance.
struct StepMap {
    Eigen::MatrixXd t_h;
    Eigen::MatrixXd t_p;
};

StepMap step_map(const std::vector<StepLinearization>& lins, const EstimableSet& e,
                 const std::vector<std::size_t>& act, const ParameterField& params, Eigen::Index n_x) {
    StepMap m;
    m.t_h = Eigen::MatrixXd::Identity(n_x, n_x);
    m.t_p = Eigen::MatrixXd::Zero(n_x, Eigen::Index(act.size()));
    for (const auto& lin : lins) {
        m.t_h = lin.apply_state(m.t_h);
        if (!act.empty()) {
            const SparseMatrix b = active_columns(lin.dparam, e, act, params);
            m.t_p = lin.lu->solve(Eigen::MatrixXd(lin.storage.asDiagonal() * m.t_p + Eigen::MatrixXd(b)));
        }
    }
    return m;
}

}  // namespace

PredictStats AugmentedFilter::predict(const SurfaceForcing& forcing, double dt) {
    const ParameterField params = parameters();
    const auto adv = model_->advance(state(), params, forcing, dt, true);
    const auto act = active_positions();

    const auto nx = Eigen::Index(n_x_);
    const StepMap map = step_map(adv.linearizations, estimable_, act, params, nx);
    const Eigen::Index n = belief_.x.size();
    std::vector<Eigen::Index> idx_a;
    for (std::size_t j : act) idx_a.push_back(nx + Eigen::Index(j));

    Eigen::MatrixXd& p = belief_.p;
    Eigen::MatrixXd m = map.t_h * p.topRows(nx);
    if (!idx_a.empty()) m.noalias() += map.t_p * p(idx_a, Eigen::all);
    Eigen::MatrixXd phh = m.leftCols(nx) * map.t_h.transpose();
    if (!idx_a.empty()) phh.noalias() += m(Eigen::all, idx_a) * map.t_p.transpose();

    Eigen::MatrixXd pn = p;
    pn.topLeftCorner(nx, nx) = phh;
    if (n > nx) {
        pn.topRightCorner(nx, n - nx) = m.rightCols(n - nx);
        pn.bottomLeftCorner(n - nx, nx) = m.rightCols(n - nx).transpose();
    }
    pn.diagonal().head(nx).array() += options_.noise.q_head;
    for (std::size_t j : act) {
        const auto kind = ParameterField::kind_of_param(estimable_.estimable[j]);
        pn(nx + Eigen::Index(j), nx + Eigen::Index(j)) += options_.noise.q_param[std::size_t(kind)];
    }
    PredictStats st;
    st.negative_variances = symmetrize(pn);
    st.substeps = adv.substeps;
    st.newton_iterations = adv.newton_iterations;
    st.top_cap_hits = adv.top_cap_hits;

    p = std::move(pn);
    belief_.x.head(nx) = adv.state.head;
    return st;
}

Eigen::VectorXd AugmentedFilter::measurement(const MeasurementBatch& batch) const {
    return model_->observe(state(), parameters(), batch.node_columns, batch.n_c);
}

Eigen::MatrixXd AugmentedFilter::measurement_jacobian(const MeasurementBatch& batch) const {
    const ParameterField params = parameters();
    const auto jac = model_->observe_jacobian(state(), params, batch.node_columns, batch.n_c);
    const auto act = active_positions();
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(jac.d_head.rows(), belief_.x.size());
    c.leftCols(Eigen::Index(n_x_)) = Eigen::MatrixXd(jac.d_head);
    const SparseMatrix dp = active_columns(jac.d_param, estimable_, act, params);
    for (std::size_t k = 0; k < act.size(); ++k) {
        c.col(Eigen::Index(n_x_ + act[k])) = Eigen::VectorXd(dp.col(Eigen::Index(k)));
    }
    return c;
}

UpdateStats AugmentedFilter::update(const MeasurementBatch& batch) {
    if (batch.size() == 0) throw InvalidState("empty measurement batch");
    batch.validate(model_->grid());
    const Eigen::VectorXd nu = batch.values - measurement(batch);
    const Eigen::MatrixXd c = measurement_jacobian(batch);
    const Eigen::MatrixXd r = Eigen::MatrixXd::Identity(nu.size(), nu.size()) * options_.noise.r;
    UpdateStats st;
    const Belief prior{belief_.x, belief_.p};
    Belief post = kf_update(prior, nu, c, r, options_.update, &st);
    belief_.x = std::move(post.x);
    belief_.p = std::move(post.p);
    clamp_parameters();
    for (std::size_t j = 0; j < n_estimable(); ++j) {
        if (belief_.active_mask[j]) ever_active_[j] = true;
    }
    if (options_.kriging_refresh) refresh_nonestimable();
    return st;
}

KrigingUpdateReport AugmentedFilter::refresh_nonestimable() {
    KrigingUpdateReport rep;
    if (estimable_.nonestimable.empty() && !options_.krige_unvisited) return rep;
    std::vector<std::size_t> samples, unvisited;
    for (std::size_t j = 0; j < n_estimable(); ++j) {
        if (ever_active_[j]) {
            samples.push_back(estimable_.estimable[j]);
        } else if (options_.krige_unvisited) {
            unvisited.push_back(j);
        }
    }
    if (samples.empty()) {
        rep.skipped = true;
        return rep;
    }
    std::vector<std::size_t> targets = estimable_.nonestimable;
    for (std::size_t j : unvisited) targets.push_back(estimable_.estimable[j]);
    if (targets.empty()) return rep;
    auto opts = options_.kriging;
    opts.bounds = options_.bounds;
    nonestimable_ = update_nonestimable(parameters(), model_->grid(), samples, targets, opts, &rep);
    // never-active entries carry no covariance with the rest, so moving their
    // mean leaves P consistent
    for (std::size_t j : unvisited) {
        const std::size_t g = estimable_.estimable[j];
        belief_.x[Eigen::Index(n_x_ + j)] = to_filter(ParameterField::kind_of_param(g), nonestimable_.get(g));
    }
    return rep;
}

Eigen::MatrixXd AugmentedFilter::transition_jacobian(const SurfaceForcing& forcing, double dt) const {
    const ParameterField params = parameters();
    const auto adv = model_->advance(state(), params, forcing, dt, true);
    const auto act = active_positions();
    const auto nx = Eigen::Index(n_x_);
    const StepMap map = step_map(adv.linearizations, estimable_, act, params, nx);
    const Eigen::Index n = belief_.x.size();
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
    a.topLeftCorner(nx, nx) = map.t_h;
    for (std::size_t k = 0; k < act.size(); ++k) {
        a.col(nx + Eigen::Index(act[k])).head(nx) = map.t_p.col(Eigen::Index(k));
    }
    return a;
}

// ---------------------------------------------------------------------------

AssimilationRun run_assimilation(AugmentedFilter& filter, const std::vector<StepInput>& steps,
                                 const RunOptions& options) {
    AssimilationRun run;
    int consecutive = 0;
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const auto& in = steps[k];
        StepRecord rec;
        rec.step = k + 1;
        rec.time_s = in.time_s;
        rec.sector = in.batch ? in.batch->sector : -1;
        filter.activate_sector(rec.sector);
        for (bool b : filter.belief().active_mask) rec.active += b;
        try {
            rec.predict = filter.predict(in.forcing, in.dt);
            if (in.batch && in.batch->size() > 0) rec.update = filter.update(*in.batch);
            consecutive = 0;
        } catch (const Error& e) {
            rec.failed = true;
            rec.failure = e.what();
            ++run.failures;
            ++consecutive;
        }
        if (options.head_stride > 0) {
            const auto h = filter.state().head;
            const Eigen::Index cnt = (h.size() + options.head_stride - 1) / options.head_stride;
            rec.head.resize(cnt);
            for (Eigen::Index i = 0; i < cnt; ++i) rec.head[i] = h[i * options.head_stride];
        }
        rec.estimable = filter.estimable_values();
        if (options.observer) options.observer(filter, rec);
        run.records.push_back(std::move(rec));
        if (consecutive >= options.max_consecutive_failures) {
            run.aborted = true;
            break;
        }
    }
    return run;
}

void write_trajectory_csv(const std::filesystem::path& path, const AssimilationRun& run) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "step,time_s,sector,active,failed,substeps,newton_iterations,measurements,gated,nis,"
         "innovation_rms,joseph_rel_diff,head_mean\n";
    for (const auto& r : run.records) {
        f << r.step << ',' << r.time_s << ',' << r.sector << ',' << r.active << ',' << int(r.failed) << ','
          << r.predict.substeps << ',' << r.predict.newton_iterations << ',' << r.update.measurements << ','
          << r.update.gated << ',' << r.update.nis << ',' << r.update.innovation_rms << ','
          << r.update.joseph_rel_diff << ',' << (r.head.size() ? r.head.mean() : 0.0) << '\n';
    }
}

void write_trajectory_json(const std::filesystem::path& path, const AssimilationRun& run) {
    nlohmann::json j;
    j["failures"] = run.failures;
    j["aborted"] = run.aborted;
    auto& steps = j["steps"] = nlohmann::json::array();
    for (const auto& r : run.records) {
        nlohmann::json s;
        s["step"] = r.step;
        s["time_s"] = r.time_s;
        s["sector"] = r.sector;
        s["active"] = r.active;
        if (r.failed) s["failure"] = r.failure;
        s["innovation"] = {{"measurements", r.update.measurements},
                           {"gated", r.update.gated},
                           {"nis", r.update.nis},
                           {"rms", r.update.innovation_rms}};
        s["head"] = std::vector<double>(r.head.data(), r.head.data() + r.head.size());
        s["estimable"] = std::vector<double>(r.estimable.data(), r.estimable.data() + r.estimable.size());
        steps.push_back(std::move(s));
    }
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(1) << '\n';
}

}  // namespace pivotsoil
