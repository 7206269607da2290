#include "pivotsoil/sensitivity.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "pivotsoil/errors.hpp"

namespace pivotsoil {

SensitivityState SensitivityState::zero(const CylGrid& grid, std::vector<std::size_t> param_indices) {
    SensitivityState s;
    s.param_indices = std::move(param_indices);
    for (std::size_t j : s.param_indices) {
        if (j >= grid.n_params()) throw InvalidState("sensitivity parameter index out of range");
    }
    s.x_phi = Eigen::MatrixXd::Zero(Eigen::Index(grid.n_nodes()), Eigen::Index(s.n_carried(grid)));
    return s;
}

SparseMatrix select_columns(const SparseMatrix& m, const std::vector<std::size_t>& indices) {
    if (indices.empty()) return m;
    std::vector<Eigen::Triplet<double>> t;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        for (SparseMatrix::InnerIterator it(m, Eigen::Index(indices[k])); it; ++it) {
            t.emplace_back(it.row(), Eigen::Index(k), it.value());
        }
    }
    SparseMatrix out(m.rows(), Eigen::Index(indices.size()));
    out.setFromTriplets(t.begin(), t.end());
    return out;
}

SensitivityState propagate_sensitivity(const SensitivityState& sens,
                                       const std::vector<StepLinearization>& steps) {
    SensitivityState out = sens;
    for (const auto& lin : steps) {
        if (lin.storage.size() != out.x_phi.rows()) throw InvalidState("sensitivity rows do not match the grid");
        const SparseMatrix b = select_columns(lin.dparam, sens.param_indices);
        if (b.cols() != out.x_phi.cols()) throw InvalidState("sensitivity columns do not match N_p");
        out.x_phi = lin.lu->solve(Eigen::MatrixXd(lin.storage.asDiagonal() * out.x_phi + Eigen::MatrixXd(b)));
    }
    ++out.time_index;
    return out;
}

PropagationResult propagate_sensitivity(const FieldModel& model, const FieldState& state,
                                        const SensitivityState& sens, const ParameterField& params,
                                        const SurfaceForcing& forcing, double dt) {
    if (std::size_t(sens.x_phi.rows()) != model.grid().n_nodes() ||
        std::size_t(sens.x_phi.cols()) != sens.n_carried(model.grid())) {
        throw InvalidState("sensitivity dimensions do not match the grid");
    }
    auto adv = model.advance(state, params, forcing, dt, true);
    return {std::move(adv.state), propagate_sensitivity(sens, adv.linearizations)};
}

Eigen::MatrixXd output_sensitivity(const FieldModel& model, const SensitivityState& sens,
                                   const FieldState& state, const ParameterField& params,
                                   const std::vector<std::size_t>& node_columns, int n_c) {
    const auto jac = model.observe_jacobian(state, params, node_columns, n_c);
    Eigen::MatrixXd out = jac.d_head * sens.x_phi;
    out += Eigen::MatrixXd(select_columns(jac.d_param, sens.param_indices));
    return out;
}

Eigen::MatrixXd scale_sensitivity(const Eigen::MatrixXd& s_y, const Eigen::VectorXd& phi,
                                  const Eigen::VectorXd& y) {
    if (phi.size() != s_y.cols() || y.size() != s_y.rows()) {
        throw InvalidState("scaling vectors do not match the sensitivity matrix");
    }
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (!(std::abs(y[i]) >= 1e-9)) throw DegenerateScaling("output value too close to zero for scaling");
    }
    return y.cwiseInverse().asDiagonal() * s_y * phi.asDiagonal();
}

void accumulate(SectorSensitivity& store, const MeasurementBatch& batch, const Eigen::MatrixXd& s_tilde) {
    if (std::size_t(s_tilde.rows()) != batch.node_columns.size()) {
        throw InvalidState("scaled sensitivity rows do not match the batch");
    }
    if (store.rows.size() == 0 && store.node_columns.empty()) {
        store.node_columns = batch.node_columns;
        if (store.sector_id < 0) store.sector_id = batch.sector;
        store.rows = s_tilde;
    } else {
        auto a = store.node_columns, b = batch.node_columns;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) throw SectorMismatch("batch does not measure this sector's node set");
        if (s_tilde.cols() != store.rows.cols()) throw InvalidState("sensitivity column count changed");
        Eigen::MatrixXd grown(store.rows.rows() + s_tilde.rows(), store.rows.cols());
        grown << store.rows, s_tilde;
        store.rows = std::move(grown);
    }
    store.provenance.insert(store.provenance.end(), std::size_t(s_tilde.rows()), batch.time_index);
}

RankResult rank_analysis(const Eigen::MatrixXd& s_tilde, double gap_decades, double fallback_rel) {
    if (s_tilde.rows() < 1 || s_tilde.cols() < 1) throw InvalidState("rank analysis needs a nonempty matrix");
    RankResult res;
    Eigen::BDCSVD<Eigen::MatrixXd> svd(s_tilde);
    res.singular_values = svd.singularValues();
    const auto& s = res.singular_values;
    const Eigen::Index k = s.size();
    const double s1 = s[0];
    if (!(s1 > 0.0)) return res;
    const double floor_val = double(std::max(s_tilde.rows(), s_tilde.cols())) *
                             std::numeric_limits<double>::epsilon() * s1;
    auto lg = [&](double v) { return std::log10(std::max(v, floor_val)); };
    double best = 0.0;
    Eigen::Index best_at = -1;
    for (Eigen::Index i = 0; i + 1 < k; ++i) {
        const double gap = lg(s[i]) - lg(s[i + 1]);
        if (gap > best) {
            best = gap;
            best_at = i;
        }
    }
    if (best_at >= 0 && best >= gap_decades) {
        res.rank = int(best_at + 1);
        res.gap_decades = best;
        res.from_gap = true;
        return res;
    }
    for (Eigen::Index i = 0; i < k; ++i) {
        if (s[i] > fallback_rel * s1) ++res.rank;
    }
    return res;
}

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) f << (j ? "," : "") << m(i, j);
        f << '\n';
    }
}

void write_spectrum_csv(const std::filesystem::path& path, const Eigen::VectorXd& sigma) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "index,sigma,log10_sigma\n";
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        f << i + 1 << ',' << sigma[i] << ',' << (sigma[i] > 0 ? std::log10(sigma[i]) : -400.0) << '\n';
    }
}

}  // namespace pivotsoil
