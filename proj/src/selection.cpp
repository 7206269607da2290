#include "pivotsoil/selection.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "pivotsoil/errors.hpp"
#include "pivotsoil/field_model.hpp"

namespace pivotsoil {

namespace {

// First index of the maximum; later equal values never win.
Eigen::Index argmax_lowest(const Eigen::VectorXd& v) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

}  // namespace

SelectionResult orthogonal_projection_select(const Eigen::MatrixXd& s, int rank_target, double cutoff) {
    if (!s.allFinite()) throw InvalidState("sensitivity matrix has non-finite entries");
    SelectionResult res;
    if (s.cols() == 0 || rank_target <= 0) return res;
    rank_target = std::min<int>(rank_target, int(std::min(s.rows(), s.cols())));
    const Eigen::VectorXd norms = s.colwise().norm().transpose();
    const double top = norms.maxCoeff();
    if (cutoff <= 0.0) cutoff = 1e-8 * top;
    res.max_residual_norm.push_back(top);
    if (!(top > 0.0) || top < cutoff) {
        res.stopped_by_cutoff = true;
        return res;
    }
    res.selected.push_back(std::size_t(argmax_lowest(norms)));

    Eigen::MatrixXd x(s.rows(), 0);
    while (true) {
        x.conservativeResize(Eigen::NoChange, x.cols() + 1);
        x.col(x.cols() - 1) = s.col(Eigen::Index(res.selected.back()));
        const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(x).singularValues();
        const double c = sv[sv.size() - 1] > 0.0 ? sv[0] / sv[sv.size() - 1] : std::numeric_limits<double>::infinity();
        res.gram_condition.push_back(c * c);
        if (int(res.selected.size()) >= rank_target) break;

        // Z = X (X^T X)^{-1} X^T S = Q Q^T S with X = QR
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(x);
        const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(s.rows(), x.cols());
        const Eigen::MatrixXd resid = s - q * (q.transpose() * s);
        Eigen::VectorXd rn = resid.colwise().norm().transpose();
        for (std::size_t j : res.selected) rn[Eigen::Index(j)] = 0.0;
        const Eigen::Index j = argmax_lowest(rn);
        res.max_residual_norm.push_back(rn[j]);
        if (rn[j] < cutoff) {
            res.stopped_by_cutoff = true;
            break;
        }
        res.selected.push_back(std::size_t(j));
    }
    return res;
}

bool EstimableSet::is_estimable(std::size_t param) const {
    return std::binary_search(estimable.begin(), estimable.end(), param);
}

long EstimableSet::position(std::size_t param) const {
    const auto it = std::lower_bound(estimable.begin(), estimable.end(), param);
    if (it == estimable.end() || *it != param) return -1;
    return long(it - estimable.begin());
}

std::vector<std::size_t> EstimableSet::sector_positions(int sector) const {
    std::vector<std::size_t> out;
    const auto it = per_sector.find(sector);
    if (it == per_sector.end()) return out;
    for (std::size_t p : it->second) out.push_back(std::size_t(position(p)));
    std::sort(out.begin(), out.end());
    return out;
}

EstimableSet assemble_estimable(const std::map<int, std::vector<std::size_t>>& per_sector,
                                std::size_t n_params) {
    EstimableSet e;
    e.n_params = n_params;
    std::set<std::size_t> all;
    for (const auto& [sector, list] : per_sector) {
        std::vector<std::size_t> clean;
        std::set<std::size_t> seen;
        for (std::size_t p : list) {
            if (p >= n_params) throw InvalidState("selected parameter index out of range");
            if (seen.insert(p).second) clean.push_back(p);
        }
        all.insert(clean.begin(), clean.end());
        e.per_sector[sector] = std::move(clean);
    }
    e.estimable.assign(all.begin(), all.end());
    for (std::size_t p = 0; p < n_params; ++p) {
        if (!all.count(p)) e.nonestimable.push_back(p);
    }
    return e;
}

void write_estimable(const std::filesystem::path& path, const EstimableSet& set) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << "# n_params " << set.n_params << '\n';
    f << "sector,param_index,column,kind\n";
    for (const auto& [sector, list] : set.per_sector) {
        for (std::size_t p : list) {
            f << sector << ',' << p << ',' << ParameterField::column_of_param(p) << ','
              << param_kind_name(ParameterField::kind_of_param(p)) << '\n';
        }
    }
}

EstimableSet read_estimable(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t n_params = 0;
    bool have_n = false;
    std::map<int, std::vector<std::size_t>> per_sector;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (line.rfind("# n_params", 0) == 0) {
            n_params = std::stoul(line.substr(10));
            have_n = true;
            continue;
        }
        if (line[0] == '#' || line.rfind("sector,", 0) == 0) continue;
        std::istringstream ss(line);
        std::string sec, idx;
        if (!std::getline(ss, sec, ',') || !std::getline(ss, idx, ',')) {
            throw DataError("malformed estimable-set line: " + line);
        }
        try {
            per_sector[std::stoi(sec)].push_back(std::stoul(idx));
        } catch (const std::exception&) {
            throw DataError("malformed estimable-set line: " + line);
        }
    }
    if (!have_n) throw DataError("estimable-set file lacks the n_params line");
    return assemble_estimable(per_sector, n_params);
}

}  // namespace pivotsoil
