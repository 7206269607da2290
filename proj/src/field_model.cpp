#include "pivotsoil/field_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "pivotsoil/errors.hpp"

namespace pivotsoil {

using Triplet = Eigen::Triplet<double>;

// ---------------------------------------------------------------------------
// CylGrid
// ---------------------------------------------------------------------------

CylGrid CylGrid::make(int n_r, int n_theta, int n_z, double radius_m, double depth_m,
                      double theta_span_rad, std::vector<double> z_nodes) {
    CylGrid g;
    g.n_r = n_r;
    g.n_theta = n_theta;
    g.n_z = n_z;
    g.radius_m = radius_m;
    g.depth_m = depth_m;
    g.theta_span_rad = theta_span_rad;
    g.topology = std::abs(theta_span_rad - 2.0 * std::numbers::pi) < 1e-9
                     ? AzimuthalTopology::Periodic
                     : AzimuthalTopology::Bounded;
    if (n_r <= 0 || n_theta <= 0 || n_z <= 0) throw InvalidState("grid node counts must be positive");
    const double dr = radius_m / n_r;
    g.r_coords.resize(std::size_t(n_r));
    for (int i = 0; i < n_r; ++i) g.r_coords[std::size_t(i)] = (i + 0.5) * dr;
    if (z_nodes.empty()) {
        const double dz = depth_m / n_z;
        z_nodes.resize(std::size_t(n_z));
        for (int k = 0; k < n_z; ++k) z_nodes[std::size_t(k)] = (k + 0.5) * dz;
    }
    g.z_coords = std::move(z_nodes);
    g.validate();
    return g;
}

void CylGrid::validate() const {
    if (n_r <= 0 || n_theta <= 0 || n_z <= 0) throw InvalidState("grid node counts must be positive");
    if (!(radius_m > 0.0) || !(depth_m > 0.0)) throw InvalidState("grid extents must be positive");
    if (!(theta_span_rad > 0.0) || theta_span_rad > 2.0 * std::numbers::pi + 1e-9) {
        throw InvalidState("azimuthal span must lie in (0, 2 pi]");
    }
    const bool full = std::abs(theta_span_rad - 2.0 * std::numbers::pi) < 1e-9;
    if (full != (topology == AzimuthalTopology::Periodic)) {
        throw InvalidState("azimuthal topology must be periodic exactly when the span is 2 pi");
    }
    if (r_coords.size() != std::size_t(n_r) || z_coords.size() != std::size_t(n_z)) {
        throw InvalidState("coordinate array sizes do not match node counts");
    }
    if (!(r_coords.front() > 0.0)) throw InvalidState("first radial node must be off the axis");
    for (std::size_t i = 1; i < r_coords.size(); ++i) {
        if (!(r_coords[i] > r_coords[i - 1])) throw InvalidState("r_coords must be strictly increasing");
    }
    for (std::size_t k = 0; k < z_coords.size(); ++k) {
        if (z_coords[k] < 0.0 || z_coords[k] > depth_m) throw InvalidState("z_coords must lie in [0, depth]");
        if (k > 0 && !(z_coords[k] > z_coords[k - 1])) throw InvalidState("z_coords must be strictly increasing");
    }
}

std::vector<double> CylGrid::z_faces() const {
    std::vector<double> f(std::size_t(n_z) + 1);
    f.front() = 0.0;
    f.back() = depth_m;
    for (int k = 1; k < n_z; ++k) {
        f[std::size_t(k)] = 0.5 * (z_coords[std::size_t(k) - 1] + z_coords[std::size_t(k)]);
    }
    return f;
}

double CylGrid::column_area(int ir) const { return r_coords[std::size_t(ir)] * dr() * dtheta(); }

double CylGrid::cell_volume(int ir, int iz) const {
    const auto f = z_faces();
    return column_area(ir) * (f[std::size_t(iz) + 1] - f[std::size_t(iz)]);
}

std::vector<std::size_t> CylGrid::sector_columns(int ith) const {
    std::vector<std::size_t> cols;
    cols.reserve(std::size_t(n_r));
    for (int ir = 0; ir < n_r; ++ir) cols.push_back(column(ir, ith));
    return cols;
}

int CylGrid::nodes_within_depth(double depth) const {
    int count = 0;
    for (int k = n_z - 1; k >= 0; --k) {
        if (depth_m - z_coords[std::size_t(k)] <= depth + 1e-12) ++count;
        else break;
    }
    return std::max(count, 1);
}

// ---------------------------------------------------------------------------
// ParameterField / SurfaceForcing / Feddes
// ---------------------------------------------------------------------------

ParameterField::ParameterField(std::size_t n_columns, const SoilHydraulics& uniform)
    : columns_(n_columns, uniform) {}

ParameterField::ParameterField(std::vector<SoilHydraulics> columns) : columns_(std::move(columns)) {}

double ParameterField::get(std::size_t index) const {
    return columns_.at(column_of_param(index)).get(kind_of_param(index));
}

void ParameterField::set(std::size_t index, double value) {
    columns_.at(column_of_param(index)).set(kind_of_param(index), value);
}

Eigen::VectorXd ParameterField::to_vector() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(n_params()));
    for (std::size_t i = 0; i < n_params(); ++i) v[Eigen::Index(i)] = get(i);
    return v;
}

void ParameterField::validate() const {
    for (std::size_t c = 0; c < columns_.size(); ++c) {
        if (!columns_[c].is_valid()) {
            std::ostringstream os;
            os << "invalid hydraulic parameters at column " << c;
            throw InvalidState(os.str());
        }
    }
}

SurfaceForcing SurfaceForcing::zero(const CylGrid& grid) {
    SurfaceForcing f;
    f.irrigation.assign(grid.n_columns(), 0.0);
    f.evaporation.assign(grid.n_columns(), 0.0);
    f.transpiration.assign(grid.n_columns(), 0.0);
    return f;
}

void SurfaceForcing::validate(const CylGrid& grid) const {
    const std::size_t nc = grid.n_columns();
    if (irrigation.size() != nc || evaporation.size() != nc || transpiration.size() != nc) {
        throw InvalidState("forcing arrays must have one entry per surface column");
    }
    for (std::size_t c = 0; c < nc; ++c) {
        if (!(irrigation[c] >= 0.0) || !(evaporation[c] >= 0.0) || !(transpiration[c] >= 0.0)) {
            throw InvalidState("forcing rates must be non-negative");
        }
    }
    if (!(root_depth_m >= 0.0)) throw InvalidState("root depth must be non-negative");
}

double FeddesParams::stress(double h) const {
    if (h >= h_anaerobic || h <= h_wilting) return 0.0;
    if (h > h_optimal_wet) return (h_anaerobic - h) / (h_anaerobic - h_optimal_wet);
    if (h >= h_optimal_dry) return 1.0;
    return (h - h_wilting) / (h_optimal_dry - h_wilting);
}

double FeddesParams::dstress_dh(double h) const {
    if (h >= h_anaerobic || h <= h_wilting) return 0.0;
    if (h > h_optimal_wet) return -1.0 / (h_anaerobic - h_optimal_wet);
    if (h >= h_optimal_dry) return 0.0;
    return 1.0 / (h_optimal_dry - h_wilting);
}

// ---------------------------------------------------------------------------
// StepLinearization
// ---------------------------------------------------------------------------

Eigen::MatrixXd StepLinearization::apply(const Eigen::MatrixXd& x, const SparseMatrix& b_map,
                                         const Eigen::MatrixXd& y) const {
    Eigen::MatrixXd rhs = storage.asDiagonal() * x;
    if (b_map.cols() > 0 && y.rows() > 0) rhs += b_map * y;
    return lu->solve(rhs);
}

Eigen::MatrixXd StepLinearization::apply(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) const {
    return apply(x, dparam, y);
}

Eigen::MatrixXd StepLinearization::apply_state(const Eigen::MatrixXd& x) const {
    return lu->solve(Eigen::MatrixXd(storage.asDiagonal() * x));
}

// ---------------------------------------------------------------------------
// FieldModel
// ---------------------------------------------------------------------------

struct FieldModel::Balance {
    Eigen::VectorXd f;               // net inflow minus root uptake, m^3/s
    std::vector<Triplet> jac;        // df/dh
    std::vector<Triplet> dparam;     // df/dphi
    std::vector<HydraulicDerivatives> hd;
    int cap_hits = 0;
};

FieldModel::FieldModel(CylGrid grid, ModelOptions options)
    : grid_(std::move(grid)), options_(options) {
    grid_.validate();
    const auto& g = grid_;
    const auto zf = g.z_faces();
    const double dr = g.dr();
    const double dth = g.dtheta();
    volume_.assign(g.n_nodes(), 0.0);
    column_area_.assign(g.n_columns(), 0.0);
    for (int ith = 0; ith < g.n_theta; ++ith) {
        for (int ir = 0; ir < g.n_r; ++ir) {
            const double r = g.r_coords[std::size_t(ir)];
            column_area_[g.column(ir, ith)] = g.column_area(ir);
            for (int iz = 0; iz < g.n_z; ++iz) {
                const std::size_t i = g.node(ir, ith, iz);
                const double dz = zf[std::size_t(iz) + 1] - zf[std::size_t(iz)];
                volume_[i] = r * dr * dth * dz;
                if (ir + 1 < g.n_r) {
                    const double rf = (ir + 1) * dr;
                    faces_.push_back({i, g.node(ir + 1, ith, iz), rf * dth * dz / dr, 0.0});
                }
                const bool periodic = g.topology == AzimuthalTopology::Periodic;
                if (g.n_theta > 1 && (ith + 1 < g.n_theta || periodic)) {
                    const int next = (ith + 1) % g.n_theta;
                    faces_.push_back({i, g.node(ir, next, iz), dr * dz / (r * dth), 0.0});
                }
                if (iz + 1 < g.n_z) {
                    const double dist = g.z_coords[std::size_t(iz) + 1] - g.z_coords[std::size_t(iz)];
                    faces_.push_back({i, g.node(ir, ith, iz + 1), r * dr * dth / dist, dist});
                }
            }
        }
    }
}

std::vector<double> FieldModel::root_weights(double root_depth) const {
    const auto zf = grid_.z_faces();
    std::vector<double> w(std::size_t(grid_.n_z), 0.0);
    if (!(root_depth > 0.0)) return w;
    const double top = grid_.depth_m;
    const double bottom = std::max(0.0, top - root_depth);
    const double effective = top - bottom;
    for (int k = 0; k < grid_.n_z; ++k) {
        const double lo = zf[std::size_t(k)];
        const double hi = zf[std::size_t(k) + 1];
        const double overlap = std::max(0.0, std::min(hi, top) - std::max(lo, bottom));
        w[std::size_t(k)] = overlap / (effective * (hi - lo));
    }
    return w;
}

void FieldModel::check_inputs(const FieldState& state, const ParameterField& params,
                              const SurfaceForcing& forcing) const {
    if (std::size_t(state.head.size()) != grid_.n_nodes()) {
        throw InvalidState("state size does not match grid");
    }
    if (!state.head.allFinite()) throw InvalidState("state contains non-finite pressure heads");
    if (params.n_columns() != grid_.n_columns()) {
        throw InvalidState("parameter field size does not match grid");
    }
    params.validate();
    forcing.validate(grid_);
}

void FieldModel::flux_balance(const Eigen::VectorXd& h, const ParameterField& params,
                              const SurfaceForcing& forcing, bool with_jacobian, bool with_dparam,
                              Balance& out) const {
    const auto& g = grid_;
    const std::size_t nx = g.n_nodes();
    out.f.setZero(Eigen::Index(nx));
    out.jac.clear();
    out.dparam.clear();
    out.cap_hits = 0;
    out.hd.resize(nx);
    for (std::size_t i = 0; i < nx; ++i) {
        out.hd[i] = hydraulic_derivatives(h[Eigen::Index(i)], params.column(g.column_of_node(i)));
    }
    if (with_jacobian) out.jac.reserve(faces_.size() * 4 + nx * 2);
    if (with_dparam) out.dparam.reserve(faces_.size() * 12 + nx * 4);

    const bool harmonic = options_.interface_mean == InterfaceMean::Harmonic;
    auto add_param = [&](std::size_t row, std::size_t node, double scale,
                         const std::array<double, kParamKinds>& dk) {
        const std::size_t col = g.column_of_node(node);
        for (std::size_t k = 0; k < kParamKinds; ++k) {
            if (dk[k] != 0.0) {
                out.dparam.emplace_back(Eigen::Index(row),
                                        Eigen::Index(ParameterField::param_index(col, ParamKind(k))),
                                        scale * dk[k]);
            }
        }
    };

    for (const Face& face : faces_) {
        const auto& da = out.hd[face.a];
        const auto& db = out.hd[face.b];
        double kbar, wa, wb;
        if (harmonic) {
            const double s = da.k + db.k;
            kbar = s > 0.0 ? 2.0 * da.k * db.k / s : 0.0;
            wa = s > 0.0 ? 2.0 * db.k * db.k / (s * s) : 0.0;
            wb = s > 0.0 ? 2.0 * da.k * da.k / (s * s) : 0.0;
        } else {
            kbar = 0.5 * (da.k + db.k);
            wa = 0.5;
            wb = 0.5;
        }
        const double dh = h[Eigen::Index(face.b)] - h[Eigen::Index(face.a)] + face.dz;
        const double flow = face.geom * kbar * dh;  // into a
        out.f[Eigen::Index(face.a)] += flow;
        out.f[Eigen::Index(face.b)] -= flow;
        if (with_jacobian) {
            const double dfa = face.geom * (wa * da.dk_dh * dh - kbar);
            const double dfb = face.geom * (wb * db.dk_dh * dh + kbar);
            const auto ia = Eigen::Index(face.a);
            const auto ib = Eigen::Index(face.b);
            out.jac.emplace_back(ia, ia, dfa);
            out.jac.emplace_back(ia, ib, dfb);
            out.jac.emplace_back(ib, ia, -dfa);
            out.jac.emplace_back(ib, ib, -dfb);
        }
        if (with_dparam) {
            add_param(face.a, face.a, face.geom * wa * dh, da.dk_dp);
            add_param(face.a, face.b, face.geom * wb * dh, db.dk_dp);
            add_param(face.b, face.a, -face.geom * wa * dh, da.dk_dp);
            add_param(face.b, face.b, -face.geom * wb * dh, db.dk_dp);
        }
    }

    const std::vector<double> weights = root_weights(forcing.root_depth_m);
    for (std::size_t col = 0; col < g.n_columns(); ++col) {
        const double area = column_area_[col];
        const std::size_t bottom = col * std::size_t(g.n_z);
        const std::size_t top = bottom + std::size_t(g.n_z) - 1;

        if (options_.bottom == BottomBoundary::FreeDrainage) {
            const auto& d = out.hd[bottom];
            out.f[Eigen::Index(bottom)] -= area * d.k;
            if (with_jacobian) out.jac.emplace_back(Eigen::Index(bottom), Eigen::Index(bottom), -area * d.dk_dh);
            if (with_dparam) add_param(bottom, bottom, -area, d.dk_dp);
        }

        if (options_.top == TopBoundary::Flux) {
            const double q = forcing.irrigation[col] - forcing.evaporation[col];
            if (q != 0.0) {
                const auto& d = out.hd[top];
                const double limit = options_.top_gradient_cap * d.k;
                if (std::abs(q) > limit) {
                    const double sign = q > 0.0 ? 1.0 : -1.0;
                    ++out.cap_hits;
                    out.f[Eigen::Index(top)] += area * sign * limit;
                    const double s = area * sign * options_.top_gradient_cap;
                    if (with_jacobian) out.jac.emplace_back(Eigen::Index(top), Eigen::Index(top), s * d.dk_dh);
                    if (with_dparam) add_param(top, top, s, d.dk_dp);
                } else {
                    out.f[Eigen::Index(top)] += area * q;
                }
            }
        }

        const double tp = forcing.transpiration[col];
        if (tp > 0.0) {
            for (int k = 0; k < g.n_z; ++k) {
                const double w = weights[std::size_t(k)];
                if (w == 0.0) continue;
                const std::size_t i = bottom + std::size_t(k);
                const double hi = h[Eigen::Index(i)];
                out.f[Eigen::Index(i)] -= volume_[i] * options_.feddes.stress(hi) * tp * w;
                if (with_jacobian) {
                    const double ds = options_.feddes.dstress_dh(hi);
                    if (ds != 0.0) out.jac.emplace_back(Eigen::Index(i), Eigen::Index(i), -volume_[i] * ds * tp * w);
                }
            }
        }
    }
}

Eigen::VectorXd FieldModel::rhs(const FieldState& state, const ParameterField& params,
                                const SurfaceForcing& forcing) const {
    check_inputs(state, params, forcing);
    Balance b;
    flux_balance(state.head, params, forcing, false, false, b);
    Eigen::VectorXd out(b.f.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        out[i] = b.f[i] / (volume_[std::size_t(i)] * b.hd[std::size_t(i)].c);
    }
    return out;
}

namespace {

double storage_water(double h, const HydraulicDerivatives& d, const SoilHydraulics& p) {
    return d.theta + (h > 0.0 ? p.s_r * h : 0.0);
}

}  // namespace

StepResult FieldModel::step_implicit(const FieldState& state, const ParameterField& params,
                                     const SurfaceForcing& forcing, double dt) const {
    if (!(dt > 0.0)) throw InvalidState("time step must be positive");
    check_inputs(state, params, forcing);
    const auto& g = grid_;
    const std::size_t nx = g.n_nodes();
    const Eigen::VectorXd& h_old = state.head;

    Eigen::VectorXd w_old(static_cast<Eigen::Index>(nx));
    for (std::size_t i = 0; i < nx; ++i) {
        const auto& p = params.column(g.column_of_node(i));
        const double hi = h_old[Eigen::Index(i)];
        w_old[Eigen::Index(i)] = water_content(hi, p) + (hi > 0.0 ? p.s_r * hi : 0.0);
    }

    StepResult result;
    Eigen::VectorXd h = h_old;
    Balance b;
    Eigen::SparseLU<SparseMatrix> lu;
    SparseMatrix jac(static_cast<Eigen::Index>(nx), static_cast<Eigen::Index>(nx));
    bool analyzed = false;
    double last = std::numeric_limits<double>::infinity();
    const auto& nw = options_.newton;

    for (int it = 1; it <= nw.max_iterations; ++it) {
        flux_balance(h, params, forcing, true, false, b);
        Eigen::VectorXd residual(static_cast<Eigen::Index>(nx));
        for (std::size_t i = 0; i < nx; ++i) {
            const auto& p = params.column(g.column_of_node(i));
            const double hi = h[Eigen::Index(i)];
            residual[Eigen::Index(i)] =
                volume_[i] * (storage_water(hi, b.hd[i], p) - w_old[Eigen::Index(i)]) / dt -
                b.f[Eigen::Index(i)];
            b.jac.emplace_back(Eigen::Index(i), Eigen::Index(i), 0.0);
        }
        // J = diag(V C / dt) - df/dh
        for (auto& t : b.jac) t = Triplet(t.row(), t.col(), -t.value());
        for (std::size_t i = 0; i < nx; ++i) {
            b.jac.emplace_back(Eigen::Index(i), Eigen::Index(i), volume_[i] * b.hd[i].c / dt);
        }
        jac.setFromTriplets(b.jac.begin(), b.jac.end());
        if (!analyzed) {
            lu.analyzePattern(jac);
            analyzed = true;
        }
        lu.factorize(jac);
        if (lu.info() != Eigen::Success) {
            throw NonConvergence("singular Newton Jacobian", last, it);
        }
        Eigen::VectorXd delta = lu.solve(-residual);
        if (!delta.allFinite()) throw NonConvergence("non-finite Newton increment", last, it);
        const double cap = nw.max_increment;
        for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] = std::clamp(delta[i], -cap, cap);
        h += delta;
        last = delta.lpNorm<Eigen::Infinity>();
        result.iterations = it;
        result.top_cap_hits = b.cap_hits;
        if (last < nw.tolerance) {
            result.state.head = std::move(h);
            result.last_increment = last;
            return result;
        }
    }
    std::ostringstream os;
    os << "Newton did not converge in " << nw.max_iterations << " iterations (last |dh| = " << last
       << " m)";
    throw NonConvergence(os.str(), last, nw.max_iterations);
}

StepLinearization FieldModel::linearize(const Eigen::VectorXd& h_new, const Eigen::VectorXd& h_old,
                                        const ParameterField& params,
                                        const SurfaceForcing& forcing, double dt) const {
    const auto& g = grid_;
    const std::size_t nx = g.n_nodes();
    const std::size_t np = g.n_params();
    Balance b;
    flux_balance(h_new, params, forcing, true, true, b);

    StepLinearization lin;
    lin.dt = dt;
    std::vector<Triplet> jt;
    jt.reserve(b.jac.size() + nx);
    for (const auto& t : b.jac) jt.emplace_back(t.row(), t.col(), -t.value());
    for (std::size_t i = 0; i < nx; ++i) {
        jt.emplace_back(Eigen::Index(i), Eigen::Index(i), volume_[i] * b.hd[i].c / dt);
    }
    SparseMatrix jac(static_cast<Eigen::Index>(nx), static_cast<Eigen::Index>(nx));
    jac.setFromTriplets(jt.begin(), jt.end());
    lin.lu = std::make_shared<Eigen::SparseLU<SparseMatrix>>();
    lin.lu->compute(jac);
    if (lin.lu->info() != Eigen::Success) throw NonConvergence("singular step Jacobian", 0.0, 0);

    // B = -dR/dphi = df/dphi - V (dtheta/dphi(h_new) - dtheta/dphi(h_old)) / dt
    lin.storage.resize(Eigen::Index(nx));
    std::vector<Triplet> bt = std::move(b.dparam);
    for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t col = g.column_of_node(i);
        const auto& p = params.column(col);
        const auto d_old = hydraulic_derivatives(h_old[Eigen::Index(i)], p);
        lin.storage[Eigen::Index(i)] = volume_[i] * d_old.c / dt;
        for (std::size_t k = 0; k < kParamKinds; ++k) {
            const double dth = b.hd[i].dtheta_dp[k] - d_old.dtheta_dp[k];
            if (dth != 0.0) {
                bt.emplace_back(Eigen::Index(i),
                                Eigen::Index(ParameterField::param_index(col, ParamKind(k))),
                                -volume_[i] * dth / dt);
            }
        }
    }
    lin.dparam.resize(Eigen::Index(nx), Eigen::Index(np));
    lin.dparam.setFromTriplets(bt.begin(), bt.end());
    return lin;
}

void FieldModel::advance_recursive(const FieldState& state, const ParameterField& params,
                                   const SurfaceForcing& forcing, double dt, int depth,
                                   bool want_lin, AdvanceResult& out) const {
    try {
        StepResult r = step_implicit(state, params, forcing, dt);
        if (want_lin) out.linearizations.push_back(linearize(r.state.head, state.head, params, forcing, dt));
        out.newton_iterations += r.iterations;
        out.top_cap_hits += r.top_cap_hits;
        out.substeps = 1;
        out.state = std::move(r.state);
    } catch (const NonConvergence&) {
        if (depth >= options_.newton.max_halvings) throw;
        AdvanceResult first;
        advance_recursive(state, params, forcing, 0.5 * dt, depth + 1, want_lin, first);
        AdvanceResult second;
        advance_recursive(first.state, params, forcing, 0.5 * dt, depth + 1, want_lin, second);
        out.newton_iterations += first.newton_iterations + second.newton_iterations;
        out.top_cap_hits += first.top_cap_hits + second.top_cap_hits;
        out.substeps = first.substeps + second.substeps;
        for (auto& l : first.linearizations) out.linearizations.push_back(std::move(l));
        for (auto& l : second.linearizations) out.linearizations.push_back(std::move(l));
        out.state = std::move(second.state);
    }
}

AdvanceResult FieldModel::advance(const FieldState& state, const ParameterField& params,
                                  const SurfaceForcing& forcing, double dt, bool linearize) const {
    AdvanceResult out;
    advance_recursive(state, params, forcing, dt, 0, linearize, out);
    return out;
}

Eigen::VectorXd FieldModel::observe(const FieldState& state, const ParameterField& params,
                                    const std::vector<std::size_t>& columns, int n_c) const {
    const auto& g = grid_;
    if (n_c < 1 || n_c > g.n_z) throw InvalidState("N_c must lie in [1, n_z]");
    Eigen::VectorXd y(Eigen::Index(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) {
        const std::size_t col = columns[j];
        if (col >= g.n_columns()) throw InvalidState("measured column index out of range");
        const auto& p = params.column(col);
        double sum = 0.0;
        for (int k = 0; k < n_c; ++k) {
            sum += water_content(state.head[Eigen::Index(g.surface_node(col) - std::size_t(k))], p);
        }
        y[Eigen::Index(j)] = sum / n_c;
    }
    return y;
}

ObservationJacobian FieldModel::observe_jacobian(const FieldState& state,
                                                 const ParameterField& params,
                                                 const std::vector<std::size_t>& columns,
                                                 int n_c) const {
    const auto& g = grid_;
    if (n_c < 1 || n_c > g.n_z) throw InvalidState("N_c must lie in [1, n_z]");
    std::vector<Triplet> th, tp;
    for (std::size_t j = 0; j < columns.size(); ++j) {
        const std::size_t col = columns[j];
        if (col >= g.n_columns()) throw InvalidState("measured column index out of range");
        const auto& p = params.column(col);
        std::array<double, kParamKinds> dp{};
        for (int k = 0; k < n_c; ++k) {
            const std::size_t node = g.surface_node(col) - std::size_t(k);
            const auto d = hydraulic_derivatives(state.head[Eigen::Index(node)], p);
            th.emplace_back(Eigen::Index(j), Eigen::Index(node), d.dtheta_dh / n_c);
            for (std::size_t q = 0; q < kParamKinds; ++q) dp[q] += d.dtheta_dp[q] / n_c;
        }
        for (std::size_t q = 0; q < kParamKinds; ++q) {
            if (dp[q] != 0.0) {
                tp.emplace_back(Eigen::Index(j),
                                Eigen::Index(ParameterField::param_index(col, ParamKind(q))), dp[q]);
            }
        }
    }
    ObservationJacobian out;
    out.d_head.resize(Eigen::Index(columns.size()), Eigen::Index(g.n_nodes()));
    out.d_head.setFromTriplets(th.begin(), th.end());
    out.d_param.resize(Eigen::Index(columns.size()), Eigen::Index(g.n_params()));
    out.d_param.setFromTriplets(tp.begin(), tp.end());
    return out;
}

double FieldModel::total_water(const FieldState& state, const ParameterField& params) const {
    double total = 0.0;
    for (std::size_t i = 0; i < grid_.n_nodes(); ++i) {
        total += water_content(state.head[Eigen::Index(i)], params.column(grid_.column_of_node(i))) *
                 volume_[i];
    }
    return total;
}

double FieldModel::face_flux(std::size_t a, std::size_t b, const FieldState& state,
                             const ParameterField& params) const {
    for (const Face& f : faces_) {
        if ((f.a == a && f.b == b) || (f.a == b && f.b == a)) {
            const auto& pa = params.column(grid_.column_of_node(f.a));
            const auto& pb = params.column(grid_.column_of_node(f.b));
            const double ha = state.head[Eigen::Index(f.a)];
            const double hb = state.head[Eigen::Index(f.b)];
            const double ka = conductivity(ha, pa);
            const double kb = conductivity(hb, pb);
            const double kbar = options_.interface_mean == InterfaceMean::Harmonic
                                    ? (ka + kb > 0.0 ? 2.0 * ka * kb / (ka + kb) : 0.0)
                                    : 0.5 * (ka + kb);
            const double into_fa = f.geom * kbar * (hb - ha + f.dz);
            return f.a == a ? -into_fa : into_fa;
        }
    }
    throw InvalidState("nodes do not share a face");
}

Eigen::VectorXd sink_field(const FieldState& state, const CylGrid& grid, double crop_et,
                           double root_depth, const FeddesParams& feddes) {
    if (!(crop_et >= 0.0)) throw InvalidState("crop ET must be non-negative");
    Eigen::VectorXd s = Eigen::VectorXd::Zero(Eigen::Index(grid.n_nodes()));
    if (crop_et == 0.0 || !(root_depth > 0.0)) return s;
    const auto zf = grid.z_faces();
    const double top = grid.depth_m;
    const double bottom = std::max(0.0, top - root_depth);
    for (std::size_t i = 0; i < grid.n_nodes(); ++i) {
        const int k = grid.iz_of_node(i);
        const double lo = zf[std::size_t(k)];
        const double hi = zf[std::size_t(k) + 1];
        const double overlap = std::max(0.0, std::min(hi, top) - std::max(lo, bottom));
        if (overlap == 0.0) continue;
        const double w = overlap / ((top - bottom) * (hi - lo));
        s[Eigen::Index(i)] = feddes.stress(state.head[Eigen::Index(i)]) * crop_et * w;
    }
    return s;
}

}  // namespace pivotsoil
