#include "qrgmm/quantreg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace qrgmm {

QuantileGrid::QuantileGrid(int m) : m_(m) {
    if (m < 3) throw DomainError("quantile grid needs m >= 3");
}

Vector QuantileGrid::levels() const {
    Vector t(size());
    for (int j = 0; j < size(); ++j) t[j] = level(j);
    return t;
}

int QuantileGrid::index_of(double tau) const {
    const double scaled = tau * m_;
    const long j = std::lround(scaled);
    if (j < 1 || j > m_ - 1) return -1;
    return std::abs(scaled - static_cast<double>(j)) <= 1e-9 * m_ ? static_cast<int>(j - 1) : -1;
}

double mean_pinball(const Vector& residuals, double tau) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < residuals.size(); ++i) s += pinball_loss(residuals[i], tau);
    return residuals.size() ? s / static_cast<double>(residuals.size()) : 0.0;
}

int default_m(long n) {
    if (n < 9) throw DomainError("default_m requires n >= 9");
    const long m = std::lround(std::sqrt(static_cast<double>(n)));
    return static_cast<int>(std::clamp(m, 3L, n - 1));
}

int FitReport::failed_levels() const {
    return static_cast<int>(std::count_if(levels.begin(), levels.end(), [](const LevelFit& f) { return !f.converged; }));
}

// ---------------------------------------------------------------------------
// Design
// ---------------------------------------------------------------------------

Design make_design(const Dataset& data) {
    const long n = data.size();
    const int p = data.width();
    const SparseRows X1 = data.design();
    const int q = p + 1;

    Matrix gram = Matrix::Zero(q, q);
    Vector colsum = Vector::Zero(q);
    for (long i = 0; i < n; ++i) {
        gram(0, 0) += 1.0;
        for (SparseRows::InnerIterator a(X1, i); a; ++a) {
            colsum[a.col() + 1] += a.value();
            for (SparseRows::InnerIterator b(X1, i); b; ++b) gram(a.col() + 1, b.col() + 1) += a.value() * b.value();
        }
    }
    gram.row(0).tail(p) = colsum.tail(p).transpose();
    gram.col(0).tail(p) = colsum.tail(p);

    // Unit-diagonal scaling so the rank threshold is relative per column.
    Vector d(q);
    for (int j = 0; j < q; ++j) d[j] = gram(j, j) > 0 ? 1.0 / std::sqrt(gram(j, j)) : 0.0;
    const Matrix scaled = d.asDiagonal() * gram * d.asDiagonal();
    Eigen::ColPivHouseholderQR<Matrix> qr(scaled);
    qr.setThreshold(1e-11);
    const auto perm = qr.colsPermutation().indices();

    Design design;
    design.augmented_width = q;
    for (Eigen::Index k = 0; k < qr.rank(); ++k) {
        if (d[perm[k]] > 0) design.columns.push_back(perm[k]);
    }
    std::sort(design.columns.begin(), design.columns.end());

    std::vector<int> remap(static_cast<std::size_t>(q), -1);
    for (std::size_t k = 0; k < design.columns.size(); ++k) remap[static_cast<std::size_t>(design.columns[k])] = static_cast<int>(k);

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(X1.nonZeros() + n));
    for (long i = 0; i < n; ++i) {
        if (remap[0] >= 0) trips.emplace_back(i, remap[0], 1.0);
        for (SparseRows::InnerIterator a(X1, i); a; ++a) {
            const int c = remap[static_cast<std::size_t>(a.col() + 1)];
            if (c >= 0 && a.value() != 0.0) trips.emplace_back(i, c, a.value());
        }
    }
    design.X.resize(n, static_cast<Eigen::Index>(design.columns.size()));
    design.X.setFromTriplets(trips.begin(), trips.end());
    design.X.makeCompressed();
    return design;
}

// ---------------------------------------------------------------------------
// Per-level solver
// ---------------------------------------------------------------------------

namespace {

Vector residuals_of(const SparseRows& X, const Vector& y, const Vector& beta) {
    Vector r = y;
    r.noalias() -= X * beta;
    return r;
}

double total_pinball(const Vector& r, double tau) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) s += pinball_loss(r[i], tau);
    return s;
}

// Weighted normal equations accumulated over sparse rows.
Matrix weighted_gram(const SparseRows& X, const Vector& w, double ridge) {
    const Eigen::Index r = X.cols();
    Matrix A = Matrix::Zero(r, r);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double wi = w[i];
        for (SparseRows::InnerIterator a(X, i); a; ++a) {
            const double wa = wi * a.value();
            for (SparseRows::InnerIterator b(X, i); b; ++b) {
                if (b.col() > a.col()) break;
                A(a.col(), b.col()) += wa * b.value();
            }
        }
    }
    A.diagonal().array() += ridge;
    return A.selfadjointView<Eigen::Lower>();
}

Vector solve_spd(const Matrix& A, const Vector& b) {
    Eigen::LDLT<Matrix> ldlt(A.selfadjointView<Eigen::Lower>());
    if (ldlt.info() == Eigen::Success) {
        Vector x = ldlt.solve(b);
        if (x.allFinite()) return x;
    }
    return A.completeOrthogonalDecomposition().solve(b);
}

struct PolishResult {
    Vector beta;
    int pivots = 0;
    bool ok = false;
    std::string message;
};

// Simplex-style descent over vertices of the quantile LP: a vertex is fixed
// by `rank` observations with zero residual. Each step releases one basic
// observation along an edge and moves to the minimiser of the convex
// piecewise-linear loss on that edge, where a new observation enters.
PolishResult vertex_descent(const SparseRows& X, const Vector& y, double tau, const Vector& start, int max_pivots) {
    PolishResult out;
    const Eigen::Index n = X.rows();
    const Eigen::Index r = X.cols();
    out.beta = start;
    if (r == 0) {
        out.ok = true;
        return out;
    }
    if (n < r) {
        out.message = "fewer observations than free coefficients";
        return out;
    }

    // Initial basis: smallest |residual| rows that are linearly independent.
    Vector res = residuals_of(X, y, start);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return std::abs(res[a]) < std::abs(res[b]); });

    Matrix Q(r, r);
    std::vector<Eigen::Index> basis;
    basis.reserve(static_cast<std::size_t>(r));
    Vector xi(r);
    for (Eigen::Index cand : order) {
        if (static_cast<Eigen::Index>(basis.size()) == r) break;
        xi.setZero();
        for (SparseRows::InnerIterator it(X, cand); it; ++it) xi[it.col()] = it.value();
        const double norm0 = xi.norm();
        if (norm0 == 0.0) continue;
        const auto cnt = static_cast<Eigen::Index>(basis.size());
        Vector v = xi;
        for (int pass = 0; pass < 2; ++pass) {
            if (cnt > 0) v.noalias() -= Q.leftCols(cnt) * (Q.leftCols(cnt).transpose() * v);
        }
        const double nv = v.norm();
        if (nv <= 1e-7 * norm0) continue;
        Q.col(cnt) = v / nv;
        basis.push_back(cand);
    }
    if (static_cast<Eigen::Index>(basis.size()) < r) {
        out.message = "could not assemble a nonsingular basis";
        return out;
    }

    Matrix B(r, r);
    auto load_row = [&](Eigen::Index obs, Eigen::Ref<Vector> dst) {
        dst.setZero();
        for (SparseRows::InnerIterator it(X, obs); it; ++it) dst[it.col()] = it.value();
    };
    for (Eigen::Index k = 0; k < r; ++k) {
        Vector row(r);
        load_row(basis[static_cast<std::size_t>(k)], row);
        B.row(k) = row.transpose();
    }
    Eigen::PartialPivLU<Matrix> lu(B);
    Matrix Binv = lu.inverse();
    if (!Binv.allFinite()) {
        out.message = "singular basis";
        return out;
    }

    std::vector<char> in_basis(static_cast<std::size_t>(n), 0);
    for (auto b : basis) in_basis[static_cast<std::size_t>(b)] = 1;
    Vector yb(r);
    auto refresh_beta = [&]() {
        for (Eigen::Index k = 0; k < r; ++k) yb[k] = y[basis[static_cast<std::size_t>(k)]];
        return Vector(Binv * yb);
    };
    Vector beta = refresh_beta();
    if (!beta.allFinite()) {
        out.message = "non-finite vertex";
        return out;
    }

    std::vector<std::pair<double, double>> breaks;  // (t, |c|)
    std::vector<double> c(static_cast<std::size_t>(n));
    Vector a(r), z(r), dir(r);
    int since_refactor = 0;
    for (int pivot = 0; pivot < max_pivots; ++pivot) {
        res = residuals_of(X, y, beta);
        for (auto b : basis) res[b] = 0.0;

        a.setZero();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (in_basis[static_cast<std::size_t>(i)]) continue;
            const double psi = res[i] > 0 ? tau : (res[i] < 0 ? tau - 1.0 : tau - 0.5);
            for (SparseRows::InnerIterator it(X, i); it; ++it) a[it.col()] += psi * it.value();
        }
        z.noalias() = Binv.transpose() * a;

        // Candidate edges by estimated directional derivative.
        std::vector<std::pair<double, std::pair<Eigen::Index, int>>> cands;
        const double eps = 1e-11 * (1.0 + z.cwiseAbs().maxCoeff());
        for (Eigen::Index k = 0; k < r; ++k) {
            const double dplus = (1.0 - tau) - z[k];
            const double dminus = tau + z[k];
            if (dplus < -eps) cands.push_back({dplus, {k, +1}});
            if (dminus < -eps) cands.push_back({dminus, {k, -1}});
        }
        if (cands.empty()) {
            out.ok = true;
            break;
        }
        std::sort(cands.begin(), cands.end(),
                  [](const auto& l, const auto& rr) { return l.first < rr.first; });

        bool moved = false;
        for (const auto& cand : cands) {
            const Eigen::Index k = cand.second.first;
            const int s = cand.second.second;
            dir = static_cast<double>(s) * Binv.col(k);

            double slope = 0.0;
            breaks.clear();
            for (Eigen::Index i = 0; i < n; ++i) {
                double ci;
                if (in_basis[static_cast<std::size_t>(i)]) {
                    ci = (i == basis[static_cast<std::size_t>(k)]) ? static_cast<double>(s) : 0.0;
                } else {
                    ci = 0.0;
                    for (SparseRows::InnerIterator it(X, i); it; ++it) ci += it.value() * dir[it.col()];
                }
                c[static_cast<std::size_t>(i)] = ci;
                if (ci == 0.0) continue;
                const double ri = res[i];
                // d/dt rho(ri - t ci) at t = 0+
                const bool positive_side = ri > 0 || (ri == 0 && ci < 0);
                slope += positive_side ? -tau * ci : (1.0 - tau) * ci;
                if (ri != 0.0 && (ri > 0) == (ci > 0)) breaks.emplace_back(ri / ci, std::abs(ci));
            }
            if (slope >= -1e-13 * (1.0 + std::abs(slope))) continue;
            std::sort(breaks.begin(), breaks.end());
            double t_star = -1.0;
            for (const auto& [t, w] : breaks) {
                slope += w;
                if (slope >= 0.0) {
                    t_star = t;
                    break;
                }
            }
            if (t_star < 0.0) continue;  // unbounded edge; cannot happen for full-rank data

            // Entering observation: the breakpoint at t_star with the largest |c|.
            Eigen::Index enter = -1;
            double best_c = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (in_basis[static_cast<std::size_t>(i)]) continue;
                const double ci = c[static_cast<std::size_t>(i)];
                if (ci == 0.0 || res[i] == 0.0 || (res[i] > 0) != (ci > 0)) continue;
                if (res[i] / ci == t_star && std::abs(ci) > best_c) {
                    best_c = std::abs(ci);
                    enter = i;
                }
            }
            if (enter < 0) continue;

            const double ce = c[static_cast<std::size_t>(enter)];
            // Sherman-Morrison row replacement: row k of B becomes x_enter.
            Vector xe(r);
            load_row(enter, xe);
            const Vector ek_col = Binv.col(k);
            const double denom = ce / static_cast<double>(s);
            const Vector uB = (xe - B.row(k).transpose()).transpose() * Binv;
            Binv.noalias() -= ek_col * uB.transpose() / denom;
            B.row(k) = xe.transpose();
            in_basis[static_cast<std::size_t>(basis[static_cast<std::size_t>(k)])] = 0;
            basis[static_cast<std::size_t>(k)] = enter;
            in_basis[static_cast<std::size_t>(enter)] = 1;
            if (++since_refactor >= 32) {
                Binv = Eigen::PartialPivLU<Matrix>(B).inverse();
                since_refactor = 0;
            }
            beta = refresh_beta();
            ++out.pivots;
            moved = true;
            break;
        }
        if (!moved) {
            out.ok = true;
            break;
        }
        if (pivot + 1 == max_pivots) out.message = "pivot limit reached";
    }
    out.beta = beta;
    if (!out.beta.allFinite()) {
        out.ok = false;
        out.message = "non-finite coefficients";
    }
    return out;
}

}  // namespace

LevelSolution fit_level(const Design& design, const Vector& y, double tau, const SolverConfig& cfg) {
    if (!(tau > 0.0 && tau < 1.0)) throw DomainError("tau must lie in (0, 1)");
    const SparseRows& X = design.X;
    const Eigen::Index n = X.rows();
    const Eigen::Index r = X.cols();
    if (y.size() != n) throw DomainError("response length does not match design");

    LevelSolution sol;
    sol.fit.tau = tau;
    const double yscale = std::max(y.cwiseAbs().mean(), 1e-300);

    // OLS start: level-independent, so subsets of levels fit identically.
    Vector beta = solve_spd(weighted_gram(X, Vector::Ones(n), cfg.ridge), X.transpose() * y);
    Vector res = residuals_of(X, y, beta);
    double h = std::max(res.cwiseAbs().mean(), 1e-12 * yscale);
    const double h_min = cfg.min_smoothing * yscale;
    const Vector xsum = X.transpose() * Vector::Ones(n);

    bool irls_converged = false;
    Vector w(n);
    int it = 0, in_stage = 0;
    for (; it < cfg.max_iterations; ++it) {
        for (Eigen::Index i = 0; i < n; ++i) w[i] = 0.5 / std::max(std::abs(res[i]), h);
        const Matrix A = weighted_gram(X, w, cfg.ridge);
        const Vector rhs = X.transpose() * w.cwiseProduct(y) + (tau - 0.5) * xsum;
        const Vector next = solve_spd(A, rhs);
        if (!next.allFinite()) break;
        const double change = (next - beta).norm();
        beta = next;
        res = residuals_of(X, y, beta);
        ++in_stage;
        const bool settled = change <= cfg.tolerance * (beta.norm() + yscale);
        if (settled || in_stage >= cfg.stage_iterations) {
            if (h <= h_min) {
                irls_converged = settled;
                ++it;
                break;
            }
            h = std::max(h * cfg.smoothing_decay, h_min);
            in_stage = 0;
        }
    }
    sol.fit.iterations = it;
    double loss = total_pinball(res, tau);

    bool polished = false;
    if (cfg.polish && cfg.ridge == 0.0) {
        const int max_pivots = cfg.max_pivots >= 0 ? cfg.max_pivots : static_cast<int>(20 * r + 1000);
        PolishResult pr = vertex_descent(X, y, tau, beta, max_pivots);
        sol.fit.pivots = pr.pivots;
        if (pr.beta.allFinite()) {
            const double pl = total_pinball(residuals_of(X, y, pr.beta), tau);
            if (pl <= loss) {
                beta = pr.beta;
                loss = pl;
            }
        }
        polished = pr.ok;
        if (!pr.ok) sol.fit.message = "vertex polish: " + pr.message;
    }
    sol.fit.converged = polished || irls_converged;
    if (!sol.fit.converged && sol.fit.message.empty()) sol.fit.message = "IRLS did not converge";
    sol.fit.loss = loss / static_cast<double>(n);

    sol.coef = Vector::Zero(design.augmented_width);
    for (std::size_t k = 0; k < design.columns.size(); ++k) sol.coef[design.columns[k]] = beta[static_cast<Eigen::Index>(k)];
    return sol;
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

LinearQuantileModel::LinearQuantileModel(FieldSchema schema, QuantileGrid grid, Vector intercept, Matrix beta,
                                         FitReport report)
    : schema_(std::move(schema)), grid_(grid), intercept_(std::move(intercept)), beta_(std::move(beta)),
      report_(std::move(report)) {
    if (beta_.rows() != grid_.size() || intercept_.size() != grid_.size()) {
        throw DomainError("beta row count must equal m - 1");
    }
    if (beta_.cols() != schema_.width()) throw DomainError("beta column count must equal one-hot width");
}

Vector LinearQuantileModel::predict(const Vector& x) const {
    if (x.size() != schema_.width()) throw SchemaError("covariate row width does not match schema");
    return intercept_ + beta_ * x;
}

double LinearQuantileModel::predict_level(const Vector& x, int j) const {
    if (x.size() != schema_.width()) throw SchemaError("covariate row width does not match schema");
    return intercept_[j] + beta_.row(j).dot(x);
}

std::vector<LevelSolution> fit_levels(const Dataset& data, const QuantileGrid& grid, std::span<const int> levels,
                                      const SolverConfig& cfg) {
    const Design design = make_design(data);
    const Vector& y = data.response();
    std::vector<LevelSolution> out(levels.size());

    unsigned threads = cfg.threads > 0 ? static_cast<unsigned>(cfg.threads) : std::thread::hardware_concurrency();
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(levels.size())));
    auto work = [&](unsigned tid) {
        for (std::size_t k = tid; k < levels.size(); k += threads) {
            const int j = levels[k];
            if (j < 0 || j >= grid.size()) throw DomainError("level index outside grid");
            out[k] = fit_level(design, y, grid.level(j), cfg);
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    work(t);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return out;
}

LinearQuantileModel fit_grid(const Dataset& data, const QuantileGrid& grid, const SolverConfig& cfg) {
    std::vector<int> all(static_cast<std::size_t>(grid.size()));
    std::iota(all.begin(), all.end(), 0);
    auto sols = fit_levels(data, grid, all, cfg);

    const int p = data.width();
    Vector intercept(grid.size());
    Matrix beta(grid.size(), p);
    FitReport report;
    for (int j = 0; j < grid.size(); ++j) {
        const auto& s = sols[static_cast<std::size_t>(j)];
        intercept[j] = s.coef[0];
        beta.row(j) = s.coef.tail(p).transpose();
        report.levels.push_back(s.fit);
    }
    if (report.failed_levels() == grid.size()) {
        throw FitError("quantile regression failed at every grid level: " + report.levels.front().message);
    }
    return LinearQuantileModel(data.schema(), grid, std::move(intercept), std::move(beta), std::move(report));
}

}  // namespace qrgmm
