#pragma once

// Independent reference computations used only by tests. None of these call
// into the library's numerical code.

#include "qrgmm/core.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace oracle {

using qrgmm::Matrix;
using qrgmm::Vector;

inline double pinball(double u, double tau) { return (tau - (u <= 0.0 ? 1.0 : 0.0)) * u; }

inline double total_pinball(const Matrix& X, const Vector& y, const Vector& b, double tau) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) s += pinball(y[i] - X.row(i).dot(b), tau);
    return s;
}

// Exact quantile-regression optimum by enumerating every basic solution:
// the LP optimum is attained where q observations are interpolated. X must
// have full column rank q.
struct LpSolution {
    double loss = std::numeric_limits<double>::infinity();  // total, not mean
    Vector beta;
};

inline LpSolution lp_quantile_regression(const Matrix& X, const Vector& y, double tau) {
    const int n = static_cast<int>(X.rows());
    const int q = static_cast<int>(X.cols());
    LpSolution best;
    std::vector<int> idx(static_cast<std::size_t>(q));
    std::iota(idx.begin(), idx.end(), 0);
    Matrix A(q, q);
    Vector rhs(q);
    while (true) {
        for (int k = 0; k < q; ++k) {
            A.row(k) = X.row(idx[static_cast<std::size_t>(k)]);
            rhs[k] = y[idx[static_cast<std::size_t>(k)]];
        }
        Eigen::FullPivLU<Matrix> lu(A);
        if (lu.isInvertible()) {
            const Vector b = lu.solve(rhs);
            const double l = total_pinball(X, y, b, tau);
            if (l < best.loss) {
                best.loss = l;
                best.beta = b;
            }
        }
        int k = q - 1;
        while (k >= 0 && idx[static_cast<std::size_t>(k)] == n - q + k) --k;
        if (k < 0) break;
        ++idx[static_cast<std::size_t>(k)];
        for (int j = k + 1; j < q; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
    return best;
}

// Second-order FM term by the explicit pairwise sum.
inline double fm_pairs_double_loop(const Matrix& V, const Vector& x) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        for (Eigen::Index j = i + 1; j < x.size(); ++j) s += V.row(i).dot(V.row(j)) * x[i] * x[j];
    return s;
}

// Adaptive Simpson on [a, b].
inline double simpson(const std::function<double(double)>& f, double a, double b, double eps, int depth = 40) {
    auto rec = [&](auto&& self, double lo, double hi, double flo, double fmid, double fhi, double whole, double tol,
                   int d) -> double {
        const double mid = 0.5 * (lo + hi);
        const double lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
        const double flm = f(lm), frm = f(rm);
        const double left = (mid - lo) / 6.0 * (flo + 4 * flm + fmid);
        const double right = (hi - mid) / 6.0 * (fmid + 4 * frm + fhi);
        if (d <= 0 || std::abs(left + right - whole) <= 15 * tol) return left + right + (left + right - whole) / 15.0;
        return self(self, lo, mid, flo, flm, fmid, left, tol / 2, d - 1) +
               self(self, mid, hi, fmid, frm, fhi, right, tol / 2, d - 1);
    };
    if (b <= a) return 0.0;
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    return rec(rec, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4 * fm + fb), eps, depth);
}

// Same, splitting at the given breakpoints first (integrand smooth between them).
inline double simpson_pieces(const std::function<double(double)>& f, double a, double b, std::vector<double> cuts,
                             double eps) {
    cuts.push_back(a);
    cuts.push_back(b);
    std::sort(cuts.begin(), cuts.end());
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        const double lo = std::max(a, cuts[i]), hi = std::min(b, cuts[i + 1]);
        if (hi > lo) {
            // Evaluate strictly inside so jump values at the cuts do not leak in.
            const double pad = (hi - lo) * 1e-13;
            s += simpson(f, lo + pad, hi - pad, eps) + pad * (f(lo + pad) + f(hi - pad));
        }
    }
    return s;
}

// Hungarian algorithm, minimum-cost perfect assignment on a square cost matrix.
inline double assignment_cost(const Matrix& C) {
    const int n = static_cast<int>(C.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n + 1)), v(static_cast<std::size_t>(n + 1));
    std::vector<int> p(static_cast<std::size_t>(n + 1)), way(static_cast<std::size_t>(n + 1));
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = C(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    double cost = 0.0;
    for (int j = 1; j <= n; ++j) cost += C(p[static_cast<std::size_t>(j)] - 1, j - 1);
    return cost;
}

// W1 between empirical measures as an optimal transport problem. Unequal
// sizes are handled by replicating each point to a common multiple.
inline double transport_w1(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t L = std::lcm(a.size(), b.size());
    const std::size_t ra = L / a.size(), rb = L / b.size();
    Matrix C(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::abs(a[i / ra] - b[j / rb]);
    return assignment_cost(C) / static_cast<double>(L);
}

// sup_t |F_a(t) - F_b(t)| by direct counting.
inline double ks_brute(const std::vector<double>& a, const std::vector<double>& b) {
    double best = 0.0;
    auto ecdf = [](const std::vector<double>& s, double t) {
        std::size_t c = 0;
        for (double v : s) c += v <= t ? 1 : 0;
        return static_cast<double>(c) / static_cast<double>(s.size());
    };
    for (const auto* s : {&a, &b})
        for (double t : *s) best = std::max(best, std::abs(ecdf(a, t) - ecdf(b, t)));
    return best;
}

// One-sample KS of draws against a distribution function with atoms; needs
// both F(t) and F(t-) to handle jumps.
inline double ks_one_sample(std::vector<double> draws, const std::function<double(double)>& F,
                            const std::function<double(double)>& F_left) {
    std::sort(draws.begin(), draws.end());
    const double n = static_cast<double>(draws.size());
    double best = 0.0;
    std::size_t i = 0;
    while (i < draws.size()) {
        std::size_t j = i;
        while (j < draws.size() && draws[j] == draws[i]) ++j;
        const double t = draws[i];
        best = std::max(best, std::abs(static_cast<double>(i) / n - F_left(t)));
        best = std::max(best, std::abs(static_cast<double>(j) / n - F(t)));
        i = j;
    }
    return best;
}

}  // namespace oracle
