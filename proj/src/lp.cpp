#include "ctxaudit/lp.hpp"

#include <cstddef>

#include "ctxaudit/errors.hpp"

namespace ctxaudit {

bool lp_feasible(const std::vector<std::vector<Rational>>& A, const std::vector<Rational>& b) {
    const std::size_t m = A.size();
    if (b.size() != m) throw AnalysisError("lp_feasible: A and b dimensions differ");
    if (m == 0) return true;
    const std::size_t n = A[0].size();

    // Tableau [A | I | rhs] with b >= 0; artificials start basic.
    const std::size_t cols = n + m + 1;
    std::vector<std::vector<Rational>> T(m, std::vector<Rational>(cols, Rational(0)));
    std::vector<std::size_t> basis(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (A[i].size() != n) throw AnalysisError("lp_feasible: ragged constraint matrix");
        const bool flip = b[i] < 0;
        for (std::size_t j = 0; j < n; ++j) T[i][j] = flip ? -A[i][j] : A[i][j];
        T[i][n + i] = 1;
        T[i][cols - 1] = flip ? -b[i] : b[i];
        basis[i] = n + i;
    }

    auto cost = [&](std::size_t j) { return j >= n ? Rational(1) : Rational(0); };

    std::vector<bool> in_basis(n + m, false);
    for (const auto j : basis) in_basis[j] = true;

    while (true) {
        // Reduced costs r_j = sum_i cost(basis[i]) * T[i][j] - cost(j);
        // Bland: enter the lowest-index column with r_j > 0.
        std::size_t entering = n + m;
        for (std::size_t j = 0; j < n + m && entering == n + m; ++j) {
            if (in_basis[j]) continue;
            Rational r = -cost(j);
            for (std::size_t i = 0; i < m; ++i)
                if (cost(basis[i]) != 0) r += T[i][j];
            if (r > 0) entering = j;
        }
        if (entering == n + m) {
            Rational w(0);
            for (std::size_t i = 0; i < m; ++i)
                if (cost(basis[i]) != 0) w += T[i][cols - 1];
            return w == 0;
        }

        // Ratio test; ties break on the smallest basis index (Bland).
        std::size_t pivot_row = m;
        Rational best_ratio(0);
        for (std::size_t i = 0; i < m; ++i) {
            if (T[i][entering] <= 0) continue;
            const Rational ratio = T[i][cols - 1] / T[i][entering];
            if (pivot_row == m || ratio < best_ratio ||
                (ratio == best_ratio && basis[i] < basis[pivot_row])) {
                pivot_row = i;
                best_ratio = ratio;
            }
        }
        if (pivot_row == m)
            throw AnalysisError("lp_feasible: unbounded phase-1 column (inconsistent tableau)");

        // Pivot.
        const Rational pivot = T[pivot_row][entering];
        for (auto& v : T[pivot_row]) v /= pivot;
        for (std::size_t i = 0; i < m; ++i) {
            if (i == pivot_row || T[i][entering] == 0) continue;
            const Rational factor = T[i][entering];
            for (std::size_t j = 0; j < cols; ++j) T[i][j] -= factor * T[pivot_row][j];
        }
        in_basis[basis[pivot_row]] = false;
        in_basis[entering] = true;
        basis[pivot_row] = entering;
    }
}

} // namespace ctxaudit
