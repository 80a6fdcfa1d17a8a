#pragma once

#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace ctxaudit {

using Rational = boost::multiprecision::cpp_rational;

// Exact feasibility of { A x = b, x >= 0 } via a phase-1 simplex with
// Bland's rule over rational arithmetic. Redundant-but-consistent rows are
// fine. Intended for small systems (tens of rows/columns).
bool lp_feasible(const std::vector<std::vector<Rational>>& A, const std::vector<Rational>& b);

} // namespace ctxaudit
