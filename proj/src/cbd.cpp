#include "ctxaudit/cbd.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/lp.hpp"
#include "ctxaudit/rng.hpp"

namespace ctxaudit {

std::string_view to_string(JointEstimator e) {
    switch (e) {
        case JointEstimator::mixture: return "mixture";
        case JointEstimator::product: return "product";
        case JointEstimator::direct: return "direct";
    }
    return "mixture";
}

JointEstimator joint_estimator_from_string(std::string_view s) {
    if (s == "mixture") return JointEstimator::mixture;
    if (s == "product") return JointEstimator::product;
    if (s == "direct") return JointEstimator::direct;
    throw ConfigError("unknown joint estimator: " + std::string(s));
}

std::string_view to_string(PoolingRule r) {
    return r == PoolingRule::either_order ? "either_order" : "both_orders";
}

PoolingRule pooling_rule_from_string(std::string_view s) {
    if (s == "either_order") return PoolingRule::either_order;
    if (s == "both_orders") return PoolingRule::both_orders;
    throw ConfigError("unknown pooling rule: " + std::string(s));
}

namespace {

void check_range(double v, const char* name) {
    if (!(v >= -1.0 - 1e-12 && v <= 1.0 + 1e-12))
        throw AnalysisError(std::string("CbdSystem: ") + name + " = " + std::to_string(v) +
                            " outside [-1, 1]");
}

void check_ordering_atoms(double ea, double eb, double j, double tol, const char* label) {
    for (const int s : {+1, -1}) {
        for (const int t : {+1, -1}) {
            const double atom = (1.0 + s * ea + t * eb + s * t * j) / 4.0;
            if (atom < -tol)
                throw AnalysisError(std::string("CbdSystem: ordering ") + label +
                                    " atom (s=" + std::to_string(s) + ", t=" + std::to_string(t) +
                                    ") = " + std::to_string(atom) + " is negative");
        }
    }
}

} // namespace

void CbdSystem::validate(double atom_tol) const {
    check_range(e1_o1, "e1_o1");
    check_range(e2_o1, "e2_o1");
    check_range(e1_o2, "e1_o2");
    check_range(e2_o2, "e2_o2");
    check_range(j_o1, "j_o1");
    check_range(j_o2, "j_o2");
    check_ordering_atoms(e1_o1, e2_o1, j_o1, atom_tol, "o1");
    check_ordering_atoms(e1_o2, e2_o2, j_o2, atom_tol, "o2");
}

double expectation_from_p(double p) { return 2.0 * p - 1.0; }

double joint_product(double p_i, double p_j) {
    return 4.0 * p_i * p_j - 2.0 * p_i - 2.0 * p_j + 1.0;
}

double joint_mixture(double r, double p_given_f, double p_given_m) {
    return r * (2.0 * p_given_f - 1.0) - (1.0 - r) * (2.0 * p_given_m - 1.0);
}

double delta_c(const CbdSystem& system) {
    system.validate();
    return std::abs(system.j_o1 - system.j_o2) -
           (std::abs(system.e1_o1 - system.e1_o2) + std::abs(system.e2_o1 - system.e2_o2));
}

namespace {

// Clamped, renormalized 2x2 atoms of one ordering, exact.
std::array<Rational, 4> ordering_atoms_exact(double ea, double eb, double j, double tol) {
    const Rational rea(ea), reb(eb), rj(j);
    std::array<Rational, 4> atoms;
    std::size_t idx = 0;
    Rational sum(0);
    for (const int s : {+1, -1}) {
        for (const int t : {+1, -1}) {
            Rational atom = (Rational(1) + s * rea + t * reb + (s * t) * rj) / 4;
            if (atom < 0) {
                if (atom < -Rational(tol))
                    throw AnalysisError("coupling oracle: atom below tolerance");
                atom = 0;
            }
            sum += atom;
            atoms[idx++] = atom;
        }
    }
    for (auto& a : atoms) a /= sum;
    return atoms;
}

Rational rational_abs(const Rational& v) { return v < 0 ? Rational(-v) : v; }

} // namespace

bool coupling_feasible(const CbdSystem& system, double atom_tol) {
    system.validate(atom_tol);

    // atoms indexed by (s, t) in row-major {+1, -1} order, matching
    // ordering_atoms_exact.
    const auto atoms1 = ordering_atoms_exact(system.e1_o1, system.e2_o1, system.j_o1, atom_tol);
    const auto atoms2 = ordering_atoms_exact(system.e1_o2, system.e2_o2, system.j_o2, atom_tol);

    auto atom_index = [](int s, int t) { return (s > 0 ? 0 : 2) + (t > 0 ? 0 : 1); };

    // Marginal expectations recomputed from the clamped atoms so that the
    // agreement targets are consistent with the joint constraints.
    const Rational e1_o1 = atoms1[atom_index(1, 1)] + atoms1[atom_index(1, -1)] -
                           atoms1[atom_index(-1, 1)] - atoms1[atom_index(-1, -1)];
    const Rational e2_o1 = atoms1[atom_index(1, 1)] - atoms1[atom_index(1, -1)] +
                           atoms1[atom_index(-1, 1)] - atoms1[atom_index(-1, -1)];
    const Rational e1_o2 = atoms2[atom_index(1, 1)] + atoms2[atom_index(1, -1)] -
                           atoms2[atom_index(-1, 1)] - atoms2[atom_index(-1, -1)];
    const Rational e2_o2 = atoms2[atom_index(1, 1)] - atoms2[atom_index(1, -1)] +
                           atoms2[atom_index(-1, 1)] - atoms2[atom_index(-1, -1)];

    // 16 coupling atoms over (A, B, C, D) = (X1^o1, X2^o1, X1^o2, X2^o2),
    // bit = 0 encodes +1.
    auto sign = [](std::size_t v, int bit) { return ((v >> bit) & 1U) == 0 ? 1 : -1; };
    constexpr std::size_t kVars = 16;

    std::vector<std::vector<Rational>> A;
    std::vector<Rational> b;

    // Total mass.
    A.emplace_back(kVars, Rational(1));
    b.emplace_back(1);

    // Within-ordering 2x2 joints.
    for (const int s : {+1, -1}) {
        for (const int t : {+1, -1}) {
            std::vector<Rational> row_o1(kVars, Rational(0));
            std::vector<Rational> row_o2(kVars, Rational(0));
            for (std::size_t v = 0; v < kVars; ++v) {
                if (sign(v, 3) == s && sign(v, 2) == t) row_o1[v] = 1; // (A, B)
                if (sign(v, 1) == s && sign(v, 0) == t) row_o2[v] = 1; // (C, D)
            }
            A.push_back(std::move(row_o1));
            b.push_back(atoms1[static_cast<std::size_t>(atom_index(s, t))]);
            A.push_back(std::move(row_o2));
            b.push_back(atoms2[static_cast<std::size_t>(atom_index(s, t))]);
        }
    }

    // Maximal same-variable agreement: E[AC] = 1 - |e1_o1 - e1_o2| and
    // E[BD] = 1 - |e2_o1 - e2_o2|.
    {
        std::vector<Rational> row_ac(kVars), row_bd(kVars);
        for (std::size_t v = 0; v < kVars; ++v) {
            row_ac[v] = sign(v, 3) * sign(v, 1);
            row_bd[v] = sign(v, 2) * sign(v, 0);
        }
        A.push_back(std::move(row_ac));
        b.push_back(Rational(1) - rational_abs(e1_o1 - e1_o2));
        A.push_back(std::move(row_bd));
        b.push_back(Rational(1) - rational_abs(e2_o1 - e2_o2));
    }

    return lp_feasible(A, b);
}

CbdSystem system_from_counts(const PairCounts& counts, double prime_rate,
                             JointEstimator estimator) {
    if (prime_rate < 0.0 || prime_rate > 1.0)
        throw AnalysisError("prime_rate must lie in [0, 1]");
    const double r = prime_rate;
    const double p2f = counts.second_pf.p();
    const double p2m = counts.second_pm.p();
    const double p1f = counts.first_pf.p();
    const double p1m = counts.first_pm.p();
    const double pooled_second = r * p2f + (1.0 - r) * p2m;
    const double pooled_first = r * p1f + (1.0 - r) * p1m;

    CbdSystem sys;
    sys.provenance = estimator;
    // o1: variable 1 is the design-fixed prime, variable 2 is generated.
    sys.e1_o1 = expectation_from_p(r);
    sys.e2_o1 = expectation_from_p(pooled_second);
    // o2: variable 2 is the prime, variable 1 is generated.
    sys.e2_o2 = expectation_from_p(r);
    sys.e1_o2 = expectation_from_p(pooled_first);
    switch (estimator) {
        case JointEstimator::mixture:
            sys.j_o1 = joint_mixture(r, p2f, p2m);
            sys.j_o2 = joint_mixture(r, p1f, p1m);
            break;
        case JointEstimator::product:
            sys.j_o1 = joint_product(r, pooled_second);
            sys.j_o2 = joint_product(pooled_first, r);
            break;
        case JointEstimator::direct:
            throw AnalysisError("direct joints cannot be built from steering counts");
    }
    return sys;
}

std::pair<double, double> bootstrap_ci(const PairCounts& counts, double prime_rate,
                                       JointEstimator estimator, int replicates,
                                       std::uint64_t seed) {
    if (replicates < 100) throw AnalysisError("bootstrap_ci: need at least 100 replicates");
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(replicates));
    const std::array<const CellCounts*, 4> cells{&counts.second_pf, &counts.second_pm,
                                                 &counts.first_pf, &counts.first_pm};
    for (int b = 0; b < replicates; ++b) {
        CounterRng rng(seed, "cbd-bootstrap", static_cast<std::uint64_t>(b));
        PairCounts resampled = counts;
        std::array<CellCounts*, 4> out{&resampled.second_pf, &resampled.second_pm,
                                       &resampled.first_pf, &resampled.first_pm};
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const auto& cell = *cells[c];
            out[c]->n_feminine = cell.n_valid == 0 ? 0 : rng.binomial(cell.n_valid, cell.p());
        }
        values.push_back(delta_c(system_from_counts(resampled, prime_rate, estimator)));
    }
    std::sort(values.begin(), values.end());
    auto percentile = [&](double q) {
        const double h = q * static_cast<double>(values.size() - 1);
        const auto lo = static_cast<std::size_t>(h);
        if (lo + 1 >= values.size()) return values.back();
        const double frac = h - static_cast<double>(lo);
        return values[lo] + (values[lo + 1] - values[lo]) * frac;
    };
    return {percentile(0.025), percentile(0.975)};
}

namespace {

std::optional<CellCounts> cell_from(const EstimateTable& estimates, const std::string& template_id,
                                    ContextSetting setting, OptionOrder order) {
    const auto* e = estimates.find(template_id, setting, order);
    if (e == nullptr || e->n_valid == 0) return std::nullopt;
    return CellCounts{e->n_valid, e->n_feminine};
}

} // namespace

DeltaCResult pair_analysis(const EstimateTable& estimates, const TemplatePair& pair,
                           OptionOrder order, const CbdOptions& opts) {
    DeltaCResult result;
    result.pair_id = pair.pair_id;
    result.order = order;
    result.estimator = opts.estimator;
    result.tolerance = opts.tolerance;

    struct Slot {
        CellCounts PairCounts::* dest;
        const std::string* template_id;
        ContextSetting setting;
    };
    const std::array<Slot, 4> slots{{
        {&PairCounts::second_pf, &pair.participant_target.template_id,
         ContextSetting::primed_feminine},
        {&PairCounts::second_pm, &pair.participant_target.template_id,
         ContextSetting::primed_masculine},
        {&PairCounts::first_pf, &pair.occupation_target.template_id,
         ContextSetting::primed_feminine},
        {&PairCounts::first_pm, &pair.occupation_target.template_id,
         ContextSetting::primed_masculine},
    }};
    for (const auto& slot : slots) {
        const auto cell = cell_from(estimates, *slot.template_id, slot.setting, order);
        if (!cell) {
            result.skipped = true;
            result.skip_reason = "no valid measurements for template " + *slot.template_id +
                                 " in setting " + std::string(to_string(slot.setting)) +
                                 " at order " + std::string(to_string(order));
            return result;
        }
        result.counts.*slot.dest = *cell;
    }

    result.system = system_from_counts(result.counts, opts.prime_rate, opts.estimator);
    result.delta_c = delta_c(result.system);
    result.contextual = is_contextual(result.delta_c, opts.tolerance);
    if (opts.with_ci) {
        const std::uint64_t pair_seed =
            mix64(opts.seed ^ fnv1a64(pair.pair_id) ^ static_cast<std::uint64_t>(order));
        result.ci = bootstrap_ci(result.counts, opts.prime_rate, opts.estimator,
                                 opts.bootstrap_replicates, pair_seed);
    }
    return result;
}

namespace {

bool counts_as_contextual(const DeltaCResult& r, bool ci_gate) {
    if (r.skipped || !r.contextual) return false;
    if (ci_gate && r.ci && r.ci->first <= 0.0) return false;
    return true;
}

std::set<std::string> contextual_pairs(std::span<const DeltaCResult> results, PoolingRule rule,
                                       bool ci_gate) {
    std::map<std::string, std::map<OptionOrder, bool>> verdicts;
    for (const auto& r : results) {
        if (r.skipped) continue;
        verdicts[r.pair_id][r.order] = counts_as_contextual(r, ci_gate);
    }
    std::set<std::string> out;
    for (const auto& [pid, by_order] : verdicts) {
        bool any = false, all = !by_order.empty();
        for (const auto& [order, v] : by_order) {
            any = any || v;
            all = all && v;
        }
        if (rule == PoolingRule::either_order ? any : all) out.insert(pid);
    }
    return out;
}

} // namespace

ContextualitySummary contextuality_summary(std::span<const DeltaCResult> results, PoolingRule rule,
                                           bool ci_gate) {
    if (results.empty()) throw AnalysisError("contextuality_summary: no results");
    ContextualitySummary summary;
    summary.rule = rule;
    summary.ci_gate = ci_gate;

    std::set<std::string> analyzed, skipped_only;
    for (const auto& r : results) {
        if (r.skipped) {
            skipped_only.insert(r.pair_id);
            continue;
        }
        analyzed.insert(r.pair_id);
        ++summary.analyzed_by_order[r.order];
        if (counts_as_contextual(r, ci_gate)) ++summary.contextual_by_order[r.order];
    }
    for (const auto& [order, n] : summary.analyzed_by_order)
        summary.fraction_by_order[order] =
            n == 0 ? 0.0
                   : static_cast<double>(summary.contextual_by_order[order]) /
                         static_cast<double>(n);

    summary.pairs_analyzed = static_cast<long>(analyzed.size());
    for (const auto& pid : skipped_only)
        if (!analyzed.contains(pid)) ++summary.pairs_skipped;

    const auto pooled = contextual_pairs(results, rule, ci_gate);
    summary.pooled_count = static_cast<long>(pooled.size());
    summary.pooled_fraction = summary.pairs_analyzed == 0
                                  ? 0.0
                                  : static_cast<double>(summary.pooled_count) /
                                        static_cast<double>(summary.pairs_analyzed);
    return summary;
}

std::vector<std::vector<long>> contextual_overlap(const std::vector<std::vector<DeltaCResult>>& runs,
                                                  PoolingRule rule, bool ci_gate) {
    std::vector<std::set<std::string>> sets;
    sets.reserve(runs.size());
    for (const auto& run : runs)
        sets.push_back(contextual_pairs(std::span<const DeltaCResult>(run), rule, ci_gate));
    std::vector<std::vector<long>> matrix(runs.size(), std::vector<long>(runs.size(), 0));
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (std::size_t j = 0; j < sets.size(); ++j) {
            long count = 0;
            for (const auto& pid : sets[i])
                if (sets[j].contains(pid)) ++count;
            matrix[i][j] = count;
        }
    }
    return matrix;
}

} // namespace ctxaudit
