#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxaudit/schema.hpp"
#include "ctxaudit/stats.hpp"

namespace ctxaudit {

enum class JointEstimator { mixture, product, direct };
std::string_view to_string(JointEstimator e);
JointEstimator joint_estimator_from_string(std::string_view s);

// A two-question, two-ordering measurement system. Variable 1 belongs to the
// pair's occupation-target sentence, variable 2 to the participant-target
// sentence; feminine is coded +1. In ordering o1 variable 1 is the fixed
// prime and variable 2 is generated; o2 is the reverse.
struct CbdSystem {
    double e1_o1 = 0.0;
    double e2_o1 = 0.0;
    double e1_o2 = 0.0;
    double e2_o2 = 0.0;
    double j_o1 = 0.0;
    double j_o2 = 0.0;
    JointEstimator provenance = JointEstimator::direct;

    // Each ordering's four joint atoms (1 +- e_a +- e_b +- j)/4 must be
    // nonnegative within tol and every value must lie in [-1, 1].
    void validate(double atom_tol = 1e-9) const;
};

double expectation_from_p(double p);                 // 2p - 1
double joint_product(double p_i, double p_j);        // 4 p_i p_j - 2 p_i - 2 p_j + 1
// Exact joint expectation under steering: the prime is feminine with
// probability r and the generated variable's conditional feminine
// probabilities given a feminine/masculine prime are p_given_f / p_given_m.
double joint_mixture(double r, double p_given_f, double p_given_m);

// Degree of contextuality:
// |j_o1 - j_o2| - (|e1_o1 - e1_o2| + |e2_o1 - e2_o2|).
// The subtracted term removes signaling, including uniform prime repetition.
double delta_c(const CbdSystem& system);

inline bool is_contextual(double delta_c_value, double tol = 0.0) { return delta_c_value > tol; }

// Independent check: decides by exact linear feasibility over the 16 atoms of
// a joint distribution on (X1^o1, X2^o1, X1^o2, X2^o2) whether a coupling
// exists that reproduces both within-ordering 2x2 joints and achieves the
// maximal same-variable agreement P(Xi^o1 = Xi^o2) = 1 - |ei_o1 - ei_o2| / 2.
// Infeasible <=> contextual.
bool coupling_feasible(const CbdSystem& system, double atom_tol = 1e-9);

struct CellCounts {
    long n_valid = 0;
    long n_feminine = 0;
    double p() const { return n_valid == 0 ? 0.0 : static_cast<double>(n_feminine) / n_valid; }
};

// Target-cell counts for one pair at one option order. "first" is the
// occupation-target member (generated in ordering o2), "second" the
// participant-target member (generated in o1); pf / pm are the feminine- and
// masculine-primed settings.
struct PairCounts {
    CellCounts second_pf, second_pm;
    CellCounts first_pf, first_pm;
};

CbdSystem system_from_counts(const PairCounts& counts, double prime_rate,
                             JointEstimator estimator);

struct DeltaCResult {
    std::string pair_id;
    OptionOrder order = OptionOrder::masc_fem;
    bool skipped = false;
    std::string skip_reason;
    double delta_c = 0.0;
    bool contextual = false;
    JointEstimator estimator = JointEstimator::mixture;
    double tolerance = 0.0;
    std::optional<std::pair<double, double>> ci;
    PairCounts counts;
    CbdSystem system;
};

struct CbdOptions {
    JointEstimator estimator = JointEstimator::mixture;
    double tolerance = 0.0;
    double prime_rate = 0.5; // design rate of feminine primes
    int bootstrap_replicates = 500;
    bool with_ci = true;
    std::uint64_t seed = 0;
};

// Builds the steering system for one pair at one option order from the
// estimate table and returns the verdict; pairs with missing or empty primed
// cells come back as skipped-with-reason.
DeltaCResult pair_analysis(const EstimateTable& estimates, const TemplatePair& pair,
                           OptionOrder order, const CbdOptions& opts);

// Percentile interval on delta-C from resampling each cell's binomial counts.
// Requires replicates >= 100.
std::pair<double, double> bootstrap_ci(const PairCounts& counts, double prime_rate,
                                       JointEstimator estimator, int replicates,
                                       std::uint64_t seed);

enum class PoolingRule { either_order, both_orders };
std::string_view to_string(PoolingRule r);
PoolingRule pooling_rule_from_string(std::string_view s);

struct ContextualitySummary {
    std::map<OptionOrder, long> analyzed_by_order;
    std::map<OptionOrder, long> contextual_by_order;
    std::map<OptionOrder, double> fraction_by_order;
    long pairs_analyzed = 0; // pairs with at least one non-skipped order
    long pairs_skipped = 0;  // pairs skipped in every analyzed order
    long pooled_count = 0;
    double pooled_fraction = 0.0;
    PoolingRule rule = PoolingRule::either_order;
    bool ci_gate = false;
};

// A result counts as contextual when its flag is set and, with the CI gate
// on, the bootstrap lower bound is > 0 as well.
ContextualitySummary contextuality_summary(std::span<const DeltaCResult> results,
                                           PoolingRule rule = PoolingRule::either_order,
                                           bool ci_gate = false);

// Pairwise overlap counts of contextual pair sets across runs; the diagonal
// holds each run's own count.
std::vector<std::vector<long>> contextual_overlap(
    const std::vector<std::vector<DeltaCResult>>& runs,
    PoolingRule rule = PoolingRule::either_order, bool ci_gate = false);

} // namespace ctxaudit
