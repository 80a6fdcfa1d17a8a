#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here is deliberately separate from the library implementation so the tests
// can act as a second route to the same numbers.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "ctxaudit/cbd.hpp"
#include "ctxaudit/collector.hpp"
#include "ctxaudit/rng.hpp"
#include "ctxaudit/schema.hpp"

namespace testsupport {

// The Ex.-1 style mechanic/customer pair: occupation-target sentence in the
// nominative, participant-target partner in the dependent possessive.
inline std::vector<ctxaudit::Template> mechanic_customer_pair() {
    using namespace ctxaudit;
    Template occ;
    occ.template_id = "mc_occ";
    occ.pair_id = "mc";
    occ.target_role_kind = RoleKind::occupation;
    occ.occupation_noun = "mechanic";
    occ.participant_noun = "customer";
    occ.pronoun_case = PronounCase::nominative;
    occ.body = "The mechanic called to inform the customer that BLANK had completed the repair.";
    occ.partner_body =
        "The mechanic called to inform the customer that PRONOUN car would be ready in the "
        "morning.";
    occ.partner_pronoun_case = PronounCase::possessive_dependent;

    Template par;
    par.template_id = "mc_par";
    par.pair_id = "mc";
    par.target_role_kind = RoleKind::participant;
    par.occupation_noun = "mechanic";
    par.participant_noun = "customer";
    par.pronoun_case = PronounCase::possessive_dependent;
    par.body = "The mechanic called to inform the customer that BLANK car would be ready in the "
               "morning.";
    par.partner_body =
        "The mechanic called to inform the customer that PRONOUN had completed the repair.";
    par.partner_pronoun_case = PronounCase::nominative;

    return {occ, par};
}

inline std::string schema_tsv_header() {
    return "template_id\tpair_id\ttarget_role_kind\toccupation_noun\tparticipant_noun\t"
           "pronoun_case\tbody\tpartner_body\n";
}

inline std::string schema_row(const ctxaudit::Template& t) {
    std::string row;
    row += t.template_id;
    row += '\t';
    row += t.pair_id;
    row += '\t';
    row += to_string(t.target_role_kind);
    row += '\t';
    row += t.occupation_noun;
    row += '\t';
    row += t.participant_noun;
    row += '\t';
    row += to_string(t.pronoun_case);
    row += '\t';
    row += t.body;
    row += '\t';
    row += t.partner_body;
    row += '\n';
    return row;
}

// Unique scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& label) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("ctxaudit_test_" + label + "_" + std::to_string(::getpid()) + "_" +
                      std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------------------
// Independent oracles.

// Brute-force delta-C from a four-cell steering table by enumerating the
// (prime, response) mixture directly; second route to system_from_counts +
// delta_c for the mixture estimator.
inline double oracle_delta_c_mixture(double r, double p2f, double p2m, double p1f, double p1m) {
    const double j_o1 = r * (2 * p2f - 1) - (1 - r) * (2 * p2m - 1);
    const double j_o2 = r * (2 * p1f - 1) - (1 - r) * (2 * p1m - 1);
    const double e1_o1 = 2 * r - 1;
    const double e2_o1 = 2 * (r * p2f + (1 - r) * p2m) - 1;
    const double e2_o2 = 2 * r - 1;
    const double e1_o2 = 2 * (r * p1f + (1 - r) * p1m) - 1;
    return std::abs(j_o1 - j_o2) - (std::abs(e1_o1 - e1_o2) + std::abs(e2_o1 - e2_o2));
}

// Exhaustive coupling search on a coarse grid is hopeless in 16 dimensions;
// instead the cyclic rank-2 criterion itself is the cross-check. For fixture
// systems small enough to reason about by hand we also verify feasibility by
// constructing an explicit coupling; see test_cbd.cpp.

// Random valid CbD system: both orderings drawn from the probability simplex,
// optionally with sparse zero atoms to hit the boundary.
inline ctxaudit::CbdSystem random_system(ctxaudit::CounterRng& rng, bool sparse) {
    auto draw_ordering = [&](double& ea, double& eb, double& j) {
        std::array<double, 4> atoms{};
        double sum = 0;
        for (auto& a : atoms) {
            a = -std::log(1.0 - rng.uniform() + 1e-300);
            sum += a;
        }
        if (sparse) {
            const auto zeros = rng.uniform_below(3); // 0..2 atoms forced to zero
            for (std::uint64_t z = 0; z < zeros; ++z) atoms[rng.uniform_below(4)] = 0.0;
            sum = atoms[0] + atoms[1] + atoms[2] + atoms[3];
            if (sum <= 0) {
                atoms[0] = 1.0;
                sum = 1.0;
            }
        }
        for (auto& a : atoms) a /= sum;
        // atoms laid out as (s,t) in {(+,+),(+,-),(-,+),(-,-)}
        ea = atoms[0] + atoms[1] - atoms[2] - atoms[3];
        eb = atoms[0] - atoms[1] + atoms[2] - atoms[3];
        j = atoms[0] - atoms[1] - atoms[2] + atoms[3];
    };
    ctxaudit::CbdSystem sys;
    draw_ordering(sys.e1_o1, sys.e2_o1, sys.j_o1);
    draw_ordering(sys.e1_o2, sys.e2_o2, sys.j_o2);
    return sys;
}

// Numerically integrated MI (bits) between a fair binary class and a unit
// variance Gaussian whose mean is 0 or `separation`: I = h(mixture) - h(N(0,1))
// with differential entropies evaluated by Simpson quadrature.
inline double gaussian_two_class_mi_bits(double separation) {
    const double lo = -10.0, hi = separation + 10.0;
    const int steps = 20000; // even
    const double h = (hi - lo) / steps;
    auto phi = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
    auto integrand = [&](double t) {
        const double m = 0.5 * phi(t) + 0.5 * phi(t - separation);
        return m > 0 ? -m * std::log2(m) : 0.0;
    };
    double acc = integrand(lo) + integrand(hi);
    for (int i = 1; i < steps; ++i) acc += integrand(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    const double h_mixture = acc * h / 3.0;
    const double h_gauss = 0.5 * std::log2(2.0 * M_PI * std::exp(1.0));
    return h_mixture - h_gauss;
}

} // namespace testsupport
