#pragma once

#include <cstdint>
#include <vector>

#include "ctxaudit/norms.hpp"
#include "ctxaudit/schema.hpp"

namespace ctxaudit {

// Deterministic synthetic schema for simulation and testing: n_pairs template
// pairs with distinct role nouns, pronoun cases cycling across pairs, one
// occupation-target and one participant-target sentence per pair.
std::vector<Template> make_synthetic_schema(int n_pairs);

// Ratings spread evenly over [0.05, 0.95] and assigned to the target nouns in
// a seed-determined permutation, so stereotype-following mocks have a strong
// monotone signal to express.
NormsTable make_synthetic_norms(const std::vector<Template>& templates, std::uint64_t seed);

} // namespace ctxaudit
