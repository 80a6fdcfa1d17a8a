#include "ctxaudit/synthetic.hpp"

#include <array>
#include <set>
#include <string>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/rng.hpp"

namespace ctxaudit {

namespace {

constexpr std::array<std::string_view, 40> kOccupations{
    "mechanic",   "nurse",       "engineer",   "librarian",  "plumber",    "teacher",
    "surgeon",    "secretary",   "carpenter",  "dietitian",  "electrician", "paralegal",
    "machinist",  "hygienist",   "architect",  "therapist",  "inspector",  "cashier",
    "programmer", "receptionist", "supervisor", "housekeeper", "scientist",  "stylist",
    "firefighter", "dispatcher",  "painter",    "auditor",    "examiner",   "instructor",
    "pharmacist", "broker",       "investigator", "bartender", "technician", "appraiser",
    "educator",   "bailiff",      "planner",    "chemist"};

constexpr std::array<std::string_view, 40> kParticipants{
    "customer",  "patient",   "client",    "visitor",   "homeowner", "student",
    "relative",  "caller",    "tenant",    "guest",     "resident",  "witness",
    "applicant", "passenger", "shopper",   "neighbor",  "employee",  "advisee",
    "user",      "attendee",  "trainee",   "owner",     "volunteer", "member",
    "subscriber", "buyer",     "pedestrian", "taxpayer",  "defendant", "onlooker",
    "examinee",  "guardian",  "intern",    "spectator", "bystander", "petitioner",
    "claimant",  "renter",    "investor",  "sponsor"};

std::string_view blank_tail(PronounCase c) {
    switch (c) {
        case PronounCase::nominative: return "because BLANK had confirmed the schedule";
        case PronounCase::accusative: return "because the update surprised BLANK that afternoon";
        case PronounCase::possessive_dependent: return "because BLANK schedule had changed";
        case PronounCase::possessive_independent: return "because the final decision was BLANK";
    }
    return "because BLANK had confirmed the schedule";
}

std::string pronoun_tail(PronounCase c) {
    std::string tail(blank_tail(c));
    const auto pos = tail.find("BLANK");
    tail.replace(pos, 5, "PRONOUN");
    return tail;
}

} // namespace

std::vector<Template> make_synthetic_schema(int n_pairs) {
    if (n_pairs < 1) throw ConfigError("make_synthetic_schema: n_pairs must be >= 1");
    std::vector<Template> out;
    out.reserve(static_cast<std::size_t>(n_pairs) * 2);
    for (int p = 0; p < n_pairs; ++p) {
        const std::size_t base = static_cast<std::size_t>(p) % kOccupations.size();
        const int suffix = p / static_cast<int>(kOccupations.size());
        std::string occ(kOccupations[base]);
        std::string par(kParticipants[base]);
        if (suffix > 0) {
            occ += std::to_string(suffix + 1);
            par += std::to_string(suffix + 1);
        }
        const PronounCase pcase = kAllCases[static_cast<std::size_t>(p) % kAllCases.size()];
        const std::string pair_id = "pair" + std::to_string(p);

        // Sentence about the occupation referent / about the participant referent.
        const std::string occ_sentence_blank = "The " + occ + " updated the " + par + " " +
                                               std::string(blank_tail(pcase)) + ".";
        const std::string occ_sentence_pronoun =
            "The " + occ + " updated the " + par + " " + pronoun_tail(pcase) + ".";
        const std::string par_sentence_blank = "The " + occ + " thanked the " + par + " " +
                                               std::string(blank_tail(pcase)) + ".";
        const std::string par_sentence_pronoun =
            "The " + occ + " thanked the " + par + " " + pronoun_tail(pcase) + ".";

        Template occ_target;
        occ_target.template_id = pair_id + "_occ";
        occ_target.pair_id = pair_id;
        occ_target.target_role_kind = RoleKind::occupation;
        occ_target.occupation_noun = occ;
        occ_target.participant_noun = par;
        occ_target.pronoun_case = pcase;
        occ_target.body = occ_sentence_blank;
        occ_target.partner_body = par_sentence_pronoun;
        occ_target.partner_pronoun_case = pcase;

        Template par_target;
        par_target.template_id = pair_id + "_par";
        par_target.pair_id = pair_id;
        par_target.target_role_kind = RoleKind::participant;
        par_target.occupation_noun = occ;
        par_target.participant_noun = par;
        par_target.pronoun_case = pcase;
        par_target.body = par_sentence_blank;
        par_target.partner_body = occ_sentence_pronoun;
        par_target.partner_pronoun_case = pcase;

        out.push_back(std::move(occ_target));
        out.push_back(std::move(par_target));
    }
    return out;
}

NormsTable make_synthetic_norms(const std::vector<Template>& templates, std::uint64_t seed) {
    std::set<std::string> nouns;
    for (const auto& t : templates) nouns.insert(NormsTable::normalize(t.target_noun()));
    std::vector<std::string> ordered(nouns.begin(), nouns.end());

    CounterRng rng(seed, "synthetic-norms");
    for (std::size_t i = ordered.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_below(i);
        std::swap(ordered[i - 1], ordered[j]);
    }

    NormsTable norms;
    norms.set_provenance("synthetic");
    const std::size_t n = ordered.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double rating =
            n == 1 ? 0.5 : 0.05 + 0.9 * static_cast<double>(i) / static_cast<double>(n - 1);
        norms.set(ordered[i], rating);
    }
    return norms;
}

} // namespace ctxaudit
