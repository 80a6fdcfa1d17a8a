#include "ctxaudit/schema.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "ctxaudit/errors.hpp"

namespace ctxaudit {

namespace {

constexpr std::array<std::string_view, 8> kSchemaColumns{
    "template_id", "pair_id",       "target_role_kind", "occupation_noun",
    "participant_noun", "pronoun_case", "body",             "partner_body"};

bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

} // namespace

std::string_view to_string(RoleKind k) {
    return k == RoleKind::occupation ? "occupation" : "participant";
}

std::string_view to_string(PronounCase c) {
    switch (c) {
        case PronounCase::nominative: return "nominative";
        case PronounCase::accusative: return "accusative";
        case PronounCase::possessive_dependent: return "possessive_dependent";
        case PronounCase::possessive_independent: return "possessive_independent";
    }
    return "nominative";
}

std::string_view to_string(ContextSetting s) {
    switch (s) {
        case ContextSetting::unprimed: return "unprimed";
        case ContextSetting::primed_feminine: return "primed_feminine";
        case ContextSetting::primed_masculine: return "primed_masculine";
        case ContextSetting::null_1: return "null_1";
        case ContextSetting::null_2: return "null_2";
    }
    return "unprimed";
}

std::string_view to_string(OptionOrder o) {
    return o == OptionOrder::masc_fem ? "masc_fem" : "fem_masc";
}

std::string_view to_string(Gender g) {
    return g == Gender::feminine ? "feminine" : "masculine";
}

RoleKind role_kind_from_string(std::string_view s) {
    if (s == "occupation") return RoleKind::occupation;
    if (s == "participant") return RoleKind::participant;
    throw ConfigError("unknown role kind: " + std::string(s));
}

PronounCase pronoun_case_from_string(std::string_view s) {
    for (auto c : kAllCases)
        if (s == to_string(c)) return c;
    throw ConfigError("unknown pronoun case: " + std::string(s));
}

ContextSetting setting_from_string(std::string_view s) {
    for (auto v : kAllSettings)
        if (s == to_string(v)) return v;
    throw ConfigError("unknown context setting: " + std::string(s));
}

OptionOrder order_from_string(std::string_view s) {
    if (s == "masc_fem") return OptionOrder::masc_fem;
    if (s == "fem_masc") return OptionOrder::fem_masc;
    throw ConfigError("unknown option order: " + std::string(s));
}

Gender gender_from_string(std::string_view s) {
    if (s == "feminine") return Gender::feminine;
    if (s == "masculine") return Gender::masculine;
    throw ConfigError("unknown gender: " + std::string(s));
}

PronounLexicon::PronounLexicon() {
    auto idx = [](PronounCase c) { return static_cast<std::size_t>(c); };
    auto& fem = forms_[0];
    fem[idx(PronounCase::nominative)] = "she";
    fem[idx(PronounCase::accusative)] = "her";
    fem[idx(PronounCase::possessive_dependent)] = "her";
    fem[idx(PronounCase::possessive_independent)] = "hers";
    auto& masc = forms_[1];
    masc[idx(PronounCase::nominative)] = "he";
    masc[idx(PronounCase::accusative)] = "him";
    masc[idx(PronounCase::possessive_dependent)] = "his";
    masc[idx(PronounCase::possessive_independent)] = "his";
}

const PronounLexicon& PronounLexicon::standard_english() {
    static const PronounLexicon lex;
    return lex;
}

const std::string& PronounLexicon::form(Gender g, PronounCase c) const {
    return forms_[g == Gender::feminine ? 0 : 1][static_cast<std::size_t>(c)];
}

std::optional<Gender> PronounLexicon::gender_of(std::string_view surface) const {
    for (std::size_t gi = 0; gi < 2; ++gi)
        for (const auto& f : forms_[gi])
            if (surface == f) return gi == 0 ? Gender::feminine : Gender::masculine;
    return std::nullopt;
}

int count_token(std::string_view text, std::string_view token) {
    if (token.empty()) return 0;
    int count = 0;
    std::size_t pos = 0;
    while ((pos = text.find(token, pos)) != std::string_view::npos) {
        const bool left_ok = pos == 0 || !is_word_char(text[pos - 1]);
        const std::size_t end = pos + token.size();
        const bool right_ok = end >= text.size() || !is_word_char(text[end]);
        if (left_ok && right_ok) ++count;
        pos = end;
    }
    return count;
}

std::vector<Template> parse_schema(std::istream& in, std::vector<SchemaViolation>& violations) {
    std::vector<Template> out;
    std::string line;
    std::size_t data_row = 0;
    bool saw_header = false;

    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_tabs(line);
        if (!saw_header) {
            saw_header = true;
            if (fields.size() != kSchemaColumns.size() ||
                !std::equal(fields.begin(), fields.end(), kSchemaColumns.begin())) {
                violations.push_back({0, "header",
                                      "expected header: template_id\tpair_id\ttarget_role_kind\t"
                                      "occupation_noun\tparticipant_noun\tpronoun_case\tbody\t"
                                      "partner_body"});
                return out;
            }
            continue;
        }
        ++data_row;
        if (fields.size() != kSchemaColumns.size()) {
            violations.push_back({data_row, "column_count",
                                  "expected 8 tab-separated fields, got " +
                                      std::to_string(fields.size())});
            continue;
        }
        Template t;
        t.template_id = fields[0];
        t.pair_id = fields[1];
        t.occupation_noun = fields[3];
        t.participant_noun = fields[4];
        t.body = fields[6];
        t.partner_body = fields[7];
        bool row_ok = true;
        try {
            t.target_role_kind = role_kind_from_string(fields[2]);
        } catch (const ConfigError& e) {
            violations.push_back({data_row, "target_role_kind", e.what()});
            row_ok = false;
        }
        try {
            t.pronoun_case = pronoun_case_from_string(fields[5]);
        } catch (const ConfigError& e) {
            violations.push_back({data_row, "pronoun_case", e.what()});
            row_ok = false;
        }
        for (std::size_t i = 0; i < 2; ++i) {
            if (fields[i].empty()) {
                violations.push_back(
                    {data_row, std::string(kSchemaColumns[i]), "field must not be empty"});
                row_ok = false;
            }
        }
        const int blanks = count_token(t.body, kBlankToken);
        if (blanks != 1) {
            violations.push_back({data_row, "body_blank",
                                  "body must contain exactly one BLANK token, found " +
                                      std::to_string(blanks) + " (template " + t.template_id + ")"});
            row_ok = false;
        }
        const int pronouns = count_token(t.partner_body, kPronounToken);
        if (pronouns != 1) {
            violations.push_back({data_row, "partner_pronoun",
                                  "partner_body must contain exactly one PRONOUN token, found " +
                                      std::to_string(pronouns) + " (template " + t.template_id +
                                      ")"});
            row_ok = false;
        }
        if (row_ok) out.push_back(std::move(t));
    }
    if (!saw_header && violations.empty()) {
        // Empty file: vacuously valid, zero templates.
        return out;
    }
    return out;
}

namespace {

void check_pairing(const std::vector<Template>& templates,
                   std::vector<SchemaViolation>& violations) {
    std::map<std::string, std::vector<const Template*>> by_pair;
    std::map<std::string, int> id_seen;
    for (const auto& t : templates) {
        by_pair[t.pair_id].push_back(&t);
        if (++id_seen[t.template_id] == 2)
            violations.push_back({0, "duplicate_template_id", t.template_id});
    }
    for (const auto& [pid, members] : by_pair) {
        if (members.size() != 2) {
            std::string ids;
            for (const auto* m : members) ids += (ids.empty() ? "" : ", ") + m->template_id;
            violations.push_back({0, "pairing",
                                  "pair_id " + pid + " has " + std::to_string(members.size()) +
                                      " member(s) [" + ids + "], expected 2"});
            continue;
        }
        if (members[0]->target_role_kind == members[1]->target_role_kind) {
            violations.push_back({0, "pairing",
                                  "pair_id " + pid + " members " + members[0]->template_id +
                                      " and " + members[1]->template_id +
                                      " share target_role_kind " +
                                      std::string(to_string(members[0]->target_role_kind))});
        }
    }
}

void backfill_partner_cases(std::vector<Template>& templates) {
    std::map<std::string, std::array<const Template*, 2>> by_pair;
    for (const auto& t : templates) {
        auto& slot = by_pair[t.pair_id];
        (slot[0] == nullptr ? slot[0] : slot[1]) = &t;
    }
    for (auto& t : templates) {
        const auto& slot = by_pair[t.pair_id];
        const Template* partner = slot[0] == &t ? slot[1] : slot[0];
        if (partner != nullptr) t.partner_pronoun_case = partner->pronoun_case;
    }
}

} // namespace

std::vector<SchemaViolation> validate_schema_file(const std::filesystem::path& path) {
    std::vector<SchemaViolation> violations;
    std::ifstream in(path);
    if (!in) {
        violations.push_back({0, "file", "cannot open schema file: " + path.string()});
        return violations;
    }
    auto templates = parse_schema(in, violations);
    check_pairing(templates, violations);
    return violations;
}

std::vector<Template> load_schema(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open schema file: " + path.string());
    std::vector<SchemaViolation> violations;
    auto templates = parse_schema(in, violations);
    check_pairing(templates, violations);
    if (!violations.empty()) {
        std::ostringstream msg;
        msg << "schema file " << path.string() << " has " << violations.size() << " violation(s):";
        for (const auto& v : violations) {
            msg << "\n  ";
            if (v.row > 0) msg << "row " << v.row << " ";
            msg << "[" << v.rule << "] " << v.detail;
        }
        throw SchemaError(msg.str());
    }
    backfill_partner_cases(templates);
    return templates;
}

void save_schema(const std::filesystem::path& path, const std::vector<Template>& templates) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write schema file: " + path.string());
    out << "template_id\tpair_id\ttarget_role_kind\toccupation_noun\tparticipant_noun\t"
           "pronoun_case\tbody\tpartner_body\n";
    for (const auto& t : templates) {
        out << t.template_id << '\t' << t.pair_id << '\t' << to_string(t.target_role_kind) << '\t'
            << t.occupation_noun << '\t' << t.participant_noun << '\t'
            << to_string(t.pronoun_case) << '\t' << t.body << '\t' << t.partner_body << '\n';
    }
}

std::string expand(const Template& t, ContextSetting setting, const PronounLexicon& lex) {
    switch (setting) {
        case ContextSetting::unprimed:
            return t.body;
        case ContextSetting::null_1:
            return std::string(kNullPrime1) + " " + t.body;
        case ContextSetting::null_2:
            return std::string(kNullPrime2) + " " + t.body;
        case ContextSetting::primed_feminine:
        case ContextSetting::primed_masculine: {
            const std::size_t pos = t.partner_body.find(kPronounToken);
            if (pos == std::string::npos || count_token(t.partner_body, kPronounToken) != 1)
                throw SchemaError("template " + t.template_id +
                                  ": partner_body has no usable PRONOUN slot for a primed setting");
            const Gender g = setting == ContextSetting::primed_feminine ? Gender::feminine
                                                                        : Gender::masculine;
            std::string prime = t.partner_body;
            prime.replace(pos, kPronounToken.size(), lex.form(g, t.prime_case()));
            return prime + " " + t.body;
        }
    }
    throw SchemaError("unhandled context setting");
}

std::pair<std::string, std::string> pronoun_options(PronounCase c, OptionOrder order,
                                                    const PronounLexicon& lex) {
    const std::string& fem = lex.form(Gender::feminine, c);
    const std::string& masc = lex.form(Gender::masculine, c);
    if (order == OptionOrder::masc_fem) return {masc, fem};
    return {fem, masc};
}

std::vector<TemplatePair> pair_index(const std::vector<Template>& templates) {
    std::map<std::string, std::vector<const Template*>> by_pair;
    for (const auto& t : templates) by_pair[t.pair_id].push_back(&t);
    std::vector<TemplatePair> out;
    out.reserve(by_pair.size());
    for (const auto& [pid, members] : by_pair) {
        if (members.size() != 2 ||
            members[0]->target_role_kind == members[1]->target_role_kind)
            throw SchemaError("pair_id " + pid + " violates the pairing invariant");
        TemplatePair p;
        p.pair_id = pid;
        const bool first_is_occ = members[0]->target_role_kind == RoleKind::occupation;
        p.occupation_target = first_is_occ ? *members[0] : *members[1];
        p.participant_target = first_is_occ ? *members[1] : *members[0];
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace ctxaudit
