#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ctxaudit {

enum class RoleKind { occupation, participant };
enum class PronounCase { nominative, accusative, possessive_dependent, possessive_independent };
enum class ContextSetting { unprimed, primed_feminine, primed_masculine, null_1, null_2 };
enum class OptionOrder { masc_fem, fem_masc };
enum class Gender { feminine, masculine };

inline constexpr std::array<ContextSetting, 5> kAllSettings{
    ContextSetting::unprimed, ContextSetting::primed_feminine, ContextSetting::primed_masculine,
    ContextSetting::null_1, ContextSetting::null_2};
inline constexpr std::array<OptionOrder, 2> kAllOrders{OptionOrder::masc_fem, OptionOrder::fem_masc};
inline constexpr std::array<PronounCase, 4> kAllCases{
    PronounCase::nominative, PronounCase::accusative, PronounCase::possessive_dependent,
    PronounCase::possessive_independent};

std::string_view to_string(RoleKind k);
std::string_view to_string(PronounCase c);
std::string_view to_string(ContextSetting s);
std::string_view to_string(OptionOrder o);
std::string_view to_string(Gender g);
RoleKind role_kind_from_string(std::string_view s);
PronounCase pronoun_case_from_string(std::string_view s);
ContextSetting setting_from_string(std::string_view s);
OptionOrder order_from_string(std::string_view s);
Gender gender_from_string(std::string_view s);

inline bool is_discourse_primed(ContextSetting s) {
    return s == ContextSetting::primed_feminine || s == ContextSetting::primed_masculine;
}
inline std::optional<Gender> prime_gender_of(ContextSetting s) {
    if (s == ContextSetting::primed_feminine) return Gender::feminine;
    if (s == ContextSetting::primed_masculine) return Gender::masculine;
    return std::nullopt;
}

inline constexpr std::string_view kBlankToken = "BLANK";
inline constexpr std::string_view kPronounToken = "PRONOUN";
inline constexpr std::string_view kNullPrime1 = "The sky is blue.";
inline constexpr std::string_view kNullPrime2 = "North is south.";

// One sentence schema. `body` carries exactly one BLANK slot whose antecedent
// is the target role; `partner_body` is the paired sentence with one PRONOUN
// slot referring to the other role, used as the discourse prime.
struct Template {
    std::string template_id;
    std::string pair_id;
    RoleKind target_role_kind = RoleKind::occupation;
    std::string occupation_noun;
    std::string participant_noun;
    PronounCase pronoun_case = PronounCase::nominative;
    std::string body;
    std::string partner_body;
    // Case of the PRONOUN slot in partner_body, i.e. the case recorded by the
    // paired template. Backfilled during load; defaults to the template's own
    // case for hand-built instances.
    std::optional<PronounCase> partner_pronoun_case;

    const std::string& target_noun() const {
        return target_role_kind == RoleKind::occupation ? occupation_noun : participant_noun;
    }
    const std::string& other_noun() const {
        return target_role_kind == RoleKind::occupation ? participant_noun : occupation_noun;
    }
    PronounCase prime_case() const { return partner_pronoun_case.value_or(pronoun_case); }
};

struct TemplatePair {
    std::string pair_id;
    Template occupation_target; // first member
    Template participant_target;
};

// Surface forms for the binary forced-choice option set.
class PronounLexicon {
public:
    static const PronounLexicon& standard_english();

    const std::string& form(Gender g, PronounCase c) const;
    // she/her/hers -> feminine, he/him/his -> masculine; nullopt otherwise.
    std::optional<Gender> gender_of(std::string_view surface) const;

private:
    PronounLexicon();
    std::array<std::array<std::string, 4>, 2> forms_;
};

struct SchemaViolation {
    std::size_t row = 0; // 1-based data row; 0 for file-level problems
    std::string rule;
    std::string detail;
};

// Parses the tab-separated schema format. All violations are appended to
// `violations`; rows that parse cleanly are returned even when other rows do
// not, so the validation CLI can print everything at once.
std::vector<Template> parse_schema(std::istream& in, std::vector<SchemaViolation>& violations);

// Loads and fully validates a schema file; throws SchemaError listing every
// violation if any check fails.
std::vector<Template> load_schema(const std::filesystem::path& path);

std::vector<SchemaViolation> validate_schema_file(const std::filesystem::path& path);

void save_schema(const std::filesystem::path& path, const std::vector<Template>& templates);

// Number of whole-token occurrences of `token` in `text` (delimited by
// non-alphanumeric characters, so BLANKET does not count as BLANK).
int count_token(std::string_view text, std::string_view token);

// Renders the passage for one context setting. Primed settings prepend the
// partner sentence with its PRONOUN slot filled in the partner's own case;
// null settings prepend the fixed null sentence. Prime and body are joined by
// a single space. BLANK passes through verbatim.
std::string expand(const Template& t, ContextSetting setting,
                   const PronounLexicon& lex = PronounLexicon::standard_english());

// The two pronoun options in presentation order.
std::pair<std::string, std::string> pronoun_options(
    PronounCase c, OptionOrder order,
    const PronounLexicon& lex = PronounLexicon::standard_english());

inline std::array<Gender, 2> option_genders(OptionOrder order) {
    return order == OptionOrder::masc_fem
               ? std::array<Gender, 2>{Gender::masculine, Gender::feminine}
               : std::array<Gender, 2>{Gender::feminine, Gender::masculine};
}

// Groups templates into pairs, occupation target first, sorted by pair_id.
// Throws SchemaError if the pairing invariant does not hold.
std::vector<TemplatePair> pair_index(const std::vector<Template>& templates);

} // namespace ctxaudit
