#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxaudit/backend.hpp"
#include "ctxaudit/schema.hpp"

namespace ctxaudit {

struct TrialPlan {
    std::uint64_t trial_id = 0; // deterministic hash of (template_id, setting, order, replicate)
    std::string template_id;
    ContextSetting setting = ContextSetting::unprimed;
    OptionOrder order = OptionOrder::masc_fem;
    int replicate = 0;
    std::string passage;
    std::array<std::string, 2> options{};
};

enum class Validity { valid, malformed_format, not_an_option, multiple_tokens, empty };

std::string_view to_string(Validity v);
Validity validity_from_string(std::string_view s);

struct Measurement {
    std::uint64_t trial_id = 0;
    std::string template_id;
    ContextSetting setting = ContextSetting::unprimed;
    OptionOrder order = OptionOrder::masc_fem;
    int replicate = 0;
    std::array<std::string, 2> options{};
    std::string raw_response;
    std::optional<std::string> parsed; // exactly one of the offered options when valid
    Validity validity = Validity::empty;
    std::optional<Gender> gender; // set iff validity == valid
    std::string backend_fingerprint;
    GenerationParams params;
    std::string timestamp;
    std::string error; // transport failure after retry exhaustion; empty otherwise
};

struct RunHeader {
    std::string schema_hash;
    std::string config_hash;
    std::string backend_fingerprint;
    std::string started_at;
    bool matches(const RunHeader& other) const {
        return schema_hash == other.schema_hash && config_hash == other.config_hash;
    }
};

struct MeasurementLog {
    RunHeader header;
    std::vector<Measurement> records;
};

std::uint64_t trial_id_for(std::string_view template_id, ContextSetting setting, OptionOrder order,
                           int replicate);

// Full deterministic grid: templates x settings x orders x replicates.
std::vector<TrialPlan> plan_trials(const std::vector<Template>& templates,
                                   std::span<const ContextSetting> settings,
                                   std::span<const OptionOrder> orders, int n_per_cell,
                                   const PronounLexicon& lex = PronounLexicon::standard_english());

struct ParseResult {
    std::optional<std::string> parsed;
    Validity validity = Validity::empty;
};

// Tolerant extraction of the chosen option from a raw backend response.
// Deterministic and total; every failure maps to a validity category.
// The frozen rule table, applied in order:
//   R1  whitespace-trimmed empty response        -> empty
//   R2  if the `key` token is present (case-insensitive), the candidate is
//       the text after the first ':' following it (no ':' -> malformed_format)
//   R3  otherwise the whole response is the candidate
//   R4  strip quotes/braces/brackets/punctuation/whitespace from both ends
//   R5  nothing left                             -> malformed_format
//   R6  leftover structural chars ({}:'"`)       -> malformed_format
//   R7  internal whitespace                      -> multiple_tokens
//   R8  case-insensitive match to an option      -> valid (canonical form)
//   R9  anything else                            -> not_an_option
ParseResult parse_choice(std::string_view raw, std::span<const std::string> options,
                         std::string_view key = "BLANK");

inline ParseResult parse_response(std::string_view raw, const std::array<std::string, 2>& options) {
    return parse_choice(raw, std::span<const std::string>(options.data(), options.size()));
}

struct RunOptions {
    int max_workers = 0; // 0: use the backend's max_in_flight
    std::function<void(std::size_t done, std::size_t total)> progress;
};

// Executes plans in-memory (no persistence). Results are returned in plan
// order regardless of scheduling; mock responses depend only on trial_id and
// the run seed, so any worker count produces identical measurements.
std::vector<Measurement> execute_plans(const std::vector<TrialPlan>& plans, const Backend& backend,
                                       const std::vector<Template>& templates,
                                       const RunOptions& opts = {});

// Resumable persistent run: appends one JSON record per line to log_path.
// An existing log must carry a matching header; plans whose trial_id is
// already present are skipped, so rerunning after an interruption completes
// exactly the missing trials.
MeasurementLog run(const std::vector<TrialPlan>& plans, const Backend& backend,
                   const std::filesystem::path& log_path, const RunHeader& header,
                   const std::vector<Template>& templates, const RunOptions& opts = {});

MeasurementLog load_log(const std::filesystem::path& log_path);
void save_log(const std::filesystem::path& log_path, const MeasurementLog& log);

std::string measurement_to_json_line(const Measurement& m);
Measurement measurement_from_json_line(const std::string& line);

struct ValidityCell {
    long n_total = 0;
    long n_valid = 0;
    std::array<long, 5> by_validity{}; // indexed by Validity
    long n_transport_error = 0;
    double fraction() const { return n_total == 0 ? 0.0 : static_cast<double>(n_valid) / n_total; }
};

struct ValidityReport {
    std::map<std::pair<ContextSetting, OptionOrder>, ValidityCell> cells;
    ValidityCell overall;
};

ValidityReport validity_report(const MeasurementLog& log);

enum class QuestionKind { anaphora, part_of_speech, gender_tracking };
std::string_view to_string(QuestionKind k);

struct MetapromptTrial {
    QuestionKind kind = QuestionKind::anaphora;
    std::string template_id;
    ContextSetting setting = ContextSetting::unprimed;
    std::string response;
    std::optional<std::string> parsed;
    bool valid = false;
    bool correct = false;
};

struct MetapromptAccuracy {
    long n_total = 0;
    long n_valid = 0;
    long n_correct = 0;
    double accuracy() const {
        return n_valid == 0 ? 0.0 : static_cast<double>(n_correct) / n_valid;
    }
};

// Runs the three comprehension questions for every template; gender_tracking
// runs on the primed settings (alternating by replicate), the other two on
// the unprimed passage. Accuracy is over valid responses.
std::map<QuestionKind, MetapromptAccuracy> run_metaprompts(
    const std::vector<Template>& templates, const Backend& backend, int n_per_question,
    std::vector<MetapromptTrial>* trials_out = nullptr, const RunOptions& opts = {});

} // namespace ctxaudit
