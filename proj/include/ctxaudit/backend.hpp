#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ctxaudit/norms.hpp"
#include "ctxaudit/schema.hpp"

namespace ctxaudit {

struct GenerationParams {
    double temperature = 0.5;
    int max_new_tokens = 6;
    int top_k = 40;
    std::optional<std::uint64_t> seed; // mock backends only
};

enum class BackendKind { http_chat, mock_scripted, mock_strategy };
enum class EndpointDialect { standard, no_assistant_prefix };

struct RetryPolicy {
    int max_attempts = 4;
    std::chrono::milliseconds base_backoff{250};
};

enum class StrategyKind {
    prime_repeater,      // selects the prime's gender with probability repeat_prob
    stereotype_follower, // P(feminine) = clamp(0.5 + slope * (rating - 0.5), 0, 1)
    order_picker,        // selects the first listed option with probability first_option_prob
    fixed_table,         // P(feminine) from the first matching cell rule
    uniform,             // fair pick among the offered options
    oracle,              // answers metaprompts correctly; uniform on the main task
    composite            // routes primed settings to one sub-strategy, the rest to another
};

// Cell rule for fixed_table; empty fields are wildcards, first match wins.
struct FixedCell {
    std::string template_id;
    std::string setting;
    std::string order;
    double p_feminine = 0.5;
};

struct StrategySpec {
    StrategyKind kind = StrategyKind::uniform;
    double repeat_prob = 1.0;
    double slope = 1.0;
    double first_option_prob = 1.0;
    std::vector<FixedCell> cells;
    std::shared_ptr<StrategySpec> unprimed; // composite
    std::shared_ptr<StrategySpec> primed;   // composite
    // Applied before any strategy draw: replace the response with a malformed
    // string / simulate a transport failure, each with the given probability.
    double malform_prob = 0.0;
    double fail_prob = 0.0;
    int latency_ms = 0;
};

struct ScriptSpec {
    std::vector<std::string> responses; // cycled by trial counter
    int fail_first_attempts = 0;        // transient failures before succeeding
    bool fail_always = false;
    int latency_ms = 0;
};

struct BackendConfig {
    BackendKind kind = BackendKind::mock_strategy;
    std::string endpoint;       // http_chat: base URL, optionally with path
    std::string model_name = "mock";
    std::string credential_env; // env var holding the bearer token
    int max_in_flight = 4;
    RetryPolicy retry;
    GenerationParams params;
    EndpointDialect dialect = EndpointDialect::standard;
    StrategySpec strategy;
    ScriptSpec script;

    std::string fingerprint() const;
};

struct ChatMessage {
    std::string role; // system | user | assistant
    std::string text;
};

// Per-trial annotations consumed by mock backends so that simulated behavior
// can condition on the same facts a model would read off the prompt. The HTTP
// backend never serializes them.
struct MockHint {
    std::uint64_t trial_id = 0;
    std::string template_id;
    std::string pair_id;
    ContextSetting setting = ContextSetting::unprimed;
    OptionOrder order = OptionOrder::masc_fem;
    std::array<std::string, 2> options{};
    std::array<Gender, 2> option_gender{Gender::masculine, Gender::feminine};
    std::optional<Gender> prime_gender;
    std::string target_noun;
    // Metaprompt trials:
    bool is_metaprompt = false;
    std::string question_kind;
    std::vector<std::string> metaprompt_options;
    std::string correct_answer;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    GenerationParams params;
    std::optional<MockHint> hint;
};

// Builds the forced-choice request: system instructions, the user message
// carrying the passage and the two options in presentation order, and (unless
// the dialect forbids it) an assistant prefix opening the response format.
// Throws CollectionError when the passage does not contain exactly one BLANK.
ChatRequest build_prompt(const std::string& passage,
                         const std::pair<std::string, std::string>& options,
                         EndpointDialect dialect = EndpointDialect::standard,
                         GenerationParams params = {});

// Uniform completion interface. Thread-safe: callers may invoke complete()
// from many workers; the gateway throttles to max_in_flight and retries
// transient failures with exponential backoff and seeded jitter.
class Backend {
public:
    Backend(BackendConfig cfg, std::uint64_t run_seed, const NormsTable* norms = nullptr);
    ~Backend();

    Backend(const Backend&) = delete;
    Backend& operator=(const Backend&) = delete;

    // Returns the backend's raw text for this single turn. Throws
    // CollectionError (with attempt count) after retry exhaustion or on
    // permanent failures.
    std::string complete(const ChatRequest& request) const;

    const BackendConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    // Peak number of requests simultaneously inside complete(); exposed for
    // concurrency tests.
    int peak_in_flight() const;

private:
    struct Throttle;
    std::string dispatch_once(const ChatRequest& request, int attempt) const;
    std::string mock_strategy_response(const ChatRequest& request, int attempt) const;
    std::string mock_scripted_response(const ChatRequest& request, int attempt) const;
    std::string http_response(const ChatRequest& request) const;

    BackendConfig cfg_;
    std::uint64_t seed_;
    const NormsTable* norms_;
    std::unique_ptr<Throttle> throttle_;
    mutable std::mutex script_mutex_;
    mutable std::uint64_t script_counter_ = 0;
};

// Response shaped exactly like the instructed format.
std::string format_blank_response(const std::string& choice);

} // namespace ctxaudit
