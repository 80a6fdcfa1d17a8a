#include "ctxaudit/config.hpp"

#include <fstream>
#include <set>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/hash.hpp"

namespace ctxaudit {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::set<std::string>& allowed,
                  const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.contains(key))
            throw ConfigError("unknown field '" + key + "' in " + context);
    }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("field '" + key + "': " + e.what());
    }
}

StrategyKind strategy_kind_from_string(const std::string& s) {
    if (s == "prime_repeater") return StrategyKind::prime_repeater;
    if (s == "stereotype_follower") return StrategyKind::stereotype_follower;
    if (s == "order_picker") return StrategyKind::order_picker;
    if (s == "fixed_table") return StrategyKind::fixed_table;
    if (s == "uniform") return StrategyKind::uniform;
    if (s == "oracle") return StrategyKind::oracle;
    if (s == "composite") return StrategyKind::composite;
    throw ConfigError("unknown strategy kind: " + s);
}

std::string strategy_kind_to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::prime_repeater: return "prime_repeater";
        case StrategyKind::stereotype_follower: return "stereotype_follower";
        case StrategyKind::order_picker: return "order_picker";
        case StrategyKind::fixed_table: return "fixed_table";
        case StrategyKind::uniform: return "uniform";
        case StrategyKind::oracle: return "oracle";
        case StrategyKind::composite: return "composite";
    }
    return "uniform";
}

void check_probability(double v, const std::string& field) {
    if (v < 0.0 || v > 1.0)
        throw ConfigError("field '" + field + "' must lie in [0,1], got " + std::to_string(v));
}

} // namespace

json strategy_to_json(const StrategySpec& s) {
    json j;
    j["kind"] = strategy_kind_to_string(s.kind);
    j["repeat_prob"] = s.repeat_prob;
    j["slope"] = s.slope;
    j["first_option_prob"] = s.first_option_prob;
    j["malform_prob"] = s.malform_prob;
    j["fail_prob"] = s.fail_prob;
    j["latency_ms"] = s.latency_ms;
    if (s.kind == StrategyKind::fixed_table) {
        json cells = json::array();
        for (const auto& c : s.cells) {
            json cell;
            if (!c.template_id.empty()) cell["template_id"] = c.template_id;
            if (!c.setting.empty()) cell["setting"] = c.setting;
            if (!c.order.empty()) cell["order"] = c.order;
            cell["p_feminine"] = c.p_feminine;
            cells.push_back(cell);
        }
        j["cells"] = cells;
    }
    if (s.kind == StrategyKind::composite) {
        j["unprimed"] = s.unprimed ? strategy_to_json(*s.unprimed) : json();
        j["primed"] = s.primed ? strategy_to_json(*s.primed) : json();
    }
    return j;
}

StrategySpec strategy_from_json(const json& j, const std::string& context) {
    require_keys(j,
                 {"kind", "repeat_prob", "slope", "first_option_prob", "cells", "unprimed",
                  "primed", "malform_prob", "fail_prob", "latency_ms"},
                 context);
    StrategySpec s;
    s.kind = strategy_kind_from_string(get_or<std::string>(j, "kind", "uniform"));
    s.repeat_prob = get_or(j, "repeat_prob", s.repeat_prob);
    s.slope = get_or(j, "slope", s.slope);
    s.first_option_prob = get_or(j, "first_option_prob", s.first_option_prob);
    s.malform_prob = get_or(j, "malform_prob", s.malform_prob);
    s.fail_prob = get_or(j, "fail_prob", s.fail_prob);
    s.latency_ms = get_or(j, "latency_ms", s.latency_ms);
    check_probability(s.repeat_prob, context + ".repeat_prob");
    check_probability(s.first_option_prob, context + ".first_option_prob");
    check_probability(s.malform_prob, context + ".malform_prob");
    check_probability(s.fail_prob, context + ".fail_prob");
    if (j.contains("cells")) {
        for (const auto& cell : j.at("cells")) {
            require_keys(cell, {"template_id", "setting", "order", "p_feminine"},
                         context + ".cells[]");
            FixedCell c;
            c.template_id = get_or<std::string>(cell, "template_id", "");
            c.setting = get_or<std::string>(cell, "setting", "");
            c.order = get_or<std::string>(cell, "order", "");
            if (!cell.contains("p_feminine"))
                throw ConfigError(context + ".cells[] entry is missing p_feminine");
            c.p_feminine = cell.at("p_feminine").get<double>();
            check_probability(c.p_feminine, context + ".cells[].p_feminine");
            if (!c.setting.empty()) setting_from_string(c.setting);
            if (!c.order.empty()) order_from_string(c.order);
            s.cells.push_back(std::move(c));
        }
    }
    if (s.kind == StrategyKind::composite) {
        if (!j.contains("unprimed") || !j.contains("primed"))
            throw ConfigError(context + ": composite strategy requires 'unprimed' and 'primed'");
        s.unprimed = std::make_shared<StrategySpec>(
            strategy_from_json(j.at("unprimed"), context + ".unprimed"));
        s.primed = std::make_shared<StrategySpec>(
            strategy_from_json(j.at("primed"), context + ".primed"));
    }
    if (s.kind == StrategyKind::fixed_table && s.cells.empty())
        throw ConfigError(context + ": fixed_table strategy requires at least one cell");
    return s;
}

namespace {

json backend_to_json(const BackendConfig& b) {
    json j;
    switch (b.kind) {
        case BackendKind::http_chat: j["kind"] = "http_chat"; break;
        case BackendKind::mock_scripted: j["kind"] = "mock_scripted"; break;
        case BackendKind::mock_strategy: j["kind"] = "mock_strategy"; break;
    }
    j["endpoint"] = b.endpoint;
    j["model_name"] = b.model_name;
    j["credential_env"] = b.credential_env;
    j["max_in_flight"] = b.max_in_flight;
    j["retry"] = {{"max_attempts", b.retry.max_attempts},
                  {"base_backoff_ms", static_cast<long>(b.retry.base_backoff.count())}};
    j["params"] = {{"temperature", b.params.temperature},
                   {"max_new_tokens", b.params.max_new_tokens},
                   {"top_k", b.params.top_k}};
    if (b.params.seed) j["params"]["seed"] = *b.params.seed;
    j["dialect"] = b.dialect == EndpointDialect::standard ? "standard" : "no_assistant_prefix";
    j["strategy"] = strategy_to_json(b.strategy);
    if (!b.script.responses.empty() || b.script.fail_always || b.script.fail_first_attempts > 0) {
        j["script"] = {{"responses", b.script.responses},
                       {"fail_first_attempts", b.script.fail_first_attempts},
                       {"fail_always", b.script.fail_always},
                       {"latency_ms", b.script.latency_ms}};
    }
    return j;
}

BackendConfig backend_from_json(const json& j) {
    require_keys(j,
                 {"kind", "endpoint", "model_name", "credential_env", "max_in_flight", "retry",
                  "params", "dialect", "strategy", "script"},
                 "backend");
    BackendConfig b;
    const auto kind = get_or<std::string>(j, "kind", "mock_strategy");
    if (kind == "http_chat") b.kind = BackendKind::http_chat;
    else if (kind == "mock_scripted") b.kind = BackendKind::mock_scripted;
    else if (kind == "mock_strategy") b.kind = BackendKind::mock_strategy;
    else throw ConfigError("unknown backend kind: " + kind);
    b.endpoint = get_or<std::string>(j, "endpoint", "");
    b.model_name = get_or<std::string>(j, "model_name", b.model_name);
    b.credential_env = get_or<std::string>(j, "credential_env", "");
    b.max_in_flight = get_or(j, "max_in_flight", b.max_in_flight);
    if (b.max_in_flight < 1) throw ConfigError("backend.max_in_flight must be >= 1");
    if (j.contains("retry")) {
        const auto& r = j.at("retry");
        require_keys(r, {"max_attempts", "base_backoff_ms"}, "backend.retry");
        b.retry.max_attempts = get_or(r, "max_attempts", b.retry.max_attempts);
        b.retry.base_backoff =
            std::chrono::milliseconds(get_or<long>(r, "base_backoff_ms", 250));
        if (b.retry.max_attempts < 1) throw ConfigError("backend.retry.max_attempts must be >= 1");
    }
    if (j.contains("params")) {
        const auto& p = j.at("params");
        require_keys(p, {"temperature", "max_new_tokens", "top_k", "seed"}, "backend.params");
        b.params.temperature = get_or(p, "temperature", b.params.temperature);
        b.params.max_new_tokens = get_or(p, "max_new_tokens", b.params.max_new_tokens);
        b.params.top_k = get_or(p, "top_k", b.params.top_k);
        if (p.contains("seed")) b.params.seed = p.at("seed").get<std::uint64_t>();
        if (b.params.temperature < 0.0)
            throw ConfigError("backend.params.temperature must be >= 0");
        if (b.params.max_new_tokens < 1)
            throw ConfigError("backend.params.max_new_tokens must be >= 1");
        if (b.params.top_k < 1) throw ConfigError("backend.params.top_k must be >= 1");
    }
    const auto dialect = get_or<std::string>(j, "dialect", "standard");
    if (dialect == "standard") b.dialect = EndpointDialect::standard;
    else if (dialect == "no_assistant_prefix") b.dialect = EndpointDialect::no_assistant_prefix;
    else throw ConfigError("unknown backend dialect: " + dialect);
    if (j.contains("strategy"))
        b.strategy = strategy_from_json(j.at("strategy"), "backend.strategy");
    if (j.contains("script")) {
        const auto& s = j.at("script");
        require_keys(s, {"responses", "fail_first_attempts", "fail_always", "latency_ms"},
                     "backend.script");
        b.script.responses = get_or(s, "responses", std::vector<std::string>{});
        b.script.fail_first_attempts = get_or(s, "fail_first_attempts", 0);
        b.script.fail_always = get_or(s, "fail_always", false);
        b.script.latency_ms = get_or(s, "latency_ms", 0);
    }
    if (b.kind == BackendKind::http_chat && b.endpoint.empty())
        throw ConfigError("backend.endpoint is required for kind http_chat");
    return b;
}

std::vector<ContextSetting> settings_from_json(const json& j, const std::string& field) {
    std::vector<ContextSetting> out;
    for (const auto& item : j) out.push_back(setting_from_string(item.get<std::string>()));
    if (out.empty()) throw ConfigError("field '" + field + "' must not be empty");
    return out;
}

} // namespace

json RunConfig::resolved() const {
    json j;
    j["seed"] = seed;
    j["schema_path"] = schema_path.string();
    j["norms_path"] = norms_path.string();
    j["alias_path"] = alias_path.string();
    j["backend"] = backend_to_json(backend);
    json settings_json = json::array();
    for (const auto s : settings) settings_json.push_back(std::string(to_string(s)));
    j["settings"] = settings_json;
    json orders_json = json::array();
    for (const auto o : orders) orders_json.push_back(std::string(to_string(o)));
    j["orders"] = orders_json;
    j["n_per_cell"] = n_per_cell;
    j["kl_epsilon"] = kl_epsilon;
    j["mi_k"] = mi_k;
    j["mi_bootstrap_replicates"] = mi_bootstrap_replicates;
    json unprimed = json::array();
    for (const auto s : mi_unprimed_regime) unprimed.push_back(std::string(to_string(s)));
    j["mi_unprimed_regime"] = unprimed;
    json primed = json::array();
    for (const auto s : mi_primed_regime) primed.push_back(std::string(to_string(s)));
    j["mi_primed_regime"] = primed;
    j["cbd"] = {{"estimator", std::string(to_string(cbd.estimator))},
                {"tolerance", cbd.tolerance},
                {"prime_rate", cbd.prime_rate},
                {"pooling", std::string(to_string(cbd.pooling))},
                {"ci_gate", cbd.ci_gate}};
    j["bootstrap_replicates"] = bootstrap_replicates;
    j["permutation_replicates"] = permutation_replicates;
    j["metaprompt_n"] = metaprompt_n;
    j["output_dir"] = output_dir.string();
    return j;
}

std::string RunConfig::config_hash() const { return to_hex16(fnv1a64(resolved().dump())); }

RunConfig RunConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
    require_keys(j,
                 {"seed", "schema_path", "norms_path", "alias_path", "backend", "settings",
                  "orders", "n_per_cell", "kl_epsilon", "mi_k", "mi_bootstrap_replicates",
                  "mi_unprimed_regime", "mi_primed_regime", "cbd", "bootstrap_replicates",
                  "permutation_replicates", "metaprompt_n", "output_dir"},
                 "config");
    RunConfig c;
    c.seed = get_or(j, "seed", c.seed);

    auto resolve_path = [&](const std::string& field) -> std::filesystem::path {
        const auto text = get_or<std::string>(j, field, "");
        if (text.empty()) return {};
        std::filesystem::path p(text);
        if (p.is_relative()) p = base_dir / p;
        return p;
    };
    c.schema_path = resolve_path("schema_path");
    c.norms_path = resolve_path("norms_path");
    c.alias_path = resolve_path("alias_path");
    for (const auto& [field, path] : {std::pair<std::string, std::filesystem::path>{
                                          "schema_path", c.schema_path},
                                      {"norms_path", c.norms_path},
                                      {"alias_path", c.alias_path}}) {
        if (!path.empty() && !std::filesystem::exists(path))
            throw ConfigError("field '" + field + "': file does not exist: " + path.string());
    }

    if (j.contains("backend")) c.backend = backend_from_json(j.at("backend"));
    if (j.contains("settings")) c.settings = settings_from_json(j.at("settings"), "settings");
    if (j.contains("orders")) {
        c.orders.clear();
        for (const auto& item : j.at("orders"))
            c.orders.push_back(order_from_string(item.get<std::string>()));
        if (c.orders.empty()) throw ConfigError("field 'orders' must not be empty");
    }
    c.n_per_cell = get_or(j, "n_per_cell", c.n_per_cell);
    if (c.n_per_cell < 1) throw ConfigError("field 'n_per_cell' must be >= 1");
    c.kl_epsilon = get_or(j, "kl_epsilon", c.kl_epsilon);
    if (c.kl_epsilon < 0.0) throw ConfigError("field 'kl_epsilon' must be >= 0");
    c.mi_k = get_or(j, "mi_k", c.mi_k);
    if (c.mi_k < 1) throw ConfigError("field 'mi_k' must be >= 1");
    c.mi_bootstrap_replicates = get_or(j, "mi_bootstrap_replicates", c.mi_bootstrap_replicates);
    if (j.contains("mi_unprimed_regime"))
        c.mi_unprimed_regime = settings_from_json(j.at("mi_unprimed_regime"), "mi_unprimed_regime");
    if (j.contains("mi_primed_regime"))
        c.mi_primed_regime = settings_from_json(j.at("mi_primed_regime"), "mi_primed_regime");
    if (j.contains("cbd")) {
        const auto& cb = j.at("cbd");
        require_keys(cb, {"estimator", "tolerance", "prime_rate", "pooling", "ci_gate"}, "cbd");
        if (cb.contains("estimator"))
            c.cbd.estimator = joint_estimator_from_string(cb.at("estimator").get<std::string>());
        c.cbd.tolerance = get_or(cb, "tolerance", c.cbd.tolerance);
        c.cbd.prime_rate = get_or(cb, "prime_rate", c.cbd.prime_rate);
        check_probability(c.cbd.prime_rate, "cbd.prime_rate");
        if (cb.contains("pooling"))
            c.cbd.pooling = pooling_rule_from_string(cb.at("pooling").get<std::string>());
        c.cbd.ci_gate = get_or(cb, "ci_gate", c.cbd.ci_gate);
    }
    c.bootstrap_replicates = get_or(j, "bootstrap_replicates", c.bootstrap_replicates);
    if (c.bootstrap_replicates < 100)
        throw ConfigError("field 'bootstrap_replicates' must be >= 100");
    c.permutation_replicates = get_or(j, "permutation_replicates", c.permutation_replicates);
    c.metaprompt_n = get_or(j, "metaprompt_n", c.metaprompt_n);
    if (c.metaprompt_n < 1) throw ConfigError("field 'metaprompt_n' must be >= 1");
    if (j.contains("output_dir")) {
        std::filesystem::path p(j.at("output_dir").get<std::string>());
        if (p.is_relative()) p = base_dir / p;
        c.output_dir = p;
    } else {
        c.output_dir = base_dir / "out";
    }
    return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j, std::filesystem::absolute(path).parent_path());
}

} // namespace ctxaudit
