#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxaudit/backend.hpp"
#include "ctxaudit/cbd.hpp"
#include "ctxaudit/schema.hpp"

namespace ctxaudit {

struct CbdConfig {
    JointEstimator estimator = JointEstimator::mixture;
    double tolerance = 0.0;
    double prime_rate = 0.5;
    PoolingRule pooling = PoolingRule::either_order;
    bool ci_gate = false;
};

// Resolved run configuration. Every field has a recorded default; the
// resolved form (resolved()) is embedded verbatim in reports and hashed into
// the run header.
struct RunConfig {
    std::uint64_t seed = 1;
    std::filesystem::path schema_path;
    std::filesystem::path norms_path;
    std::filesystem::path alias_path;
    BackendConfig backend;
    std::vector<ContextSetting> settings{kAllSettings.begin(), kAllSettings.end()};
    std::vector<OptionOrder> orders{kAllOrders.begin(), kAllOrders.end()};
    int n_per_cell = 110;
    double kl_epsilon = 0.5;
    int mi_k = 3;
    int mi_bootstrap_replicates = 50;
    std::vector<ContextSetting> mi_unprimed_regime{ContextSetting::unprimed};
    std::vector<ContextSetting> mi_primed_regime{ContextSetting::primed_feminine,
                                                 ContextSetting::primed_masculine};
    CbdConfig cbd;
    int bootstrap_replicates = 500;
    int permutation_replicates = 0; // 0 disables the permutation p-value
    int metaprompt_n = 40;
    std::filesystem::path output_dir = "out";

    nlohmann::json resolved() const;
    std::string config_hash() const;

    // Parses and validates; unknown keys and missing referenced files are
    // config errors naming the offending field. Relative paths resolve
    // against base_dir.
    static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static RunConfig from_file(const std::filesystem::path& path);
};

nlohmann::json strategy_to_json(const StrategySpec& s);
StrategySpec strategy_from_json(const nlohmann::json& j, const std::string& context);

} // namespace ctxaudit
