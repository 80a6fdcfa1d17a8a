#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxaudit/cbd.hpp"
#include "ctxaudit/collector.hpp"
#include "ctxaudit/config.hpp"
#include "ctxaudit/norms.hpp"
#include "ctxaudit/stats.hpp"

namespace ctxaudit {

// Fragments are self-describing JSON documents carrying the run identity
// (schema hash, config hash, log hash) plus one analysis section each. The
// report command merges consistent fragments into one report.

nlohmann::json run_identity(const RunConfig& config, const std::string& schema_hash,
                            const std::string& log_hash, const MeasurementLog& log);

nlohmann::json make_validity_fragment(const RunConfig& config, const std::string& schema_hash,
                                      const std::string& log_hash, const MeasurementLog& log);

nlohmann::json make_stats_fragment(const RunConfig& config, const std::string& schema_hash,
                                   const std::string& log_hash, const MeasurementLog& log,
                                   const std::vector<Template>& templates,
                                   const NormsTable* norms);

nlohmann::json make_cbd_fragment(const RunConfig& config, const std::string& schema_hash,
                                 const std::string& log_hash, const MeasurementLog& log,
                                 const std::vector<Template>& templates);

nlohmann::json make_metaprompt_fragment(const RunConfig& config, const std::string& schema_hash,
                                        const std::map<QuestionKind, MetapromptAccuracy>& accuracy);

std::vector<DeltaCResult> cbd_results_from_fragment(const nlohmann::json& fragment);

// Merges fragments (same schema/config/log identity required; metaprompt
// fragments are exempt from the log-hash check) into report.json plus flat
// TSV tables under out_dir/tables. compare_cbd fragments from other runs feed
// only the contextual-overlap matrix. Returns the paths written.
std::vector<std::filesystem::path> write_report(const RunConfig& config,
                                                const std::vector<nlohmann::json>& fragments,
                                                const std::vector<nlohmann::json>& compare_cbd,
                                                const std::filesystem::path& out_dir);

// Fixed-format float for TSV tables (deterministic across runs).
std::string format_double(double v);

} // namespace ctxaudit
