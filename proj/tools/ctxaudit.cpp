#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ctxaudit/cbd.hpp"
#include "ctxaudit/collector.hpp"
#include "ctxaudit/config.hpp"
#include "ctxaudit/errors.hpp"
#include "ctxaudit/hash.hpp"
#include "ctxaudit/report.hpp"
#include "ctxaudit/simulate.hpp"
#include "ctxaudit/stats.hpp"

namespace {

using ctxaudit::AnalysisError;
using ctxaudit::CollectionError;
using ctxaudit::ConfigError;
using ctxaudit::RunConfig;
using nlohmann::json;

struct Paths {
    std::filesystem::path plan;
    std::filesystem::path log;
    std::filesystem::path validity_fragment;
    std::filesystem::path stats_fragment;
    std::filesystem::path cbd_fragment;
    std::filesystem::path metaprompt_fragment;
};

Paths default_paths(const RunConfig& config) {
    Paths p;
    p.plan = config.output_dir / "plan.jsonl";
    p.log = config.output_dir / "log.jsonl";
    p.validity_fragment = config.output_dir / "validity.json";
    p.stats_fragment = config.output_dir / "stats.json";
    p.cbd_fragment = config.output_dir / "cbd.json";
    p.metaprompt_fragment = config.output_dir / "metaprompt.json";
    return p;
}

RunConfig load_config(const std::string& config_path) {
    if (config_path.empty()) throw ConfigError("--config is required for this command");
    return RunConfig::from_file(config_path);
}

std::optional<ctxaudit::NormsTable> load_norms_if_configured(const RunConfig& config) {
    if (config.norms_path.empty()) return std::nullopt;
    std::optional<std::filesystem::path> alias;
    if (!config.alias_path.empty()) alias = config.alias_path;
    return ctxaudit::NormsTable::load(config.norms_path, alias);
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open file: " + path.string());
    json j;
    in >> j;
    return j;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write file: " + path.string());
    out << j.dump(2) << '\n';
}

void write_plan_file(const std::filesystem::path& path, const RunConfig& config,
                     const std::string& schema_hash, const std::vector<ctxaudit::TrialPlan>& plans) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write plan file: " + path.string());
    out << json{{"kind", "plan_header"},
                {"schema_hash", schema_hash},
                {"config_hash", config.config_hash()},
                {"n_plans", plans.size()}}
               .dump()
        << '\n';
    for (const auto& p : plans) {
        out << json{{"trial_id", ctxaudit::to_hex16(p.trial_id)},
                    {"template_id", p.template_id},
                    {"setting", std::string(to_string(p.setting))},
                    {"order", std::string(to_string(p.order))},
                    {"replicate", p.replicate},
                    {"passage", p.passage},
                    {"options", {p.options[0], p.options[1]}}}
                   .dump()
            << '\n';
    }
}

std::vector<ctxaudit::TrialPlan> read_plan_file(const std::filesystem::path& path,
                                                const RunConfig& config,
                                                const std::string& schema_hash) {
    std::ifstream in(path);
    if (!in) throw CollectionError("cannot open plan file: " + path.string());
    std::vector<ctxaudit::TrialPlan> plans;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (lineno == 1) {
            if (j.value("kind", "") != "plan_header")
                throw CollectionError("plan file does not start with a plan header");
            if (j.value("schema_hash", "") != schema_hash ||
                j.value("config_hash", "") != config.config_hash())
                throw CollectionError(
                    "plan header does not match this config (schema or config changed); re-plan");
            continue;
        }
        ctxaudit::TrialPlan p;
        p.trial_id = ctxaudit::from_hex16(j.at("trial_id").get<std::string>());
        p.template_id = j.at("template_id").get<std::string>();
        p.setting = ctxaudit::setting_from_string(j.at("setting").get<std::string>());
        p.order = ctxaudit::order_from_string(j.at("order").get<std::string>());
        p.replicate = j.at("replicate").get<int>();
        p.passage = j.at("passage").get<std::string>();
        p.options = {j.at("options").at(0).get<std::string>(),
                     j.at("options").at(1).get<std::string>()};
        plans.push_back(std::move(p));
    }
    return plans;
}

void print_validity(const ctxaudit::ValidityReport& report) {
    std::cout << "setting\torder\tn_valid/n_total\tfraction\n";
    for (const auto& [key, cell] : report.cells) {
        std::cout << to_string(key.first) << '\t' << to_string(key.second) << '\t' << cell.n_valid
                  << '/' << cell.n_total << '\t' << ctxaudit::format_double(cell.fraction())
                  << '\n';
    }
    std::cout << "overall\tall\t" << report.overall.n_valid << '/' << report.overall.n_total
              << '\t' << ctxaudit::format_double(report.overall.fraction()) << "\n";
}

int cmd_validate_schema(const std::string& schema_arg, const std::string& config_arg) {
    std::filesystem::path schema_path = schema_arg;
    if (schema_path.empty()) {
        const auto config = load_config(config_arg);
        schema_path = config.schema_path;
    }
    if (schema_path.empty()) throw ConfigError("no schema path given (use --schema or --config)");
    const auto violations = ctxaudit::validate_schema_file(schema_path);
    if (violations.empty()) {
        std::cout << "schema OK: " << schema_path.string() << "\n";
        return 0;
    }
    for (const auto& v : violations) {
        std::cout << schema_path.string() << ':';
        if (v.row > 0) std::cout << "row " << v.row << ':';
        std::cout << ' ' << '[' << v.rule << "] " << v.detail << "\n";
    }
    std::cout << violations.size() << " violation(s)\n";
    return static_cast<int>(ctxaudit::ExitCode::config);
}

int cmd_plan(const RunConfig& config, const std::string& out_arg) {
    const auto templates = ctxaudit::load_schema(config.schema_path);
    const auto schema_hash = ctxaudit::hash_file(config.schema_path);
    const auto plans = ctxaudit::plan_trials(
        templates, std::span<const ctxaudit::ContextSetting>(config.settings),
        std::span<const ctxaudit::OptionOrder>(config.orders), config.n_per_cell);
    const auto path = out_arg.empty() ? default_paths(config).plan
                                      : std::filesystem::path(out_arg);
    write_plan_file(path, config, schema_hash, plans);
    std::cout << "templates: " << templates.size() << "\nsettings: " << config.settings.size()
              << "\norders: " << config.orders.size() << "\nn_per_cell: " << config.n_per_cell
              << "\ntotal plans: " << plans.size() << "\nplan written to " << path.string()
              << "\n";
    return 0;
}

int cmd_run(const RunConfig& config, const std::string& plan_arg, const std::string& log_arg,
            bool quiet) {
    const auto paths = default_paths(config);
    const auto templates = ctxaudit::load_schema(config.schema_path);
    const auto schema_hash = ctxaudit::hash_file(config.schema_path);
    const auto plan_path = plan_arg.empty() ? paths.plan : std::filesystem::path(plan_arg);
    const auto log_path = log_arg.empty() ? paths.log : std::filesystem::path(log_arg);
    const auto plans = read_plan_file(plan_path, config, schema_hash);

    const auto norms = load_norms_if_configured(config);
    ctxaudit::Backend backend(config.backend, config.seed, norms ? &*norms : nullptr);

    ctxaudit::RunHeader header;
    header.schema_hash = schema_hash;
    header.config_hash = config.config_hash();
    header.backend_fingerprint = config.backend.fingerprint();

    ctxaudit::RunOptions opts;
    if (!quiet) {
        opts.progress = [](std::size_t done, std::size_t planned) {
            if (done % 1000 == 0 || done == planned)
                std::cerr << "\r" << done << "/" << planned << " trials" << std::flush;
        };
    }
    const auto log = ctxaudit::run(plans, backend, log_path, header, templates, opts);
    if (!quiet) std::cerr << "\n";

    const auto report = ctxaudit::validity_report(log);
    std::cout << "log: " << log_path.string() << "\nrecords: " << log.records.size()
              << "\nvalidity: " << ctxaudit::format_double(report.overall.fraction()) << " ("
              << report.overall.n_valid << '/' << report.overall.n_total << ")\n";

    long errors = 0;
    for (const auto& m : log.records)
        if (!m.error.empty()) ++errors;
    if (errors > 0) {
        std::cout << errors << " trial(s) failed after retries\n";
        return static_cast<int>(ctxaudit::ExitCode::collection);
    }
    return 0;
}

int cmd_validate(const RunConfig& config, const std::string& log_arg) {
    const auto paths = default_paths(config);
    const auto log_path = log_arg.empty() ? paths.log : std::filesystem::path(log_arg);
    const auto log = ctxaudit::load_log(log_path);
    const auto schema_hash = ctxaudit::hash_file(config.schema_path);
    const auto fragment = ctxaudit::make_validity_fragment(config, schema_hash,
                                                           ctxaudit::hash_file(log_path), log);
    write_json_file(paths.validity_fragment, fragment);
    print_validity(ctxaudit::validity_report(log));
    std::cout << "fragment written to " << paths.validity_fragment.string() << "\n";
    return 0;
}

int cmd_metaprompt(const RunConfig& config, int n_override) {
    const auto templates = ctxaudit::load_schema(config.schema_path);
    const auto schema_hash = ctxaudit::hash_file(config.schema_path);
    const auto norms = load_norms_if_configured(config);
    ctxaudit::Backend backend(config.backend, config.seed, norms ? &*norms : nullptr);
    const int n = n_override > 0 ? n_override : config.metaprompt_n;
    const auto accuracy = ctxaudit::run_metaprompts(templates, backend, n);
    const auto fragment = ctxaudit::make_metaprompt_fragment(config, schema_hash, accuracy);
    write_json_file(default_paths(config).metaprompt_fragment, fragment);
    std::cout << "question_kind\tn_valid/n_total\taccuracy\n";
    for (const auto& [kind, acc] : accuracy)
        std::cout << to_string(kind) << '\t' << acc.n_valid << '/' << acc.n_total << '\t'
                  << ctxaudit::format_double(acc.accuracy()) << '\n';
    return 0;
}

int cmd_stats(const RunConfig& config, const std::string& log_arg) {
    const auto paths = default_paths(config);
    const auto log_path = log_arg.empty() ? paths.log : std::filesystem::path(log_arg);
    const auto log = ctxaudit::load_log(log_path);
    const auto templates = ctxaudit::load_schema(config.schema_path);
    const auto schema_hash = ctxaudit::hash_file(config.schema_path);
    const auto norms = load_norms_if_configured(config);
    const auto fragment =
        ctxaudit::make_stats_fragment(config, schema_hash, ctxaudit::hash_file(log_path), log,
                                      templates, norms ? &*norms : nullptr);
    write_json_file(paths.stats_fragment, fragment);
    std::cout << "valid templates: " << fragment.at("valid_template_count").get<long>()
              << "\nfragment written to " << paths.stats_fragment.string() << "\n";
    return 0;
}

int cmd_cbd(const RunConfig& config, const std::string& log_arg) {
    const auto paths = default_paths(config);
    const auto log_path = log_arg.empty() ? paths.log : std::filesystem::path(log_arg);
    const auto log = ctxaudit::load_log(log_path);
    const auto templates = ctxaudit::load_schema(config.schema_path);
    const auto schema_hash = ctxaudit::hash_file(config.schema_path);
    const auto fragment = ctxaudit::make_cbd_fragment(config, schema_hash,
                                                      ctxaudit::hash_file(log_path), log, templates);
    write_json_file(paths.cbd_fragment, fragment);
    long skipped = 0;
    for (const auto& row : fragment.at("results")) {
        if (row.at("skipped").get<bool>()) {
            ++skipped;
            std::cout << "skipped " << row.at("pair_id").get<std::string>() << " ("
                      << row.at("order").get<std::string>() << "): "
                      << row.value("skip_reason", "") << "\n";
        }
    }
    const auto& summary = fragment.at("summary");
    std::cout << "pairs analyzed: " << summary.at("pairs_analyzed").get<long>() << " (" << skipped
              << " skipped results)\npooled contextual fraction: "
              << ctxaudit::format_double(summary.at("pooled_fraction").get<double>())
              << "\nfragment written to " << paths.cbd_fragment.string() << "\n";
    return 0;
}

int cmd_simulate(const RunConfig& config, const ctxaudit::SimulateOptions& opts) {
    const auto rows = ctxaudit::run_simulation(config, opts);
    std::filesystem::create_directories(config.output_dir);
    const auto json_path = config.output_dir / "power.json";
    write_json_file(json_path, ctxaudit::power_rows_to_json(rows));
    std::string tsv = "scenario\tn_per_cell\tseeds\tdetections\tdetection_rate\n";
    std::cout << "scenario\tn_per_cell\tdetection_rate\n";
    for (const auto& r : rows) {
        tsv += r.scenario + "\t" + std::to_string(r.n_per_cell) + "\t" + std::to_string(r.seeds) +
               "\t" + std::to_string(r.detections) + "\t" +
               ctxaudit::format_double(r.detection_rate) + "\n";
        std::cout << r.scenario << '\t' << r.n_per_cell << '\t'
                  << ctxaudit::format_double(r.detection_rate) << '\n';
    }
    std::ofstream out(config.output_dir / "power.tsv", std::ios::binary);
    out << tsv;
    std::cout << "power report written to " << json_path.string() << "\n";
    return 0;
}

int cmd_report(const RunConfig& config, std::vector<std::string> fragment_args,
               const std::vector<std::string>& compare_args) {
    const auto paths = default_paths(config);
    if (fragment_args.empty()) {
        for (const auto& p : {paths.validity_fragment, paths.stats_fragment, paths.cbd_fragment,
                              paths.metaprompt_fragment})
            if (std::filesystem::exists(p)) fragment_args.push_back(p.string());
        if (fragment_args.empty())
            throw AnalysisError("report: no fragments found under " + config.output_dir.string() +
                                "; run validate/stats/cbd first or pass --fragments");
    }
    std::vector<json> fragments;
    for (const auto& f : fragment_args) fragments.push_back(read_json_file(f));
    std::vector<json> compare;
    for (const auto& c : compare_args) compare.push_back(read_json_file(c));
    const auto written = ctxaudit::write_report(config, fragments, compare, config.output_dir);
    for (const auto& p : written) std::cout << "wrote " << p.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctxaudit: contextual-invariance audit for pronoun-selection backends"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("-c,--config", config_path, "run-config JSON file");

    std::string schema_arg, plan_arg, log_arg, out_arg;
    bool quiet = false;
    int metaprompt_n = 0;

    auto* sc_validate_schema =
        app.add_subcommand("validate-schema", "check a schema file and print all violations");
    sc_validate_schema->add_option("--schema", schema_arg, "schema TSV (defaults to config)");

    auto* sc_plan = app.add_subcommand("plan", "write the trial plan");
    sc_plan->add_option("--out", out_arg, "plan path (default <output_dir>/plan.jsonl)");

    auto* sc_run = app.add_subcommand("run", "execute the plan against the backend (resumable)");
    sc_run->add_option("--plan", plan_arg, "plan path");
    sc_run->add_option("--log", log_arg, "log path (default <output_dir>/log.jsonl)");
    sc_run->add_flag("--quiet", quiet, "suppress progress output");

    auto* sc_validate = app.add_subcommand("validate", "validity table for a measurement log");
    sc_validate->add_option("--log", log_arg, "log path");

    auto* sc_metaprompt = app.add_subcommand("metaprompt", "run the comprehension questions");
    sc_metaprompt->add_option("--n", metaprompt_n, "trials per question (default from config)");

    auto* sc_stats = app.add_subcommand("stats", "estimates, KL, Spearman and MI tables");
    sc_stats->add_option("--log", log_arg, "log path");

    auto* sc_cbd = app.add_subcommand("cbd", "delta-C analysis per template pair");
    sc_cbd->add_option("--log", log_arg, "log path");

    ctxaudit::SimulateOptions sim_opts;
    auto* sc_simulate = app.add_subcommand("simulate", "Monte Carlo power analysis with mocks");
    sc_simulate->add_option("--scenario", sim_opts.scenario,
                            "repeater | stereotype | contextual | null")
        ->required();
    sc_simulate->add_option("--n-grid", sim_opts.n_grid, "n_per_cell grid");
    sc_simulate->add_option("--seeds", sim_opts.n_seeds, "Monte Carlo seeds");
    sc_simulate->add_option("--target-delta", sim_opts.target_delta,
                            "designed delta-C (contextual scenario)");
    sc_simulate->add_option("--pairs", sim_opts.n_pairs, "pair count override");

    std::vector<std::string> fragment_args, compare_args;
    auto* sc_report = app.add_subcommand("report", "merge fragments into report.json and tables");
    sc_report->add_option("--fragments", fragment_args, "fragment JSON files");
    sc_report->add_option("--compare-cbd", compare_args,
                          "cbd fragments from other runs (overlap matrix)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sc_validate_schema->parsed()) return cmd_validate_schema(schema_arg, config_path);
        const RunConfig config = load_config(config_path);
        if (sc_plan->parsed()) return cmd_plan(config, out_arg);
        if (sc_run->parsed()) return cmd_run(config, plan_arg, log_arg, quiet);
        if (sc_validate->parsed()) return cmd_validate(config, log_arg);
        if (sc_metaprompt->parsed()) return cmd_metaprompt(config, metaprompt_n);
        if (sc_stats->parsed()) return cmd_stats(config, log_arg);
        if (sc_cbd->parsed()) return cmd_cbd(config, log_arg);
        if (sc_simulate->parsed()) return cmd_simulate(config, sim_opts);
        if (sc_report->parsed()) return cmd_report(config, fragment_args, compare_args);
        std::cerr << "no subcommand\n";
        return static_cast<int>(ctxaudit::ExitCode::usage);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return static_cast<int>(ctxaudit::ExitCode::config);
    } catch (const ctxaudit::SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return static_cast<int>(ctxaudit::ExitCode::config);
    } catch (const CollectionError& e) {
        std::cerr << "collection error: " << e.what() << "\n";
        return static_cast<int>(ctxaudit::ExitCode::collection);
    } catch (const AnalysisError& e) {
        std::cerr << "analysis error: " << e.what() << "\n";
        return static_cast<int>(ctxaudit::ExitCode::analysis);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ctxaudit::ExitCode::usage);
    }
}
