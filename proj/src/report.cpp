#include "ctxaudit/report.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/hash.hpp"
#include "ctxaudit/rng.hpp"

namespace ctxaudit {

namespace {

using nlohmann::json;

json validity_cell_json(const ValidityCell& cell) {
    return json{{"n_total", cell.n_total},
                {"n_valid", cell.n_valid},
                {"fraction", cell.fraction()},
                {"valid", cell.by_validity[0]},
                {"malformed_format", cell.by_validity[1]},
                {"not_an_option", cell.by_validity[2]},
                {"multiple_tokens", cell.by_validity[3]},
                {"empty", cell.by_validity[4]},
                {"transport_errors", cell.n_transport_error}};
}

std::optional<OptionOrder> order_from_view(const std::string& view) {
    if (view == "pooled") return std::nullopt;
    return order_from_string(view);
}

} // namespace

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

json run_identity(const RunConfig& config, const std::string& schema_hash,
                  const std::string& log_hash, const MeasurementLog& log) {
    return json{{"schema_hash", schema_hash},
                {"config_hash", config.config_hash()},
                {"log_hash", log_hash},
                {"started_at", log.header.started_at},
                {"backend", log.header.backend_fingerprint},
                {"model_name", config.backend.model_name}};
}

json make_validity_fragment(const RunConfig& config, const std::string& schema_hash,
                            const std::string& log_hash, const MeasurementLog& log) {
    const auto report = validity_report(log);
    json cells = json::array();
    for (const auto& [key, cell] : report.cells) {
        json row = validity_cell_json(cell);
        row["setting"] = std::string(to_string(key.first));
        row["order"] = std::string(to_string(key.second));
        cells.push_back(row);
    }
    return json{{"fragment", "validity"},
                {"run", run_identity(config, schema_hash, log_hash, log)},
                {"cells", cells},
                {"overall", validity_cell_json(report.overall)}};
}

json make_stats_fragment(const RunConfig& config, const std::string& schema_hash,
                         const std::string& log_hash, const MeasurementLog& log,
                         const std::vector<Template>& templates, const NormsTable* norms) {
    if (log.records.empty()) throw AnalysisError("stats: measurement log has no records");
    const auto table = EstimateTable::from_log(log);
    const auto pooled_tv = valid_template_set(table, config.settings);
    if (pooled_tv.empty())
        throw AnalysisError("stats: no template has valid measurements in every setting");

    json fragment;
    fragment["fragment"] = "stats";
    fragment["run"] = run_identity(config, schema_hash, log_hash, log);
    fragment["valid_template_count"] = pooled_tv.size();

    json estimates = json::array();
    for (const auto& e : table.all()) {
        estimates.push_back(json{{"template_id", e.template_id},
                                 {"setting", std::string(to_string(e.setting))},
                                 {"order", e.order ? std::string(to_string(*e.order)) : "pooled"},
                                 {"n_valid", e.n_valid},
                                 {"n_feminine", e.n_feminine},
                                 {"p_hat", e.p_hat()}});
    }
    fragment["estimates"] = estimates;

    // Distribution inputs per setting: pooled per-template p-hat values.
    json series = json::array();
    for (const auto setting : config.settings) {
        json values = json::array();
        for (const auto& tid : pooled_tv) {
            const auto* e = table.find(tid, setting, std::nullopt);
            if (e == nullptr) continue;
            values.push_back(json{{"template_id", tid}, {"p_hat", e->p_hat()},
                                  {"n_valid", e->n_valid}});
        }
        series.push_back(json{{"setting", std::string(to_string(setting))}, {"values", values}});
    }
    fragment["distribution_series"] = series;

    // Mean KL against the unprimed baseline, pooled and per order.
    json mean_kl_rows = json::array();
    const bool has_baseline =
        std::find(config.settings.begin(), config.settings.end(), ContextSetting::unprimed) !=
        config.settings.end();
    if (has_baseline) {
        std::vector<std::string> views{"pooled"};
        for (const auto order : config.orders) views.emplace_back(to_string(order));
        for (const auto& view : views) {
            const auto order = order_from_view(view);
            const auto tv = order ? valid_template_set(table, config.settings, order) : pooled_tv;
            if (tv.empty()) continue;
            for (const auto setting : config.settings) {
                if (setting == ContextSetting::unprimed) continue;
                const double bits = mean_kl(table, setting, ContextSetting::unprimed, tv,
                                            config.kl_epsilon, order);
                mean_kl_rows.push_back(json{{"setting", std::string(to_string(setting))},
                                            {"view", view},
                                            {"kl_bits", bits},
                                            {"n_templates", tv.size()},
                                            {"epsilon", config.kl_epsilon}});
            }
        }
    }
    fragment["mean_kl"] = mean_kl_rows;

    // Spearman correlation with the stereotype norms, per setting.
    json spearman_rows = json::array();
    if (norms != nullptr) {
        const auto ratings = join_norms(templates, *norms);
        long matched = 0;
        for (const auto& [tid, rating] : ratings)
            if (rating && pooled_tv.contains(tid)) ++matched;
        fragment["norms_matched_templates"] = matched;
        for (const auto setting :
             {ContextSetting::unprimed, ContextSetting::primed_masculine,
              ContextSetting::primed_feminine}) {
            if (std::find(config.settings.begin(), config.settings.end(), setting) ==
                config.settings.end())
                continue;
            std::vector<double> x, y;
            for (const auto& tid : pooled_tv) {
                const auto it = ratings.find(tid);
                if (it == ratings.end() || !it->second) continue;
                const auto* e = table.find(tid, setting, std::nullopt);
                if (e == nullptr) continue;
                x.push_back(*it->second);
                y.push_back(e->p_hat());
            }
            json row{{"setting", std::string(to_string(setting))}, {"n", x.size()}};
            if (x.size() >= 3) {
                const auto result = spearman(x, y);
                row["defined"] = result.defined;
                if (result.defined) {
                    row["rho"] = result.rho;
                    row["p_value"] = result.p_value;
                    if (config.permutation_replicates > 0)
                        row["p_permutation"] = spearman_permutation_pvalue(
                            x, y, config.permutation_replicates,
                            mix64(config.seed ^ fnv1a64(to_string(setting))));
                }
            } else {
                row["defined"] = false;
            }
            spearman_rows.push_back(row);
        }
    }
    fragment["spearman"] = spearman_rows;

    // Feature mutual information per regime.
    FeatureMiOptions mi_opts;
    mi_opts.k = config.mi_k;
    mi_opts.seed = config.seed;
    mi_opts.bootstrap_replicates = config.mi_bootstrap_replicates;
    mi_opts.unprimed_regime = config.mi_unprimed_regime;
    mi_opts.primed_regime = config.mi_primed_regime;
    json mi_rows = json::array();
    for (const auto& row : feature_mi_table(log, templates, norms, pooled_tv, mi_opts)) {
        mi_rows.push_back(json{{"regime", row.regime},
                               {"feature", std::string(to_string(row.feature))},
                               {"estimator", row.estimator},
                               {"mi_bits", row.mi_bits},
                               {"se_bits", row.se_bits},
                               {"n_samples", row.n_samples}});
    }
    fragment["mi"] = mi_rows;
    return fragment;
}

namespace {

json delta_c_result_to_json(const DeltaCResult& r) {
    json j{{"pair_id", r.pair_id},
           {"order", std::string(to_string(r.order))},
           {"skipped", r.skipped}};
    if (r.skipped) {
        j["skip_reason"] = r.skip_reason;
        return j;
    }
    j["delta_c"] = r.delta_c;
    j["contextual"] = r.contextual;
    j["estimator"] = std::string(to_string(r.estimator));
    j["tolerance"] = r.tolerance;
    if (r.ci) j["ci"] = {r.ci->first, r.ci->second};
    j["counts"] = json{
        {"second_pf", {{"n_valid", r.counts.second_pf.n_valid},
                       {"n_feminine", r.counts.second_pf.n_feminine}}},
        {"second_pm", {{"n_valid", r.counts.second_pm.n_valid},
                       {"n_feminine", r.counts.second_pm.n_feminine}}},
        {"first_pf", {{"n_valid", r.counts.first_pf.n_valid},
                      {"n_feminine", r.counts.first_pf.n_feminine}}},
        {"first_pm", {{"n_valid", r.counts.first_pm.n_valid},
                      {"n_feminine", r.counts.first_pm.n_feminine}}}};
    j["system"] = json{{"e1_o1", r.system.e1_o1}, {"e2_o1", r.system.e2_o1},
                       {"e1_o2", r.system.e1_o2}, {"e2_o2", r.system.e2_o2},
                       {"j_o1", r.system.j_o1},   {"j_o2", r.system.j_o2}};
    return j;
}

DeltaCResult delta_c_result_from_json(const json& j) {
    DeltaCResult r;
    r.pair_id = j.at("pair_id").get<std::string>();
    r.order = order_from_string(j.at("order").get<std::string>());
    r.skipped = j.at("skipped").get<bool>();
    if (r.skipped) {
        r.skip_reason = j.value("skip_reason", "");
        return r;
    }
    r.delta_c = j.at("delta_c").get<double>();
    r.contextual = j.at("contextual").get<bool>();
    r.estimator = joint_estimator_from_string(j.at("estimator").get<std::string>());
    r.tolerance = j.at("tolerance").get<double>();
    if (j.contains("ci")) r.ci = {j["ci"].at(0).get<double>(), j["ci"].at(1).get<double>()};
    return r;
}

json summary_to_json(const ContextualitySummary& s) {
    json by_order = json::array();
    for (const auto& [order, analyzed] : s.analyzed_by_order) {
        by_order.push_back(json{{"order", std::string(to_string(order))},
                                {"analyzed", analyzed},
                                {"contextual", s.contextual_by_order.at(order)},
                                {"fraction", s.fraction_by_order.at(order)}});
    }
    return json{{"by_order", by_order},
                {"pairs_analyzed", s.pairs_analyzed},
                {"pairs_skipped", s.pairs_skipped},
                {"pooled_count", s.pooled_count},
                {"pooled_fraction", s.pooled_fraction},
                {"pooling_rule", std::string(to_string(s.rule))},
                {"ci_gate", s.ci_gate}};
}

} // namespace

json make_cbd_fragment(const RunConfig& config, const std::string& schema_hash,
                       const std::string& log_hash, const MeasurementLog& log,
                       const std::vector<Template>& templates) {
    const auto table = EstimateTable::from_log(log);
    const auto pairs = pair_index(templates);

    CbdOptions opts;
    opts.estimator = config.cbd.estimator;
    opts.tolerance = config.cbd.tolerance;
    opts.prime_rate = config.cbd.prime_rate;
    opts.bootstrap_replicates = config.bootstrap_replicates;
    opts.with_ci = true;
    opts.seed = config.seed;

    std::vector<DeltaCResult> results;
    for (const auto& pair : pairs)
        for (const auto order : config.orders)
            results.push_back(pair_analysis(table, pair, order, opts));

    json fragment;
    fragment["fragment"] = "cbd";
    fragment["run"] = run_identity(config, schema_hash, log_hash, log);
    fragment["options"] = json{{"estimator", std::string(to_string(opts.estimator))},
                               {"tolerance", opts.tolerance},
                               {"prime_rate", opts.prime_rate},
                               {"bootstrap_replicates", opts.bootstrap_replicates},
                               {"pooling_rule", std::string(to_string(config.cbd.pooling))},
                               {"ci_gate", config.cbd.ci_gate}};
    json rows = json::array();
    for (const auto& r : results) rows.push_back(delta_c_result_to_json(r));
    fragment["results"] = rows;
    fragment["summary"] = summary_to_json(
        contextuality_summary(results, config.cbd.pooling, config.cbd.ci_gate));
    return fragment;
}

json make_metaprompt_fragment(const RunConfig& config, const std::string& schema_hash,
                              const std::map<QuestionKind, MetapromptAccuracy>& accuracy) {
    json rows = json::array();
    for (const auto& [kind, acc] : accuracy) {
        rows.push_back(json{{"question_kind", std::string(to_string(kind))},
                            {"n_total", acc.n_total},
                            {"n_valid", acc.n_valid},
                            {"n_correct", acc.n_correct},
                            {"accuracy", acc.accuracy()}});
    }
    return json{{"fragment", "metaprompt"},
                {"run", json{{"schema_hash", schema_hash},
                             {"config_hash", config.config_hash()},
                             {"log_hash", ""},
                             {"started_at", ""},
                             {"backend", config.backend.fingerprint()},
                             {"model_name", config.backend.model_name}}},
                {"accuracy", rows}};
}

std::vector<DeltaCResult> cbd_results_from_fragment(const json& fragment) {
    if (fragment.value("fragment", "") != "cbd")
        throw AnalysisError("expected a cbd fragment");
    std::vector<DeltaCResult> out;
    for (const auto& row : fragment.at("results")) out.push_back(delta_c_result_from_json(row));
    return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text,
                std::vector<std::filesystem::path>& written) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw AnalysisError("cannot write report file: " + path.string());
    out << text;
    written.push_back(path);
}

std::string tsv_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (c == '\t' || c == '\n' || c == '\r') out.push_back(' ');
        else out.push_back(c);
    }
    return out;
}

void check_consistency(const std::vector<json>& fragments) {
    std::optional<std::string> schema_hash, config_hash, log_hash;
    for (const auto& f : fragments) {
        const auto& run = f.at("run");
        const auto kind = f.value("fragment", "");
        const auto sh = run.at("schema_hash").get<std::string>();
        const auto ch = run.at("config_hash").get<std::string>();
        if (!schema_hash) schema_hash = sh;
        if (!config_hash) config_hash = ch;
        if (sh != *schema_hash || ch != *config_hash)
            throw AnalysisError("fragments come from different runs (schema or config hash "
                                "mismatch); refusing to merge");
        if (kind == "metaprompt") continue; // separate log by design
        const auto lh = run.at("log_hash").get<std::string>();
        if (!log_hash) log_hash = lh;
        if (lh != *log_hash)
            throw AnalysisError("fragments reference different measurement logs; refusing to merge");
    }
}

} // namespace

std::vector<std::filesystem::path> write_report(const RunConfig& config,
                                                const std::vector<json>& fragments,
                                                const std::vector<json>& compare_cbd,
                                                const std::filesystem::path& out_dir) {
    if (fragments.empty()) throw AnalysisError("report: no fragments given");
    check_consistency(fragments);

    std::filesystem::create_directories(out_dir / "tables");
    std::vector<std::filesystem::path> written;

    json report;
    report["config"] = config.resolved();
    report["run"] = fragments.front().at("run");
    report["sections"] = json::object();

    const json* stats = nullptr;
    const json* cbd = nullptr;
    const json* validity = nullptr;
    const json* metaprompt = nullptr;
    for (const auto& f : fragments) {
        const auto kind = f.value("fragment", "");
        if (kind == "stats") stats = &f;
        else if (kind == "cbd") cbd = &f;
        else if (kind == "validity") validity = &f;
        else if (kind == "metaprompt") metaprompt = &f;
        else throw AnalysisError("unknown fragment kind: " + kind);
    }

    auto& sections = report["sections"];
    sections["validity"] = validity != nullptr ? *validity : json{{"present", false}};
    sections["stats"] = stats != nullptr ? *stats : json{{"present", false}};
    sections["cbd"] = cbd != nullptr ? *cbd : json{{"present", false}};
    sections["metaprompt"] = metaprompt != nullptr ? *metaprompt : json{{"present", false}};

    // Cross-run contextual overlap (this run first, compared runs after).
    if (cbd != nullptr && !compare_cbd.empty()) {
        std::vector<std::vector<DeltaCResult>> runs;
        std::vector<std::string> labels;
        runs.push_back(cbd_results_from_fragment(*cbd));
        labels.push_back(cbd->at("run").value("model_name", "this_run"));
        for (const auto& other : compare_cbd) {
            runs.push_back(cbd_results_from_fragment(other));
            labels.push_back(other.at("run").value("model_name", "other_run"));
        }
        const auto matrix =
            contextual_overlap(runs, config.cbd.pooling, config.cbd.ci_gate);
        json overlap;
        overlap["labels"] = labels;
        overlap["matrix"] = matrix;
        sections["cbd_overlap"] = overlap;

        std::string tsv = "run_a\trun_b\toverlap_count\n";
        for (std::size_t i = 0; i < matrix.size(); ++i)
            for (std::size_t j = 0; j < matrix.size(); ++j)
                tsv += tsv_escape(labels[i]) + "\t" + tsv_escape(labels[j]) + "\t" +
                       std::to_string(matrix[i][j]) + "\n";
        write_text(out_dir / "tables" / "cbd_overlap.tsv", tsv, written);
    }

    // Flat tables.
    if (validity != nullptr) {
        std::string tsv =
            "setting\torder\tn_total\tn_valid\tfraction\tmalformed_format\tnot_an_option\t"
            "multiple_tokens\tempty\ttransport_errors\n";
        auto cell_row = [](const json& row, const std::string& setting, const std::string& order) {
            return setting + "\t" + order + "\t" + std::to_string(row.at("n_total").get<long>()) +
                   "\t" + std::to_string(row.at("n_valid").get<long>()) + "\t" +
                   format_double(row.at("fraction").get<double>()) + "\t" +
                   std::to_string(row.at("malformed_format").get<long>()) + "\t" +
                   std::to_string(row.at("not_an_option").get<long>()) + "\t" +
                   std::to_string(row.at("multiple_tokens").get<long>()) + "\t" +
                   std::to_string(row.at("empty").get<long>()) + "\t" +
                   std::to_string(row.at("transport_errors").get<long>()) + "\n";
        };
        for (const auto& row : validity->at("cells"))
            tsv += cell_row(row, row.at("setting").get<std::string>(),
                            row.at("order").get<std::string>());
        tsv += cell_row(validity->at("overall"), "overall", "all");
        write_text(out_dir / "tables" / "validity.tsv", tsv, written);
    }

    if (stats != nullptr) {
        {
            std::string tsv = "template_id\tsetting\torder\tn_valid\tn_feminine\tp_hat\n";
            for (const auto& e : stats->at("estimates"))
                tsv += tsv_escape(e.at("template_id").get<std::string>()) + "\t" +
                       e.at("setting").get<std::string>() + "\t" +
                       e.at("order").get<std::string>() + "\t" +
                       std::to_string(e.at("n_valid").get<long>()) + "\t" +
                       std::to_string(e.at("n_feminine").get<long>()) + "\t" +
                       format_double(e.at("p_hat").get<double>()) + "\n";
            write_text(out_dir / "tables" / "estimates.tsv", tsv, written);
        }
        {
            std::string tsv = "setting\ttemplate_id\tp_hat\tn_valid\n";
            for (const auto& series : stats->at("distribution_series"))
                for (const auto& v : series.at("values"))
                    tsv += series.at("setting").get<std::string>() + "\t" +
                           tsv_escape(v.at("template_id").get<std::string>()) + "\t" +
                           format_double(v.at("p_hat").get<double>()) + "\t" +
                           std::to_string(v.at("n_valid").get<long>()) + "\n";
            write_text(out_dir / "tables" / "distribution_series.tsv", tsv, written);
        }
        {
            std::string tsv = "setting\tview\tkl_bits\tn_templates\tepsilon\n";
            for (const auto& row : stats->at("mean_kl"))
                tsv += row.at("setting").get<std::string>() + "\t" +
                       row.at("view").get<std::string>() + "\t" +
                       format_double(row.at("kl_bits").get<double>()) + "\t" +
                       std::to_string(row.at("n_templates").get<long>()) + "\t" +
                       format_double(row.at("epsilon").get<double>()) + "\n";
            write_text(out_dir / "tables" / "mean_kl.tsv", tsv, written);
        }
        {
            std::string tsv = "setting\tn\trho\tp_value\tp_permutation\tdefined\n";
            for (const auto& row : stats->at("spearman")) {
                const bool defined = row.value("defined", false);
                tsv += row.at("setting").get<std::string>() + "\t" +
                       std::to_string(row.at("n").get<long>()) + "\t" +
                       (defined ? format_double(row.at("rho").get<double>()) : "NA") + "\t" +
                       (defined ? format_double(row.at("p_value").get<double>()) : "NA") + "\t" +
                       (row.contains("p_permutation")
                            ? format_double(row.at("p_permutation").get<double>())
                            : "NA") +
                       "\t" + (defined ? "1" : "0") + "\n";
            }
            write_text(out_dir / "tables" / "spearman.tsv", tsv, written);
        }
        {
            std::string tsv = "regime\tfeature\testimator\tmi_bits\tse_bits\tn_samples\n";
            for (const auto& row : stats->at("mi"))
                tsv += row.at("regime").get<std::string>() + "\t" +
                       row.at("feature").get<std::string>() + "\t" +
                       row.at("estimator").get<std::string>() + "\t" +
                       format_double(row.at("mi_bits").get<double>()) + "\t" +
                       format_double(row.at("se_bits").get<double>()) + "\t" +
                       std::to_string(row.at("n_samples").get<long>()) + "\n";
            write_text(out_dir / "tables" / "mi.tsv", tsv, written);
        }
    }

    if (cbd != nullptr) {
        {
            std::string tsv =
                "pair_id\torder\tskipped\tskip_reason\tdelta_c\tcontextual\tci_lo\tci_hi\t"
                "estimator\n";
            for (const auto& row : cbd->at("results")) {
                const bool skipped = row.at("skipped").get<bool>();
                tsv += tsv_escape(row.at("pair_id").get<std::string>()) + "\t" +
                       row.at("order").get<std::string>() + "\t" + (skipped ? "1" : "0") + "\t" +
                       (skipped ? tsv_escape(row.value("skip_reason", "")) : "") + "\t";
                if (skipped) {
                    tsv += "NA\tNA\tNA\tNA\tNA\n";
                } else {
                    tsv += format_double(row.at("delta_c").get<double>()) + "\t" +
                           (row.at("contextual").get<bool>() ? "1" : "0") + "\t" +
                           (row.contains("ci") ? format_double(row["ci"].at(0).get<double>())
                                               : "NA") +
                           "\t" +
                           (row.contains("ci") ? format_double(row["ci"].at(1).get<double>())
                                               : "NA") +
                           "\t" + row.at("estimator").get<std::string>() + "\n";
                }
            }
            write_text(out_dir / "tables" / "cbd_results.tsv", tsv, written);
        }
        {
            const auto& summary = cbd->at("summary");
            std::string tsv = "scope\tanalyzed\tcontextual\tfraction\trule\tci_gate\n";
            for (const auto& row : summary.at("by_order"))
                tsv += row.at("order").get<std::string>() + "\t" +
                       std::to_string(row.at("analyzed").get<long>()) + "\t" +
                       std::to_string(row.at("contextual").get<long>()) + "\t" +
                       format_double(row.at("fraction").get<double>()) + "\t-\t-\n";
            tsv += "pooled\t" + std::to_string(summary.at("pairs_analyzed").get<long>()) + "\t" +
                   std::to_string(summary.at("pooled_count").get<long>()) + "\t" +
                   format_double(summary.at("pooled_fraction").get<double>()) + "\t" +
                   summary.at("pooling_rule").get<std::string>() + "\t" +
                   (summary.at("ci_gate").get<bool>() ? "1" : "0") + "\n";
            write_text(out_dir / "tables" / "cbd_summary.tsv", tsv, written);
        }
    }

    if (metaprompt != nullptr) {
        std::string tsv = "question_kind\tn_total\tn_valid\tn_correct\taccuracy\n";
        for (const auto& row : metaprompt->at("accuracy"))
            tsv += row.at("question_kind").get<std::string>() + "\t" +
                   std::to_string(row.at("n_total").get<long>()) + "\t" +
                   std::to_string(row.at("n_valid").get<long>()) + "\t" +
                   std::to_string(row.at("n_correct").get<long>()) + "\t" +
                   format_double(row.at("accuracy").get<double>()) + "\n";
        write_text(out_dir / "tables" / "metaprompt.tsv", tsv, written);
    }

    write_text(out_dir / "report.json", report.dump(2) + "\n", written);
    return written;
}

} // namespace ctxaudit
