#include "ctxaudit/simulate.hpp"

#include <algorithm>

#include "ctxaudit/cbd.hpp"
#include "ctxaudit/collector.hpp"
#include "ctxaudit/errors.hpp"
#include "ctxaudit/rng.hpp"
#include "ctxaudit/stats.hpp"
#include "ctxaudit/synthetic.hpp"

namespace ctxaudit {

namespace {

struct Scenario {
    std::vector<Template> templates;
    NormsTable norms;
    StrategySpec strategy;
    std::vector<ContextSetting> settings;
};

Scenario build_scenario(const RunConfig& config, const SimulateOptions& opts) {
    Scenario sc;
    if (opts.scenario == "repeater") {
        const int pairs = opts.n_pairs > 0 ? opts.n_pairs : 6;
        sc.templates = make_synthetic_schema(pairs);
        sc.norms = make_synthetic_norms(sc.templates, config.seed);
        sc.strategy.kind = StrategyKind::prime_repeater;
        sc.strategy.repeat_prob = 0.9;
        sc.settings = {ContextSetting::unprimed, ContextSetting::primed_feminine,
                       ContextSetting::primed_masculine};
    } else if (opts.scenario == "stereotype") {
        const int pairs = opts.n_pairs > 0 ? opts.n_pairs : 30;
        sc.templates = make_synthetic_schema(pairs);
        sc.norms = make_synthetic_norms(sc.templates, config.seed);
        sc.strategy.kind = StrategyKind::stereotype_follower;
        sc.strategy.slope = 0.8;
        sc.settings = {ContextSetting::unprimed};
    } else if (opts.scenario == "contextual" || opts.scenario == "null") {
        const int pairs = opts.n_pairs > 0 ? opts.n_pairs : 1;
        sc.templates = make_synthetic_schema(pairs);
        sc.norms = make_synthetic_norms(sc.templates, config.seed);
        sc.settings = {ContextSetting::primed_feminine, ContextSetting::primed_masculine};
        if (opts.scenario == "null") {
            sc.strategy.kind = StrategyKind::uniform;
        } else {
            if (opts.target_delta <= 0.0 || opts.target_delta > 2.0)
                throw ConfigError("contextual scenario: target_delta must lie in (0, 2]");
            // Participant-target copies the prime with probability q, the
            // occupation-target anti-copies; the designed system then has
            // j_o1 = -j_o2 = target_delta / 2 and zero marginal shifts.
            const double q = 0.5 + opts.target_delta / 4.0;
            sc.strategy.kind = StrategyKind::fixed_table;
            for (const auto& t : sc.templates) {
                const bool copies = t.target_role_kind == RoleKind::participant;
                FixedCell fem, masc;
                fem.template_id = t.template_id;
                fem.setting = std::string(to_string(ContextSetting::primed_feminine));
                fem.p_feminine = copies ? q : 1.0 - q;
                masc.template_id = t.template_id;
                masc.setting = std::string(to_string(ContextSetting::primed_masculine));
                masc.p_feminine = copies ? 1.0 - q : q;
                sc.strategy.cells.push_back(fem);
                sc.strategy.cells.push_back(masc);
            }
        }
    } else {
        throw ConfigError("unknown simulation scenario: " + opts.scenario);
    }
    return sc;
}

bool detect(const RunConfig& config, const SimulateOptions& opts, const Scenario& sc,
            const MeasurementLog& log) {
    const auto table = EstimateTable::from_log(log);
    if (opts.scenario == "repeater") {
        const auto tv = valid_template_set(
            table, std::span<const ContextSetting>(sc.settings.data(), sc.settings.size()));
        if (tv.empty()) return false;
        FeatureMiOptions mi_opts;
        mi_opts.k = config.mi_k;
        mi_opts.seed = config.seed;
        mi_opts.bootstrap_replicates = 0; // rank only; no standard errors needed
        const auto rows = feature_mi_table(log, sc.templates, &sc.norms, tv, mi_opts);
        double prime_mi = -1.0, best_other = -1.0;
        for (const auto& row : rows) {
            if (row.regime != "primed") continue;
            if (row.feature == FeatureId::prime_gender) prime_mi = row.mi_bits;
            else best_other = std::max(best_other, row.mi_bits);
        }
        return prime_mi > best_other;
    }
    if (opts.scenario == "stereotype") {
        const auto ratings = join_norms(sc.templates, sc.norms);
        std::vector<double> x, y;
        for (const auto& t : sc.templates) {
            const auto& rating = ratings.at(t.template_id);
            const auto* e = table.find(t.template_id, ContextSetting::unprimed, std::nullopt);
            if (!rating || e == nullptr || e->n_valid == 0) continue;
            x.push_back(*rating);
            y.push_back(e->p_hat());
        }
        if (x.size() < 3) return false;
        const auto result = spearman(x, y);
        return result.defined && result.rho > 0.0 && result.p_value < 0.05;
    }
    // contextual / null: pooled CbD verdict.
    CbdOptions cbd_opts;
    cbd_opts.estimator = config.cbd.estimator;
    cbd_opts.tolerance = config.cbd.tolerance;
    cbd_opts.prime_rate = config.cbd.prime_rate;
    cbd_opts.bootstrap_replicates = config.bootstrap_replicates;
    cbd_opts.with_ci = true;
    cbd_opts.seed = log.records.empty() ? config.seed : log.records.front().params.seed.value_or(config.seed);
    std::vector<DeltaCResult> results;
    for (const auto& pair : pair_index(sc.templates))
        for (const auto order : kAllOrders)
            results.push_back(pair_analysis(table, pair, order, cbd_opts));
    const auto summary = contextuality_summary(results, config.cbd.pooling, config.cbd.ci_gate);
    return summary.pooled_count > 0;
}

} // namespace

std::vector<PowerRow> run_simulation(const RunConfig& config, const SimulateOptions& opts) {
    if (opts.n_seeds < 1) throw ConfigError("simulate: n_seeds must be >= 1");
    if (opts.n_grid.empty()) throw ConfigError("simulate: n grid must not be empty");
    for (const int n : opts.n_grid)
        if (n < 1) throw ConfigError("simulate: every n_per_cell must be >= 1");

    const Scenario sc = build_scenario(config, opts);

    std::vector<PowerRow> rows;
    for (const int n : opts.n_grid) {
        PowerRow row;
        row.scenario = opts.scenario;
        row.n_per_cell = n;
        row.seeds = opts.n_seeds;
        for (int s = 0; s < opts.n_seeds; ++s) {
            const std::uint64_t run_seed =
                mix64(config.seed ^ (0x5309ULL + static_cast<std::uint64_t>(s)));
            BackendConfig bc;
            bc.kind = BackendKind::mock_strategy;
            bc.model_name = "sim-" + opts.scenario;
            bc.strategy = sc.strategy;
            bc.params.seed = run_seed;
            Backend backend(bc, run_seed, &sc.norms);

            const auto plans = plan_trials(
                sc.templates,
                std::span<const ContextSetting>(sc.settings.data(), sc.settings.size()),
                std::span<const OptionOrder>(kAllOrders.data(), kAllOrders.size()), n);
            MeasurementLog log;
            log.header.backend_fingerprint = bc.fingerprint();
            log.records = execute_plans(plans, backend, sc.templates);
            if (detect(config, opts, sc, log)) ++row.detections;
        }
        row.detection_rate = static_cast<double>(row.detections) / opts.n_seeds;
        rows.push_back(row);
    }
    return rows;
}

nlohmann::json power_rows_to_json(const std::vector<PowerRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
        out.push_back(nlohmann::json{{"scenario", r.scenario},
                                     {"n_per_cell", r.n_per_cell},
                                     {"seeds", r.seeds},
                                     {"detections", r.detections},
                                     {"detection_rate", r.detection_rate}});
    return out;
}

} // namespace ctxaudit
