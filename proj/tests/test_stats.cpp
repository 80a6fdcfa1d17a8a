#include <doctest.h>

#include <cmath>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/rng.hpp"
#include "ctxaudit/stats.hpp"
#include "support.hpp"

using namespace ctxaudit;

namespace {

Measurement quick_measurement(const std::string& tid, ContextSetting setting, OptionOrder order,
                              std::optional<Gender> gender,
                              Validity validity = Validity::valid) {
    Measurement m;
    m.trial_id = fnv1a64(tid + std::string(to_string(setting)) + std::string(to_string(order)));
    m.template_id = tid;
    m.setting = setting;
    m.order = order;
    m.validity = validity;
    if (gender) {
        m.validity = Validity::valid;
        m.gender = gender;
        m.parsed = gender == Gender::feminine ? "she" : "he";
    }
    return m;
}

MeasurementLog log_with_counts(const std::string& tid, ContextSetting setting, long fem, long masc,
                               long invalid = 0) {
    MeasurementLog log;
    for (long i = 0; i < fem; ++i) {
        const auto order = i % 2 == 0 ? OptionOrder::masc_fem : OptionOrder::fem_masc;
        log.records.push_back(quick_measurement(tid, setting, order, Gender::feminine));
    }
    for (long i = 0; i < masc; ++i) {
        const auto order = i % 2 == 0 ? OptionOrder::masc_fem : OptionOrder::fem_masc;
        log.records.push_back(quick_measurement(tid, setting, order, Gender::masculine));
    }
    for (long i = 0; i < invalid; ++i)
        log.records.push_back(quick_measurement(tid, setting, OptionOrder::masc_fem, std::nullopt,
                                                Validity::not_an_option));
    return log;
}

} // namespace

TEST_CASE("estimate excludes invalid measurements and pools orders") {
    SUBCASE("simple half-and-half cell") {
        const auto log = log_with_counts("t1", ContextSetting::unprimed, 100, 100);
        const auto table = EstimateTable::from_log(log);
        const auto* pooled = table.find("t1", ContextSetting::unprimed, std::nullopt);
        REQUIRE(pooled != nullptr);
        CHECK(pooled->n_valid == 200);
        CHECK(pooled->p_hat() == 0.5);
    }

    SUBCASE("boundary cell has p_hat zero") {
        const auto log = log_with_counts("t1", ContextSetting::unprimed, 0, 200);
        const auto table = EstimateTable::from_log(log);
        CHECK(table.find("t1", ContextSetting::unprimed, std::nullopt)->p_hat() == 0.0);
    }

    SUBCASE("invalid trials are excluded from the denominator") {
        // 160 trials, 10 invalid: 150 valid of which 90 feminine.
        const auto log = log_with_counts("t1", ContextSetting::unprimed, 90, 60, 10);
        const auto table = EstimateTable::from_log(log);
        const auto* e = table.find("t1", ContextSetting::unprimed, std::nullopt);
        REQUIRE(e != nullptr);
        CHECK(e->n_valid == 150);
        CHECK(e->p_hat() == doctest::Approx(0.6));
    }

    SUBCASE("pooled counts equal the sum over orders") {
        const auto log = log_with_counts("t1", ContextSetting::primed_feminine, 77, 123);
        const auto table = EstimateTable::from_log(log);
        const auto* mf = table.find("t1", ContextSetting::primed_feminine, OptionOrder::masc_fem);
        const auto* fm = table.find("t1", ContextSetting::primed_feminine, OptionOrder::fem_masc);
        const auto* pooled = table.find("t1", ContextSetting::primed_feminine, std::nullopt);
        REQUIRE(mf != nullptr);
        REQUIRE(fm != nullptr);
        REQUIRE(pooled != nullptr);
        CHECK(mf->n_valid + fm->n_valid == pooled->n_valid);
        CHECK(mf->n_feminine + fm->n_feminine == pooled->n_feminine);
    }

    SUBCASE("empty cells are simply absent") {
        const auto log = log_with_counts("t1", ContextSetting::unprimed, 5, 5);
        const auto table = EstimateTable::from_log(log);
        CHECK(table.find("t1", ContextSetting::null_1, std::nullopt) == nullptr);
        CHECK(table.find("t2", ContextSetting::unprimed, std::nullopt) == nullptr);
    }
}

TEST_CASE("kl_bernoulli closed-form fixtures") {
    CHECK(kl_bernoulli(0.5, 0.5) == 0.0);
    CHECK(kl_bernoulli(0.75, 0.5) == doctest::Approx(0.188722).epsilon(1e-6 / 0.188722));
    CHECK(kl_bernoulli(1.0, 0.5) == doctest::Approx(1.0));

    SUBCASE("identical distributions at the boundary are zero") {
        CHECK(kl_bernoulli(0.0, 0.0) == 0.0);
        CHECK(kl_bernoulli(1.0, 1.0) == 0.0);
    }

    SUBCASE("unsmoothed boundary q is a domain error") {
        CHECK_THROWS_AS(kl_bernoulli(0.5, 0.0), AnalysisError);
        CHECK_THROWS_AS(kl_bernoulli(0.5, 1.0), AnalysisError);
    }

    SUBCASE("smoothing substitutes add-eps posterior means") {
        // p = 1 with n = 200 becomes (200 + 0.5) / 201; q = 0.5 stays 0.5.
        const double smoothed = kl_bernoulli(1.0, 0.5, 0.5, 200, 200);
        const double p = 200.5 / 201.0;
        const double q = (0.5 * 200 + 0.5) / 201.0;
        const double expected = p * std::log2(p / q) + (1 - p) * std::log2((1 - p) / (1 - q));
        CHECK(smoothed == doctest::Approx(expected).epsilon(1e-12));
        CHECK(std::isfinite(smoothed));
        CHECK_THROWS_AS(kl_bernoulli(1.0, 0.5, 0.5, 0, 0), AnalysisError);
    }

    SUBCASE("nonnegativity and the relabeling symmetry") {
        CounterRng rng(1, "kl-prop");
        for (int i = 0; i < 500; ++i) {
            const double p = rng.uniform();
            const double q = 0.01 + 0.98 * rng.uniform();
            const double kl = kl_bernoulli(p, q);
            CHECK(kl >= 0.0);
            CHECK(kl == doctest::Approx(kl_bernoulli(1 - p, 1 - q)).epsilon(1e-9));
            if (std::abs(p - q) > 1e-9) CHECK(kl > 0.0);
        }
    }
}

TEST_CASE("mean_kl averages per-template divergences over the valid set") {
    std::vector<BernoulliEstimate> estimates;
    auto add = [&](const std::string& tid, ContextSetting s, long fem, long n) {
        BernoulliEstimate e;
        e.template_id = tid;
        e.setting = s;
        e.n_valid = n;
        e.n_feminine = fem;
        estimates.push_back(e);
    };
    // Template a: KL(0.75 || 0.5) = 0.188722; template b: identical cells -> 0.
    add("a", ContextSetting::unprimed, 100, 200);
    add("a", ContextSetting::primed_feminine, 150, 200);
    add("b", ContextSetting::unprimed, 60, 200);
    add("b", ContextSetting::primed_feminine, 60, 200);
    const auto table = EstimateTable::from_estimates(estimates);
    const std::set<std::string> tv{"a", "b"};

    const double mean = mean_kl(table, ContextSetting::primed_feminine, ContextSetting::unprimed,
                                tv, 0.0);
    CHECK(mean == doctest::Approx(0.188722 / 2).epsilon(1e-5));

    SUBCASE("arithmetic mean of known per-template KLs") {
        // Evaluate the two templates separately, then check the average.
        const double a = kl_bernoulli(0.75, 0.5);
        const double b = kl_bernoulli(0.3, 0.3);
        CHECK(mean == doctest::Approx((a + b) / 2).epsilon(1e-12));
    }

    SUBCASE("empty valid set is an error") {
        CHECK_THROWS_AS(mean_kl(table, ContextSetting::primed_feminine, ContextSetting::unprimed,
                                {}, 0.0),
                        AnalysisError);
    }

    SUBCASE("identical settings give zero") {
        CHECK(mean_kl(table, ContextSetting::unprimed, ContextSetting::unprimed, tv, 0.0) == 0.0);
    }
}

TEST_CASE("mean_kl tracks the analytic value of a designed table") {
    // fixed_table mock: P(feminine) = 0.8 in the feminine-primed setting,
    // 0.5 unprimed. The analytic per-template divergence is KL(0.8 || 0.5);
    // the sampled mean at 200 valid per pooled cell must land within 0.02
    // bits of it.
    const auto templates = [&] {
        std::vector<Template> out;
        const auto base = testsupport::mechanic_customer_pair();
        for (int i = 0; i < 20; ++i) {
            auto occ = base[0];
            auto par = base[1];
            occ.pair_id = par.pair_id = "p" + std::to_string(i);
            occ.template_id = occ.pair_id + "_occ";
            par.template_id = par.pair_id + "_par";
            out.push_back(occ);
            out.push_back(par);
        }
        return out;
    }();

    BackendConfig cfg;
    cfg.kind = BackendKind::mock_strategy;
    cfg.strategy.kind = StrategyKind::fixed_table;
    cfg.strategy.cells.push_back({"", "primed_feminine", "", 0.8});
    cfg.strategy.cells.push_back({"", "", "", 0.5});
    Backend backend(cfg, 4321);

    const std::array<ContextSetting, 2> settings{ContextSetting::unprimed,
                                                 ContextSetting::primed_feminine};
    const auto plans = plan_trials(templates, settings, kAllOrders, 100); // 200 pooled
    MeasurementLog log;
    log.records = execute_plans(plans, backend, templates);
    const auto table = EstimateTable::from_log(log);
    const auto tv = valid_template_set(table, settings);
    REQUIRE(tv.size() == templates.size());

    const double analytic = kl_bernoulli(0.8, 0.5);
    const double sampled =
        mean_kl(table, ContextSetting::primed_feminine, ContextSetting::unprimed, tv, 0.5);
    CHECK(std::abs(sampled - analytic) <= 0.02);

    SUBCASE("uniform mock keeps null-vs-unprimed divergence near zero") {
        BackendConfig ucfg;
        ucfg.kind = BackendKind::mock_strategy;
        ucfg.strategy.kind = StrategyKind::uniform;
        Backend uniform_backend(ucfg, 4322);
        const std::array<ContextSetting, 3> with_nulls{
            ContextSetting::unprimed, ContextSetting::null_1, ContextSetting::null_2};
        const auto uplans = plan_trials(templates, with_nulls, kAllOrders, 100);
        MeasurementLog ulog;
        ulog.records = execute_plans(uplans, uniform_backend, templates);
        const auto utable = EstimateTable::from_log(ulog);
        const auto utv = valid_template_set(utable, with_nulls);
        for (const auto null_setting : {ContextSetting::null_1, ContextSetting::null_2})
            CHECK(mean_kl(utable, null_setting, ContextSetting::unprimed, utv, 0.5) <= 0.02);
    }
}

TEST_CASE("valid_template_set requires valid cells in every setting") {
    std::vector<BernoulliEstimate> estimates;
    auto add = [&](const std::string& tid, ContextSetting s) {
        BernoulliEstimate e;
        e.template_id = tid;
        e.setting = s;
        e.n_valid = 10;
        e.n_feminine = 5;
        estimates.push_back(e);
    };
    add("full", ContextSetting::unprimed);
    add("full", ContextSetting::primed_feminine);
    add("partial", ContextSetting::unprimed);
    const auto table = EstimateTable::from_estimates(estimates);
    const std::array<ContextSetting, 2> settings{ContextSetting::unprimed,
                                                 ContextSetting::primed_feminine};
    const auto tv = valid_template_set(table, settings);
    CHECK(tv == std::set<std::string>{"full"});
}

TEST_CASE("spearman rank correlation") {
    SUBCASE("identical vectors correlate perfectly") {
        const std::vector<double> x{0.2, 0.9, 0.5, 0.7, 0.1};
        const auto r = spearman(x, x);
        CHECK(r.defined);
        CHECK(r.rho == doctest::Approx(1.0));
        CHECK(r.p_value < 0.05);
    }

    SUBCASE("hand-ranked fixture: d squared = 6 gives rho -0.5") {
        const std::vector<double> x{1, 2, 3};
        const std::vector<double> y{3, 1, 2};
        const auto r = spearman(x, y);
        CHECK(r.defined);
        CHECK(r.rho == doctest::Approx(-0.5).epsilon(1e-12));
    }

    SUBCASE("tie-corrected fixture") {
        // midranks x = (1.5, 1.5, 3, 4), y = (1, 2, 3, 4):
        // Pearson on ranks = 4.5 / sqrt(4.5 * 5) = 0.9486832981.
        const std::vector<double> x{1, 1, 2, 3};
        const std::vector<double> y{1, 2, 3, 4};
        const auto r = spearman(x, y);
        CHECK(r.rho == doctest::Approx(0.9486832980505138).epsilon(1e-12));
    }

    SUBCASE("reference-library fixture with heavy ties") {
        // Deterministic modular data; expected rho and t-based p-value are
        // the reference scipy spearmanr outputs.
        std::vector<double> x(60), y(60);
        for (int i = 0; i < 60; ++i) {
            x[static_cast<std::size_t>(i)] = static_cast<double>((i * 7) % 23);
            y[static_cast<std::size_t>(i)] = static_cast<double>((i * i + 3 * i) % 19);
        }
        const auto r = spearman(x, y);
        CHECK(r.rho == doctest::Approx(0.177584118309).epsilon(1e-9));
        CHECK(r.p_value == doctest::Approx(0.17464094454).epsilon(1e-8));
    }

    SUBCASE("monotone-transform invariance and sign flip") {
        CounterRng rng(2, "spearman-prop");
        std::vector<double> x(40), y(40);
        for (int i = 0; i < 40; ++i) {
            x[static_cast<std::size_t>(i)] = rng.uniform();
            y[static_cast<std::size_t>(i)] = rng.uniform();
        }
        const auto base = spearman(x, y);
        std::vector<double> ex(x.size()), negx(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            ex[i] = std::exp(3.0 * x[i]);
            negx[i] = -x[i];
        }
        CHECK(spearman(ex, y).rho == doctest::Approx(base.rho).epsilon(1e-12));
        CHECK(spearman(negx, y).rho == doctest::Approx(-base.rho).epsilon(1e-12));
    }

    SUBCASE("constant vector is flagged undefined") {
        const std::vector<double> x{1, 1, 1, 1};
        const std::vector<double> y{1, 2, 3, 4};
        const auto r = spearman(x, y);
        CHECK(!r.defined);
        CHECK(std::isnan(r.rho));
    }

    SUBCASE("preconditions") {
        const std::vector<double> two{1, 2};
        CHECK_THROWS_AS(spearman(two, two), AnalysisError);
        const std::vector<double> three{1, 2, 3};
        CHECK_THROWS_AS(spearman(two, three), AnalysisError);
    }

    SUBCASE("independent vectors at the matched-template count stay small") {
        // Null quantile check at n = 279: |rho| < 0.12 is the ~95% band.
        int inside = 0;
        const int seeds = 100;
        for (int s = 0; s < seeds; ++s) {
            CounterRng rng(static_cast<std::uint64_t>(s), "spearman-null");
            std::vector<double> x(279), y(279);
            for (std::size_t i = 0; i < x.size(); ++i) {
                x[i] = rng.uniform();
                y[i] = rng.uniform();
            }
            if (std::abs(spearman(x, y).rho) < 0.12) ++inside;
        }
        CHECK(inside >= 92);
    }

    SUBCASE("permutation p-value agrees with the t approximation") {
        CounterRng rng(5, "spearman-perm-test");
        std::vector<double> x(60), y(60);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = rng.uniform();
            y[i] = 0.7 * x[i] + 0.3 * rng.uniform();
        }
        const auto r = spearman(x, y);
        const double p_perm = spearman_permutation_pvalue(x, y, 2000, 9);
        CHECK(r.p_value < 0.01);
        CHECK(p_perm < 0.01);

        std::vector<double> z(60);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.uniform();
        const auto rnull = spearman(x, z);
        const double p_perm_null = spearman_permutation_pvalue(x, z, 2000, 9);
        // Both routes should agree on order of magnitude for a null pair.
        CHECK(std::abs(rnull.p_value - p_perm_null) < 0.2);
    }
}

TEST_CASE("join_norms applies normalization and aliases") {
    NormsTable norms;
    norms.set("Mechanic", 0.22);
    norms.set("sales person", 0.48);
    norms.add_alias("salesperson", "sales person");

    auto templates = testsupport::mechanic_customer_pair();
    templates[1].participant_noun = "salesperson"; // target noun of the participant template

    const auto joined = join_norms(templates, norms);
    REQUIRE(joined.size() == 2);
    CHECK(joined.at("mc_occ") == 0.22);   // "mechanic" matches case-insensitively
    CHECK(joined.at("mc_par") == 0.48);   // alias-mapped
    Template unmatched = templates[0];
    unmatched.template_id = "mc_other";
    unmatched.occupation_noun = "astronaut";
    const auto joined2 = join_norms({unmatched}, norms);
    CHECK(!joined2.at("mc_other").has_value());
}

TEST_CASE("mi_discrete plug-in fixtures and properties") {
    SUBCASE("identity copy of a fair binary carries one bit") {
        std::vector<int> x;
        for (int i = 0; i < 80; ++i) x.push_back(i % 2);
        CHECK(mi_discrete(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("independent product table carries zero bits") {
        std::vector<int> x, f;
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 10; ++j) {
                x.push_back(i % 2);
                f.push_back(j % 2);
            }
        CHECK(mi_discrete(x, f) == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("2x2 counts [[30,10],[10,30]] give 0.188722 bits") {
        std::vector<int> x, f;
        auto fill = [&](int xv, int fv, int count) {
            for (int i = 0; i < count; ++i) {
                x.push_back(xv);
                f.push_back(fv);
            }
        };
        fill(0, 0, 30);
        fill(0, 1, 10);
        fill(1, 0, 10);
        fill(1, 1, 30);
        CHECK(mi_discrete(x, f) == doctest::Approx(0.188722).epsilon(1e-6 / 0.188722));
    }

    SUBCASE("equals the entropy of x when f copies x, skewed case") {
        std::vector<int> x, f;
        for (int i = 0; i < 80; ++i) x.push_back(i < 60 ? 0 : 1);
        f = x;
        const double h = -(0.75 * std::log2(0.75) + 0.25 * std::log2(0.25));
        CHECK(mi_discrete(x, f) == doctest::Approx(h).epsilon(1e-12));
    }

    SUBCASE("invariant under relabeling of categories") {
        CounterRng rng(3, "mi-relabel");
        std::vector<int> x(500), f(500);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = static_cast<int>(rng.uniform_below(2));
            f[i] = static_cast<int>(rng.uniform_below(4));
            if (x[i] == 1 && rng.bernoulli(0.4)) f[i] = 3;
        }
        const double base = mi_discrete(x, f);
        std::vector<int> frelab(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) frelab[i] = 17 - 5 * f[i];
        std::vector<int> xrelab(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) xrelab[i] = x[i] == 0 ? 9 : -2;
        CHECK(mi_discrete(xrelab, frelab) == doctest::Approx(base).epsilon(1e-12));
        CHECK(base >= 0.0);
    }
}
