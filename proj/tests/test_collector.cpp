#include <doctest.h>

#include <algorithm>
#include <set>

#include "ctxaudit/collector.hpp"
#include "ctxaudit/errors.hpp"
#include "ctxaudit/rng.hpp"
#include "ctxaudit/stats.hpp"
#include "support.hpp"

using namespace ctxaudit;

namespace {

BackendConfig repeater_backend(double repeat_prob = 1.0) {
    BackendConfig cfg;
    cfg.kind = BackendKind::mock_strategy;
    cfg.strategy.kind = StrategyKind::prime_repeater;
    cfg.strategy.repeat_prob = repeat_prob;
    return cfg;
}

std::vector<BernoulliEstimate> sorted_estimates(const MeasurementLog& log) {
    auto est = estimate(log);
    std::sort(est.begin(), est.end(), [](const auto& a, const auto& b) {
        return std::tie(a.template_id, a.setting, a.order) <
               std::tie(b.template_id, b.setting, b.order);
    });
    return est;
}

} // namespace

TEST_CASE("trial ids are deterministic and unique over the grid") {
    CHECK(trial_id_for("t1", ContextSetting::unprimed, OptionOrder::masc_fem, 0) ==
          trial_id_for("t1", ContextSetting::unprimed, OptionOrder::masc_fem, 0));
    std::set<std::uint64_t> ids;
    for (int t = 0; t < 50; ++t)
        for (const auto s : kAllSettings)
            for (const auto o : kAllOrders)
                for (int r = 0; r < 20; ++r)
                    ids.insert(trial_id_for("tmpl" + std::to_string(t), s, o, r));
    CHECK(ids.size() == 50u * 5u * 2u * 20u);
}

TEST_CASE("plan_trials enumerates the full grid deterministically") {
    const auto templates = testsupport::mechanic_customer_pair();

    SUBCASE("cardinality and content") {
        const auto plans = plan_trials(templates, kAllSettings, kAllOrders, 3);
        CHECK(plans.size() == 2u * 5u * 2u * 3u);
        std::set<std::uint64_t> ids;
        for (const auto& p : plans) {
            ids.insert(p.trial_id);
            CHECK(count_token(p.passage, "BLANK") == 1);
            CHECK(p.options[0] != p.options[1]);
        }
        CHECK(ids.size() == plans.size());

        const auto again = plan_trials(templates, kAllSettings, kAllOrders, 3);
        REQUIRE(again.size() == plans.size());
        for (std::size_t i = 0; i < plans.size(); ++i) {
            CHECK(again[i].trial_id == plans[i].trial_id);
            CHECK(again[i].passage == plans[i].passage);
        }
    }

    SUBCASE("single-cell plan") {
        const std::array<ContextSetting, 1> s{ContextSetting::unprimed};
        const std::array<OptionOrder, 1> o{OptionOrder::fem_masc};
        const auto plans = plan_trials(templates, s, o, 1);
        CHECK(plans.size() == 2);
        CHECK(plans[0].options[0] == "she");
    }

    SUBCASE("n_per_cell must be positive") {
        CHECK_THROWS_AS(plan_trials(templates, kAllSettings, kAllOrders, 0), ConfigError);
    }
}

TEST_CASE("parse_response implements the frozen tolerance table") {
    const std::array<std::string, 2> she_he{"she", "he"};
    auto parse = [&](std::string_view raw) { return parse_response(raw, she_he); };

    SUBCASE("instructed format and canonical variants are valid") {
        CHECK(parse("{'BLANK': 'she'}").parsed == "she");
        CHECK(parse("{'BLANK': 'she'}").validity == Validity::valid);
        CHECK(parse("{'BLANK': 'he'}").parsed == "he");
        CHECK(parse("she'}").parsed == "she");           // truncated tail after assistant prefix
        CHECK(parse(" she").parsed == "she");
        CHECK(parse("She.").parsed == "she");            // case and punctuation normalize
        CHECK(parse("\"BLANK\": \"he\"").parsed == "he"); // double quotes, no braces
        CHECK(parse("{'BLANK':'she'}").parsed == "she");
        CHECK(parse("{'BLANK': 'SHE'}").parsed == "she");
        CHECK(parse("{'blank': 'she'}").parsed == "she"); // lowercase key
        CHECK(parse("Blank: he").parsed == "he");
        CHECK(parse("he").parsed == "he");
    }

    SUBCASE("offered options exclude other pronouns") {
        const auto r = parse("{'BLANK': 'they'}");
        CHECK(!r.parsed.has_value());
        CHECK(r.validity == Validity::not_an_option);
        CHECK(parse("{'BLANK': 'her'}").validity == Validity::not_an_option);
    }

    SUBCASE("hand-built corpus of malformed strings") {
        // 20 malformed responses, each frozen to its category before the
        // parser was written.
        const std::vector<std::pair<std::string, Validity>> corpus{
            {"", Validity::empty},
            {"   \n\t ", Validity::empty},
            {"{'BLANK': ''}", Validity::malformed_format},
            {"{'BLANK': }", Validity::malformed_format},
            {"{'BLANK'}", Validity::malformed_format},
            {"{}", Validity::malformed_format},
            {"{'WRONG': 'she'}", Validity::malformed_format},
            {"BLANK", Validity::malformed_format},
            {"{'BLANK': '\"'}", Validity::malformed_format},
            {"I think the answer is she", Validity::multiple_tokens},
            {"she or he", Validity::multiple_tokens},
            {"{'BLANK': 'she he'}", Validity::multiple_tokens},
            {"{'BLANK': 'she or he'}", Validity::multiple_tokens},
            {"I cannot determine that.", Validity::multiple_tokens},
            {"{'BLANK': 'they'}", Validity::not_an_option},
            {"{'BLANK': 'it'}", Validity::not_an_option},
            {"them", Validity::not_an_option},
            {"xyzzy", Validity::not_an_option},
            {"{'BLANK': 'shee'}", Validity::not_an_option},
            {"42", Validity::not_an_option},
        };
        for (const auto& [raw, expected] : corpus) {
            const auto r = parse(raw);
            INFO("raw = `", raw, "`");
            CHECK(r.validity == expected);
            CHECK(!r.parsed.has_value());
        }
    }

    SUBCASE("validity valid iff parsed is one of the offered options") {
        const std::vector<std::string> raws{"{'BLANK': 'she'}", "he", "they", "", "she he",
                                            "{'BLANK': ''}", "Hers.", "{'BLANK': 'him'}"};
        for (const auto& raw : raws) {
            const auto r = parse(raw);
            if (r.validity == Validity::valid) {
                REQUIRE(r.parsed.has_value());
                CHECK((*r.parsed == "she" || *r.parsed == "he"));
            } else {
                CHECK(!r.parsed.has_value());
            }
        }
    }

    SUBCASE("parse_choice handles n-ary metaprompt option lists") {
        const std::vector<std::string> parts{"noun", "verb", "pronoun", "adjective",
                                             "adverb", "preposition", "article"};
        CHECK(parse_choice("{'ANSWER': 'pronoun'}", parts, "ANSWER").parsed == "pronoun");
        CHECK(parse_choice("Pronoun", parts, "ANSWER").parsed == "pronoun");
        CHECK(parse_choice("{'ANSWER': 'gerund'}", parts, "ANSWER").validity ==
              Validity::not_an_option);
    }
}

TEST_CASE("execute_plans is invariant to the worker pool size") {
    const auto templates = testsupport::mechanic_customer_pair();
    const auto plans = plan_trials(templates, kAllSettings, kAllOrders, 5);
    Backend backend(repeater_backend(0.6), 42);

    RunOptions serial;
    serial.max_workers = 1;
    RunOptions wide;
    wide.max_workers = 8;
    const auto a = execute_plans(plans, backend, templates, serial);
    const auto b = execute_plans(plans, backend, templates, wide);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].trial_id == b[i].trial_id);
        CHECK(a[i].raw_response == b[i].raw_response);
        CHECK(a[i].validity == b[i].validity);
        CHECK(a[i].parsed == b[i].parsed);
    }
}

TEST_CASE("measurement records survive the JSONL round trip") {
    Measurement m;
    m.trial_id = 0xdeadbeefcafef00dULL;
    m.template_id = "mc_occ";
    m.setting = ContextSetting::primed_feminine;
    m.order = OptionOrder::fem_masc;
    m.replicate = 17;
    m.options = {"she", "he"};
    m.raw_response = "{'BLANK': 'she'}";
    m.parsed = "she";
    m.validity = Validity::valid;
    m.gender = Gender::feminine;
    m.backend_fingerprint = "mock/abc";
    m.params.seed = 99;
    m.timestamp = "2026-01-01T00:00:00Z";
    const auto line = measurement_to_json_line(m);
    const auto back = measurement_from_json_line(line);
    CHECK(back.trial_id == m.trial_id);
    CHECK(back.template_id == m.template_id);
    CHECK(back.setting == m.setting);
    CHECK(back.order == m.order);
    CHECK(back.parsed == m.parsed);
    CHECK(back.gender == m.gender);
    CHECK(back.params.seed == m.params.seed);
    CHECK(back.error.empty());
}

TEST_CASE("run is resumable and append-only") {
    const auto dir = testsupport::scratch_dir("run");
    const auto templates = testsupport::mechanic_customer_pair();
    const auto plans = plan_trials(templates, kAllSettings, kAllOrders, 1); // 20 trials
    Backend backend(repeater_backend(), 5);
    RunHeader header{"schemahash", "confighash", backend.config().fingerprint(), ""};

    SUBCASE("fresh run writes every plan") {
        const auto path = dir / "fresh.jsonl";
        const auto log = run(plans, backend, path, header, templates);
        CHECK(log.records.size() == plans.size());
        const auto loaded = load_log(path);
        CHECK(loaded.records.size() == plans.size());
        CHECK(loaded.header.schema_hash == "schemahash");
    }

    SUBCASE("partial log is completed, existing records untouched") {
        const auto path = dir / "partial.jsonl";
        const std::vector<TrialPlan> first_six(plans.begin(), plans.begin() + 6);
        run(first_six, backend, path, header, templates);
        const auto before = load_log(path);
        REQUIRE(before.records.size() == 6);

        const auto log = run(plans, backend, path, header, templates);
        CHECK(log.records.size() == plans.size());
        const auto after = load_log(path);
        CHECK(after.records.size() == plans.size());
        // The first six lines are bit-identical to the pre-resume log.
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(measurement_to_json_line(after.records[i]) ==
                  measurement_to_json_line(before.records[i]));
        // Re-running a complete log appends nothing.
        const auto again = run(plans, backend, path, header, templates);
        CHECK(again.records.size() == plans.size());
    }

    SUBCASE("header mismatch aborts") {
        const auto path = dir / "mismatch.jsonl";
        run(plans, backend, path, header, templates);
        RunHeader other = header;
        other.config_hash = "different";
        CHECK_THROWS_AS(run(plans, backend, path, other, templates), CollectionError);
    }

    SUBCASE("failing backend records per-trial errors without aborting") {
        BackendConfig cfg;
        cfg.kind = BackendKind::mock_scripted;
        cfg.script.fail_always = true;
        cfg.retry.max_attempts = 2;
        cfg.retry.base_backoff = std::chrono::milliseconds(1);
        Backend failing(cfg, 5);
        const std::vector<TrialPlan> ten(plans.begin(), plans.begin() + 10);
        const auto path = dir / "failing.jsonl";
        RunHeader fheader{"schemahash", "confighash", failing.config().fingerprint(), ""};
        const auto log = run(ten, failing, path, fheader, templates);
        CHECK(log.records.size() == 10);
        for (const auto& m : log.records) {
            CHECK(!m.error.empty());
            CHECK(m.validity == Validity::empty);
            CHECK(m.raw_response.empty());
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("validity_report accounts for every trial exactly once") {
    const auto templates = testsupport::mechanic_customer_pair();
    const auto plans = plan_trials(templates, kAllSettings, kAllOrders, 20);

    SUBCASE("all-valid log has fraction one everywhere") {
        Backend backend(repeater_backend(), 5);
        MeasurementLog log;
        log.records = execute_plans(plans, backend, templates);
        const auto report = validity_report(log);
        CHECK(report.overall.fraction() == 1.0);
        for (const auto& [key, cell] : report.cells) CHECK(cell.fraction() == 1.0);
    }

    SUBCASE("malformation mock fractions equal the exact injected counts") {
        auto cfg = repeater_backend();
        cfg.strategy.malform_prob = 0.05;
        const std::uint64_t seed = 77;
        Backend backend(cfg, seed);
        MeasurementLog log;
        log.records = execute_plans(plans, backend, templates);

        // Replay the mock's own malformation schedule.
        long injected = 0;
        for (const auto& p : plans) {
            CounterRng rng(seed, "mock-malform", p.trial_id);
            if (rng.uniform() < 0.05) ++injected;
        }
        const auto report = validity_report(log);
        CHECK(report.overall.n_total == static_cast<long>(plans.size()));
        CHECK(report.overall.n_total - report.overall.n_valid == injected);

        long category_sum = 0;
        for (const auto c : report.overall.by_validity) category_sum += c;
        CHECK(category_sum == report.overall.n_total);
    }

    SUBCASE("empty log yields an empty table") {
        MeasurementLog log;
        const auto report = validity_report(log);
        CHECK(report.cells.empty());
        CHECK(report.overall.n_total == 0);
    }
}

TEST_CASE("aggregation is invariant under log shuffling") {
    const auto templates = testsupport::mechanic_customer_pair();
    const auto plans = plan_trials(templates, kAllSettings, kAllOrders, 30);
    Backend backend(repeater_backend(0.8), 21);
    MeasurementLog log;
    log.records = execute_plans(plans, backend, templates);

    MeasurementLog shuffled = log;
    CounterRng rng(4, "shuffle");
    for (std::size_t i = shuffled.records.size() - 1; i > 0; --i) {
        const auto j = rng.uniform_below(i + 1);
        std::swap(shuffled.records[i], shuffled.records[j]);
    }

    const auto a = sorted_estimates(log);
    const auto b = sorted_estimates(shuffled);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].template_id == b[i].template_id);
        CHECK(a[i].n_valid == b[i].n_valid);
        CHECK(a[i].n_feminine == b[i].n_feminine);
    }
}

TEST_CASE("metaprompts measure comprehension accuracy") {
    const auto templates = testsupport::mechanic_customer_pair();

    SUBCASE("oracle answers every kind perfectly") {
        BackendConfig cfg;
        cfg.kind = BackendKind::mock_strategy;
        cfg.strategy.kind = StrategyKind::oracle;
        Backend backend(cfg, 3);
        const auto accuracy = run_metaprompts(templates, backend, 10);
        REQUIRE(accuracy.size() == 3);
        for (const auto& [kind, acc] : accuracy) {
            CHECK(acc.n_total == 20); // 2 templates x 10
            CHECK(acc.n_valid == 20);
            CHECK(acc.accuracy() == 1.0);
        }
    }

    SUBCASE("uniform mock sits near chance on part-of-speech") {
        BackendConfig cfg;
        cfg.kind = BackendKind::mock_strategy;
        cfg.strategy.kind = StrategyKind::uniform;
        Backend backend(cfg, 3);
        const auto accuracy = run_metaprompts(templates, backend, 600);
        const auto& pos = accuracy.at(QuestionKind::part_of_speech);
        // 1/7 = 0.1429; 1200 draws give sd ~ 0.0101, allow 4 sigma.
        CHECK(pos.accuracy() > 1.0 / 7 - 0.041);
        CHECK(pos.accuracy() < 1.0 / 7 + 0.041);
        // Anaphora is binary chance.
        const auto& ana = accuracy.at(QuestionKind::anaphora);
        CHECK(ana.accuracy() > 0.5 - 0.06);
        CHECK(ana.accuracy() < 0.5 + 0.06);
    }

    SUBCASE("prime repeater echoes the prime gender on gender tracking") {
        Backend backend(repeater_backend(1.0), 3);
        std::vector<MetapromptTrial> trials;
        const auto accuracy = run_metaprompts(templates, backend, 8, &trials);
        CHECK(accuracy.at(QuestionKind::gender_tracking).accuracy() == 1.0);
        // Both primed settings must have been exercised.
        bool fem = false, masc = false;
        for (const auto& t : trials) {
            if (t.kind != QuestionKind::gender_tracking) continue;
            fem = fem || t.setting == ContextSetting::primed_feminine;
            masc = masc || t.setting == ContextSetting::primed_masculine;
        }
        CHECK(fem);
        CHECK(masc);
    }
}
