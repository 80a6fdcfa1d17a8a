#include <doctest.h>

#include <sstream>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/schema.hpp"
#include "support.hpp"

using namespace ctxaudit;

TEST_CASE("pronoun lexicon covers the standard paradigm") {
    const auto& lex = PronounLexicon::standard_english();
    CHECK(lex.form(Gender::feminine, PronounCase::nominative) == "she");
    CHECK(lex.form(Gender::masculine, PronounCase::nominative) == "he");
    CHECK(lex.form(Gender::feminine, PronounCase::accusative) == "her");
    CHECK(lex.form(Gender::masculine, PronounCase::accusative) == "him");
    CHECK(lex.form(Gender::feminine, PronounCase::possessive_dependent) == "her");
    CHECK(lex.form(Gender::masculine, PronounCase::possessive_dependent) == "his");
    CHECK(lex.form(Gender::feminine, PronounCase::possessive_independent) == "hers");
    CHECK(lex.form(Gender::masculine, PronounCase::possessive_independent) == "his");

    CHECK(lex.gender_of("she") == Gender::feminine);
    CHECK(lex.gender_of("hers") == Gender::feminine);
    CHECK(lex.gender_of("him") == Gender::masculine);
    CHECK(!lex.gender_of("they").has_value());
}

TEST_CASE("count_token matches whole tokens only") {
    CHECK(count_token("one BLANK here", "BLANK") == 1);
    CHECK(count_token("BLANK and BLANK", "BLANK") == 2);
    CHECK(count_token("a BLANKET is not a slot", "BLANK") == 0);
    CHECK(count_token("BLANK.", "BLANK") == 1);
    CHECK(count_token("", "BLANK") == 0);
}

TEST_CASE("expand renders each context setting") {
    const auto pair = testsupport::mechanic_customer_pair();
    const Template& occ = pair[0];

    SUBCASE("unprimed is the body verbatim") { CHECK(expand(occ, ContextSetting::unprimed) == occ.body); }

    SUBCASE("feminine prime uses the partner's own case") {
        CHECK(expand(occ, ContextSetting::primed_feminine) ==
              "The mechanic called to inform the customer that her car would be ready in the "
              "morning. The mechanic called to inform the customer that BLANK had completed the "
              "repair.");
    }

    SUBCASE("masculine prime differs only in the prime pronoun") {
        CHECK(expand(occ, ContextSetting::primed_masculine) ==
              "The mechanic called to inform the customer that his car would be ready in the "
              "morning. The mechanic called to inform the customer that BLANK had completed the "
              "repair.");
    }

    SUBCASE("null settings prepend the fixed sentences") {
        CHECK(expand(occ, ContextSetting::null_1) == "The sky is blue. " + occ.body);
        CHECK(expand(occ, ContextSetting::null_2) == "North is south. " + occ.body);
    }

    SUBCASE("every expansion keeps exactly one BLANK") {
        for (const auto& t : pair)
            for (const auto setting : kAllSettings)
                CHECK(count_token(expand(t, setting), "BLANK") == 1);
    }

    SUBCASE("the two primed expansions differ only in the prime pronoun") {
        for (const auto& t : pair) {
            const auto fem = expand(t, ContextSetting::primed_feminine);
            const auto masc = expand(t, ContextSetting::primed_masculine);
            const auto& lex = PronounLexicon::standard_english();
            const auto& fem_form = lex.form(Gender::feminine, t.prime_case());
            const auto& masc_form = lex.form(Gender::masculine, t.prime_case());
            std::string swapped = fem;
            const auto pos = t.partner_body.find("PRONOUN");
            swapped.replace(pos, fem_form.size(), masc_form);
            CHECK(swapped == masc);
        }
    }

    SUBCASE("missing PRONOUN slot fails for primed settings") {
        Template broken = occ;
        broken.partner_body = "No slot in this sentence.";
        CHECK_THROWS_AS(expand(broken, ContextSetting::primed_feminine), SchemaError);
        CHECK_NOTHROW(expand(broken, ContextSetting::unprimed));
    }
}

TEST_CASE("pronoun_options order and reversal") {
    CHECK(pronoun_options(PronounCase::nominative, OptionOrder::fem_masc) ==
          std::pair<std::string, std::string>{"she", "he"});
    CHECK(pronoun_options(PronounCase::nominative, OptionOrder::masc_fem) ==
          std::pair<std::string, std::string>{"he", "she"});
    CHECK(pronoun_options(PronounCase::possessive_independent, OptionOrder::masc_fem) ==
          std::pair<std::string, std::string>{"his", "hers"});

    for (const auto c : kAllCases) {
        const auto mf = pronoun_options(c, OptionOrder::masc_fem);
        const auto fm = pronoun_options(c, OptionOrder::fem_masc);
        CHECK(mf.first == fm.second);
        CHECK(mf.second == fm.first);
    }
}

TEST_CASE("schema parsing accepts a valid file and reports structured violations") {
    const auto pair = testsupport::mechanic_customer_pair();

    SUBCASE("valid two-row file round-trips") {
        std::istringstream in(testsupport::schema_tsv_header() + testsupport::schema_row(pair[0]) +
                              testsupport::schema_row(pair[1]));
        std::vector<SchemaViolation> violations;
        const auto templates = parse_schema(in, violations);
        CHECK(violations.empty());
        REQUIRE(templates.size() == 2);
        CHECK(templates[0].template_id == "mc_occ");
        CHECK(templates[1].target_role_kind == RoleKind::participant);
    }

    SUBCASE("empty file is an empty list") {
        std::istringstream in("");
        std::vector<SchemaViolation> violations;
        const auto templates = parse_schema(in, violations);
        CHECK(templates.empty());
        CHECK(violations.empty());
    }

    SUBCASE("double BLANK is a structural violation naming the row") {
        Template bad = pair[0];
        bad.body = "BLANK saw BLANK here.";
        std::istringstream in(testsupport::schema_tsv_header() + testsupport::schema_row(bad));
        std::vector<SchemaViolation> violations;
        parse_schema(in, violations);
        REQUIRE(violations.size() >= 1);
        CHECK(violations[0].row == 1);
        CHECK(violations[0].rule == "body_blank");
    }

    SUBCASE("bad enum value is reported") {
        std::string row = testsupport::schema_row(pair[0]);
        const auto pos = row.find("occupation");
        row.replace(pos, 10, "supervisor");
        std::istringstream in(testsupport::schema_tsv_header() + row);
        std::vector<SchemaViolation> violations;
        parse_schema(in, violations);
        REQUIRE(!violations.empty());
        CHECK(violations[0].rule == "target_role_kind");
    }
}

TEST_CASE("load_schema enforces pairing and backfills partner cases") {
    const auto dir = testsupport::scratch_dir("schema");
    const auto pair = testsupport::mechanic_customer_pair();

    SUBCASE("valid file loads with partner case taken from the pair member") {
        const auto path = dir / "ok.tsv";
        save_schema(path, {pair[0], pair[1]});
        const auto templates = load_schema(path);
        REQUIRE(templates.size() == 2);
        // mc_occ's partner sentence is mc_par's sentence, whose case is
        // possessive_dependent.
        CHECK(templates[0].prime_case() == PronounCase::possessive_dependent);
        CHECK(templates[1].prime_case() == PronounCase::nominative);
    }

    SUBCASE("orphan pair id fails, naming the orphan") {
        const auto path = dir / "orphan.tsv";
        save_schema(path, {pair[0]});
        CHECK_THROWS_WITH_AS(load_schema(path), doctest::Contains("pair_id mc"), SchemaError);
    }

    SUBCASE("same-role pair fails") {
        Template dup = pair[1];
        dup.target_role_kind = RoleKind::occupation;
        const auto path = dir / "samerole.tsv";
        save_schema(path, {pair[0], dup});
        CHECK_THROWS_AS(load_schema(path), SchemaError);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("pair_index groups and orders pairs") {
    auto templates = testsupport::mechanic_customer_pair();
    // participant first in the input; pair_index must put occupation first.
    std::swap(templates[0], templates[1]);
    const auto pairs = pair_index(templates);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].pair_id == "mc");
    CHECK(pairs[0].occupation_target.template_id == "mc_occ");
    CHECK(pairs[0].participant_target.template_id == "mc_par");

    templates.pop_back();
    CHECK_THROWS_AS(pair_index(templates), SchemaError);
}

TEST_CASE("synthetic-scale schema: 360 templates form 180 pairs") {
    // Mirrors the upstream dataset's cardinality contract end to end through
    // file I/O.
    std::vector<Template> templates;
    const auto base = testsupport::mechanic_customer_pair();
    for (int i = 0; i < 180; ++i) {
        auto occ = base[0];
        auto par = base[1];
        occ.pair_id = par.pair_id = "p" + std::to_string(i);
        occ.template_id = occ.pair_id + "_occ";
        par.template_id = par.pair_id + "_par";
        templates.push_back(occ);
        templates.push_back(par);
    }
    const auto dir = testsupport::scratch_dir("schema360");
    const auto path = dir / "big.tsv";
    save_schema(path, templates);
    const auto loaded = load_schema(path);
    CHECK(loaded.size() == 360);
    CHECK(pair_index(loaded).size() == 180);
    std::filesystem::remove_all(dir);
}
