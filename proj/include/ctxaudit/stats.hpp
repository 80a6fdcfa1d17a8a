#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ctxaudit/collector.hpp"
#include "ctxaudit/norms.hpp"
#include "ctxaudit/schema.hpp"

namespace ctxaudit {

// p-hat for one (template, setting, order) cell; order == nullopt marks the
// order-pooled view, whose counts equal the sum over orders.
struct BernoulliEstimate {
    std::string template_id;
    ContextSetting setting = ContextSetting::unprimed;
    std::optional<OptionOrder> order;
    long n_valid = 0;
    long n_feminine = 0;
    double p_hat() const { return n_valid == 0 ? 0.0 : static_cast<double>(n_feminine) / n_valid; }
};

class EstimateTable {
public:
    static EstimateTable from_log(const MeasurementLog& log);
    static EstimateTable from_estimates(std::vector<BernoulliEstimate> estimates);

    const BernoulliEstimate* find(std::string_view template_id, ContextSetting setting,
                                  std::optional<OptionOrder> order) const;
    const std::vector<BernoulliEstimate>& all() const { return estimates_; }
    std::set<std::string> template_ids() const;

private:
    void rebuild_index();
    std::vector<BernoulliEstimate> estimates_;
    std::map<std::string, std::size_t> index_;
};

// One estimate per populated (template, setting, order) cell plus the pooled
// rows; invalid measurements are excluded.
std::vector<BernoulliEstimate> estimate(const MeasurementLog& log);

// Bernoulli KL divergence in bits. With eps > 0, p and q are replaced by
// their add-eps posterior means (n_f + eps) / (n + 2 eps) before evaluation,
// which keeps boundary cells finite. With eps == 0, q in {0,1} and p != q is
// a domain error.
double kl_bernoulli(double p, double q, double eps = 0.0, long n_p = 0, long n_q = 0);

// Templates with at least one valid measurement (pooled orders, or the given
// order) in every one of `settings`.
std::set<std::string> valid_template_set(const EstimateTable& table,
                                         std::span<const ContextSetting> settings,
                                         std::optional<OptionOrder> order = std::nullopt);

// Mean over the valid set of per-template KL(p(setting) || p(baseline)).
double mean_kl(const EstimateTable& table, ContextSetting setting, ContextSetting baseline,
               const std::set<std::string>& valid_set, double eps = 0.0,
               std::optional<OptionOrder> order = std::nullopt);

struct SpearmanResult {
    double rho = 0.0;
    double p_value = 1.0;
    long n = 0;
    bool defined = false; // false when an input vector is constant
    std::optional<double> p_permutation;
};

// Tie-corrected Spearman rank correlation (Pearson on mid-ranks) with the
// t-distribution p-value. The permutation p-value is the arbiter near
// thresholds; call spearman_permutation_pvalue to fill it in.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);
double spearman_permutation_pvalue(std::span<const double> x, std::span<const double> y,
                                   int replicates, std::uint64_t seed);

// Stereotype rating for each template's target noun; nullopt when the noun
// (after normalization and aliasing) is absent from the norms table.
std::map<std::string, std::optional<double>> join_norms(const std::vector<Template>& templates,
                                                        const NormsTable& norms);

// Plug-in mutual information over a contingency table, in bits.
double mi_discrete(std::span<const int> x, std::span<const int> f);

struct MiKnnOptions {
    int k = 3;
    std::uint64_t seed = 0;
    // Tie-breaking noise amplitude as a fraction of max|f|.
    double noise_amplitude_factor = 1e-10;
};

struct MiKnnResult {
    double bits = 0.0;
    bool k_reduced = false; // some class had < k+1 members and used a smaller k
};

// Nearest-neighbor mutual information between a discrete target and a
// continuous feature (the discrete-continuous variant of the Kraskov family):
// for each sample, the distance to its k-th same-class neighbor defines a
// radius; neighbor counts within that radius enter a digamma average.
// Nonnegative by clamping. Singleton classes are ignored.
MiKnnResult mi_knn(std::span<const int> x, std::span<const double> f, const MiKnnOptions& opts = {});

enum class FeatureId { prime_gender, role_type, stereotype, pronoun_case, option_order };
std::string_view to_string(FeatureId f);

struct FeatureMiRow {
    FeatureId feature = FeatureId::prime_gender;
    std::string regime; // "unprimed" | "primed"
    double mi_bits = 0.0;
    double se_bits = 0.0;
    long n_samples = 0;
    std::string estimator; // "discrete" | "knn"
};

struct FeatureMiOptions {
    int k = 3;
    std::uint64_t seed = 0;
    int bootstrap_replicates = 50; // template-level bootstrap for the standard error
    std::vector<ContextSetting> unprimed_regime{ContextSetting::unprimed};
    std::vector<ContextSetting> primed_regime{ContextSetting::primed_feminine,
                                              ContextSetting::primed_masculine};
};

// Per-feature MI between prompt features and the generated pronoun, computed
// over all valid measurements of templates in `valid_set`, separately for the
// unprimed and primed regimes. prime_gender appears only in the primed
// regime; the stereotype feature uses the knn estimator, everything else the
// discrete one. Standard errors come from a seeded bootstrap over templates.
std::vector<FeatureMiRow> feature_mi_table(const MeasurementLog& log,
                                           const std::vector<Template>& templates,
                                           const NormsTable* norms,
                                           const std::set<std::string>& valid_set,
                                           const FeatureMiOptions& opts = {});

} // namespace ctxaudit
