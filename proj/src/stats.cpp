#include "ctxaudit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/digamma.hpp>

#include "ctxaudit/errors.hpp"
#include "ctxaudit/rng.hpp"

namespace ctxaudit {

namespace {

constexpr double kLog2 = 0.6931471805599453;

std::string cell_key(std::string_view template_id, ContextSetting setting,
                     std::optional<OptionOrder> order) {
    std::string key(template_id);
    key.push_back('\x1f');
    key.append(to_string(setting));
    key.push_back('\x1f');
    key.append(order ? to_string(*order) : "pooled");
    return key;
}

} // namespace

EstimateTable EstimateTable::from_log(const MeasurementLog& log) {
    return from_estimates(estimate(log));
}

EstimateTable EstimateTable::from_estimates(std::vector<BernoulliEstimate> estimates) {
    EstimateTable table;
    table.estimates_ = std::move(estimates);
    table.rebuild_index();
    return table;
}

void EstimateTable::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < estimates_.size(); ++i) {
        const auto& e = estimates_[i];
        index_[cell_key(e.template_id, e.setting, e.order)] = i;
    }
}

const BernoulliEstimate* EstimateTable::find(std::string_view template_id, ContextSetting setting,
                                             std::optional<OptionOrder> order) const {
    const auto it = index_.find(cell_key(template_id, setting, order));
    return it == index_.end() ? nullptr : &estimates_[it->second];
}

std::set<std::string> EstimateTable::template_ids() const {
    std::set<std::string> ids;
    for (const auto& e : estimates_) ids.insert(e.template_id);
    return ids;
}

std::vector<BernoulliEstimate> estimate(const MeasurementLog& log) {
    // (template, setting, order_index) -> counts; order_index 2 = pooled.
    std::map<std::tuple<std::string, ContextSetting, int>, std::pair<long, long>> cells;
    for (const auto& m : log.records) {
        if (m.validity != Validity::valid || !m.gender) continue;
        const long fem = *m.gender == Gender::feminine ? 1 : 0;
        for (const int oi : {m.order == OptionOrder::masc_fem ? 0 : 1, 2}) {
            auto& cell = cells[{m.template_id, m.setting, oi}];
            cell.first += 1;
            cell.second += fem;
        }
    }
    std::vector<BernoulliEstimate> out;
    out.reserve(cells.size());
    for (const auto& [key, counts] : cells) {
        BernoulliEstimate e;
        e.template_id = std::get<0>(key);
        e.setting = std::get<1>(key);
        const int oi = std::get<2>(key);
        if (oi < 2) e.order = oi == 0 ? OptionOrder::masc_fem : OptionOrder::fem_masc;
        e.n_valid = counts.first;
        e.n_feminine = counts.second;
        out.push_back(std::move(e));
    }
    return out;
}

double kl_bernoulli(double p, double q, double eps, long n_p, long n_q) {
    if (p < 0.0 || p > 1.0 || q < 0.0 || q > 1.0)
        throw AnalysisError("kl_bernoulli: probabilities must lie in [0,1]");
    if (eps < 0.0) throw AnalysisError("kl_bernoulli: smoothing eps must be >= 0");
    if (eps > 0.0) {
        if (n_p <= 0 || n_q <= 0)
            throw AnalysisError("kl_bernoulli: smoothing requires positive cell counts");
        p = (p * static_cast<double>(n_p) + eps) / (static_cast<double>(n_p) + 2.0 * eps);
        q = (q * static_cast<double>(n_q) + eps) / (static_cast<double>(n_q) + 2.0 * eps);
    }
    if (p == q) return 0.0;
    if (q <= 0.0 || q >= 1.0)
        throw AnalysisError("kl_bernoulli: unsmoothed divergence is infinite for q = " +
                            std::to_string(q));
    double bits = 0.0;
    if (p > 0.0) bits += p * std::log2(p / q);
    if (p < 1.0) bits += (1.0 - p) * std::log2((1.0 - p) / (1.0 - q));
    return bits;
}

std::set<std::string> valid_template_set(const EstimateTable& table,
                                         std::span<const ContextSetting> settings,
                                         std::optional<OptionOrder> order) {
    std::set<std::string> out;
    for (const auto& id : table.template_ids()) {
        bool ok = true;
        for (const auto setting : settings) {
            const auto* e = table.find(id, setting, order);
            if (e == nullptr || e->n_valid == 0) {
                ok = false;
                break;
            }
        }
        if (ok) out.insert(id);
    }
    return out;
}

double mean_kl(const EstimateTable& table, ContextSetting setting, ContextSetting baseline,
               const std::set<std::string>& valid_set, double eps,
               std::optional<OptionOrder> order) {
    if (valid_set.empty()) throw AnalysisError("mean_kl: empty valid template set");
    double total = 0.0;
    for (const auto& id : valid_set) {
        const auto* pc = table.find(id, setting, order);
        const auto* pb = table.find(id, baseline, order);
        if (pc == nullptr || pb == nullptr)
            throw AnalysisError("mean_kl: template " + id + " is missing a cell for setting " +
                                std::string(to_string(pc == nullptr ? setting : baseline)));
        try {
            total += kl_bernoulli(pc->p_hat(), pb->p_hat(), eps, pc->n_valid, pb->n_valid);
        } catch (const AnalysisError& e) {
            throw AnalysisError("mean_kl: template " + id + ", setting " +
                                std::string(to_string(setting)) + ": " + e.what());
        }
    }
    return total / static_cast<double>(valid_set.size());
}

namespace {

std::vector<double> midranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = mid;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y, bool* defined) {
    const std::size_t n = x.size();
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        *defined = false;
        return std::numeric_limits<double>::quiet_NaN();
    }
    *defined = true;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman_rho(std::span<const double> x, std::span<const double> y, bool* defined) {
    const auto rx = midranks(x);
    const auto ry = midranks(y);
    return pearson(rx, ry, defined);
}

} // namespace

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw AnalysisError("spearman: input lengths differ");
    if (x.size() < 3) throw AnalysisError("spearman: need at least 3 observations");
    SpearmanResult result;
    result.n = static_cast<long>(x.size());
    result.rho = spearman_rho(x, y, &result.defined);
    if (!result.defined) {
        result.p_value = std::numeric_limits<double>::quiet_NaN();
        return result;
    }
    const double n = static_cast<double>(x.size());
    const double r2 = result.rho * result.rho;
    if (r2 >= 1.0) {
        result.p_value = 0.0;
        return result;
    }
    const double t = result.rho * std::sqrt((n - 2.0) / (1.0 - r2));
    const boost::math::students_t dist(n - 2.0);
    result.p_value = 2.0 * boost::math::cdf(dist, -std::abs(t));
    return result;
}

double spearman_permutation_pvalue(std::span<const double> x, std::span<const double> y,
                                   int replicates, std::uint64_t seed) {
    if (replicates < 1) throw AnalysisError("spearman permutation: replicates must be >= 1");
    bool defined = false;
    const double observed = std::abs(spearman_rho(x, y, &defined));
    if (!defined) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> shuffled(y.begin(), y.end());
    CounterRng rng(seed, "spearman-perm");
    long exceed = 0;
    for (int b = 0; b < replicates; ++b) {
        for (std::size_t i = shuffled.size() - 1; i > 0; --i) {
            const std::size_t j = rng.uniform_below(i + 1);
            std::swap(shuffled[i], shuffled[j]);
        }
        bool perm_defined = false;
        const double rho = std::abs(spearman_rho(x, shuffled, &perm_defined));
        if (perm_defined && rho >= observed - 1e-12) ++exceed;
    }
    return static_cast<double>(exceed + 1) / static_cast<double>(replicates + 1);
}

std::map<std::string, std::optional<double>> join_norms(const std::vector<Template>& templates,
                                                        const NormsTable& norms) {
    std::map<std::string, std::optional<double>> out;
    for (const auto& t : templates) out[t.template_id] = norms.lookup(t.target_noun());
    return out;
}

double mi_discrete(std::span<const int> x, std::span<const int> f) {
    if (x.size() != f.size()) throw AnalysisError("mi_discrete: input lengths differ");
    if (x.empty()) throw AnalysisError("mi_discrete: empty input");
    std::map<int, long> nx, nf;
    std::map<std::pair<int, int>, long> nxf;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ++nx[x[i]];
        ++nf[f[i]];
        ++nxf[{x[i], f[i]}];
    }
    const double n = static_cast<double>(x.size());
    double bits = 0.0;
    for (const auto& [key, count] : nxf) {
        const double pxy = static_cast<double>(count) / n;
        const double px = static_cast<double>(nx.at(key.first)) / n;
        const double pf = static_cast<double>(nf.at(key.second)) / n;
        bits += pxy * std::log2(pxy / (px * pf));
    }
    return std::max(0.0, bits);
}

MiKnnResult mi_knn(std::span<const int> x, std::span<const double> f, const MiKnnOptions& opts) {
    if (x.size() != f.size()) throw AnalysisError("mi_knn: input lengths differ");
    if (opts.k < 1) throw AnalysisError("mi_knn: k must be >= 1");
    if (x.size() < static_cast<std::size_t>(opts.k) + 1)
        throw AnalysisError("mi_knn: need at least k+1 samples");

    MiKnnResult result;
    const std::size_t n_in = x.size();

    // Seeded symmetric tie-breaking noise scaled to the feature magnitude.
    double max_abs = 0.0;
    for (const double v : f) max_abs = std::max(max_abs, std::abs(v));
    const double amplitude =
        opts.noise_amplitude_factor * (max_abs > 0.0 ? max_abs : 1.0);
    CounterRng noise(opts.seed, "mi-tie-noise");
    std::vector<double> fv(n_in);
    for (std::size_t i = 0; i < n_in; ++i) fv[i] = f[i] + amplitude * noise.gauss();

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n_in; ++i) by_class[x[i]].push_back(i);

    // Points whose class is a singleton cannot contribute.
    std::vector<bool> usable(n_in, true);
    std::size_t n = n_in;
    for (const auto& [cls, members] : by_class) {
        if (members.size() < 2) {
            for (const auto i : members) usable[i] = false;
            n -= members.size();
        }
    }
    if (n < static_cast<std::size_t>(opts.k) + 1)
        throw AnalysisError("mi_knn: too few samples in non-singleton classes");

    // Globally sorted usable values for radius counting.
    std::vector<double> sorted;
    sorted.reserve(n);
    for (std::size_t i = 0; i < n_in; ++i)
        if (usable[i]) sorted.push_back(fv[i]);
    std::sort(sorted.begin(), sorted.end());

    double sum_digamma_k = 0.0;
    double sum_digamma_nx = 0.0;
    double sum_digamma_m = 0.0;

    for (const auto& [cls, members] : by_class) {
        if (members.size() < 2) continue;
        std::vector<double> cv;
        cv.reserve(members.size());
        for (const auto i : members) cv.push_back(fv[i]);
        std::sort(cv.begin(), cv.end());
        const std::size_t cn = cv.size();
        const int k_here = std::min<std::size_t>(static_cast<std::size_t>(opts.k), cn - 1);
        if (k_here < opts.k) result.k_reduced = true;

        for (std::size_t pos = 0; pos < cn; ++pos) {
            // k-th nearest same-class distance via two-pointer merge around pos.
            std::size_t lo = pos, hi = pos;
            double kth = 0.0;
            for (int step = 0; step < k_here; ++step) {
                const double dl = lo > 0 ? cv[pos] - cv[lo - 1]
                                         : std::numeric_limits<double>::infinity();
                const double dr = hi + 1 < cn ? cv[hi + 1] - cv[pos]
                                              : std::numeric_limits<double>::infinity();
                if (dl <= dr) {
                    --lo;
                    kth = dl;
                } else {
                    ++hi;
                    kth = dr;
                }
            }
            // Shrink the radius one ulp so exactly-at-distance points drop
            // out, then count all usable points within it (the point itself
            // included). Candidates come from an interval padded by one ulp
            // at the feature scale; the decision uses the same |a - b|
            // arithmetic as the k-th distance above, so the one-ulp exclusion
            // is not lost to endpoint rounding.
            const double radius = std::nextafter(kth, 0.0);
            const double lo_edge =
                std::nextafter(cv[pos] - kth, -std::numeric_limits<double>::infinity());
            const double hi_edge =
                std::nextafter(cv[pos] + kth, std::numeric_limits<double>::infinity());
            const auto lower = std::lower_bound(sorted.begin(), sorted.end(), lo_edge);
            const auto upper = std::upper_bound(sorted.begin(), sorted.end(), hi_edge);
            long m = 0;
            for (auto it = lower; it != upper; ++it)
                if (std::abs(*it - cv[pos]) <= radius) ++m;
            sum_digamma_k += boost::math::digamma(static_cast<double>(k_here));
            sum_digamma_nx += boost::math::digamma(static_cast<double>(cn));
            sum_digamma_m += boost::math::digamma(std::max(1.0, static_cast<double>(m)));
        }
    }

    const double nd = static_cast<double>(n);
    const double nats = boost::math::digamma(nd) + sum_digamma_k / nd - sum_digamma_nx / nd -
                        sum_digamma_m / nd;
    result.bits = std::max(0.0, nats / kLog2);
    return result;
}

std::string_view to_string(FeatureId f) {
    switch (f) {
        case FeatureId::prime_gender: return "prime_gender";
        case FeatureId::role_type: return "role_type";
        case FeatureId::stereotype: return "stereotype";
        case FeatureId::pronoun_case: return "pronoun_case";
        case FeatureId::option_order: return "option_order";
    }
    return "prime_gender";
}

namespace {

struct FeatureSample {
    int response = 0; // 1 feminine, 0 masculine
    int prime = 0;
    int role = 0;
    int pcase = 0;
    int order = 0;
    double stereotype = 0.0;
    bool has_stereotype = false;
};

struct RegimeData {
    // Samples bucketed per template for the template-level bootstrap.
    std::vector<std::string> template_ids;
    std::vector<std::vector<FeatureSample>> buckets;
    long n_samples = 0;
};

RegimeData collect_regime(const MeasurementLog& log, const std::vector<Template>& templates,
                          const NormsTable* norms, const std::set<std::string>& valid_set,
                          std::span<const ContextSetting> regime) {
    std::map<std::string, const Template*> tindex;
    for (const auto& t : templates) tindex[t.template_id] = &t;
    std::map<std::string, std::optional<double>> ratings;
    for (const auto& t : templates)
        ratings[t.template_id] = norms != nullptr ? norms->lookup(t.target_noun()) : std::nullopt;

    std::map<std::string, std::vector<FeatureSample>> buckets;
    for (const auto& m : log.records) {
        if (m.validity != Validity::valid || !m.gender) continue;
        if (!valid_set.contains(m.template_id)) continue;
        if (std::find(regime.begin(), regime.end(), m.setting) == regime.end()) continue;
        const auto ti = tindex.find(m.template_id);
        if (ti == tindex.end()) continue;
        FeatureSample s;
        s.response = *m.gender == Gender::feminine ? 1 : 0;
        const auto prime = prime_gender_of(m.setting);
        s.prime = prime && *prime == Gender::feminine ? 1 : 0;
        s.role = ti->second->target_role_kind == RoleKind::occupation ? 1 : 0;
        s.pcase = static_cast<int>(ti->second->pronoun_case);
        s.order = m.order == OptionOrder::fem_masc ? 1 : 0;
        const auto& rating = ratings.at(m.template_id);
        s.has_stereotype = rating.has_value();
        s.stereotype = rating.value_or(0.0);
        buckets[m.template_id].push_back(s);
    }

    RegimeData data;
    for (auto& [tid, samples] : buckets) {
        data.n_samples += static_cast<long>(samples.size());
        data.template_ids.push_back(tid);
        data.buckets.push_back(std::move(samples));
    }
    return data;
}

double feature_mi_on(const std::vector<const std::vector<FeatureSample>*>& buckets,
                     FeatureId feature, const FeatureMiOptions& opts, std::uint64_t knn_salt) {
    std::vector<int> x;
    std::vector<int> fd;
    std::vector<double> fc;
    for (const auto* bucket : buckets) {
        for (const auto& s : *bucket) {
            if (feature == FeatureId::stereotype) {
                if (!s.has_stereotype) continue;
                x.push_back(s.response);
                fc.push_back(s.stereotype);
                continue;
            }
            x.push_back(s.response);
            switch (feature) {
                case FeatureId::prime_gender: fd.push_back(s.prime); break;
                case FeatureId::role_type: fd.push_back(s.role); break;
                case FeatureId::pronoun_case: fd.push_back(s.pcase); break;
                case FeatureId::option_order: fd.push_back(s.order); break;
                case FeatureId::stereotype: break;
            }
        }
    }
    if (x.size() < 8) return 0.0;
    if (feature == FeatureId::stereotype) {
        MiKnnOptions knn;
        knn.k = opts.k;
        knn.seed = mix64(opts.seed ^ knn_salt);
        try {
            return mi_knn(x, fc, knn).bits;
        } catch (const AnalysisError&) {
            return 0.0; // degenerate resample (e.g. one class); contributes zero
        }
    }
    return mi_discrete(x, fd);
}

} // namespace

std::vector<FeatureMiRow> feature_mi_table(const MeasurementLog& log,
                                           const std::vector<Template>& templates,
                                           const NormsTable* norms,
                                           const std::set<std::string>& valid_set,
                                           const FeatureMiOptions& opts) {
    std::vector<FeatureMiRow> rows;
    const struct {
        std::string name;
        std::span<const ContextSetting> settings;
    } regimes[] = {
        {"unprimed", std::span<const ContextSetting>(opts.unprimed_regime)},
        {"primed", std::span<const ContextSetting>(opts.primed_regime)},
    };

    for (const auto& regime : regimes) {
        const RegimeData data = collect_regime(log, templates, norms, valid_set, regime.settings);
        std::vector<const std::vector<FeatureSample>*> full;
        full.reserve(data.buckets.size());
        for (const auto& b : data.buckets) full.push_back(&b);

        std::vector<FeatureId> features{FeatureId::role_type, FeatureId::stereotype,
                                        FeatureId::pronoun_case, FeatureId::option_order};
        if (regime.name == "primed") features.insert(features.begin(), FeatureId::prime_gender);

        for (const FeatureId feature : features) {
            FeatureMiRow row;
            row.feature = feature;
            row.regime = regime.name;
            row.estimator = feature == FeatureId::stereotype ? "knn" : "discrete";
            row.n_samples = data.n_samples;
            if (!data.buckets.empty()) {
                row.mi_bits = feature_mi_on(full, feature, opts, fnv1a64(regime.name));

                if (opts.bootstrap_replicates > 1 && data.buckets.size() > 1) {
                    const std::size_t nt = data.buckets.size();
                    double sum = 0.0, sumsq = 0.0;
                    for (int b = 0; b < opts.bootstrap_replicates; ++b) {
                        CounterRng rng(opts.seed, "mi-bootstrap",
                                       fnv1a64(regime.name) ^
                                           (static_cast<std::uint64_t>(b) * 0x9e3779b9ULL));
                        std::vector<const std::vector<FeatureSample>*> resampled(nt);
                        for (std::size_t i = 0; i < nt; ++i)
                            resampled[i] = &data.buckets[rng.uniform_below(nt)];
                        const double mi =
                            feature_mi_on(resampled, feature, opts,
                                          fnv1a64(regime.name) ^ static_cast<std::uint64_t>(b));
                        sum += mi;
                        sumsq += mi * mi;
                    }
                    const double nb = static_cast<double>(opts.bootstrap_replicates);
                    const double var = std::max(0.0, sumsq / nb - (sum / nb) * (sum / nb));
                    row.se_bits = std::sqrt(var);
                }
            }
            rows.push_back(row);
        }
    }
    return rows;
}

} // namespace ctxaudit
