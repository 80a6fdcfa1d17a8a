#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace ctxaudit {

// Femininity ratings for role nouns, ingested from an external norms dataset.
// Lookup is case-insensitive on the trimmed, whitespace-collapsed noun, with
// an optional alias map applied first.
class NormsTable {
public:
    static NormsTable load(const std::filesystem::path& norms_path,
                           const std::optional<std::filesystem::path>& alias_path = {});

    void set(std::string_view noun, double rating);
    void add_alias(std::string_view alias, std::string_view canonical);
    void set_provenance(std::string note) { provenance_ = std::move(note); }

    std::optional<double> lookup(std::string_view noun) const;
    std::size_t size() const { return ratings_.size(); }
    const std::string& provenance() const { return provenance_; }
    const std::map<std::string, double>& ratings() const { return ratings_; }

    static std::string normalize(std::string_view noun);

    void save(const std::filesystem::path& path) const;

private:
    std::map<std::string, double> ratings_;  // keyed by normalized noun
    std::map<std::string, std::string> aliases_;
    std::string provenance_;
};

} // namespace ctxaudit
