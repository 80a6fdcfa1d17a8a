#include "ctxaudit/norms.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "ctxaudit/errors.hpp"

namespace ctxaudit {

std::string NormsTable::normalize(std::string_view noun) {
    std::string out;
    out.reserve(noun.size());
    bool pending_space = false;
    for (char c : noun) {
        if (std::isspace(static_cast<unsigned char>(c)) != 0) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

void NormsTable::set(std::string_view noun, double rating) {
    if (rating < 0.0 || rating > 1.0)
        throw ConfigError("femininity rating out of [0,1] for noun '" + std::string(noun) +
                          "': " + std::to_string(rating));
    ratings_[normalize(noun)] = rating;
}

void NormsTable::add_alias(std::string_view alias, std::string_view canonical) {
    aliases_[normalize(alias)] = normalize(canonical);
}

std::optional<double> NormsTable::lookup(std::string_view noun) const {
    std::string key = normalize(noun);
    if (auto a = aliases_.find(key); a != aliases_.end()) key = a->second;
    if (auto it = ratings_.find(key); it != ratings_.end()) return it->second;
    return std::nullopt;
}

namespace {

std::pair<std::string, std::string> split_first_tab(const std::string& line) {
    const std::size_t pos = line.find('\t');
    if (pos == std::string::npos) return {line, ""};
    return {line.substr(0, pos), line.substr(pos + 1)};
}

} // namespace

NormsTable NormsTable::load(const std::filesystem::path& norms_path,
                            const std::optional<std::filesystem::path>& alias_path) {
    NormsTable table;
    std::ifstream in(norms_path);
    if (!in) throw ConfigError("cannot open norms file: " + norms_path.string());
    std::string line;
    std::size_t row = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto [noun, rating_text] = split_first_tab(line);
        if (!saw_header) {
            saw_header = true;
            if (noun == "role_noun") continue; // header row optional
        }
        ++row;
        try {
            const double rating = std::stod(rating_text);
            table.set(noun, rating);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("norms file " + norms_path.string() + " row " + std::to_string(row) +
                              ": cannot parse rating '" + rating_text + "'");
        }
    }
    table.set_provenance(norms_path.string());
    if (alias_path && !alias_path->empty()) {
        std::ifstream ain(*alias_path);
        if (!ain) throw ConfigError("cannot open alias file: " + alias_path->string());
        bool alias_header = false;
        while (std::getline(ain, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            auto [alias, canonical] = split_first_tab(line);
            if (!alias_header) {
                alias_header = true;
                if (alias == "alias") continue;
            }
            if (canonical.empty())
                throw ConfigError("alias file " + alias_path->string() +
                                  ": missing canonical form for alias '" + alias + "'");
            table.add_alias(alias, canonical);
        }
    }
    return table;
}

void NormsTable::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write norms file: " + path.string());
    out << "role_noun\tfemininity_rating\n";
    std::ostringstream num;
    for (const auto& [noun, rating] : ratings_) {
        num.str("");
        num.precision(10);
        num << rating;
        out << noun << '\t' << num.str() << '\n';
    }
}

} // namespace ctxaudit
