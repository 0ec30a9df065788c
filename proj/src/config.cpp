#include "flowmc/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "flowmc/common.hpp"

namespace flowmc {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace

bool ConfigFile::Section::has(const std::string& key) const { return find(key) != nullptr; }

const ConfigFile::Entry* ConfigFile::Section::find(const std::string& key) const {
    for (const Entry& e : entries_) {
        if (e.key == key) {
            e.consumed = true;
            return &e;
        }
    }
    return nullptr;
}

const ConfigFile::Entry& ConfigFile::Section::require(const std::string& key) const {
    const Entry* e = find(key);
    if (!e)
        throw ConfigError(strfmt("missing key '%s' in [%s]", key.c_str(), name_.c_str()));
    return *e;
}

std::string ConfigFile::Section::get_str(const std::string& key) const {
    return require(key).value;
}

std::string ConfigFile::Section::get_str(const std::string& key,
                                         const std::string& fallback) const {
    const Entry* e = find(key);
    return e ? e->value : fallback;
}

double ConfigFile::Section::get_num(const std::string& key) const {
    const Entry& e = require(key);
    char* end = nullptr;
    const double v = std::strtod(e.value.c_str(), &end);
    if (end == e.value.c_str() || *end != '\0')
        throw ConfigError(strfmt("key '%s' in [%s] (line %d): '%s' is not a number", key.c_str(),
                                 name_.c_str(), e.line, e.value.c_str()));
    return v;
}

double ConfigFile::Section::get_num(const std::string& key, double fallback) const {
    return has(key) ? get_num(key) : fallback;
}

std::int64_t ConfigFile::Section::get_int(const std::string& key) const {
    const Entry& e = require(key);
    char* end = nullptr;
    const long long v = std::strtoll(e.value.c_str(), &end, 10);
    if (end == e.value.c_str() || *end != '\0')
        throw ConfigError(strfmt("key '%s' in [%s] (line %d): '%s' is not an integer", key.c_str(),
                                 name_.c_str(), e.line, e.value.c_str()));
    return v;
}

std::int64_t ConfigFile::Section::get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}

bool ConfigFile::Section::get_bool(const std::string& key) const {
    const Entry& e = require(key);
    std::string v = e.value;
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError(strfmt("key '%s' in [%s] (line %d): '%s' is not a boolean", key.c_str(),
                             name_.c_str(), e.line, e.value.c_str()));
}

bool ConfigFile::Section::get_bool(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
}

void ConfigFile::Section::add(Entry e) {
    for (const Entry& prev : entries_) {
        if (prev.key == e.key)
            throw ConfigError(strfmt("duplicate key '%s' in [%s] (lines %d and %d)", e.key.c_str(),
                                     name_.c_str(), prev.line, e.line));
    }
    entries_.push_back(std::move(e));
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(strfmt("cannot open config '%s'", path.c_str()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
    ConfigFile cfg;
    cfg.origin_ = origin;
    cfg.sections_.emplace_back("", 0);  // keys before the first header

    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string line = trim(raw);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(strfmt("%s:%d: unterminated section header", origin.c_str(),
                                         lineno));
            const std::string name = trim(line.substr(1, line.size() - 2));
            if (name.empty())
                throw ConfigError(strfmt("%s:%d: empty section name", origin.c_str(), lineno));
            cfg.sections_.emplace_back(name, lineno);
            continue;
        }

        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(strfmt("%s:%d: expected 'key = value', got '%s'", origin.c_str(),
                                     lineno, line.c_str()));
        Entry e;
        e.key = trim(line.substr(0, eq));
        e.value = trim(line.substr(eq + 1));
        e.line = lineno;
        if (e.key.empty())
            throw ConfigError(strfmt("%s:%d: empty key", origin.c_str(), lineno));
        cfg.sections_.back().add(std::move(e));
    }
    return cfg;
}

const ConfigFile::Section* ConfigFile::find(const std::string& name) const {
    const Section* hit = nullptr;
    for (const Section& s : sections_) {
        if (s.name() != name) continue;
        if (hit)
            throw ConfigError(strfmt("%s: section [%s] appears more than once (lines %d and %d)",
                                     origin_.c_str(), name.c_str(), hit->line(), s.line()));
        hit = &s;
    }
    return hit;
}

std::vector<const ConfigFile::Section*> ConfigFile::find_all(const std::string& name) const {
    std::vector<const Section*> out;
    for (const Section& s : sections_) {
        if (s.name() == name) out.push_back(&s);
    }
    return out;
}

void ConfigFile::check_consumed() const {
    std::string complaints;
    for (const Section& s : sections_) {
        for (const Entry& e : s.entries()) {
            if (e.consumed) continue;
            if (!complaints.empty()) complaints += "; ";
            complaints += strfmt("unknown key '%s' in [%s] (line %d)", e.key.c_str(),
                                 s.name().c_str(), e.line);
        }
    }
    if (!complaints.empty())
        throw ConfigError(strfmt("%s: %s", origin_.c_str(), complaints.c_str()));
}

}  // namespace flowmc
