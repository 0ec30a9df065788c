#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace flowmc {

// Flat "key = value" text grouped into [section] blocks. '#' starts a
// comment. Sections may repeat (list semantics); keys within one section
// may not. Every key must be consumed by a get call or check_consumed
// throws, so misspelled keys fail loudly instead of silently using a
// default.
class ConfigFile {
public:
    struct Entry {
        std::string key;
        std::string value;
        int line = 0;
        mutable bool consumed = false;
    };

    class Section {
    public:
        Section(std::string name, int line) : name_(std::move(name)), line_(line) {}

        const std::string& name() const { return name_; }
        int line() const { return line_; }
        bool has(const std::string& key) const;

        std::string get_str(const std::string& key) const;
        std::string get_str(const std::string& key, const std::string& fallback) const;
        double get_num(const std::string& key) const;
        double get_num(const std::string& key, double fallback) const;
        std::int64_t get_int(const std::string& key) const;
        std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
        bool get_bool(const std::string& key) const;
        bool get_bool(const std::string& key, bool fallback) const;

        const std::vector<Entry>& entries() const { return entries_; }
        void add(Entry e);

    private:
        const Entry* find(const std::string& key) const;
        const Entry& require(const std::string& key) const;

        std::string name_;
        int line_;
        std::vector<Entry> entries_;
    };

    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>");

    // The single section with this name, nullptr if absent; throws on
    // duplicates.
    const Section* find(const std::string& name) const;
    // All sections with this name, in file order.
    std::vector<const Section*> find_all(const std::string& name) const;

    // Throws ConfigError listing every key no get call ever touched.
    void check_consumed() const;

    const std::string& origin() const { return origin_; }

private:
    std::string origin_;
    std::vector<Section> sections_;
};

}  // namespace flowmc
