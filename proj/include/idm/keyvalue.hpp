#pragma once

#include <map>
#include <string>
#include <vector>

namespace idm {

// Flat "key = value" text: one pair per line, '#' starts a comment, blank lines ignored.
// Throws ConfigError on malformed lines or duplicate keys.
std::map<std::string, std::string> parse_key_values(const std::string& text);
// Canonical form: keys sorted, "key = value" per line.
std::string format_key_values(const std::map<std::string, std::string>& values);

// Strips spaces, tabs and carriage returns from both ends.
std::string trim(const std::string& s);

long parse_int(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
std::vector<long> parse_int_list(const std::string& key, const std::string& value);
// Shortest text that round-trips to the same double.
std::string format_double(double value);
std::string format_int_list(const std::vector<long>& values);

}  // namespace idm
