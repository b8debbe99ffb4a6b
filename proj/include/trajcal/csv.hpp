#pragma once

#include <charconv>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "trajcal/common.hpp"

namespace trajcal::csv {

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

// One data row with its 1-based source line number.
struct Row {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

// Header-indexed table. Quoting is not supported; none of the formats here
// carry commas inside fields.
class Table {
 public:
  Table() = default;

  static Table parse(std::string_view text, const std::string& source) {
    Table t;
    t.source_ = source;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool have_header = false;
    // Skip a UTF-8 byte-order mark.
    if (text.size() >= 3 && static_cast<unsigned char>(text[0]) == 0xEF &&
        static_cast<unsigned char>(text[1]) == 0xBB && static_cast<unsigned char>(text[2]) == 0xBF) {
      pos = 3;
    }
    while (pos <= text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      std::string_view raw = text.substr(pos, nl - pos);
      pos = nl + 1;
      ++line_no;
      if (trim(raw).empty()) {
        if (nl == text.size()) break;
        continue;
      }
      auto fields = split(raw);
      if (!have_header) {
        for (std::size_t i = 0; i < fields.size(); ++i) t.columns_[fields[i]] = i;
        t.header_ = std::move(fields);
        have_header = true;
      } else {
        if (fields.size() > t.header_.size()) {
          throw ParseError(source, line_no, "expected at most " + std::to_string(t.header_.size()) +
                                                " fields, got " + std::to_string(fields.size()));
        }
        fields.resize(t.header_.size());
        t.rows_.push_back({line_no, std::move(fields)});
      }
      if (nl == text.size()) break;
    }
    if (!have_header) throw ParseError(source, 1, "missing header row");
    return t;
  }

  static Table read(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

  const std::vector<Row>& rows() const { return rows_; }
  const std::vector<std::string>& header() const { return header_; }
  const std::string& source() const { return source_; }

  bool has(const std::string& column) const { return columns_.count(column) != 0; }

  void require(std::initializer_list<const char*> columns) const {
    for (const char* c : columns) {
      if (!has(c)) throw ParseError(source_, 1, std::string("missing column '") + c + "'");
    }
  }

  const std::string& str(const Row& row, const std::string& column) const {
    auto it = columns_.find(column);
    if (it == columns_.end()) throw ParseError(source_, row.line, "missing column '" + column + "'");
    return row.fields[it->second];
  }

  std::optional<std::string> opt(const Row& row, const std::string& column) const {
    auto it = columns_.find(column);
    if (it == columns_.end() || row.fields[it->second].empty()) return std::nullopt;
    return row.fields[it->second];
  }

  double num(const Row& row, const std::string& column) const {
    return to_double(str(row, column), row.line, column);
  }

  long long integer(const Row& row, const std::string& column) const {
    const std::string& s = str(row, column);
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw ParseError(source_, row.line, "column '" + column + "': not an integer: '" + s + "'");
    }
    return v;
  }

  double to_double(const std::string& s, std::size_t line, const std::string& column) const {
    if (s.empty()) throw ParseError(source_, line, "column '" + column + "' is empty");
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) {
      throw ParseError(source_, line, "column '" + column + "': not a number: '" + s + "'");
    }
    return v;
  }

 private:
  std::string source_;
  std::vector<std::string> header_;
  std::unordered_map<std::string, std::size_t> columns_;
  std::vector<Row> rows_;
};

// Accumulates CSV text; callers hand the result to write_file_atomic.
class Writer {
 public:
  explicit Writer(std::initializer_list<std::string> header) : Writer(std::vector<std::string>(header)) {}

  explicit Writer(const std::vector<std::string>& header) { row_strings(header); }

  void row_strings(const std::vector<std::string>& values) {
    bool first = true;
    for (const auto& v : values) emit(v, first);
    out_ << '\n';
  }

  template <typename... Ts>
  void row(const Ts&... values) {
    bool first = true;
    ((emit(values, first)), ...);
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  template <typename T>
  void emit(const T& v, bool& first) {
    if (!first) out_ << ',';
    first = false;
    if constexpr (std::is_floating_point_v<T>) {
      out_ << format_double(static_cast<double>(v));
    } else if constexpr (std::is_convertible_v<const T&, std::string_view>) {
      const std::string_view s = v;
      // No quoting on either side, so a separator inside a field would shift columns.
      if (s.find_first_of(",\n") != std::string_view::npos) {
        throw ValidationError("CSV field contains a separator: '" + std::string(s) + "'");
      }
      out_ << s;
    } else {
      out_ << v;
    }
  }

  std::ostringstream out_;
};

}  // namespace trajcal::csv
