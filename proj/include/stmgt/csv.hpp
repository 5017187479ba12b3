#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace stmgt::csv {

/// Parsed comma-separated file. Fields are trimmed; quoting is not
/// supported (none of the tool's formats need it).
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  /// Index of a header column, or IngestionError naming the file.
  std::size_t column(std::string_view name) const;
  std::string source;
};

Table read(const std::string& path);
Table parse(std::string_view text, std::string source = "<memory>");

/// Parses a finite double; IngestionError mentions source and line.
double to_double(const std::string& field, const Table& table, std::size_t row);

/// 17 significant digits (`%.17g`), which round-trips every double.
std::string format_double(double value);

void write_text(const std::string& path, const std::string& text);

}  // namespace stmgt::csv
