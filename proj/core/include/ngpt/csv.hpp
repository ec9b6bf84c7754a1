#pragma once

#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace ngpt {

/// Round-trippable decimal text ("%.17g").
std::string format_double(double v);

/// Minimal CSV writer: optional `#` comment lines, one header row, then
/// rows. Appending to an existing non-empty file skips comments and header.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::vector<std::string> header,
            std::vector<std::string> comments = {}, bool append = false);

  void row(const std::vector<std::string>& cells);

 private:
  std::ofstream out_;
  std::size_t columns_;
  std::string path_;
};

}  // namespace ngpt
