#include "ngpt/csv.hpp"

#include <cstdio>
#include <filesystem>

#include "ngpt/errors.hpp"

namespace ngpt {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, std::vector<std::string> header,
                     std::vector<std::string> comments, bool append)
    : columns_(header.size()), path_(path) {
  std::error_code ec;
  const bool fresh = !append || !std::filesystem::exists(path, ec) ||
                     std::filesystem::file_size(path, ec) == 0;
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw Error("cannot write '" + path + "'");
  if (!fresh) return;
  for (const auto& c : comments) out_ << "# " << c << '\n';
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) {
    throw Error(path_ + ": row has " + std::to_string(cells.size()) + " cells, expected " +
                std::to_string(columns_));
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  out_.flush();
  if (!out_) throw Error("write to '" + path_ + "' failed");
}

}  // namespace ngpt
