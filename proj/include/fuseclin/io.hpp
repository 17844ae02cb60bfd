#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fuseclin::io {

/// Parsed comma-separated file: header row plus data rows (RFC 4180 quoting).
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

/// Parses CSV text. Rows whose field count differs from the header raise DataError
/// naming the 1-based line number.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

/// Quotes a field only when it contains a delimiter, quote or newline.
std::string csv_field(std::string_view s);
std::string csv_line(std::span<const std::string> fields);

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double v);

std::string read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, so readers never observe partial content.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Little-endian IEEE-754 float64 array <-> base64 text.
std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(std::string_view base64);

}  // namespace fuseclin::io
